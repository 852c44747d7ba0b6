"""Entropy-based feature smoothing between the camera and LiDAR streams.

Both streams are turned into per-Gaussian distributions over channels, the
cross-entropy is measured in both directions, and each stream receives a
residual shift ``eps * W`` where ``W`` is the exponentially decayed entropy,
normalised over the two directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softmax, softmax_backward


@dataclass
class SmoothingConfig:
    tau: float = 1.0
    xi: float = 1e-6
    p_select: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not 0.0 <= self.p_select <= 1.0:
            raise ValueError("p_select must lie in [0, 1]")


def to_distribution(F, tau):
    return softmax(F, axis=-1, temperature=tau)


def cross_entropy_map(P, Q, xi):
    """``-sum_c P_c log(Q_c + xi)`` per row, with ``0 log 0`` taken as 0."""
    with np.errstate(divide="ignore"):
        logs = np.log(Q + xi)
    return -np.sum(P * np.where(P > 0, logs, 0.0), axis=-1)


def modulation_weights(h_cl, h_lc, xi):
    """Exponential-decay weights normalised by ``exp(-H_CL) + exp(-H_LC) + xi``."""
    e_c = np.exp(-np.asarray(h_cl, dtype=float))
    e_l = np.exp(-np.asarray(h_lc, dtype=float))
    omega = e_c + e_l + xi
    return e_c / omega, e_l / omega


def smooth(F_C, F_L, eps, cfg: SmoothingConfig, selected: bool = True):
    """One smoothing layer.  Returns ``(F_C', F_L', cache)``.

    ``selected=False`` makes the layer the identity (stochastic skip).
    """
    if F_C.shape != F_L.shape:
        raise ValueError("camera and LiDAR features must share a shape")
    if not selected:
        return F_C, F_L, None
    tau, xi = cfg.tau, cfg.xi
    P_C = to_distribution(F_C, tau)
    P_L = to_distribution(F_L, tau)
    h_cl = cross_entropy_map(P_C, P_L, xi)
    h_lc = cross_entropy_map(P_L, P_C, xi)
    e_c = np.exp(-h_cl)
    e_l = np.exp(-h_lc)
    omega = e_c + e_l + xi
    W_C = e_c / omega
    W_L = e_l / omega
    out_C = F_C + eps * W_C[:, None]
    out_L = F_L + eps * W_L[:, None]
    cache = dict(F_C=F_C, F_L=F_L, P_C=P_C, P_L=P_L, e_c=e_c, e_l=e_l, omega=omega,
                 W_C=W_C, W_L=W_L, eps=eps, tau=tau, xi=xi)
    return out_C, out_L, cache


def smooth_backward(d_C, d_L, cache):
    """Returns ``(dF_C, dF_L, d_eps, d_tau)``."""
    if cache is None:
        return d_C, d_L, 0.0, 0.0
    eps, xi, tau = cache["eps"], cache["xi"], cache["tau"]
    P_C, P_L = cache["P_C"], cache["P_L"]
    e_c, e_l, omega = cache["e_c"], cache["e_l"], cache["omega"]
    gW_C = d_C.sum(axis=-1)
    gW_L = d_L.sum(axis=-1)
    d_eps = float(np.sum(gW_C * cache["W_C"]) + np.sum(gW_L * cache["W_L"]))
    gW_C = gW_C * eps
    gW_L = gW_L * eps
    # W_C = e_c / omega, W_L = e_l / omega, omega = e_c + e_l + xi
    g_omega = -(gW_C * e_c + gW_L * e_l) / omega**2
    g_ec = gW_C / omega + g_omega
    g_el = gW_L / omega + g_omega
    g_hcl = -e_c * g_ec
    g_hlc = -e_l * g_el
    # H_CL = -sum P_C log(P_L + xi); H_LC = -sum P_L log(P_C + xi)
    logL = np.log(P_L + xi)
    logC = np.log(P_C + xi)
    gP_C = -g_hcl[:, None] * logL - g_hlc[:, None] * P_L / (P_C + xi)
    gP_L = -g_hcl[:, None] * P_C / (P_L + xi) - g_hlc[:, None] * logC
    dF_C, dtau_c = softmax_backward(gP_C, P_C, axis=-1, temperature=tau, x=cache["F_C"])
    dF_L, dtau_l = softmax_backward(gP_L, P_L, axis=-1, temperature=tau, x=cache["F_L"])
    return d_C + dF_C, d_L + dF_L, d_eps, dtau_c + dtau_l


def draw_selection(rng, num_layers: int, cfg: SmoothingConfig, train: bool):
    """Which smoothing layers run this step: all in eval, Bernoulli(p) in train."""
    if not train or rng is None:
        return np.ones(num_layers, dtype=bool)
    return rng.random(num_layers) < cfg.p_select
