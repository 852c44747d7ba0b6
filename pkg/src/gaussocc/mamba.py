"""Gauss-Mamba refinement head.

The Gaussians are put in Morton order of their (quantised) means, run
through a few selective state-space blocks as a 1-D sequence, restored to
their original order, and a linear head predicts parameter updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .numerics import layer_norm, layer_norm_backward, sigmoid, silu, silu_grad, softplus
from .scene import GaussianSet

PARAM_SLICES = (("means", 3), ("log_scales", 3), ("quats", 4), ("opacity_logits", 1))


@dataclass
class HeadConfig:
    blocks: int = 2
    state_dim: int = 16
    bits: int = 6
    bands: int = 4
    use_scan: bool = True

    def __post_init__(self):
        if self.blocks < 0 or self.state_dim < 1:
            raise ValueError("need blocks >= 0 and state_dim >= 1")
        if not 1 <= self.bits <= 21:
            raise ValueError("curve bits must lie in [1, 21]")
        if self.bands < 0:
            raise ValueError("bands must be non-negative")


# --------------------------------------------------------------------------
# positional encoding
# --------------------------------------------------------------------------

def normalize_coords(means, lower, upper):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return 2.0 * (np.asarray(means) - lower) / (upper - lower) - 1.0


def band_frequencies(bands: int):
    return 2.0 * np.pi * 2.0 ** np.arange(bands)


def positional_encode(means, lower, upper, bands: int):
    """Sinusoidal code of the normalised mean, laid out (band, sin|cos, xyz).

    Band ``b`` uses angular frequency ``2*pi*2**b`` on coordinates in [-1, 1].
    """
    xn = normalize_coords(means, lower, upper)
    ang = xn[:, None, :] * band_frequencies(bands)[None, :, None]      # (N, B, 3)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=2)                # (N, B, 2, 3)
    return enc.reshape(len(xn), 6 * bands)


def positional_encode_backward(denc, means, lower, upper, bands: int):
    xn = normalize_coords(means, lower, upper)
    w = band_frequencies(bands)
    ang = xn[:, None, :] * w[None, :, None]
    d = denc.reshape(len(xn), bands, 2, 3)
    dang = d[:, :, 0] * np.cos(ang) - d[:, :, 1] * np.sin(ang)
    dxn = np.sum(dang * w[None, :, None], axis=1)
    return dxn * 2.0 / (np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float))


# --------------------------------------------------------------------------
# Morton ordering
# --------------------------------------------------------------------------

def quantize(means, lower, upper, bits: int):
    """Per-axis cell index in ``[0, 2**bits)``; out-of-bounds means clamp."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = 1 << bits
    cells = np.floor((np.asarray(means) - lower) / (upper - lower) * n)
    return np.clip(cells, 0, n - 1).astype(np.int64)


def morton_encode(cells, bits: int):
    """Interleave bits with x in the lowest position: key bit ``3i + axis``."""
    cells = np.asarray(cells, dtype=np.int64)
    key = np.zeros(cells.shape[0], dtype=np.int64)
    for i in range(bits):
        for axis in range(3):
            key |= ((cells[:, axis] >> i) & 1) << (3 * i + axis)
    return key


def morton_order(means, lower, upper, bits: int = 6):
    """Returns ``(perm, inverse)``; ``x[perm]`` is the sequence, ``seq[inverse]`` undoes it."""
    keys = morton_encode(quantize(means, lower, upper, bits), bits)
    perm = np.argsort(keys, kind="stable")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return perm, inv


# --------------------------------------------------------------------------
# selective scan
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _scan_forward(u, delta, A, B, C, D):
    L, di = u.shape
    n = A.shape[1]
    y = np.empty((L, di))
    hs = np.empty((L, di, n))
    h = np.zeros((di, n))
    for t in range(L):
        for c in range(di):
            dt = delta[t, c]
            x = dt * u[t, c]
            acc = D[c] * u[t, c]
            for j in range(n):
                h[c, j] = np.exp(dt * A[c, j]) * h[c, j] + x * B[t, j]
                acc += C[t, j] * h[c, j]
            y[t, c] = acc
        hs[t] = h
    return y, hs


@numba.njit(cache=True)
def _scan_backward(dy, u, delta, A, B, C, D, hs):
    L, di = u.shape
    n = A.shape[1]
    du = np.zeros((L, di))
    ddelta = np.zeros((L, di))
    dA = np.zeros((di, n))
    dB = np.zeros((L, n))
    dC = np.zeros((L, n))
    dD = np.zeros(di)
    dh = np.zeros((di, n))
    for t in range(L - 1, -1, -1):
        for c in range(di):
            g = dy[t, c]
            dt = delta[t, c]
            ut = u[t, c]
            dD[c] += g * ut
            du[t, c] += g * D[c]
            for j in range(n):
                dC[t, j] += g * hs[t, c, j]
                dh[c, j] += g * C[t, j]
                prev = hs[t - 1, c, j] if t > 0 else 0.0
                abar = np.exp(dt * A[c, j])
                gab = dh[c, j] * prev * abar
                ddelta[t, c] += gab * A[c, j] + dh[c, j] * B[t, j] * ut
                dA[c, j] += gab * dt
                dB[t, j] += dh[c, j] * dt * ut
                du[t, c] += dh[c, j] * dt * B[t, j]
                dh[c, j] *= abar
    return du, ddelta, dA, dB, dC, dD


def _as_f64(*arrays):
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]


def selective_scan(u, delta, A, B, C, D):
    """Diagonal selective SSM over a (L, di) sequence.

    ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`` and
    ``y_t = C_t . h_t + D u_t`` per channel, ``h_0 = 0``.  ``A`` is (di, n),
    ``B`` and ``C`` are (L, n).  Returns ``(y, states)``.
    """
    u, delta, A, B, C, D = _as_f64(u, delta, A, B, C, D)
    if np.any(delta <= 0):
        raise ValueError("step sizes must be positive")
    return _scan_forward(u, delta, A, B, C, D)


def selective_scan_backward(dy, u, delta, A, B, C, D, states):
    """Returns ``(du, ddelta, dA, dB, dC, dD)``."""
    args = _as_f64(dy, u, delta, A, B, C, D, states)
    return _scan_backward(*args)


def selective_scan_reference(u, delta, A, B, C, D):
    """Step-by-step recurrence kept deliberately plain; used as a test oracle."""
    L, di = u.shape
    h = np.zeros((di, A.shape[1]))
    y = np.zeros((L, di))
    for t in range(L):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * u[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + D * u[t]
    return y


# --------------------------------------------------------------------------
# one residual SSM block
# --------------------------------------------------------------------------

def init_block_params(rng, dim: int, state_dim: int = 16, dt_range=(1e-3, 1e-1),
                      zero_out: bool = True):
    d, n = dim, state_dim
    s = 1.0 / np.sqrt(d)
    dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), d))
    return {
        "ln_g": np.ones(d),
        "ln_b": np.zeros(d),
        "w_in": rng.normal(0.0, s, (d, 2 * d)),
        "w_dt": rng.normal(0.0, 0.1 * s, (d, d)),
        "b_dt": dt + np.log(-np.expm1(-dt)),          # softplus^-1(dt)
        "w_B": rng.normal(0.0, s, (d, n)),
        "w_C": rng.normal(0.0, s, (d, n)),
        "A_log": np.log(np.tile(np.arange(1, n + 1, dtype=float), (d, 1))),
        "D": np.ones(d),
        "w_out": np.zeros((d, d)) if zero_out else rng.normal(0.0, s, (d, d)),
    }


def ssm_block(x, p):
    """``x + W_out (scan(u) * silu(z))`` with ``[a, z] = LN(x) W_in``, ``u = silu(a)``."""
    d = x.shape[1]
    xn, ln_cache = layer_norm(x, p["ln_g"], p["ln_b"])
    az = xn @ p["w_in"]
    a, z = az[:, :d], az[:, d:]
    u = silu(a)
    pre_dt = u @ p["w_dt"] + p["b_dt"]
    delta = softplus(pre_dt)
    Bm = u @ p["w_B"]
    Cm = u @ p["w_C"]
    A = -np.exp(p["A_log"])
    y, states = selective_scan(u, delta, A, Bm, Cm, p["D"])
    gz = silu(z)
    g = y * gz
    out = x + g @ p["w_out"]
    cache = (ln_cache, xn, a, z, u, pre_dt, delta, Bm, Cm, A, y, states, gz, g)
    return out, cache


def ssm_block_backward(dout, cache, p):
    ln_cache, xn, a, z, u, pre_dt, delta, Bm, Cm, A, y, states, gz, g = cache
    grads = {"w_out": g.T @ dout}
    dg = dout @ p["w_out"].T
    dy = dg * gz
    dz = dg * y * silu_grad(z)
    du, ddelta, dA, dB, dC, dD = selective_scan_backward(dy, u, delta, A, Bm, Cm, p["D"], states)
    grads["D"] = dD
    grads["A_log"] = dA * A
    grads["w_B"] = u.T @ dB
    grads["w_C"] = u.T @ dC
    dpre = ddelta * sigmoid(pre_dt)
    grads["w_dt"] = u.T @ dpre
    grads["b_dt"] = dpre.sum(axis=0)
    du = du + dB @ p["w_B"].T + dC @ p["w_C"].T + dpre @ p["w_dt"].T
    da = du * silu_grad(a)
    daz = np.concatenate([da, dz], axis=1)
    grads["w_in"] = xn.T @ daz
    dxn = daz @ p["w_in"].T
    dx, grads["ln_g"], grads["ln_b"] = layer_norm_backward(dxn, ln_cache)
    return dout + dx, grads


# --------------------------------------------------------------------------
# parameter head
# --------------------------------------------------------------------------

def head_width(num_classes: int) -> int:
    return sum(k for _, k in PARAM_SLICES) + num_classes


def split_deltas(out):
    deltas, start = {}, 0
    for name, k in PARAM_SLICES:
        deltas[name] = out[:, start:start + k]
        start += k
    deltas["opacity_logits"] = deltas["opacity_logits"][:, 0]
    deltas["logits"] = out[:, start:]
    return deltas


def join_deltas(d):
    parts = [d[name] if k > 1 else d[name][:, None] for name, k in PARAM_SLICES]
    return np.concatenate(parts + [d["logits"]], axis=1)


def init_head_params(rng, dim: int, num_classes: int, config: HeadConfig | None = None,
                     zero_head: bool = True):
    cfg = config or HeadConfig()
    pe = 6 * cfg.bands
    w_pe = np.vstack([np.eye(dim), rng.normal(0.0, 0.1 / np.sqrt(max(pe, 1)), (pe, dim))])
    width = head_width(num_classes)
    p = {
        "w_pe": w_pe,
        "blocks": [init_block_params(rng, dim, cfg.state_dim) for _ in range(cfg.blocks)],
        "w_head": np.zeros((dim, width)) if zero_head else rng.normal(0.0, 0.01, (dim, width)),
        "b_head": np.zeros(width),
    }
    return p


def refine_arrays(arrays, p, config: HeadConfig, lower, upper, order=None):
    """Refine raw Gaussian arrays.  ``arrays`` holds means, quats, log_scales,
    opacity_logits, logits and features; quaternions come back unnormalised.
    ``order`` freezes the ``(perm, inverse)`` pair instead of recomputing it.

    Returns ``(new_arrays, cache)``.
    """
    means, feats = arrays["means"], arrays["features"]
    enc = positional_encode(means, lower, upper, config.bands)
    x_in = np.concatenate([feats, enc], axis=1)
    x = x_in @ p["w_pe"]
    perm, inv = morton_order(means, lower, upper, config.bits) if order is None else order
    seq = x[perm]
    block_caches = []
    if config.use_scan:
        for bp in p["blocks"]:
            seq, c = ssm_block(seq, bp)
            block_caches.append(c)
    h = seq[inv]
    out = h @ p["w_head"] + p["b_head"]
    deltas = split_deltas(out)
    new = {k: arrays[k] + deltas[k] for k in ("means", "log_scales", "quats", "opacity_logits", "logits")}
    new["features"] = h
    cache = dict(x_in=x_in, perm=perm, inv=inv, blocks=block_caches, h=h, means=means,
                 lower=lower, upper=upper, config=config)
    return new, cache


def refine_arrays_backward(dnew, cache, p):
    """``dnew`` maps the five parameter arrays (and optionally ``features``)
    to upstream gradients.  Returns ``(grads, darrays)``."""
    keys = ("means", "log_scales", "quats", "opacity_logits", "logits")
    dout = join_deltas({k: dnew[k] for k in keys})
    h = cache["h"]
    grads = {"w_head": h.T @ dout, "b_head": dout.sum(axis=0)}
    dh = dout @ p["w_head"].T
    if "features" in dnew:
        dh = dh + dnew["features"]
    dseq = dh[cache["perm"]]
    block_grads = [None] * len(cache["blocks"])
    for i in range(len(cache["blocks"]) - 1, -1, -1):
        dseq, block_grads[i] = ssm_block_backward(dseq, cache["blocks"][i], p["blocks"][i])
    grads["blocks"] = block_grads or [
        {k: np.zeros_like(v) for k, v in bp.items()} for bp in p["blocks"]]
    dx = dseq[cache["inv"]]
    grads["w_pe"] = cache["x_in"].T @ dx
    dx_in = dx @ p["w_pe"].T
    F = dx_in.shape[1] - 6 * cache["config"].bands
    darr = {k: np.array(dnew[k], copy=True) for k in keys}
    darr["features"] = dx_in[:, :F]
    darr["means"] += positional_encode_backward(dx_in[:, F:], cache["means"], cache["lower"],
                                                cache["upper"], cache["config"].bands)
    return grads, darr


def gauss_mamba_refine(gset: GaussianSet, p, config: HeadConfig, lower, upper) -> GaussianSet:
    """Convenience wrapper returning a refined, renormalised :class:`GaussianSet`."""
    new, _ = refine_arrays(gset.as_dict(), p, config, lower, upper)
    return GaussianSet(means=new["means"], quats=new["quats"], log_scales=new["log_scales"],
                       opacity_logits=new["opacity_logits"], logits=new["logits"],
                       features=new["features"])
