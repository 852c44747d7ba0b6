"""Gaussian-primitive semantic occupancy from fused camera and LiDAR inputs.

The package is organised bottom-up:

``numerics``   array primitives with hand-written backward passes
``scene``      Gaussian primitives, voxel grids, splatting
``ldfa``       lifting LiDAR and camera features onto Gaussian anchors
``ebfs``       entropy-based feature smoothing between the two streams
``aclf``       adaptive camera-LiDAR fusion (and add / concat baselines)
``mamba``      Morton ordering, selective scan and the refinement head
``losses``     cross-entropy, Lovasz-softmax, IoU / mIoU
``model``      the assembled pipeline, forward and backward
``training``   AdamW, fixtures, evaluation, ablations
``synthetic``  synthetic scenes and sensor degradations
``io``         file formats
``cli``        command-line entry point
"""

__version__ = "0.1.0"
