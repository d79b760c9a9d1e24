"""Toy-scale animal mesh recovery: body models, a ViT-MoE regressor, losses, metrics and data.

Submodules:

- ``numkernel``: reverse-mode autodiff on numpy arrays
- ``bodymodel``: blendshapes, bone scaling, kinematics and skinning
- ``camera``: projection, rasterisation and keypoint visibility
- ``network``: encoder with taxon experts, decoder and regression heads
- ``losses``, ``metrics``, ``datagen``, ``trainer``, ``formats``, ``cli``
"""

import os as _os

# ANIMER_THREADS caps BLAS worker threads; it only takes effect before numpy loads
if "ANIMER_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ANIMER_THREADS"])

__version__ = "0.1.0"
