"""Dynamic-rank training of diffusion policies and expert-gated interactive imitation.

Modules:
    numerics   autodiff substrate, conv1d, SVD/QR, Adam
    lowrank    SVD-partitioned (rank-modulated) and LoRA conv layers
    schedule   trainable-rank decay schedules
    diffusion  DDPM machinery and the conditional 1-D U-Net policy
    harness    toy environment, expert, gate, datasets, training drivers
    cli        experiment runner (``drift`` console script)
"""

from . import _kernels
from ._kernels import get_backend, set_backend

__version__ = "0.1.0"

__all__ = ["get_backend", "set_backend", "__version__"]
