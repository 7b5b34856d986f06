"""Free-form 3D tumor inpainting in CT volumes with a gated-convolution GAN.

Self-contained stack: a reverse-mode tensor engine with compiled 3D
convolution kernels, the dilated-gated generator with its multi-scale side
branch, a conditional patch discriminator, the hybrid training objective,
the CT preprocessing pipeline, and the segmentation-metric evaluation suite.
"""

from . import kernels
from .tensor import Tensor, Tape

__version__ = "0.1.0"

KERNEL_BACKEND = kernels.BACKEND

__all__ = ["Tensor", "Tape", "KERNEL_BACKEND", "__version__"]
