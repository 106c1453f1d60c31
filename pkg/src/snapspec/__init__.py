"""snapspec: desk-scale snapshot spectral compressive imaging toolkit."""

from .autodiff import Tensor, backward, no_grad
from .baselines import IstaConfig, ista_reconstruct, power_iteration_norm, soft_threshold
from .errors import FileFormatError, ShapeError, UsageError
from .metrics import psnr, ssim
from .network import RecoveryConfig, RecoveryNet
from .optics import DispersionRule, adjoint, dense_phi, disperse_sum, forward, init_split, modulate
from .sensing import MaskPair, binarize_ste, binary_sign, compress, init_latent
from .training import Adam, TrainConfig, loss, lr_at, train

__all__ = [
    "Tensor", "backward", "no_grad",
    "IstaConfig", "ista_reconstruct", "power_iteration_norm", "soft_threshold",
    "FileFormatError", "ShapeError", "UsageError",
    "psnr", "ssim",
    "RecoveryConfig", "RecoveryNet",
    "DispersionRule", "adjoint", "dense_phi", "disperse_sum", "forward",
    "init_split", "modulate",
    "MaskPair", "binarize_ste", "binary_sign", "compress", "init_latent",
    "Adam", "TrainConfig", "loss", "lr_at", "train",
]
