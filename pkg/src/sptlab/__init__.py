"""Self-supervised whole-slide representation learning on patch-token bags."""

__version__ = "0.1.0"

from .bagstore import Dataset, SlideBag, SyntheticSpec, generate_synthetic, load_bag, save_bag
from .objectives import ObjectiveConfig, PairBatch, byol_loss, nt_xent, supcon, vicreg
from .trainer import ModelConfig, TrainConfig, fit, grad_check
from .transforms import TokenView, TransformConfig, crop, make_view_pair, mask, split
from .rng import RandomSource

__all__ = [
    "Dataset", "SlideBag", "SyntheticSpec", "generate_synthetic", "load_bag", "save_bag",
    "ObjectiveConfig", "PairBatch", "byol_loss", "nt_xent", "supcon", "vicreg",
    "ModelConfig", "TrainConfig", "fit", "grad_check",
    "TokenView", "TransformConfig", "crop", "make_view_pair", "mask", "split",
    "RandomSource",
]
