"""Counterfactual explanations in a VAE latent space guided by sum-product networks."""
from .circuit import Circuit, CircuitBuilder, validate
from .counterfactual import CfConfig, CfResult, generate, generate_batch
from .data import LabeledDataset, gen_ellipse_images, gen_latent_mixture
from .structlearn import LearnConfig, learn_spn
from .vae import TrainConfig, VaeModel, train

__version__ = "0.1.0"

__all__ = [
    "Circuit", "CircuitBuilder", "validate", "CfConfig", "CfResult", "generate",
    "generate_batch", "LabeledDataset", "gen_ellipse_images", "gen_latent_mixture",
    "LearnConfig", "learn_spn", "TrainConfig", "VaeModel", "train",
]
