"""bias-lens: dataset-bias disentanglement on synthetic image families.

A shared autoencoder over several procedurally biased datasets, a
conditional invertible flow that factors its representation into a
dataset-independent content code, and tooling to project any input onto
any dataset, sample per dataset, and quantify the remaining bias.
"""

from .autoencoder import AEModel, RepStats
from .data import DatasetSpec, SampleSet, StyleMap, default_family, generate_family, load_family, render, split
from .flow import FlowModel
from .metrics import BiasReport, build_report, gaussian_w2, label_probe, laplacian_energy, z_normality
from .rng import RngStream
from .tensor import Graph, Tensor, backward, finite_diff_grad
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_autoencoder, train_cinn
from .transfer import Pipeline

__version__ = "0.1.0"

__all__ = [
    "AEModel",
    "BiasReport",
    "Checkpoint",
    "DatasetSpec",
    "FlowModel",
    "Graph",
    "Pipeline",
    "RepStats",
    "RngStream",
    "SampleSet",
    "StyleMap",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_report",
    "default_family",
    "finite_diff_grad",
    "gaussian_w2",
    "generate_family",
    "label_probe",
    "laplacian_energy",
    "load_checkpoint",
    "load_family",
    "render",
    "save_checkpoint",
    "split",
    "train_autoencoder",
    "train_cinn",
    "z_normality",
    "__version__",
]
