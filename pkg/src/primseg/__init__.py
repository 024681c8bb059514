"""Semi-supervised point embeddings learned by fitting primitives.

Per-point embeddings are clustered with differentiable mean-shift, each
cluster is fitted with an ellipsoid (or its bounding cuboid) in closed form,
and reconstruction losses on the fitted primitives train the embedder
alongside a few-shot segmentation head.
"""
from .autograd import Tensor, backward, no_grad
from .embedder import ClassifierParams, EmbedderParams, Model, classify, embed
from .fitting import FitConfig, fit_all, fit_ellipsoid, mve_fit
from .meanshift import BandwidthConfig, cluster
from .pipeline import PipelineConfig, decompose, ssl_forward
from .primitives import PrimitiveParams
from .shapes import PointCloud, generate_synthetic, load_pointcloud, normalize
from .train import TrainConfig, train

__all__ = [
    "BandwidthConfig", "ClassifierParams", "EmbedderParams", "FitConfig", "Model",
    "PipelineConfig", "PointCloud", "PrimitiveParams", "Tensor", "TrainConfig", "backward",
    "classify", "cluster", "decompose", "embed", "fit_all", "fit_ellipsoid",
    "generate_synthetic", "load_pointcloud", "mve_fit", "no_grad", "normalize",
    "ssl_forward", "train",
]
__version__ = "0.1.0"
