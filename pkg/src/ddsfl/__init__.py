"""Deep discriminative and shareable feature learning for image classification."""
from .config import LayerConfig, PipelineConfig, load_config, parse_config
from .deepstack import DeepModel, load_model, save_model, train_deep, train_deep_images
from .dsfl import LayerHyperparams, train_layer

__all__ = ["LayerConfig", "PipelineConfig", "load_config", "parse_config", "DeepModel", "load_model",
           "save_model", "train_deep", "train_deep_images", "LayerHyperparams", "train_layer"]
__version__ = "0.1.0"
