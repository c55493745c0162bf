from .layers import AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, ReLU, cross_entropy, softmax
from .model import ArchSpec, Model, input_gradient, load_checkpoint, save_checkpoint
from .train import TrainConfig, accuracy, train_model

__all__ = [
    "ArchSpec", "AvgPool2D", "Conv2D", "Dense", "Flatten", "MaxPool2D", "Model",
    "ReLU", "TrainConfig", "accuracy", "cross_entropy", "input_gradient",
    "load_checkpoint", "save_checkpoint", "softmax", "train_model",
]
