"""Referring-expression segmentation on numpy: word vectors, LSTM encoders,
a small convolutional segmenter with a category-fusion path, a synthetic
shape-world benchmark, metrics, and training."""

from .embeddings import EmbeddingTable, cosine_similarity, load_embedding_file, nearest_neighbors
from .errors import RefSegError
from .metrics import MetricsReport, evaluate, iou, overall_iou, precision_at
from .model import ModelBundle, ModelDims, load_checkpoint, predict, save_checkpoint
from .segmentation import binarize, combine, fuse, upsample_bilinear
from .training import TrainConfig, TrainData, train_full

__all__ = [
    "EmbeddingTable", "cosine_similarity", "load_embedding_file", "nearest_neighbors",
    "RefSegError", "MetricsReport", "evaluate", "iou", "overall_iou", "precision_at",
    "ModelBundle", "ModelDims", "load_checkpoint", "predict", "save_checkpoint",
    "binarize", "combine", "fuse", "upsample_bilinear", "TrainConfig", "TrainData", "train_full",
]
__version__ = "0.1.0"
