"""Tri-modal contrastive alignment of point clouds to frozen text and image
embeddings, on a small numpy autodiff engine."""

from .anchors import AnchorSet, AnchorTable, oracle_anchor_gen
from .dataset import Dataset, Record, load_manifest, make_synthetic
from .encoder import encode, encode_batch, init_encoder, load_checkpoint, save_checkpoint
from .evaluate import compute_metrics, finetune, retrieve, zeroshot_eval
from .pointcloud import PointCloud
from .tensor import Tensor, no_grad
from .train import TrainConfig, contrastive_loss, final_loss, pretrain

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "AnchorTable",
    "Dataset",
    "PointCloud",
    "Record",
    "Tensor",
    "TrainConfig",
    "compute_metrics",
    "contrastive_loss",
    "encode",
    "encode_batch",
    "final_loss",
    "finetune",
    "init_encoder",
    "load_checkpoint",
    "load_manifest",
    "make_synthetic",
    "no_grad",
    "oracle_anchor_gen",
    "pretrain",
    "retrieve",
    "save_checkpoint",
    "zeroshot_eval",
]
