"""Permutation-invariant point encoder (shared per-point MLP, max-pool,
linear projection, unit normalization), a linear classifier head and the
``ULIPCKPT`` checkpoint format."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadArchitecture, BadMagic, RaggedBatch, ShapeMismatch, TruncatedFile, ValidationError
from .pointcloud import PointCloud
from .rng import Rng
from .tensor import Tensor, l2_normalize, matmul, relu

DEFAULT_WIDTHS = (64, 128, 256)
DEFAULT_EMBED_DIM = 512
BIAS_INIT = 0.01

CKPT_MAGIC = b"ULIPCKPT"
CKPT_VERSION = 1


@dataclass
class EncoderParams:
    widths: tuple[int, ...]
    embed_dim: int
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def weight_names(self) -> list[str]:
        return [n for n in self.tensors if n.endswith(".weight")]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.widths,
            self.embed_dim,
            self.seed,
            {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


@dataclass
class ClassifierHead:
    weight: Tensor  # (D, C)
    bias: Tensor  # (C,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def _fan_in_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    # He-uniform: Var = bound^2 / 3 = 2 / fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.gen.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def init_encoder(seed: int, widths: Sequence[int] = DEFAULT_WIDTHS, embed_dim: int = DEFAULT_EMBED_DIM) -> EncoderParams:
    widths = tuple(int(w) for w in widths)
    if not widths or any(w < 1 for w in widths):
        raise BadArchitecture(f"layer widths must be positive, got {widths}")
    if embed_dim < 2:
        raise BadArchitecture("embed_dim must be >= 2")
    rng = Rng.named(seed, "encoder-init")
    tensors = {}
    fan_in = 3
    for i, w in enumerate(widths):
        tensors[f"mlp.{i}.weight"] = Tensor(_fan_in_uniform(rng, fan_in, w), requires_grad=True)
        tensors[f"mlp.{i}.bias"] = Tensor(np.full(w, BIAS_INIT, np.float32), requires_grad=True)
        fan_in = w
    tensors["proj.weight"] = Tensor(_fan_in_uniform(rng, fan_in, embed_dim), requires_grad=True)
    tensors["proj.bias"] = Tensor(np.full(embed_dim, BIAS_INIT, np.float32), requires_grad=True)
    return EncoderParams(widths, int(embed_dim), int(seed), tensors)


def init_head(seed: int, embed_dim: int, num_classes: int) -> ClassifierHead:
    if num_classes < 2:
        raise BadArchitecture("a classifier head needs at least two classes")
    rng = Rng.named(seed, "head-init")
    bound = 1.0 / np.sqrt(embed_dim)
    w = rng.gen.uniform(-bound, bound, size=(embed_dim, num_classes)).astype(np.float32)
    return ClassifierHead(Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes, np.float32), requires_grad=True))


def _stack(clouds) -> np.ndarray:
    if isinstance(clouds, np.ndarray):
        arr = clouds
    else:
        arrays = [c.points if isinstance(c, PointCloud) else np.asarray(c) for c in clouds]
        if not arrays:
            raise ValidationError("empty batch")
        if len({a.shape for a in arrays}) != 1:
            raise RaggedBatch("all clouds in a batch must have the same point count")
        arr = np.stack(arrays)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[1] < 1:
        raise ShapeMismatch(f"expected a (B, N, 3) batch, got {arr.shape}")
    return arr.astype(np.float32, copy=False)


def encode_batch(params: EncoderParams, clouds) -> Tensor:
    """Embed a batch of equally sized clouds; returns a (B, D) tensor of unit rows."""
    x = _stack(clouds)
    b, n, _ = x.shape
    h = Tensor(x.reshape(b * n, 3))
    t = params.tensors
    for i in range(len(params.widths)):
        h = relu(matmul(h, t[f"mlp.{i}.weight"]) + t[f"mlp.{i}.bias"])
    pooled = h.reshape(b, n, params.widths[-1]).max(axis=1)
    return l2_normalize(matmul(pooled, t["proj.weight"]) + t["proj.bias"], axis=1)


def encode(params: EncoderParams, pc) -> Tensor:
    """Embed one cloud; returns a unit-norm (D,) tensor."""
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc)
    return encode_batch(params, pts[None])[0]


def classify(head: ClassifierHead, embedding: Tensor) -> Tensor:
    """Logits for one (D,) embedding or a (B, D) batch."""
    if embedding.shape[-1] != head.weight.shape[0]:
        raise ShapeMismatch(f"embedding dim {embedding.shape[-1]} != head input {head.weight.shape[0]}")
    return matmul(embedding, head.weight) + head.bias


# checkpoint: magic, u32 version, u32 header length, JSON header, float32 blocks

@dataclass
class Checkpoint:
    params: EncoderParams
    log_inv_tau: float
    clamp_max: float
    metadata: dict = field(default_factory=dict)
    head: ClassifierHead | None = None


def _ckpt_blocks(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    blocks = dict(ckpt.params.as_arrays())
    blocks["temperature.log_inv_tau"] = np.array([ckpt.log_inv_tau], dtype=np.float32)
    if ckpt.head is not None:
        blocks.update({k: v.data for k, v in ckpt.head.tensors().items()})
    return blocks


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomic write (temp file in the same directory, then rename)."""
    path = Path(path)
    blocks = _ckpt_blocks(ckpt)
    header = {
        "widths": list(ckpt.params.widths),
        "embed_dim": ckpt.params.embed_dim,
        "seed": ckpt.params.seed,
        "temperature": {"log_inv_tau": float(np.float32(ckpt.log_inv_tau)), "clamp_max": ckpt.clamp_max},
        "metadata": ckpt.metadata,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
            fh.write(hbytes)
            for v in blocks.values():
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if len(blob) < 16:
        raise TruncatedFile(f"{path}: header truncated")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise TruncatedFile(f"{path}: header truncated")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if len(blob) < offset + 4 * count:
            raise TruncatedFile(f"{path}: block {spec['name']} truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float32)
        offset += 4 * count
    tau = arrays.pop("temperature.log_inv_tau")
    head = None
    if "head.weight" in arrays:
        head = ClassifierHead(
            Tensor(arrays.pop("head.weight"), requires_grad=True), Tensor(arrays.pop("head.bias"), requires_grad=True)
        )
    params = EncoderParams(
        tuple(header["widths"]),
        int(header["embed_dim"]),
        int(header["seed"]),
        {k: Tensor(v, requires_grad=True) for k, v in arrays.items()},
    )
    return Checkpoint(params, float(tau[0]), float(header["temperature"]["clamp_max"]), header["metadata"], head)
