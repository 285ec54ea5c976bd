"""Contrastive alignment of the point encoder to frozen text/image anchors."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .anchors import AnchorSet, ViewCandidateSet, select_view
from .dataset import Dataset, Record
from .encoder import DEFAULT_WIDTHS, Checkpoint, EncoderParams, encode_batch, init_encoder
from .errors import DivergedLoss, MissingModality, NonFiniteError, NonUnitRows, ShapeMismatch, ValidationError
from .pointcloud import AugmentConfig, augment, normalize_unit_sphere, resample
from .rng import Rng
from .tensor import Tensor, cross_entropy, exp, similarity

log = logging.getLogger(__name__)

INIT_INV_TAU = 1 / 0.07
TRACE_COLUMNS = ("iteration", "epoch", "L_IP", "L_PS", "L_IS", "L_final", "inv_temperature")


class Temperature:
    """Learnable logit scale stored as s = log(1/tau), with 1/tau capped at ``clamp_max``."""

    def __init__(self, inv_tau: float = INIT_INV_TAU, clamp_max: float = 100.0, dtype=np.float32):
        if not 0 < inv_tau <= clamp_max:
            raise ValidationError("initial 1/tau must lie in (0, clamp_max]")
        self.clamp_max = float(clamp_max)
        self.s = Tensor(np.array(math.log(inv_tau), dtype=dtype), requires_grad=True)

    @classmethod
    def from_log(cls, log_inv_tau: float, clamp_max: float = 100.0, dtype=np.float32) -> "Temperature":
        t = cls(clamp_max=clamp_max, dtype=dtype)
        t.s = Tensor(np.array(log_inv_tau, dtype=dtype), requires_grad=True)
        t.clamp()
        return t

    @property
    def inv_tau(self) -> float:
        return float(np.exp(np.float64(self.s.item())))

    def scale(self) -> Tensor:
        return exp(self.s)

    def clamp(self):
        cap = math.log(self.clamp_max)
        if self.s.item() > cap:
            self.s = Tensor(np.array(cap, dtype=self.s.dtype), requires_grad=True)


@dataclass
class LossCoefficients:
    alpha: float = 0.0  # image-text
    beta: float = 1.0  # image-point
    theta: float = 1.0  # point-text

    def __post_init__(self):
        if min(self.alpha, self.beta, self.theta) < 0:
            raise ValidationError("loss coefficients must be non-negative")


def _as_rows(h) -> Tensor:
    return h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float32))


def contrastive_loss(ha, hb, temp: Temperature, reduction: str = "sum") -> Tensor:
    """Symmetric InfoNCE between paired unit rows; positives on the diagonal.

    Each pair contributes half the row-direction and half the
    column-direction softmax cross-entropy of ``(ha @ hb.T) / tau``.
    """
    ha, hb = _as_rows(ha), _as_rows(hb)
    if ha.ndim != 2 or ha.shape != hb.shape or ha.shape[0] < 1:
        raise ShapeMismatch(f"contrastive_loss needs two equal (N, D) inputs, got {ha.shape} and {hb.shape}")
    for h in (ha, hb):
        norms = np.linalg.norm(h.data.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1) > 1e-3):
            raise NonUnitRows("contrastive_loss expects unit-norm rows")
    n = ha.shape[0]
    logits = similarity(ha, hb, temp.scale())
    targets = np.arange(n)
    loss = cross_entropy(logits, targets) * 0.5 + cross_entropy(logits.T, targets) * 0.5
    if reduction == "mean":
        loss = loss * (1.0 / n)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


def final_loss(h_img, h_txt, h_pc, coefs: LossCoefficients, temp: Temperature, reduction: str = "sum"):
    """Weighted sum of the three pairwise losses; returns (total, per-term floats)."""
    l_is = contrastive_loss(h_img, h_txt, temp, reduction)
    l_ip = contrastive_loss(h_img, h_pc, temp, reduction)
    l_ps = contrastive_loss(h_pc, h_txt, temp, reduction)
    total = l_is * coefs.alpha + l_ip * coefs.beta + l_ps * coefs.theta
    parts = {"L_IS": l_is.item(), "L_IP": l_ip.item(), "L_PS": l_ps.item(), "L_final": total.item()}
    return total, parts


# AdamW

@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


def optimizer_step(params: dict, grads: dict, state: dict, cfg: AdamWConfig, decay: Sequence[str] = (), lr=None):
    """One AdamW update over name-keyed float arrays.

    Returns ``(new_params, new_state)``; inputs are not modified. Weight
    decay is decoupled and only touches the names listed in ``decay``.
    """
    lr = cfg.lr if lr is None else lr
    step = state.get("step", 0) + 1
    m_state, v_state = dict(state.get("m", {})), dict(state.get("v", {}))
    bc1 = 1 - cfg.beta1**step
    bc2 = 1 - cfg.beta2**step
    out = {}
    for name, p in params.items():
        p64 = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros_like(p64) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p64.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p64.shape}")
        m = cfg.beta1 * m_state.get(name, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * v_state.get(name, 0.0) + (1 - cfg.beta2) * g * g
        m_state[name], v_state[name] = m, v
        if name in decay and cfg.weight_decay:
            p64 = p64 * (1 - lr * cfg.weight_decay)
        p64 = p64 - (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + cfg.eps)
        out[name] = np.asarray(p64, dtype=np.asarray(p).dtype)
    return out, {"step": step, "m": m_state, "v": v_state}


class AdamW:
    """Stateful wrapper updating ``Tensor`` leaves in place of their data."""

    def __init__(self, tensors: dict[str, Tensor], cfg: AdamWConfig, decay: Sequence[str] = ()):
        self.tensors = tensors
        self.cfg = cfg
        self.decay = set(decay)
        self.state: dict = {}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def step(self, lr=None):
        params = {k: t.data for k, t in self.tensors.items()}
        grads = {k: t.grad for k, t in self.tensors.items() if t.grad is not None}
        new, self.state = optimizer_step(params, grads, self.state, self.cfg, self.decay, lr)
        for k, t in self.tensors.items():
            arr = new[k]
            arr.flags.writeable = False
            t.data = arr


# pre-training

@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 250
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    n_points: int = 1024
    seed: int = 0
    anchor_mode: str = "oracle"
    alpha: float = 0.0
    beta: float = 1.0
    theta: float = 1.0
    reduction: str = "sum"
    schedule: str = "constant"
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    embed_dim: int | None = None
    init_inv_tau: float = INIT_INV_TAU
    clamp_max: float = 100.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.widths = tuple(self.widths)
        for name in ("batch_size", "learning_rate", "n_points"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValidationError("schedule must be 'constant' or 'cosine'")
        if self.reduction not in ("sum", "mean"):
            raise ValidationError("reduction must be 'sum' or 'mean'")

    @property
    def coefficients(self) -> LossCoefficients:
        return LossCoefficients(self.alpha, self.beta, self.theta)

    @property
    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["augment"]["scale_range"] = list(self.augment.scale_range)
        return d


@dataclass
class Triplet:
    object_id: str
    record: Record
    words: list[str]
    views: list[str]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    trace: list[dict]
    skipped: list[str]
    iterations: int


def build_triplets(records: Sequence[Record], anchors: AnchorSet) -> tuple[list[Triplet], list[str]]:
    """Pair each record with its usable words and view candidates; drop incomplete ones."""
    triplets, skipped = [], []
    for r in records:
        words = [w for w in r.words if anchors.has_word(w)]
        try:
            views = anchors.view_candidates(r.id).ids
        except MissingModality:
            views = []
        if not words or not views:
            what = "text" if not words else "image"
            log.warning("skipping %s: missing %s modality", r.id, what)
            skipped.append(r.id)
            continue
        triplets.append(Triplet(r.id, r, words, views))
    return triplets, skipped


def prepare_cloud(record: Record, n_points: int, rng: Rng, aug: AugmentConfig | None) -> np.ndarray:
    pc = normalize_unit_sphere(resample(record.cloud, n_points, rng.child("resample")))
    if aug is not None:
        pc = augment(pc, aug, rng.child("augment"))
    return pc.points


def assemble_batch(batch: Sequence[Triplet], anchors: AnchorSet, cfg: TrainConfig, epoch: int):
    """Image rows, text anchors and prepared clouds for one batch.

    Each record draws its word and view from its own (seed, epoch, id) stream,
    so the result does not depend on batch composition.
    """
    h_img, h_txt, clouds = [], [], []
    for tr in batch:
        rng = Rng.named(cfg.seed, "sample", epoch, tr.object_id)
        word = tr.words[int(rng.child("word").integers(0, len(tr.words)))]
        h_txt.append(anchors.text_anchor_for(word))
        h_img.append(anchors.image.row(select_view(ViewCandidateSet(tr.object_id, tr.views, partial=True), rng.child("view"))))
        clouds.append(prepare_cloud(tr.record, cfg.n_points, rng, cfg.augment))
    return np.stack(h_img), np.stack(h_txt), np.stack(clouds)


def epoch_batches(n: int, cfg: TrainConfig, epoch: int) -> list[list[int]]:
    """Shuffled index batches for one epoch; a trailing singleton is dropped."""
    order = Rng.named(cfg.seed, "epoch-order", epoch).permutation(n)
    batches = [list(order[s : s + cfg.batch_size]) for s in range(0, n, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def _lr_at(cfg: TrainConfig, it: int, total: int) -> float:
    if cfg.schedule == "cosine" and total > 0:
        return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * it / total))
    return cfg.learning_rate


def pretrain(
    dataset: Dataset,
    anchors: AnchorSet,
    cfg: TrainConfig,
    params: EncoderParams | None = None,
    split: str = "train",
    trace_path=None,
) -> PretrainResult:
    """Align the point encoder to the frozen anchors with the weighted pair losses."""
    embed_dim = cfg.embed_dim or anchors.dim
    if embed_dim != anchors.dim:
        raise ValidationError(f"embed_dim {embed_dim} does not match anchor dim {anchors.dim}")
    params = params.copy() if params is not None else init_encoder(cfg.seed, cfg.widths, embed_dim)
    temp = Temperature(cfg.init_inv_tau, cfg.clamp_max)
    triplets, skipped = build_triplets(dataset.split(split), anchors)
    if cfg.epochs > 0 and len(triplets) < 2:
        raise ValidationError("pre-training needs at least two complete triplets")

    tensors = dict(params.tensors)
    tensors["temperature"] = temp.s
    opt = AdamW(tensors, cfg.adamw, decay=params.weight_names())
    coefs = cfg.coefficients
    per_epoch = max(1, math.ceil(len(triplets) / cfg.batch_size))
    total = cfg.epochs * per_epoch
    trace: list[dict] = []
    it = 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(triplets), cfg, epoch):
            batch = [triplets[i] for i in idx]
            h_img, h_txt, clouds = assemble_batch(batch, anchors, cfg, epoch)
            opt.zero_grad()
            inv_tau = temp.inv_tau
            try:
                h_pc = encode_batch(params, clouds)
                loss, parts = final_loss(h_img, h_txt, h_pc, coefs, temp, cfg.reduction)
            except NonFiniteError as e:
                raise DivergedLoss(f"iteration {it}: {e}") from e
            if not math.isfinite(parts["L_final"]):
                raise DivergedLoss(f"iteration {it}: loss is {parts['L_final']}")
            loss.backward()
            opt.step(_lr_at(cfg, it, total))
            temp.clamp()
            opt.tensors["temperature"] = temp.s
            trace.append({"iteration": it, "epoch": epoch, **{k: parts[k] for k in ("L_IP", "L_PS", "L_IS", "L_final")}, "inv_temperature": inv_tau})
            it += 1
        log.info("epoch %d done, last loss %.4f", epoch, trace[-1]["L_final"] if trace else float("nan"))

    meta = {
        "config": cfg.to_dict(),
        "iterations": it,
        "skipped": len(skipped),
        "anchor_fingerprint": anchors.fingerprint(),
        "categories": dataset.categories,
    }
    ckpt = Checkpoint(params, temp.s.item(), temp.clamp_max, meta)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return PretrainResult(ckpt, trace, skipped, it)


def write_trace(trace: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("iteration", "epoch") else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
        ]
