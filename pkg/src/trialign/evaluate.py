"""Downstream protocols: zero-shot classification, fine-tuning, retrieval,
the modality ablation and the data-efficiency sweep."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anchors import AnchorSet
from .dataset import Dataset, Record
from .encoder import (
    DEFAULT_WIDTHS,
    ClassifierHead,
    EncoderParams,
    classify,
    encode_batch,
    init_encoder,
    init_head,
)
from .errors import (
    DimMismatch,
    EmptyGallery,
    EmptySplit,
    FractionTooSmall,
    LabelGap,
    LengthMismatch,
    UnknownSetName,
    ValidationError,
)
from .pointcloud import AugmentConfig
from .rng import Rng
from .tensor import Tensor, cross_entropy, no_grad
from .train import AdamW, AdamWConfig, TrainConfig, prepare_cloud, pretrain


# category sets

def load_category_list(name: str) -> list[str]:
    fname = {"ALL": "modelnet40_all.txt", "Medium": "modelnet40_medium.txt", "Hard": "modelnet40_hard.txt"}[name]
    text = resources.files("trialign.data").joinpath(fname).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass
class CategorySetFilter:
    name: str
    retained: list[str]

    def keeps(self, category: str) -> bool:
        return category in self._set

    @property
    def _set(self) -> set:
        return set(self.retained)


def filter_category_set(all_names: Sequence[str], set_name: str | Sequence[str]) -> CategorySetFilter:
    """ALL keeps everything; Medium/Hard keep the shipped ModelNet40 lists;
    a list of names (or a path to a one-name-per-line file) is a custom set."""
    all_names = list(all_names)
    if isinstance(set_name, str):
        if set_name == "ALL":
            return CategorySetFilter("ALL", all_names)
        if set_name in ("Medium", "Hard"):
            keep = set(load_category_list(set_name))
            return CategorySetFilter(set_name, [n for n in all_names if n in keep])
        path = Path(set_name)
        if path.is_file():
            keep = {line.strip() for line in path.read_text().splitlines() if line.strip()}
            return CategorySetFilter(path.stem, [n for n in all_names if n in keep])
        raise UnknownSetName(f"unknown category set {set_name!r}")
    keep = set(set_name)
    return CategorySetFilter("custom", [n for n in all_names if n in keep])


# metrics

@dataclass
class EvalReport:
    overall_accuracy: float
    class_mean_accuracy: float
    topk_accuracy: dict[str, float]
    per_class: dict[str, dict[str, int]]
    config: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.topk_accuracy.get("top1", self.overall_accuracy)

    @property
    def top5(self) -> float | None:
        return self.topk_accuracy.get("top5")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update({k: v for k, v in self.topk_accuracy.items()})
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def compute_metrics(
    predictions: Sequence,
    labels: Sequence[int],
    k_list: Iterable[int] = (1, 5),
    class_names: Sequence[str] | None = None,
    config: dict | None = None,
) -> EvalReport:
    """OA, class-mean accuracy and top-k accuracy, all in percent.

    ``predictions[i]`` is either one predicted label or a ranked list of
    labels, best first.
    """
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptySplit("no samples to score")
    ranked = [list(p) if isinstance(p, (list, tuple, np.ndarray)) else [p] for p in predictions]
    labels = [int(x) for x in labels]
    present = sorted(set(labels))
    name = (lambda c: class_names[c]) if class_names is not None else str
    per_class = {name(c): {"total": 0, "correct": 0} for c in present}
    topk = {int(k): 0 for k in k_list}
    for r, y in zip(ranked, labels):
        hit = bool(r) and int(r[0]) == y
        per_class[name(y)]["total"] += 1
        per_class[name(y)]["correct"] += hit
        for k in topk:
            topk[k] += y in [int(x) for x in r[:k]]
    n = len(labels)
    recalls = [v["correct"] / v["total"] for v in per_class.values()]
    correct = sum(v["correct"] for v in per_class.values())
    return EvalReport(
        overall_accuracy=100.0 * correct / n,
        class_mean_accuracy=100.0 * float(np.mean(recalls)),
        topk_accuracy={f"top{k}": 100.0 * c / n for k, c in topk.items()},
        per_class=per_class,
        config=dict(config or {}),
    )


# zero-shot

@dataclass
class CategoryAnchors:
    names: list[str]
    vectors: np.ndarray  # (C, D) unit rows

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("category names must be unique")
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.shape[0] != len(self.names):
            raise DimMismatch("one anchor row per category")

    @classmethod
    def from_anchor_set(cls, anchors: AnchorSet, names: Sequence[str]) -> "CategoryAnchors":
        return cls(list(names), np.stack([anchors.text_anchor_for(n) for n in names]))

    def subset(self, keep: Sequence[str]) -> "CategoryAnchors":
        idx = [self.names.index(n) for n in keep]
        return CategoryAnchors([self.names[i] for i in idx], self.vectors[idx])


def _rank(scores: np.ndarray) -> np.ndarray:
    # descending score; a stable sort keeps the lower index first on ties
    return np.argsort(-scores, kind="stable")


def zeroshot_classify(embedding, anchors: CategoryAnchors) -> list[tuple[str, float]]:
    """Categories ranked by cosine similarity to the embedding."""
    e = np.asarray(embedding.data if isinstance(embedding, Tensor) else embedding, dtype=np.float64)
    if e.shape != (anchors.vectors.shape[1],):
        raise DimMismatch(f"embedding dim {e.shape} vs anchor dim {anchors.vectors.shape[1]}")
    scores = anchors.vectors.astype(np.float64) @ e
    return [(anchors.names[i], float(scores[i])) for i in _rank(scores)]


def embed_records(params: EncoderParams, records: Sequence[Record], n_points: int, seed: int = 0, batch: int = 64) -> np.ndarray:
    """Un-augmented embeddings of the normalized, uniformly resampled clouds."""
    out = []
    with no_grad():
        for s in range(0, len(records), batch):
            chunk = records[s : s + batch]
            clouds = [prepare_cloud(r, n_points, Rng.named(seed, "eval", r.id), None) for r in chunk]
            out.append(encode_batch(params, np.stack(clouds)).data)
    if not out:
        return np.zeros((0, params.embed_dim), np.float32)
    return np.concatenate(out)


def zeroshot_eval(
    params: EncoderParams,
    records: Sequence[Record],
    categories: Sequence[str],
    anchors: CategoryAnchors,
    category_filter: CategorySetFilter | None = None,
    n_points: int = 1024,
    seed: int = 0,
    k_list=(1, 5),
) -> EvalReport:
    """Encode each test cloud and match it against the category text anchors."""
    keep = category_filter.retained if category_filter is not None else list(anchors.names)
    keep = [n for n in anchors.names if n in set(keep)]
    cats = anchors.subset(keep)
    recs = [r for r in records if categories[r.label] in set(keep)]
    if not recs:
        raise EmptySplit("no test samples left after category filtering")
    emb = embed_records(params, recs, n_points, seed)
    scores = emb.astype(np.float64) @ cats.vectors.astype(np.float64).T
    ranked = [_rank(row) for row in scores]
    labels = [cats.names.index(categories[r.label]) for r in recs]
    cfg = {"protocol": "zeroshot", "set": category_filter.name if category_filter else "ALL", "n_samples": len(recs)}
    return compute_metrics(ranked, labels, k_list, cats.names, cfg)


# retrieval

def retrieve(query, gallery: Mapping[str, np.ndarray], k: int) -> list[tuple[str, float]]:
    """Top-k gallery ids by cosine similarity; ties go to the lower id."""
    if not gallery:
        raise EmptyGallery("gallery is empty")
    ids = sorted(gallery)
    m = np.stack([np.asarray(gallery[i], dtype=np.float64) for i in ids])
    q = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
    if q.shape != (m.shape[1],):
        raise DimMismatch(f"query dim {q.shape} vs gallery dim {m.shape[1]}")
    qn = q / np.linalg.norm(q)
    scores = (m @ qn) / np.linalg.norm(m, axis=1)
    order = _rank(scores)[: max(0, min(k, len(ids)))]
    return [(ids[i], float(scores[i])) for i in order]


# fine-tuning

@dataclass
class FinetuneConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    head_learning_rate: float = 1e-2
    weight_decay: float = 0.05
    n_points: int = 256
    seed: int = 0
    freeze_encoder: bool = False
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    embed_dim: int = 512
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["augment"]["scale_range"] = list(self.augment.scale_range)
        return d


@dataclass
class FinetuneResult:
    params: EncoderParams
    head: ClassifierHead
    report: EvalReport
    losses: list[float]


def classifier_eval(params, head, records, categories, n_points, seed=0, k_list=(1, 5), config=None) -> EvalReport:
    emb = embed_records(params, records, n_points, seed)
    with no_grad():
        logits = classify(head, Tensor(emb)).data.astype(np.float64)
    ranked = [_rank(row) for row in logits]
    return compute_metrics(ranked, [r.label for r in records], k_list, categories, config)


def finetune(
    params: EncoderParams | None,
    train_records: Sequence[Record],
    test_records: Sequence[Record],
    categories: Sequence[str],
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Attach a linear head and train with cross-entropy; ``params=None`` starts from random init."""
    labels = sorted({r.label for r in train_records})
    if labels != list(range(len(categories))):
        raise LabelGap(f"training labels {labels} do not cover 0..{len(categories) - 1}")
    init = "random" if params is None else "pretrained"
    params = init_encoder(cfg.seed, cfg.widths, cfg.embed_dim) if params is None else params.copy()
    head = init_head(cfg.seed, params.embed_dim, len(categories))
    head_opt = AdamW(head.tensors(), AdamWConfig(cfg.head_learning_rate, weight_decay=0.0))
    enc_opt = None
    if not cfg.freeze_encoder:
        enc_opt = AdamW(params.tensors, AdamWConfig(cfg.learning_rate, weight_decay=cfg.weight_decay), params.weight_names())
    losses = []
    recs = list(train_records)
    for epoch in range(cfg.epochs):
        order = Rng.named(cfg.seed, "finetune-order", epoch).permutation(len(recs))
        for s in range(0, len(order), cfg.batch_size):
            batch = [recs[i] for i in order[s : s + cfg.batch_size]]
            clouds = [
                prepare_cloud(r, cfg.n_points, Rng.named(cfg.seed, "finetune-sample", epoch, r.id), cfg.augment) for r in batch
            ]
            head_opt.zero_grad()
            if enc_opt:
                enc_opt.zero_grad()
                emb = encode_batch(params, np.stack(clouds))
            else:
                with no_grad():
                    emb = encode_batch(params, np.stack(clouds))
            loss = cross_entropy(classify(head, emb), [r.label for r in batch], reduction="mean")
            loss.backward()
            head_opt.step()
            if enc_opt:
                enc_opt.step()
            losses.append(loss.item())
    cfg_echo = {"protocol": "finetune", "init": init, "n_train": len(recs), **cfg.to_dict()}
    report = classifier_eval(params, head, test_records, categories, cfg.n_points, cfg.seed, config=cfg_echo)
    return FinetuneResult(params, head, report, losses)


def stratified_subsample(records: Sequence[Record], fraction: float, seed: int) -> list[Record]:
    """Keep ``round(fraction * n_c)`` records of each class, original order preserved."""
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    if fraction == 1:
        return list(records)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    chosen = []
    for label, idx in sorted(by_class.items()):
        k = int(round(fraction * len(idx)))
        if k < 1:
            raise FractionTooSmall(f"fraction {fraction} leaves class {label} empty")
        pick = Rng.named(seed, "subsample", label, repr(fraction)).gen.choice(len(idx), size=k, replace=False)
        chosen.extend(idx[j] for j in pick)
    return [records[i] for i in sorted(chosen)]


SWEEP_COLUMNS = ("fraction", "seed", "init", "overall_accuracy")


def data_efficiency_sweep(
    params: EncoderParams,
    dataset: Dataset,
    fractions: Sequence[float],
    seeds: Sequence[int],
    cfg: FinetuneConfig,
    csv_path=None,
) -> list[dict]:
    """Fine-tune from ``params`` and from random init for each (fraction, seed)."""
    train, test = dataset.split("train"), dataset.split("test")
    rows = []
    for frac in fractions:
        for seed in seeds:
            subset = stratified_subsample(train, frac, seed)
            run_cfg = FinetuneConfig(**{**cfg.__dict__, "seed": seed, "embed_dim": params.embed_dim, "widths": params.widths})
            for init, start in (("pretrained", params), ("random", None)):
                res = finetune(start, subset, test, dataset.categories, run_cfg)
                rows.append({"fraction": frac, "seed": seed, "init": init, "overall_accuracy": res.report.overall_accuracy})
    if csv_path is not None:
        write_rows(rows, csv_path, SWEEP_COLUMNS)
    return rows


# modality ablation

ABLATION_CONFIGS = (("P+T", 0.0, 1.0), ("P+I", 1.0, 0.0), ("P+I+T", 1.0, 1.0))


@dataclass
class AblationResult:
    table: list[dict]  # one row per configuration, seed-averaged
    runs: list[dict]  # one row per (configuration, seed)
    checkpoints: dict = field(default_factory=dict)  # (configuration, seed) -> Checkpoint
    traces: dict = field(default_factory=dict)  # (configuration, seed) -> loss trace
    seconds: dict = field(default_factory=dict)  # (configuration, seed) -> pretrain + eval wall time


def modality_ablation(dataset: Dataset, anchors: AnchorSet, cfg: TrainConfig, seeds: Sequence[int] = (0,)) -> AblationResult:
    """Pretrain with text only, image only and both, then zero-shot each on the test split."""
    cats = CategoryAnchors.from_anchor_set(anchors, dataset.categories)
    result = AblationResult([], [])
    for name, beta, theta in ABLATION_CONFIGS:
        for seed in seeds:
            start = time.perf_counter()
            run_cfg = TrainConfig(**{**cfg.__dict__, "beta": beta, "theta": theta, "seed": seed})
            res = pretrain(dataset, anchors, run_cfg)
            rep = zeroshot_eval(res.checkpoint.params, dataset.split("test"), dataset.categories, cats, n_points=cfg.n_points)
            result.runs.append({"modalities": name, "seed": seed, "top1": rep.top1, "top5": rep.top5})
            result.checkpoints[(name, seed)] = res.checkpoint
            result.traces[(name, seed)] = res.trace
            result.seconds[(name, seed)] = time.perf_counter() - start
    runs = result.runs
    for name, _, _ in ABLATION_CONFIGS:
        sub = [r for r in runs if r["modalities"] == name]
        result.table.append(
            {"modalities": name, "top1": float(np.mean([r["top1"] for r in sub])), "top5": float(np.mean([r["top5"] for r in sub]))}
        )
    return result


def write_rows(rows: Sequence[dict], path, columns: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
