"""Dataset manifests and the synthetic shape benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .pointcloud import SHAPES, PointCloud, gen_shape, read_cloud, write_cloud
from .rng import Rng

# metadata words per synthetic category; the first word is the category name
SHAPE_WORDS = {
    "sphere": ["sphere", "ball", "globe"],
    "cube": ["cube", "box", "block"],
    "cylinder": ["cylinder", "tube", "can"],
    "cone": ["cone", "funnel"],
    "torus": ["torus", "ring", "donut"],
    "plane": ["plane", "sheet", "board"],
    "pyramid": ["pyramid", "spire"],
    "helix": ["helix", "spiral", "coil"],
}


@dataclass
class Record:
    id: str
    cloud: PointCloud
    label: int
    words: list[str]
    split: str = "train"
    pc_path: str | None = None


@dataclass
class Dataset:
    categories: list[str]
    records: list[Record] = field(default_factory=list)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def words(self) -> list[str]:
        seen = dict.fromkeys(self.categories)
        for r in self.records:
            seen.update(dict.fromkeys(r.words))
        return list(seen)


def load_manifest(path) -> Dataset:
    """Read a manifest and every point cloud it points to.

    The file is either ``{"categories": [...], "records": [...]}`` or a bare
    record list, in which case labels must be category names.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    if isinstance(doc, list):
        raw, categories = doc, None
    else:
        raw, categories = doc["records"], doc.get("categories")
    if categories is None:
        categories = sorted({str(r["label"]) for r in raw})
    records = []
    for r in raw:
        label = r["label"]
        if isinstance(label, str):
            if label not in categories:
                raise ValidationError(f"record {r['id']}: unknown label {label!r}")
            label = categories.index(label)
        pc_path = Path(r["pc_path"])
        if not pc_path.is_absolute():
            pc_path = path.parent / pc_path
        split = r.get("split", "train")
        if split not in ("train", "test"):
            raise ValidationError(f"record {r['id']}: split must be train or test")
        records.append(
            Record(
                id=str(r["id"]),
                cloud=read_cloud(pc_path, int(label)),
                label=int(label),
                words=list(r.get("words") or [categories[label]]),
                split=split,
                pc_path=str(r["pc_path"]),
            )
        )
    return Dataset(list(categories), records)


def save_manifest(ds: Dataset, path, cloud_dir: str = "clouds"):
    """Write every cloud to ``<manifest dir>/<cloud_dir>/<id>.pc`` plus the manifest."""
    path = Path(path)
    (path.parent / cloud_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for r in ds.records:
        rel = r.pc_path or f"{cloud_dir}/{r.id}.pc"
        write_cloud(path.parent / rel, r.cloud)
        r.pc_path = rel
        rows.append({"id": r.id, "pc_path": rel, "label": r.label, "words": r.words, "split": r.split})
    path.write_text(json.dumps({"categories": ds.categories, "records": rows}, indent=1))


def make_synthetic(
    categories: int = 8,
    per_class: int = 40,
    test_per_class: int = 10,
    n_points: int = 1024,
    noise_sigma: float = 0.01,
    seed: int = 0,
) -> Dataset:
    """The desk-scale benchmark: ``categories`` shapes, train and test objects per shape."""
    if not 2 <= categories <= len(SHAPES):
        raise ValidationError(f"categories must be in [2, {len(SHAPES)}]")
    names = list(SHAPES[:categories])
    records = []
    for label, name in enumerate(names):
        for split, count in (("train", per_class), ("test", test_per_class)):
            for i in range(count):
                oid = f"{name}_{split}_{i:04d}"
                pc = gen_shape(name, n_points, noise_sigma, Rng.named(seed, "shape", oid))
                records.append(Record(oid, pc, label, list(SHAPE_WORDS[name]), split))
    return Dataset(names, records)
