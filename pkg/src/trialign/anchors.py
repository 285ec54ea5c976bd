"""Frozen text and image embedding anchors.

Covers prompt templating and prompt-ensemble averaging, view-candidate
selection, the ``ULIPEMB1`` table format with its JSON sidecar, and the two
offline embedding regimes: ``stand-in`` (hash-seeded text vectors and
projected depth maps, spaces unrelated) and ``oracle`` (text and image rows
built around shared per-category directions, so the spaces are aligned).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DegenerateEmbedding,
    DimMismatch,
    EmptyWord,
    MissingModality,
    NoCandidates,
    TruncatedFile,
    ValidationError,
)
from .rng import Rng

log = logging.getLogger(__name__)

PLACEHOLDER = "[WORD]"
EMB_MAGIC = b"ULIPEMB1"
EMB_HEADER_BYTES = 16
UNIT_TOL = 1e-5
N_VIEWS = 30


def _load_templates() -> tuple[str, ...]:
    text = resources.files("trialign.data").joinpath("prompts.txt").read_text(encoding="utf-8")
    return tuple(line for line in text.splitlines() if line.strip())


@dataclass(frozen=True)
class PromptSet:
    templates: tuple[str, ...]

    def __post_init__(self):
        if len(self.templates) != 64:
            raise ValidationError(f"a prompt set has exactly 64 templates, got {len(self.templates)}")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValidationError(f"template {t!r} must contain {PLACEHOLDER} exactly once")

    def instantiate(self, word: str) -> list[str]:
        if not word or not word.strip():
            raise EmptyWord("prompt word must be non-empty")
        return [t.replace(PLACEHOLDER, word) for t in self.templates]


DEFAULT_PROMPTS = PromptSet(_load_templates())


def build_prompt_set(word: str, prompts: PromptSet = DEFAULT_PROMPTS) -> list[str]:
    return prompts.instantiate(word)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateEmbedding("zero-norm embedding")
    return m / n


def text_anchor(per_prompt: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Average the per-prompt embeddings of one word and renormalize."""
    m = np.asarray(per_prompt, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValidationError("text_anchor needs a non-empty (n, D) set of embeddings")
    norms = np.linalg.norm(m, axis=1)
    if np.any(np.abs(norms - 1) > 1e-3):
        raise ValidationError("per-prompt embeddings must be unit norm")
    # sorting the rows makes the float64 sum independent of input order
    m = m[np.lexsort(m.T[::-1])]
    mean = m.mean(axis=0)
    if np.linalg.norm(mean) <= 1e-12:
        raise DegenerateEmbedding("prompt embeddings cancel out")
    return (mean / np.linalg.norm(mean)).astype(np.float32)


@dataclass
class ViewCandidateSet:
    object_id: str
    ids: list[str]
    partial: bool = False

    def __post_init__(self):
        if len(self.ids) != 2 * N_VIEWS and not self.partial:
            raise ValidationError(f"{self.object_id}: expected {2 * N_VIEWS} view candidates, got {len(self.ids)}")


def select_view(candidates: ViewCandidateSet, rng: Rng) -> str:
    if not candidates.ids:
        raise NoCandidates(f"object {candidates.object_id} has no view candidates")
    return candidates.ids[int(rng.gen.integers(0, len(candidates.ids)))]


# tables

@dataclass
class AnchorTable:
    rows: np.ndarray
    meta: list[dict]
    provenance: str = "ingested"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise DimMismatch("anchor rows must form a 2-D array")
        if len(self.meta) != rows.shape[0]:
            raise DimMismatch(f"{len(self.meta)} metadata entries for {rows.shape[0]} rows")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        bad = np.abs(norms - 1) > UNIT_TOL
        if bad.any():
            msg = f"renormalized {int(bad.sum())} non-unit rows"
            log.warning(msg)
            self.warnings.append(msg)
            rows[bad] = (rows[bad] / norms[bad, None]).astype(np.float32)
        rows.flags.writeable = False
        self.rows = rows
        ids = [m["id"] for m in self.meta]
        if len(set(ids)) != len(ids):
            raise ValidationError("anchor row ids must be unique")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]

    @cached_property
    def _index(self) -> dict[str, int]:
        return {m["id"]: i for i, m in enumerate(self.meta)}

    def row(self, row_id: str) -> np.ndarray:
        try:
            return self.rows[self._index[row_id]]
        except KeyError:
            raise MissingModality(f"no anchor row {row_id!r}") from None

    def __contains__(self, row_id: str) -> bool:
        return row_id in self._index

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.rows.tobytes())
        h.update(json.dumps(self.meta, sort_keys=True).encode())
        return h.hexdigest()


def text_row_id(word: str, template_index: int) -> str:
    return f"text/{word}/{template_index}"


def image_row_id(object_id: str, slot: str, view_index: int) -> str:
    return f"image/{object_id}/{slot}/{view_index}"


def save_table(table: AnchorTable, path):
    """Binary rows to ``path``, row metadata to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", len(table), table.dim))
        fh.write(table.rows.astype("<f4").tobytes())
    sidecar = {"provenance": table.provenance, "rows": table.meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_table(path, expected_dim: int | None = None) -> AnchorTable:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != EMB_MAGIC:
        raise BadMagic(f"{path}: not an embedding table")
    if len(blob) < EMB_HEADER_BYTES:
        raise TruncatedFile(f"{path}: header truncated")
    n, dim = struct.unpack_from("<II", blob, 8)
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatch(f"{path}: dim {dim}, expected {expected_dim}")
    need = EMB_HEADER_BYTES + 4 * n * dim
    if len(blob) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=EMB_HEADER_BYTES).reshape(n, dim)
    side = Path(str(path) + ".json")
    if side.exists():
        doc = json.loads(side.read_text())
        meta, provenance = doc["rows"], doc.get("provenance", "ingested")
    else:
        meta, provenance = [{"id": str(i)} for i in range(n)], "ingested"
    if len(meta) != n:
        raise DimMismatch(f"{side}: {len(meta)} metadata rows for {n} table rows")
    return AnchorTable(rows.astype(np.float32), meta, provenance)


# offline embedders

def stand_in_text_embed(text: str, dim: int, seed: int) -> np.ndarray:
    """Hash-seeded Gaussian unit vector; equal strings give equal vectors."""
    if not text:
        raise EmptyWord("text must be non-empty")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=str(int(seed)).encode()).digest()
    g = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))
    v = g.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def _jitter(direction: np.ndarray, sigma: float, rng: Rng, count: int) -> np.ndarray:
    # per-component std sigma/sqrt(D): the noise vector has expected norm ~sigma
    d = direction.shape[0]
    if sigma <= 0:
        return np.repeat(direction[None, :], count, axis=0)
    noise = rng.gen.normal(0.0, sigma / np.sqrt(d), size=(count, d))
    return _normalize_rows(direction[None, :] + noise)


def category_directions(k: int, dim: int, seed: int) -> np.ndarray:
    """One unit direction per category; orthonormal whenever dim >= k."""
    g = Rng.named(seed, "oracle-directions").gen
    m = g.standard_normal((dim, k))
    if dim >= k:
        q, r = np.linalg.qr(m)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return _normalize_rows(m.T)


def oracle_anchor_gen(
    categories: int | Sequence[str],
    dim: int,
    seed: int,
    image_noise: float,
    prompt_jitter: float,
    words: dict[str, Sequence[str]] | None = None,
    objects: Iterable[tuple[str, int]] | None = None,
    views: int = N_VIEWS,
    prompts: PromptSet = DEFAULT_PROMPTS,
) -> tuple[AnchorTable, AnchorTable]:
    """Pre-aligned synthetic text and image tables.

    Every word of category c gets one text row per template (c's direction
    plus prompt jitter); every object of category c gets one image row per
    view (c's direction plus image noise). Without ``objects`` each
    category stands in as its own object.
    """
    names = [f"class_{i}" for i in range(categories)] if isinstance(categories, int) else list(categories)
    if len(names) < 2:
        raise ValidationError("oracle anchors need at least two categories")
    dirs = category_directions(len(names), dim, seed)
    words = words or {n: [n] for n in names}
    t_rows, t_meta = [], []
    for c, name in enumerate(names):
        for word in dict.fromkeys([name, *words.get(name, [])]):
            rows = _jitter(dirs[c], prompt_jitter, Rng.named(seed, "oracle-text", word), len(prompts.templates))
            t_rows.append(rows)
            t_meta += [
                {"id": text_row_id(word, t), "kind": "text", "word": word, "template_index": t, "category": name}
                for t in range(len(prompts.templates))
            ]
    objects = list(objects) if objects is not None else [(n, i) for i, n in enumerate(names)]
    i_rows, i_meta = [], []
    for oid, label in objects:
        i_rows.append(_jitter(dirs[label], image_noise, Rng.named(seed, "oracle-image", oid), views))
        i_meta += [
            {"id": image_row_id(oid, "depth", v), "kind": "image", "object_id": oid, "view_index": v, "slot": "depth"}
            for v in range(views)
        ]
    text = AnchorTable(np.concatenate(t_rows), t_meta, "oracle")
    image = AnchorTable(np.concatenate(i_rows), i_meta, "oracle")
    return text, image


def stand_in_text_table(words: Iterable[str], dim: int, seed: int, prompts: PromptSet = DEFAULT_PROMPTS) -> AnchorTable:
    rows, meta = [], []
    for word in dict.fromkeys(words):
        for t, sentence in enumerate(prompts.instantiate(word)):
            rows.append(stand_in_text_embed(sentence, dim, seed))
            meta.append({"id": text_row_id(word, t), "kind": "text", "word": word, "template_index": t})
    return AnchorTable(np.array(rows), meta, "stand-in")


def stand_in_image_table(records, dim: int, seed: int, res: int = 64, ring=None) -> AnchorTable:
    """Render every record from every ring view and embed the depth maps."""
    from .pointcloud import normalize_unit_sphere
    from .renderer import CameraRing, render_depth, stand_in_image_embed

    ring = ring or CameraRing()
    rows, meta = [], []
    for rec in records:
        cloud = normalize_unit_sphere(rec.cloud)
        for v in range(ring.view_count):
            dm = render_depth(cloud, ring, v, res)
            rows.append(stand_in_image_embed(dm, dim, seed, expected_res=res))
            meta.append(
                {"id": image_row_id(rec.id, "depth", v), "kind": "image", "object_id": rec.id, "view_index": v, "slot": "depth"}
            )
    return AnchorTable(np.array(rows), meta, "stand-in")


# the pair of frozen tables used in training and evaluation

@dataclass
class AnchorSet:
    text: AnchorTable
    image: AnchorTable
    prompts: PromptSet = DEFAULT_PROMPTS
    _text_cache: dict = field(default_factory=dict, repr=False)
    _views: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.text.dim != self.image.dim:
            raise DimMismatch(f"text dim {self.text.dim} != image dim {self.image.dim}")
        for i, m in enumerate(self.image.meta):
            if m.get("kind", "image") == "image" and "object_id" in m:
                self._views.setdefault(m["object_id"], {}).setdefault(m.get("slot", "depth"), []).append(
                    (int(m.get("view_index", i)), m["id"])
                )

    @property
    def dim(self) -> int:
        return self.text.dim

    def text_rows(self, word: str) -> np.ndarray:
        ids = [text_row_id(word, t) for t in range(len(self.prompts.templates))]
        missing = [i for i in ids if i not in self.text]
        if missing:
            raise MissingModality(f"no text rows for word {word!r}")
        return np.stack([self.text.row(i) for i in ids])

    def has_word(self, word: str) -> bool:
        return text_row_id(word, 0) in self.text

    def text_anchor_for(self, word: str) -> np.ndarray:
        if word not in self._text_cache:
            self._text_cache[word] = text_anchor(self.text_rows(word))
        return self._text_cache[word]

    def view_candidates(self, object_id: str) -> ViewCandidateSet:
        """RGB and depth slots; depth embeddings fill an absent RGB bank."""
        slots = self._views.get(object_id)
        if not slots:
            raise MissingModality(f"no image rows for object {object_id!r}")
        depth = [i for _, i in sorted(slots.get("depth", []))]
        rgb = [i for _, i in sorted(slots.get("rgb", []))]
        if not depth:
            depth = rgb
        if not rgb:
            rgb = depth
        ids = rgb + depth
        return ViewCandidateSet(object_id, ids, partial=len(ids) != 2 * N_VIEWS)

    def save(self, directory):
        directory = Path(directory)
        save_table(self.text, directory / "text.emb")
        save_table(self.image, directory / "image.emb")

    @classmethod
    def load(cls, directory) -> "AnchorSet":
        directory = Path(directory)
        return cls(load_table(directory / "text.emb"), load_table(directory / "image.emb"))

    def fingerprint(self) -> str:
        return self.text.fingerprint() + self.image.fingerprint()
