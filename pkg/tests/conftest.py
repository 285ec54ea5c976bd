import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from trialign.anchors import AnchorSet, oracle_anchor_gen
from trialign.dataset import make_synthetic


def oracle_words(ds):
    words = {c: [c] for c in ds.categories}
    for r in ds.records:
        for w in r.words:
            if w not in words[ds.categories[r.label]]:
                words[ds.categories[r.label]].append(w)
    return words


def oracle_anchors(ds, dim, seed=0, image_noise=0.2, prompt_jitter=0.3):
    text, image = oracle_anchor_gen(
        ds.categories, dim, seed, image_noise, prompt_jitter, words=oracle_words(ds), objects=[(r.id, r.label) for r in ds.records]
    )
    return AnchorSet(text, image)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic(categories=4, per_class=6, test_per_class=3, n_points=128, seed=3)


@pytest.fixture(scope="session")
def tiny_anchors(tiny_dataset):
    return oracle_anchors(tiny_dataset, dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# reference synthetic benchmark: 8 shapes, 40 train + 10 test objects each, D=32

BENCH_SEEDS = (0, 1, 2)


def bench_config(seed=0, **kw):
    from trialign.train import TrainConfig

    return TrainConfig(**{"batch_size": 32, "epochs": 50, "n_points": 256, "embed_dim": 32, "seed": seed, **kw})


@pytest.fixture(scope="session")
def bench_dataset():
    return make_synthetic(categories=8, per_class=40, test_per_class=10, n_points=1024, noise_sigma=0.01, seed=0)


@pytest.fixture(scope="session")
def bench_anchors(bench_dataset):
    return oracle_anchors(bench_dataset, dim=32, seed=0, image_noise=0.2, prompt_jitter=0.3)


@pytest.fixture(scope="session")
def bench_anchor_snapshot(bench_anchors, tmp_path_factory):
    """The benchmark anchors saved to disk, with their bytes before any training."""
    root = tmp_path_factory.mktemp("bench-anchors")
    bench_anchors.save(root)
    files = {p.name: p.read_bytes() for p in sorted(root.iterdir())}
    return root, files


@pytest.fixture(scope="session")
def bench_loaded_anchors(bench_anchor_snapshot):
    return AnchorSet.load(bench_anchor_snapshot[0])


@pytest.fixture(scope="session")
def bench_ablation(bench_dataset, bench_loaded_anchors):
    """All three modality configurations over three seeds; shared by several tests."""
    from trialign.evaluate import modality_ablation

    return modality_ablation(bench_dataset, bench_loaded_anchors, bench_config(), seeds=BENCH_SEEDS)


# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
