"""Acceptance criteria, one test each. Every test records a single
pass/fail line, printed together in the terminal summary."""

import json
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, BENCH_SEEDS
from oracles import brute_rank, infonce_loops, unit_rows, zbuffer_brute

from trialign import gradcheck
from trialign.anchors import load_table, save_table
from trialign.cli import dispatch
from trialign.encoder import encode_batch, init_encoder, load_checkpoint, save_checkpoint
from trialign.evaluate import CategoryAnchors, FinetuneConfig, finetune, retrieve, stratified_subsample, zeroshot_eval
from trialign.pointcloud import SHAPES, PointCloud, gen_shape, read_cloud, rotate_z, write_cloud
from trialign.renderer import CameraRing, export_depth, import_depth, render_depth
from trialign.rng import Rng
from trialign.tensor import Tensor, no_grad
from trialign.train import Temperature, contrastive_loss, read_trace

pytestmark = pytest.mark.acceptance


def verdict(n: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def test_c01_gradient_suite():
    start = time.perf_counter()
    worst = gradcheck.run_suite(seeds=range(10), h=1e-3)
    secs = time.perf_counter() - start
    top = max(worst.values())
    name = max(worst, key=worst.get)
    verdict(1, "gradients match finite differences", top < 1e-3 and secs < 30,
            f"max rel err {top:.2e} in {name}, {len(worst)} cases x 10 seeds, {secs:.1f}s")


def test_c02_loss_oracle():
    g = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, d = int(g.integers(1, 9)), int(g.integers(1, 33))
        a, b = unit_rows(g, n, d), unit_rows(g, n, d)
        t = Temperature(float(g.uniform(1.0, 100.0)), dtype=np.float64)
        got = contrastive_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), t).item()
        worst = max(worst, abs(got - infonce_loops(a, b, t.inv_tau)))
    single = contrastive_loss(unit_rows(g, 1, 7), unit_rows(g, 1, 7), Temperature()).item()
    verdict(2, "contrastive loss equals double-loop oracle", worst < 1e-6 and single == 0.0,
            f"max abs diff {worst:.1e} over 100 cases, N=1 loss {single}")


@pytest.mark.slow
def test_c03_frozen_anchors(bench_ablation, bench_anchor_snapshot, bench_loaded_anchors):
    root, before = bench_anchor_snapshot
    after = {p.name: p.read_bytes() for p in sorted(root.iterdir())}
    files_same = after == before
    rows_same = (
        bench_loaded_anchors.text.rows.tobytes() == load_table(root / "text.emb").rows.tobytes()
        and bench_loaded_anchors.image.rows.tobytes() == load_table(root / "image.emb").rows.tobytes()
    )
    fp_same = all(c.metadata["anchor_fingerprint"] == bench_loaded_anchors.fingerprint() for c in bench_ablation.checkpoints.values())
    verdict(3, "anchors byte-identical after pre-training", files_same and rows_same and fp_same,
            f"{len(before)} files, {len(bench_ablation.checkpoints)} full runs checked")


def test_c04_permutation_invariance():
    mismatches = 0
    for p in range(5):
        params = init_encoder(100 + p, embed_dim=32)
        g = Rng.named(p, "accept-perm").gen
        clouds = g.normal(size=(100, 256, 3))
        shuffled = np.stack([c[g.permutation(256)] for c in clouds])
        with no_grad():
            a, b = encode_batch(params, clouds).data, encode_batch(params, shuffled).data
        mismatches += int(np.sum(np.any(a != b, axis=1)))
    verdict(4, "encoder is permutation invariant (bitwise)", mismatches == 0, f"{mismatches} of 500 embeddings differ")


@pytest.mark.slow
def test_c05_zeroshot_convergence(bench_ablation, bench_dataset, bench_loaded_anchors):
    run = next(r for r in bench_ablation.runs if r["modalities"] == "P+I+T" and r["seed"] == 0)
    secs = bench_ablation.seconds[("P+I+T", 0)]
    cats = CategoryAnchors.from_anchor_set(bench_loaded_anchors, bench_dataset.categories)
    untrained = zeroshot_eval(init_encoder(0, embed_dim=32), bench_dataset.split("test"), bench_dataset.categories, cats, n_points=256).top1
    ok = run["top1"] >= 90 and 5 <= untrained <= 25 and secs < 300
    verdict(5, "oracle benchmark zero-shot convergence", ok,
            f"trained top1 {run['top1']:.2f}%, untrained {untrained:.2f}%, run {secs:.0f}s")


@pytest.mark.slow
def test_c06_modality_ablation(bench_ablation):
    top1 = {r["modalities"]: r["top1"] for r in bench_ablation.table}
    ok = top1["P+I+T"] >= max(top1["P+T"], top1["P+I"]) - 2
    verdict(6, "three modalities at least as good as two", ok,
            ", ".join(f"{k} {v:.2f}" for k, v in top1.items()) + f" over seeds {list(BENCH_SEEDS)}")


@pytest.mark.slow
def test_c07_finetune_benefit(bench_ablation, bench_dataset):
    train, test = bench_dataset.split("train"), bench_dataset.split("test")
    gaps = []
    for seed in BENCH_SEEDS:
        ckpt = bench_ablation.checkpoints[("P+I+T", seed)]
        subset = stratified_subsample(train, 0.1, seed)
        cfg = FinetuneConfig(seed=seed, embed_dim=32, widths=ckpt.params.widths)
        pre = finetune(ckpt.params, subset, test, bench_dataset.categories, cfg).report.overall_accuracy
        rnd = finetune(None, subset, test, bench_dataset.categories, cfg).report.overall_accuracy
        gaps.append(pre - rnd)
    gap = float(np.mean(gaps))
    verdict(7, "pre-trained init beats random at 10% data", gap >= 5,
            f"mean OA gap {gap:.2f} points, per seed {[round(x, 2) for x in gaps]}")


def test_c08_renderer_equivariance():
    ring = CameraRing()
    worst = 1.0
    for i in range(20):
        pc = gen_shape(SHAPES[i % len(SHAPES)], 1024, 0.01, Rng.named(i, "accept-render"))
        turned = pc.with_points(rotate_z(pc.points, np.radians(-12.0)))
        v = i % 30
        a, b = render_depth(turned, ring, v, 64), render_depth(pc, ring, (v + 1) % 30, 64)
        both = a.foreground & b.foreground
        close = both & (np.abs(np.where(both, a.depth, 0) - np.where(both, b.depth, 0)) <= 1e-4)
        worst = min(worst, close.sum() / (a.foreground | b.foreground).sum())
    g = np.random.default_rng(8)
    zbuf_ok = True
    for view in range(6):
        pts = g.uniform(-0.4, 0.4, (80, 3))
        pts[40:] = pts[:40] + g.normal(0, 1e-3, (40, 3))
        dm = render_depth(PointCloud(pts), ring, view * 5, 16)
        ref = zbuffer_brute(pts, view * 5, 16)
        zbuf_ok &= bool(np.array_equal(np.isinf(ref), ~dm.foreground))
        zbuf_ok &= bool(np.allclose(dm.depth[dm.foreground], ref[~np.isinf(ref)], atol=1e-6, rtol=0))
    verdict(8, "renderer view equivariance and z-buffer minimality", worst >= 0.99 and zbuf_ok,
            f"worst agreement {100 * worst:.2f}% over 20 clouds, brute-force z-buffer {'matches' if zbuf_ok else 'differs'}")


def test_c09_retrieval_soundness():
    g = np.random.default_rng(9)
    ids = [f"obj_{i:04d}" for i in g.permutation(500)]
    gallery = dict(zip(ids, g.normal(size=(500, 32))))
    self_hits = sum(retrieve(gallery[i], gallery, 1)[0][0] == i for i in ids)
    brute_ok = 0
    for q in g.normal(size=(50, 32)):
        scores = [float(gallery[i] @ q / (np.linalg.norm(gallery[i]) * np.linalg.norm(q))) for i in ids]
        brute_ok += [i for i, _ in retrieve(q, gallery, 500)] == brute_rank(scores, ids)
    verdict(9, "retrieval self-match and brute-force ranking", self_hits == 500 and brute_ok == 50,
            f"self rank-1 {self_hits}/500, rankings equal {brute_ok}/50")


def test_c10_cli_determinism(tmp_path):
    data, anchors = tmp_path / "data", tmp_path / "anchors"
    assert dispatch(["gen-synthetic", "--out", str(data), "--categories", "4", "--per-class", "8",
                     "--test-per-class", "4", "--n-points", "256", "--seed", "11"]) == 0
    assert dispatch(["embed-anchors", "--out", str(anchors), "--data", str(data / "manifest.json"), "--dim", "16", "--seed", "11"]) == 0
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"train.epochs": 5, "train.batch_size": 8, "train.n_points": 128, "train.widths": [16, 32]}))
    traces, metrics = [], []
    for k in range(2):
        pre, zs = tmp_path / f"pre{k}", tmp_path / f"zs{k}"
        assert dispatch(["pretrain", "--out", str(pre), "--config", str(conf), "--data", str(data / "manifest.json"),
                         "--anchors", str(anchors), "--seed", "11"]) == 0
        assert dispatch(["zeroshot", "--out", str(zs), "--checkpoint", str(pre / "checkpoint.ckpt"),
                         "--data", str(data / "manifest.json"), "--seed", "11"]) == 0
        traces.append(read_trace(pre / "trace.csv"))
        metrics.append((zs / "metrics.json").read_bytes())
    same_len = len(traces[0]) == len(traces[1]) > 0
    diff = max(abs(a[c] - b[c]) for a, b in zip(*traces) for c in ("L_IP", "L_PS", "L_IS", "L_final", "inv_temperature"))
    verdict(10, "identical CLI runs give identical traces and metrics", same_len and diff <= 1e-6 and metrics[0] == metrics[1],
            f"{len(traces[0])} iterations, max trace diff {diff:.1e}, metric JSON {'identical' if metrics[0] == metrics[1] else 'differs'}")


def test_c11_format_round_trips(tmp_path, tiny_anchors):
    pc = gen_shape("torus", 777, 0.01, Rng(4, 0))
    write_cloud(tmp_path / "a.pc", pc)
    write_cloud(tmp_path / "b.pc", read_cloud(tmp_path / "a.pc"))
    cloud_ok = (tmp_path / "a.pc").read_bytes() == (tmp_path / "b.pc").read_bytes()

    save_table(tiny_anchors.image, tmp_path / "t.emb")
    save_table(load_table(tmp_path / "t.emb"), tmp_path / "u.emb")
    table_ok = all((tmp_path / f"t.emb{s}").read_bytes() == (tmp_path / f"u.emb{s}").read_bytes() for s in ("", ".json"))

    from trialign.encoder import Checkpoint, init_head

    ckpt = Checkpoint(init_encoder(3, (16, 32), 16), 2.5, 100.0, {"note": "x"}, init_head(3, 16, 5))
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    dm = render_depth(gen_shape("cone", 2048, 0.0, Rng(4, 1)), CameraRing(), 7, 64)
    back, near, far = import_depth(export_depth(dm, tmp_path / "d.pgm"))
    fg = dm.foreground
    err = float(np.abs(back.depth[fg].astype(np.float64) - dm.depth[fg]).max())
    # half a quantization step, plus the float32 rounding of the decoded depth
    bound = (far - near) / 65534 / 2 + float(np.spacing(np.float32(far)))
    pgm_ok = bool(np.array_equal(back.foreground, fg)) and err <= bound
    verdict(11, "file formats round-trip", cloud_ok and table_ok and ckpt_ok and pgm_ok,
            f"cloud {cloud_ok}, table {table_ok}, checkpoint {ckpt_ok}, depth err {err:.2e} <= {bound:.2e}")
