import itertools

import numpy as np
import pytest

from trialign.anchors import (
    DEFAULT_PROMPTS,
    EMB_HEADER_BYTES,
    AnchorSet,
    AnchorTable,
    PromptSet,
    ViewCandidateSet,
    build_prompt_set,
    category_directions,
    image_row_id,
    load_table,
    oracle_anchor_gen,
    save_table,
    select_view,
    stand_in_text_embed,
    text_anchor,
    text_row_id,
)
from trialign.errors import BadMagic, DegenerateEmbedding, DimMismatch, EmptyWord, NoCandidates, TruncatedFile, ValidationError
from trialign.rng import Rng


def random_table(n, dim, seed=0):
    g = np.random.default_rng(seed)
    rows = g.standard_normal((n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return AnchorTable(rows, [{"id": f"r{i}", "kind": "text", "word": "w", "template_index": i} for i in range(n)], "stand-in")


def test_prompt_set_has_64_templates():
    assert len(DEFAULT_PROMPTS.templates) == 64
    assert len(set(DEFAULT_PROMPTS.templates)) == 64
    assert all(t.count("[WORD]") == 1 for t in DEFAULT_PROMPTS.templates)
    assert "a point cloud model of [WORD]" in DEFAULT_PROMPTS.templates
    assert "a picture of [WORD]" in DEFAULT_PROMPTS.templates


def test_build_prompt_set_chair():
    out = build_prompt_set("chair")
    assert len(out) == 64 and all("chair" in s for s in out)
    assert out == build_prompt_set("chair")


def test_picture_template_substitution():
    assert PromptSet(("a picture of [WORD]",) * 64).instantiate("lamp")[0] == "a picture of lamp"


def test_prompt_set_validation():
    with pytest.raises(EmptyWord):
        build_prompt_set("")
    with pytest.raises(ValidationError):
        PromptSet(("x [WORD]",) * 63)
    with pytest.raises(ValidationError):
        PromptSet(("[WORD] [WORD]",) + ("x [WORD]",) * 63)


def test_text_anchor_cases():
    v = np.array([0.6, 0.8])
    np.testing.assert_allclose(text_anchor([v]), v, atol=1e-7)
    np.testing.assert_allclose(text_anchor([[1.0, 0.0], [0.0, 1.0]]), [0.70710678, 0.70710678], atol=1e-7)
    with pytest.raises(DegenerateEmbedding):
        text_anchor([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(ValidationError):
        text_anchor([[2.0, 0.0]])


def test_text_anchor_order_and_replication_invariant():
    rows = random_table(64, 32).rows
    base = text_anchor(rows)
    g = np.random.default_rng(9)
    for _ in range(5):
        assert text_anchor(rows[g.permutation(64)]).tobytes() == base.tobytes()
    np.testing.assert_allclose(text_anchor(np.concatenate([rows, rows])), base, atol=1e-7)


def test_select_view_cases():
    one = ViewCandidateSet("o", ["a"], partial=True)
    assert select_view(one, Rng(0, 0)) == "a"
    full = ViewCandidateSet("o", [f"v{i}" for i in range(60)])
    assert select_view(full, Rng(3, 9)) == select_view(full, Rng(3, 9))
    with pytest.raises(NoCandidates):
        select_view(ViewCandidateSet("o", [], partial=True), Rng(0, 0))
    with pytest.raises(ValidationError):
        ViewCandidateSet("o", ["a"] * 59)


def test_select_view_uniform():
    full = ViewCandidateSet("o", [f"v{i}" for i in range(60)])
    counts = {i: 0 for i in full.ids}
    for s in range(6000):
        counts[select_view(full, Rng.named(0, "view-test", s))] += 1
    assert all(60 <= c <= 140 for c in counts.values())


def test_table_round_trip_bytes(tmp_path):
    t = random_table(100, 512)
    save_table(t, tmp_path / "t.emb")
    size = (tmp_path / "t.emb").stat().st_size
    assert size == EMB_HEADER_BYTES + 100 * 512 * 4
    back = load_table(tmp_path / "t.emb")
    save_table(back, tmp_path / "u.emb")
    assert (tmp_path / "t.emb").read_bytes() == (tmp_path / "u.emb").read_bytes()
    assert (tmp_path / "t.emb.json").read_bytes() == (tmp_path / "u.emb.json").read_bytes()
    assert back.provenance == "stand-in"


def test_table_errors(tmp_path):
    save_table(random_table(4, 8), tmp_path / "t.emb")
    blob = (tmp_path / "t.emb").read_bytes()
    (tmp_path / "m.emb").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(BadMagic):
        load_table(tmp_path / "m.emb")
    (tmp_path / "c.emb").write_bytes(blob[:-4])
    with pytest.raises(TruncatedFile):
        load_table(tmp_path / "c.emb")
    with pytest.raises(DimMismatch):
        load_table(tmp_path / "t.emb", expected_dim=16)


def test_table_renormalizes_with_warning():
    t = AnchorTable(np.array([[3.0, 4.0], [0.0, 1.0]]), [{"id": "a"}, {"id": "b"}])
    np.testing.assert_allclose(t.rows[0], [0.6, 0.8], atol=1e-7)
    assert t.warnings


def test_table_is_frozen():
    t = random_table(3, 4)
    with pytest.raises(ValueError):
        t.rows[0, 0] = 1.0


def test_stand_in_text_embed():
    a = stand_in_text_embed("a photo of a cube", 512, 0)
    assert a.tobytes() == stand_in_text_embed("a photo of a cube", 512, 0).tobytes()
    assert abs(np.linalg.norm(a.astype(np.float64)) - 1) < 1e-6
    with pytest.raises(EmptyWord):
        stand_in_text_embed("", 8, 0)


def test_stand_in_text_near_orthogonal():
    m = np.stack([stand_in_text_embed(f"string number {i}", 512, 0) for i in range(100)]).astype(np.float64)
    c = m @ m.T
    np.fill_diagonal(c, 0)
    assert np.abs(c).max() < 0.25


def test_oracle_zero_noise_rows_equal_direction():
    text, image = oracle_anchor_gen(3, 8, 5, 0.0, 0.0)
    dirs = category_directions(3, 8, 5)
    for c, name in enumerate(["class_0", "class_1", "class_2"]):
        for t in range(64):
            assert text.row(text_row_id(name, t)).tobytes() == dirs[c].astype(np.float32).tobytes()
        for v in range(30):
            assert image.row(image_row_id(name, "depth", v)).tobytes() == dirs[c].astype(np.float32).tobytes()


def test_oracle_direction_cosines():
    for seed in range(5):
        d = category_directions(8, 32, seed)
        c = np.abs(d @ d.T - np.eye(8))
        assert c.max() < 0.6


def test_oracle_within_beats_cross():
    names = [f"c{i}" for i in range(8)]
    text, image = oracle_anchor_gen(names, 32, 1, 0.1, 0.1)
    t = {n: np.stack([text.row(text_row_id(n, i)) for i in range(64)]) for n in names}
    im = {n: np.stack([image.row(image_row_id(n, "depth", v)) for v in range(30)]) for n in names}
    within = np.mean([(t[n] @ im[n].T).mean() for n in names])
    cross = np.mean([(t[a] @ im[b].T).mean() for a, b in itertools.permutations(names, 2)])
    assert within > cross


def test_anchor_set_views_duplicate_depth_into_rgb(tiny_anchors, tiny_dataset):
    rec = tiny_dataset.records[0]
    cands = tiny_anchors.view_candidates(rec.id)
    assert len(cands.ids) == 60 and not cands.partial
    assert cands.ids[:30] == cands.ids[30:]


def test_anchor_set_save_load(tmp_path, tiny_anchors):
    tiny_anchors.save(tmp_path)
    back = AnchorSet.load(tmp_path)
    assert back.fingerprint() == tiny_anchors.fingerprint()
