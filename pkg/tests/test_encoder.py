import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialign.encoder import (
    CKPT_MAGIC,
    Checkpoint,
    ClassifierHead,
    classify,
    encode,
    encode_batch,
    init_encoder,
    init_head,
    load_checkpoint,
    save_checkpoint,
)
from trialign.errors import BadArchitecture, BadMagic, RaggedBatch, ShapeMismatch, TruncatedFile
from trialign.gradcheck import activation_pattern, encode_batch_f64
from trialign.tensor import Tensor, no_grad


def small(seed=0, dim=16):
    return init_encoder(seed, (8, 16), dim)


def test_init_deterministic():
    a, b = init_encoder(3), init_encoder(3)
    assert all(a.tensors[k].data.tobytes() == b.tensors[k].data.tobytes() for k in a.tensors)


def test_init_seed_sensitive():
    a, b = init_encoder(3), init_encoder(4)
    assert any(a.tensors[k].data.tobytes() != b.tensors[k].data.tobytes() for k in a.weight_names())


def test_init_biases_and_variance():
    pooled: dict[str, list] = {}
    for seed in range(5):
        p = init_encoder(seed)
        for k, t in p.tensors.items():
            if k.endswith(".bias"):
                assert np.all(t.data == np.float32(0.01))
            else:
                pooled.setdefault(k, []).append(t.data.astype(np.float64).ravel())
    for k, chunks in pooled.items():
        w = np.concatenate(chunks)
        fan_in = init_encoder(0).tensors[k].shape[0]
        assert abs(w.var() / (2.0 / fan_in) - 1) < 0.2, k


def test_init_rejects_bad_architecture():
    with pytest.raises(BadArchitecture):
        init_encoder(0, (64, 0, 32))
    with pytest.raises(BadArchitecture):
        init_encoder(0, (), 8)
    with pytest.raises(BadArchitecture):
        init_encoder(0, (8,), 1)


@given(st.integers(0, 2**31), st.integers(1, 64))
@settings(max_examples=25, deadline=None)
def test_encode_permutation_invariant_and_unit(seed, n):
    g = np.random.default_rng(seed)
    params = small(seed % 7)
    pts = g.standard_normal((n, 3)).astype(np.float32)
    with no_grad():
        a = encode(params, pts).data
        b = encode(params, pts[g.permutation(n)]).data
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a.astype(np.float64)) - 1) < 1e-6


def test_encode_pure():
    params = small()
    pts = np.random.default_rng(0).standard_normal((20, 3))
    assert encode(params, pts).data.tobytes() == encode(params, pts.copy()).data.tobytes()


def test_encode_batch_matches_single():
    params = small()
    g = np.random.default_rng(1)
    clouds = g.standard_normal((8, 32, 3)).astype(np.float32)
    batch = encode_batch(params, clouds).data
    single = np.stack([encode(params, c).data for c in clouds])
    assert np.abs(batch - single).max() < 1e-6
    one = encode_batch(params, clouds[:1]).data
    np.testing.assert_array_equal(one[0], single[0])
    dup = encode_batch(params, np.stack([clouds[0], clouds[0]])).data
    assert dup[0].tobytes() == dup[1].tobytes()


def test_encode_batch_ragged():
    with pytest.raises(RaggedBatch):
        encode_batch(small(), [np.zeros((4, 3)), np.zeros((5, 3))])


def test_encode_lipschitz_in_parameters():
    params = small(2)
    pts = np.random.default_rng(2).standard_normal((64, 3))
    base = encode(params, pts).data.astype(np.float64)
    g = np.random.default_rng(3)
    moved = params.copy()
    moved.tensors = {k: Tensor(t.data + g.uniform(-1e-6, 1e-6, t.shape).astype(np.float32)) for k, t in params.tensors.items()}
    assert np.abs(encode(moved, pts).data - base).max() <= 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_encode_jvp_matches_finite_differences(seed):
    """Directional derivative of the embedding with respect to all parameters."""
    params = init_encoder(seed, (8, 16), 16)
    g = np.random.default_rng(100 + seed)
    cloud = g.standard_normal((1, 16, 3))
    base = {k: t.data.astype(np.float64) for k, t in params.tensors.items()}
    direction = {k: g.standard_normal(v.shape) for k, v in base.items()}

    def embed(arrays, track=False):
        p = params.copy()
        p.tensors = {k: Tensor(v, requires_grad=track, dtype=np.float64) for k, v in arrays.items()}
        return p, encode_batch_f64(p, cloud)

    jvp = np.zeros(16)
    for j in range(16):
        p, out = embed(base, track=True)
        out[0, j].backward()
        jvp[j] = sum((p.tensors[k].grad * direction[k]).sum() for k in base)

    ref = activation_pattern(base, cloud, 2)
    h = 1e-3
    while True:
        plus = {k: v + h * direction[k] for k, v in base.items()}
        minus = {k: v - h * direction[k] for k, v in base.items()}
        stable = activation_pattern(plus, cloud, 2) == ref == activation_pattern(minus, cloud, 2)
        if stable or h < 1e-7:
            break
        h /= 10
    with no_grad():
        fd = (embed(plus)[1].data[0] - embed(minus)[1].data[0]) / (2 * h)
    rel = np.abs(jvp - fd).max() / max(np.abs(jvp).max(), np.abs(fd).max())
    assert rel < 1e-3


def test_classify_affine_cases():
    emb = Tensor(np.array([0.6, 0.8, 0.0]))
    head = ClassifierHead(Tensor(np.zeros((3, 4))), Tensor(np.array([1.0, -2.0, 0.5, 3.0])))
    np.testing.assert_array_equal(classify(head, emb).data, [1.0, -2.0, 0.5, 3.0])
    eye = ClassifierHead(Tensor(np.eye(3, 2)), Tensor(np.array([0.1, 0.2])))
    np.testing.assert_allclose(classify(eye, emb).data, [0.7, 1.0], atol=1e-7)


def test_classify_matches_dot_oracle():
    g = np.random.default_rng(5)
    head = init_head(1, 12, 5)
    e = g.standard_normal(12)
    expect = [sum(float(e[d]) * float(head.weight.data[d, c]) for d in range(12)) + float(head.bias.data[c]) for c in range(5)]
    np.testing.assert_allclose(classify(head, Tensor(e)).data, expect, atol=1e-6)


def test_classify_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        classify(init_head(0, 8, 3), Tensor(np.ones(7)))


def test_checkpoint_round_trip_bytes(tmp_path):
    params = small(4)
    ckpt = Checkpoint(params, float(np.log(1 / 0.07)), 100.0, {"note": "x", "n": [1, 2]}, init_head(0, 16, 3))
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, t in params.tensors.items():
        assert back.params.tensors[k].data.tobytes() == t.data.tobytes()
    assert back.metadata == {"note": "x", "n": [1, 2]}
    assert back.head is not None and back.head.num_classes == 3
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".ckpt-")]


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" * 8)
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "ok", Checkpoint(small(), 2.0, 100.0))
    blob = (tmp_path / "ok").read_bytes()
    assert blob.startswith(CKPT_MAGIC)
    (tmp_path / "cut").write_bytes(blob[:-10])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "cut")
