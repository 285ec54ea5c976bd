"""Central finite-difference checks of the analytic gradients.

All checks run in float64: at h = 1e-3 the float32 rounding noise of a
difference quotient would already exceed the 1e-3 tolerance.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .encoder import init_encoder
from .rng import Rng
from .tensor import Tensor, no_grad
from .train import LossCoefficients, Temperature, contrastive_loss, final_loss

Fn = Callable[[dict[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-abs difference scaled by the larger max-abs gradient."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def analytic_grads(fn: Fn, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    fn(leaves).backward()
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}


def numeric_grads(
    fn: Fn,
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-3,
    signature: Callable[[dict], bytes] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences. With ``signature`` (an activation-pattern
    fingerprint), a coordinate whose stencil crosses a kink is re-measured
    with the step shrunk by 10x until the pattern is stable."""
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def f(arrays) -> float:
        with no_grad():
            return fn({k: Tensor(a, dtype=np.float64) for k, a in arrays.items()}).item()

    ref = signature(base) if signature else None
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                fp, sp = f(base), signature(base) if signature else None
                flat[i] = orig - step
                fm, sm = f(base), signature(base) if signature else None
                flat[i] = orig
                if ref is None or (sp == ref and sm == ref) or step < 1e-8:
                    break
                step /= 10
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def check(fn: Fn, inputs: Mapping[str, np.ndarray], h: float = 1e-3, signature=None) -> dict[str, float]:
    """Relative error between backward() and finite differences, per input."""
    a = analytic_grads(fn, inputs)
    n = numeric_grads(fn, inputs, h, signature)
    return {k: relative_error(a[k], n[k]) for k in inputs}


# loss cases

def _temperature_from(inputs: dict[str, Tensor]) -> Temperature:
    temp = Temperature(dtype=np.float64)
    temp.s = inputs["log_inv_tau"]
    return temp


def contrastive_case(seed: int, n: int = 4, dim: int = 16):
    """Raw (unnormalized) inputs; the loss normalizes them first."""
    g = Rng.named(seed, "gradcheck-infonce").gen
    inputs = {"a": g.normal(size=(n, dim)), "b": g.normal(size=(n, dim)), "log_inv_tau": np.array(np.log(1 / 0.07))}

    def fn(t):
        return contrastive_loss(T.l2_normalize(t["a"], axis=1), T.l2_normalize(t["b"], axis=1), _temperature_from(t))

    return fn, inputs


def final_loss_case(seed: int, n: int = 4, dim: int = 16, coefs: LossCoefficients | None = None):
    g = Rng.named(seed, "gradcheck-final").gen
    coefs = coefs or LossCoefficients(alpha=0.5, beta=1.0, theta=1.0)
    inputs = {
        "h_img": g.normal(size=(n, dim)),
        "h_txt": g.normal(size=(n, dim)),
        "h_pc": g.normal(size=(n, dim)),
        "log_inv_tau": np.array(np.log(g.uniform(5, 30))),
    }

    def fn(t):
        norm = {k: T.l2_normalize(t[k], axis=1) for k in ("h_img", "h_txt", "h_pc")}
        return final_loss(norm["h_img"], norm["h_txt"], norm["h_pc"], coefs, _temperature_from(t))[0]

    return fn, inputs


def encoder_case(seed: int, n_clouds: int = 4, n_points: int = 16, dim: int = 16, widths=(8, 16)):
    """Full pipeline: encoder parameters -> embeddings -> final loss against
    fixed anchors. Returns (fn, inputs, signature)."""
    g = Rng.named(seed, "gradcheck-encoder").gen
    params = init_encoder(seed, widths, dim)
    clouds = g.normal(size=(n_clouds, n_points, 3))
    h_img = g.normal(size=(n_clouds, dim))
    h_txt = g.normal(size=(n_clouds, dim))
    h_img /= np.linalg.norm(h_img, axis=1, keepdims=True)
    h_txt /= np.linalg.norm(h_txt, axis=1, keepdims=True)
    inputs = {k: v.data.astype(np.float64) for k, v in params.tensors.items()}
    inputs["log_inv_tau"] = np.array(np.log(1 / 0.07))

    def fn(t):
        p = params.copy()
        p.tensors = {k: t[k] for k in params.tensors}
        h_pc = encode_batch_f64(p, clouds)
        return final_loss(Tensor(h_img, dtype=np.float64), Tensor(h_txt, dtype=np.float64), h_pc, LossCoefficients(), _temperature_from(t))[0]

    def signature(arrays) -> bytes:
        return activation_pattern(arrays, clouds, len(widths))

    return fn, inputs, signature


def activation_pattern(arrays: Mapping[str, np.ndarray], clouds: np.ndarray, depth: int) -> bytes:
    """ReLU on/off masks and max-pool argmax indices of the per-point MLP."""
    b, n, _ = clouds.shape
    h = clouds.reshape(b * n, 3)
    parts = []
    for i in range(depth):
        z = h @ arrays[f"mlp.{i}.weight"] + arrays[f"mlp.{i}.bias"]
        parts.append(np.packbits(z > 0).tobytes())
        h = np.maximum(z, 0)
    parts.append(h.reshape(b, n, -1).argmax(axis=1).astype(np.int64).tobytes())
    return b"".join(parts)


def encode_batch_f64(params, clouds: np.ndarray) -> Tensor:
    """encode_batch in float64 (the regular path stores inputs as float32)."""
    b, n, _ = clouds.shape
    h = Tensor(np.asarray(clouds, dtype=np.float64).reshape(b * n, 3), dtype=np.float64)
    t = params.tensors
    for i in range(len(params.widths)):
        h = T.relu(T.matmul(h, t[f"mlp.{i}.weight"]) + t[f"mlp.{i}.bias"])
    pooled = h.reshape(b, n, params.widths[-1]).max(axis=1)
    return T.l2_normalize(T.matmul(pooled, t["proj.weight"]) + t["proj.bias"], axis=1)


def primitive_cases(seed: int) -> dict[str, tuple[Fn, dict]]:
    """One small scalar-valued function per differentiable primitive."""
    g = Rng.named(seed, "gradcheck-primitives").gen

    def away_from_zero(shape):
        x = g.normal(size=shape)
        return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)

    w = g.normal(size=(3, 4))
    cases = {
        "add": (lambda t: ((t["x"] + t["y"]) * t["w"]).sum(), {"x": g.normal(size=(3, 4)), "y": g.normal(size=4), "w": w}),
        "sub": (lambda t: ((t["x"] - t["y"]) * t["w"]).sum(), {"x": g.normal(size=(3, 4)), "y": g.normal(size=(3, 4)), "w": w}),
        "mul": (lambda t: (t["x"] * t["y"]).sum(), {"x": g.normal(size=(3, 4)), "y": g.normal(size=(3, 4))}),
        "matmul": (lambda t: (T.matmul(t["a"], t["b"]) * t["w"]).sum(), {"a": g.normal(size=(3, 5)), "b": g.normal(size=(5, 4)), "w": w}),
        "relu": (lambda t: (T.relu(t["x"]) * t["w"]).sum(), {"x": away_from_zero((3, 4)), "w": w}),
        "exp": (lambda t: (T.exp(t["x"]) * t["w"]).sum(), {"x": g.normal(size=(3, 4)), "w": w}),
        "log": (lambda t: (T.log(t["x"]) * t["w"]).sum(), {"x": g.uniform(0.5, 2.0, size=(3, 4)), "w": w}),
        "bias_add": (lambda t: ((t["x"] + t["b"]) * t["w"]).sum(), {"x": g.normal(size=(3, 4)), "b": g.normal(size=4), "w": w}),
        "max": (lambda t: (t["x"].max(axis=1) * t["v"]).sum(), {"x": g.normal(size=(2, 6, 3)), "v": g.normal(size=(2, 3))}),
        "mean": (lambda t: (t["x"].mean(axis=0) * t["v"]).sum(), {"x": g.normal(size=(3, 4)), "v": g.normal(size=4)}),
        "logsumexp": (lambda t: (T.logsumexp(t["x"], axis=1) * t["v"]).sum(), {"x": g.normal(size=(3, 4)) * 5, "v": g.normal(size=3)}),
        "similarity": (
            lambda t: (T.similarity(t["a"], t["b"], t["s"]) * t["w"]).sum(),
            {"a": g.normal(size=(3, 5)), "b": g.normal(size=(4, 5)), "s": np.array(1.7), "w": w},
        ),
        "l2_normalize": (lambda t: (T.l2_normalize(t["x"], axis=1) * t["w"]).sum(), {"x": g.normal(size=(3, 4)), "w": w}),
        "cross_entropy": (lambda t: T.cross_entropy(t["z"], [0, 3, 1]), {"z": g.normal(size=(3, 4)) * 3}),
    }
    return cases


def run_suite(seeds=range(10), h: float = 1e-3, include_encoder: bool = True) -> dict[str, float]:
    """Max relative error per case over all seeds and inputs."""
    worst: dict[str, float] = {}

    def record(name, errs):
        worst[name] = max(worst.get(name, 0.0), max(errs.values()))

    for seed in seeds:
        for name, (fn, inputs) in primitive_cases(seed).items():
            record(f"primitive:{name}", check(fn, inputs, h))
        record("contrastive_loss", check(*contrastive_case(seed), h))
        record("final_loss", check(*final_loss_case(seed), h))
        if include_encoder:
            fn, inputs, sig = encoder_case(seed)
            record("encoder+final_loss", check(fn, inputs, h, sig))
    return worst
