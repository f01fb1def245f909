"""Finite-difference gradient checks for every op and each model at toy width."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff.gradcheck import check_gradients
from .models import forward, init_params, toy_config
from .pipeline import loss

TOLERANCE = 1e-4
STEP = 1e-4


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # random projection turns any output into a scalar with a generic gradient
    return ad.sum(ad.mul(out, w))


def op_cases(seed: int = 0) -> dict:
    """name -> (build, arrays) for each differentiable op."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    cases = {}

    def case(name, fn, arrays):
        out_shape = fn({k: ad.Tensor(v) for k, v in arrays.items()}).shape
        w = r(*out_shape)
        cases[name] = (lambda t, fn=fn, w=w: _weighted(fn(t), w), arrays)

    case("add", lambda t: ad.add(t["a"], t["b"]), {"a": r(2, 3), "b": r(3)})
    case("sub", lambda t: ad.sub(t["a"], t["b"]), {"a": r(2, 2), "b": r(2, 1)})
    case("mul", lambda t: ad.mul(t["a"], t["b"]), {"a": r(2, 3), "b": r(1, 3)})
    case("matmul", lambda t: ad.matmul(t["a"], t["b"]), {"a": r(2, 3), "b": r(3, 2)})
    case("matmul_batched", lambda t: ad.matmul(t["a"], t["b"]), {"a": r(2, 2, 3), "b": r(2, 3, 2)})
    case("matmul_shared_weight", lambda t: ad.matmul(t["a"], t["b"]), {"a": r(2, 2, 3), "b": r(3, 2)})
    case("relu", lambda t: ad.relu(t["x"]), {"x": away_from_zero(2, 2)})
    case("gelu", lambda t: ad.gelu(t["x"]), {"x": r(5)})
    case("sigmoid", lambda t: ad.sigmoid(t["x"]), {"x": r(4)})
    case("softmax_last", lambda t: ad.softmax(t["x"], axis=-1), {"x": r(2, 3)})
    case("softmax_first", lambda t: ad.softmax(t["x"], axis=0), {"x": r(3, 2)})
    case("layer_norm", lambda t: ad.layer_norm(t["x"], t["g"], t["b"]),
         {"x": r(2, 4), "g": r(4), "b": r(4)})
    case("layer_norm_axis0", lambda t: ad.layer_norm(t["x"], t["g"], t["b"], axis=0),
         {"x": r(3, 2), "g": r(3), "b": r(3)})
    case("conv3d_pad0", lambda t: ad.conv3d(t["x"], t["w"], t["b"], padding=0),
         {"x": r(1, 3, 3, 3, 2), "w": r(3, 3, 3, 2, 2), "b": r(2)})
    case("conv3d_pad1", lambda t: ad.conv3d(t["x"], t["w"], t["b"], padding=1),
         {"x": r(1, 3, 3, 3, 2), "w": r(3, 3, 3, 2, 2), "b": r(2)})
    case("conv3d_1x1", lambda t: ad.conv3d(t["x"], t["w"], None, padding=0),
         {"x": r(2, 3, 3, 3, 2), "w": r(1, 1, 1, 2, 3)})
    case("mean", lambda t: ad.mean(t["x"], axes=1), {"x": r(2, 3, 2)})
    case("sum", lambda t: ad.sum(t["x"], axes=(0, 2), keepdims=True), {"x": r(2, 2, 2)})
    case("reshape", lambda t: ad.mul(ad.reshape(t["x"], (3, 2)), t["y"]), {"x": r(2, 3), "y": r(3, 2)})
    case("transpose", lambda t: ad.mul(ad.transpose(t["x"], (1, 0, 2)), t["y"]),
         {"x": r(2, 3, 2), "y": r(3, 2, 2)})
    return cases


def model_cases(seed: int = 0) -> dict:
    """name -> (build, arrays) for the three models at toy width, float64."""
    rng = np.random.default_rng(seed)
    out = {}
    for model_type in ("pe", "vanilla", "shcnn"):
        cfg = toy_config(model_type, seed=seed)
        params = init_params(cfg, dtype=np.float64)
        # nonzero biases and gains exercise every term of the backward rules
        for k, v in params.items():
            if k.endswith(".bias") or k.endswith(".gain"):
                params[k] = v + 0.1 * rng.standard_normal(v.shape)
        if model_type == "pe":
            patch = rng.standard_normal((2, 3, 3, 3, cfg.level.token_count))
            dirs = None
        elif model_type == "vanilla":
            dirs = rng.standard_normal((3, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            dirs = np.vstack([dirs, -dirs])
            patch = rng.standard_normal((2, 3, 3, 3, len(dirs)))
        else:
            patch = rng.standard_normal((2, 3, 3, 3, cfg.sh_channels))
            dirs = None
        tf = rng.uniform(0, 1, 2)
        to = rng.standard_normal((2, 45))

        def build(t, cfg=cfg, patch=patch, dirs=dirs, tf=tf, to=to):
            pf, po = forward(t, cfg, patch, dirs)
            return loss(pf, po, tf, to, 1.0)

        out[f"model_{model_type}"] = (build, params)
    return out


def run_suite(include_models: bool = True, seed: int = 0, h: float = STEP):
    """Return ``[(name, max relative error)]`` over every case."""
    results = []
    cases = dict(op_cases(seed))
    if include_models:
        cases.update(model_cases(seed))
    for name, (build, arrays) in cases.items():
        errs = check_gradients(build, arrays, h=h)
        results.append((name, max(errs.values())))
    return results
