"""Finite-difference verification of analytic gradients.

All checks run in 64-bit: central differences ``(f(x+e) - f(x-e)) / 2e`` per
coordinate, contracted with a fixed random upstream gradient, against the
layer's own backward pass.  ``run_layer_suite`` sweeps every layer primitive
over seeded random configurations; ``model_gradient_check`` drives a whole
layer graph end to end through its loss.
"""

from __future__ import annotations

import numpy as np

from . import layers, models

#: coordinates whose analytic and numeric values both sit below this are
#: compared on an absolute scale instead of blowing up the relative error
ZERO_FLOOR = 1e-6


def _rel_error(analytic: float, numeric: float, floor: float = ZERO_FLOOR) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def gradient_check(forward_fn, inputs: dict, epsilon: float = 1e-5, *,
                   seed: int = 0, max_coords: int | None = None,
                   zero_floor: float = ZERO_FLOOR) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    Args:
        forward_fn: callable taking the (64-bit) input dict and returning
            ``(output, backward_fn)`` where ``backward_fn(grad_out)`` yields a
            dict of gradients keyed like ``inputs``.
        inputs: named arrays; every coordinate is perturbed unless
            ``max_coords`` caps the per-array count (seeded subsample).
        epsilon: central-difference step, must lie in ``[1e-5, 1e-2]``.
        zero_floor: relative-error denominator floor.  Coordinates where both
            gradients sit below it count as agreeing; raise it when the
            objective's own rounding noise (roughly machine epsilon times the
            op count, divided by 2*epsilon) exceeds the default.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ValueError(f"epsilon must lie in [1e-5, 1e-2], got {epsilon}")
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    rng = np.random.default_rng(seed)
    out, backward_fn = forward_fn(work)
    out = np.asarray(out, dtype=np.float64)
    upstream = rng.standard_normal(out.shape)
    analytic = backward_fn(upstream)

    def objective() -> float:
        y = np.asarray(forward_fn(work)[0], dtype=np.float64)
        return float((y * upstream).sum())

    worst = 0.0
    for key in sorted(work):
        arr = work[key]
        total = arr.size
        if max_coords is not None and total > max_coords:
            flat_idx = rng.choice(total, size=max_coords, replace=False)
        else:
            flat_idx = np.arange(total)
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = objective()
            flat[i] = orig - epsilon
            f_minus = objective()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            worst = max(worst, _rel_error(grad[i], numeric, zero_floor))
    return worst


def _spread_values(rng: np.random.Generator, shape, gap: float = 1e-3) -> np.ndarray:
    """Random permutation of evenly spaced values; keeps pooling argmax stable
    under the perturbation step."""
    n = int(np.prod(shape))
    vals = np.linspace(0.0, (n - 1) * gap * 10, n)
    return rng.permutation(vals).reshape(shape)


def _conv_case(rng):
    kh = kw = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = "same" if (stride == 1 and rng.random() < 0.5) else int(rng.integers(0, kh // 2 + 1))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 5))
    size = int(rng.integers(kh, kh + 6))
    x = rng.standard_normal((2, size, size, cin))
    w = rng.standard_normal((kh, kw, cin, cout)) * 0.5
    b = rng.standard_normal(cout)

    def fwd(inp):
        y, cache = layers.conv2d_forward(inp["x"], inp["w"], inp["b"], stride, padding)

        def bwd(g):
            gx, gw, gb = layers.conv2d_backward(g, cache)
            return {"x": gx, "w": gw, "b": gb}

        return y, bwd

    return fwd, {"x": x, "w": w, "b": b}


def _dense_case(rng):
    n = int(rng.integers(1, 5))
    d = int(rng.integers(2, 12))
    k = int(rng.integers(2, 6))
    x = rng.standard_normal((n, d))
    w = rng.standard_normal((d, k)) * 0.5
    b = rng.standard_normal(k)

    def fwd(inp):
        y, cache = layers.dense_forward(inp["x"], inp["w"], inp["b"])

        def bwd(g):
            gx, gw, gb = layers.dense_backward(g, cache)
            return {"x": gx, "w": gw, "b": gb}

        return y, bwd

    return fwd, {"x": x, "w": w, "b": b}


def _relu_case(rng):
    shape = (2, int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4)))
    # keep inputs away from the kink at zero
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)

    def fwd(inp):
        y, cache = layers.relu_forward(inp["x"])
        return y, lambda g: {"x": layers.relu_backward(g, cache)}

    return fwd, {"x": x}


def _maxpool_case(rng):
    window = int(rng.choice([2, 3]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, window))
    size = int(rng.integers(window + 1, window + 6))
    c = int(rng.integers(1, 4))
    x = _spread_values(rng, (2, size, size, c))

    def fwd(inp):
        y, cache = layers.maxpool2d_forward(inp["x"], window, stride, padding)
        return y, lambda g: {"x": layers.maxpool2d_backward(g, cache)}

    return fwd, {"x": x}


def _avgpool_case(rng):
    window = int(rng.choice([2, 3]))
    stride = int(rng.choice([1, 2]))
    size = int(rng.integers(window, window + 6))
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((2, size, size, c))

    def fwd(inp):
        y, cache = layers.avgpool2d_forward(inp["x"], window, stride)
        return y, lambda g: {"x": layers.avgpool2d_backward(g, cache)}

    return fwd, {"x": x}


def _global_avgpool_case(rng):
    shape = (2, int(rng.integers(2, 7)), int(rng.integers(2, 7)), int(rng.integers(1, 5)))
    x = rng.standard_normal(shape)

    def fwd(inp):
        y, cache = layers.global_avgpool_forward(inp["x"])
        return y, lambda g: {"x": layers.global_avgpool_backward(g, cache)}

    return fwd, {"x": x}


def _batchnorm_case(rng):
    n = int(rng.integers(2, 5))
    shape = (n, int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4)))
    c = shape[-1]
    x = rng.standard_normal(shape)
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)

    def fwd(inp):
        rm = np.zeros(c)
        rv = np.ones(c)
        y, cache = layers.batchnorm_forward(inp["x"], inp["gamma"], inp["beta"], rm, rv, "train")

        def bwd(g):
            gx, gg, gb = layers.batchnorm_backward(g, cache)
            return {"x": gx, "gamma": gg, "beta": gb}

        return y, bwd

    return fwd, {"x": x, "gamma": gamma, "beta": beta}


def _softmax_xent_case(rng):
    n = int(rng.integers(2, 6))
    k = int(rng.integers(2, 6))
    logits = rng.standard_normal((n, k))
    labels = np.zeros((n, k))
    labels[np.arange(n), rng.integers(0, k, n)] = 1.0

    def fwd(inp):
        loss, grad = layers.softmax_cross_entropy(inp["logits"], labels)
        return np.float64(loss), lambda g: {"logits": grad * g}

    return fwd, {"logits": logits}


LAYER_CASES = {
    "conv2d": _conv_case,
    "dense": _dense_case,
    "relu": _relu_case,
    "maxpool2d": _maxpool_case,
    "avgpool2d": _avgpool_case,
    "global_avgpool": _global_avgpool_case,
    "batchnorm": _batchnorm_case,
    "softmax_cross_entropy": _softmax_xent_case,
}


def run_layer_suite(configs_per_kind: int = 20, epsilon: float = 1e-5,
                    base_seed: int = 0) -> dict[str, float]:
    """Gradient-check every layer kind over seeded random configurations.

    Returns the worst relative error seen per kind.
    """
    results = {}
    for kind_idx, (kind, make_case) in enumerate(LAYER_CASES.items()):
        worst = 0.0
        for i in range(configs_per_kind):
            rng = np.random.default_rng([base_seed, kind_idx, i])
            fwd, inputs = make_case(rng)
            err = gradient_check(fwd, inputs, epsilon, seed=base_seed + i)
            worst = max(worst, err)
        results[kind] = worst
    return results


MODEL_ZERO_FLOOR = 1e-4


def model_gradient_check(spec, batch: np.ndarray, labels: np.ndarray,
                         epsilon: float = 1e-5, *, seed: int = 0,
                         max_coords: int = 8, beta_shift: float = 1.5,
                         zero_floor: float = MODEL_ZERO_FLOOR) -> float:
    """Check d(loss)/d(parameter) for a whole layer graph in train mode.

    Subsamples ``max_coords`` coordinates per parameter tensor plus the input
    batch; returns the worst relative error.

    ``beta_shift`` offsets every batch-norm beta at the probe point so most
    activations stay live: with beta at zero, half of each channel dies at the
    relu and near-constant channels make ``1/sqrt(var + eps)`` so curved that
    central differences cannot resolve the (correct) derivative.  The backward
    formulas are point-independent, so any well-conditioned point is valid.

    ``zero_floor`` is far above the single-layer default because evaluating a
    deep network's loss in float64 carries rounding noise around 1e-11; over a
    2e-5 step the numeric estimate for any truly dead coordinate is then pure
    noise near 1e-6.  Coordinates whose gradients sit below the floor on both
    sides count as agreeing; a wrong formula still surfaces, since its error
    shows up at the same scale as the gradients themselves.
    """
    params = models.init_params(spec, np.random.default_rng(seed), dtype=np.float64)
    for entry in params.values():
        if "beta" in entry:
            entry["beta"] = entry["beta"] + beta_shift
    labels = labels.astype(np.float64)
    inputs = {"input": batch.astype(np.float64)}
    for node_name, entry in params.items():
        for pname, arr in entry.items():
            if pname.startswith("running_"):
                continue
            inputs[f"{node_name}::{pname}"] = arr

    def fwd(inp):
        store = {n: dict(e) for n, e in params.items()}
        for key, arr in inp.items():
            if key == "input":
                continue
            node_name, pname = key.split("::")
            store[node_name][pname] = arr
        logits, caches = models.forward(spec, store, inp["input"], mode="train",
                                        return_cache=True)
        loss, grad_logits = layers.softmax_cross_entropy(logits, labels)

        def bwd(g):
            param_grads, grad_input = models.backward(spec, store, caches, grad_logits * g)
            out = {"input": grad_input}
            for node_name, entry in param_grads.items():
                for pname, arr in entry.items():
                    key = f"{node_name}::{pname}"
                    if key in inp:
                        out[key] = arr
            return out

        return np.float64(loss), bwd

    return gradient_check(fwd, inputs, epsilon, seed=seed, max_coords=max_coords,
                          zero_floor=zero_floor)
