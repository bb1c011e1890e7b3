"""Central finite-difference verification of every backward rule and of the regularised loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .importance import ImportanceMap, topology_groups
from .network import NetworkConfig, build_network
from .trainer import TrainConfig, TrainerState, total_loss

TOLERANCE = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def numerical_gradient(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _spread_values(rng, shape):
    # distinct, well separated entries so max-pool winners are stable under perturbation
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) / n - 0.5).reshape(shape) * 4.0


def _check(name, loss, arrays: dict, analytic: dict, corrupt: str | None, tol: float) -> CheckResult:
    err = 0.0
    for key, arr in arrays.items():
        a = analytic[key]
        if corrupt == name:
            a = a * 1.01 + 1e-3
        err = max(err, relative_error(a, numerical_gradient(loss, arr)))
    return CheckResult(name, err, err < tol)


def check_dense(rng, corrupt=None, tol=TOLERANCE, batch=3, n_in=5, n_out=4):
    x, w, b = rng.standard_normal((batch, n_in)), rng.standard_normal((n_in, n_out)), rng.standard_normal(n_out)
    r = rng.standard_normal((batch, n_out))
    dx, dw, db = core.dense_backward(x, w, r)
    return _check("dense", lambda: float(np.sum(r * core.dense_forward(x, w, b))),
                  {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, corrupt, tol)


def check_relu(rng, corrupt=None, tol=TOLERANCE, shape=(4, 6)):
    x = _away_from_zero(rng, shape)
    r = rng.standard_normal(shape)
    return _check("relu", lambda: float(np.sum(r * core.relu(x))), {"x": x},
                  {"x": core.relu_backward(x, r)}, corrupt, tol)


def check_conv(rng, corrupt=None, tol=TOLERANCE, batch=2, cin=2, cout=3, size=5, kernel=3, stride=1, padding=1,
               name="conv2d"):
    x = rng.standard_normal((batch, cin, size, size))
    k = rng.standard_normal((cout, cin, kernel, kernel))
    b = rng.standard_normal(cout)
    out = core.conv2d_forward(x, k, b, stride, padding)
    r = rng.standard_normal(out.shape)
    dx, dk, db = core.conv2d_backward(x, k, r, stride, padding)
    return _check(name, lambda: float(np.sum(r * core.conv2d_forward(x, k, b, stride, padding))),
                  {"x": x, "k": k, "b": b}, {"x": dx, "k": dk, "b": db}, corrupt, tol)


def check_global_avg_pool(rng, corrupt=None, tol=TOLERANCE, shape=(2, 3, 4, 5)):
    x = rng.standard_normal(shape)
    r = rng.standard_normal(shape[:2])
    return _check("global_avg_pool", lambda: float(np.sum(r * core.global_avg_pool(x))), {"x": x},
                  {"x": core.global_avg_pool_backward(x.shape, r)}, corrupt, tol)


def check_max_pool(rng, corrupt=None, tol=TOLERANCE, shape=(2, 2, 5, 6)):
    x = _spread_values(rng, shape)
    out, arg = core.max_pool2d_forward(x)
    r = rng.standard_normal(out.shape)
    return _check("max_pool2d", lambda: float(np.sum(r * core.max_pool2d_forward(x)[0])), {"x": x},
                  {"x": core.max_pool2d_backward(x.shape, arg, r)}, corrupt, tol)


def check_softmax_ce(rng, corrupt=None, tol=TOLERANCE, batch=4, classes=3):
    z = rng.standard_normal((batch, classes)) * 2.0
    y = rng.integers(0, classes, batch)
    _, g = core.softmax_cross_entropy(z, y)
    return _check("softmax_cross_entropy", lambda: core.softmax_cross_entropy(z, y)[0], {"logits": z},
                  {"logits": g}, corrupt, tol)


def _composite_state(rng, net_config):
    net = build_network(net_config)
    net.add_head(0, 3)
    # zero biases put dead channels exactly on the ReLU kink
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
    anchors = {k: net.params[k] + 0.3 * rng.standard_normal(net.params[k].shape) for k in net.trunk_ids}
    omega = {k: rng.uniform(0.1, 2.0, net.params[k].shape) for k in net.trunk_ids}
    imp = ImportanceMap(omega, topology_groups(net.topology))
    return TrainerState(net, anchors=anchors, importance=imp)


def check_composite(rng, corrupt=None, tol=TOLERANCE, arch="mlp"):
    """Gradient of cross-entropy + alpha * anchor penalty w.r.t. every trainable parameter."""
    if arch == "mlp":
        cfg = NetworkConfig(arch="mlp", input_shape=(6,), hidden=(5, 4), seed=int(rng.integers(1 << 30)))
        x = rng.standard_normal((4, 6))
    else:
        cfg = NetworkConfig(arch="conv6", input_shape=(1, 8, 8), channels=(2, 2, 3, 3, 2, 2), dense_width=4,
                            seed=int(rng.integers(1 << 30)))
        x = rng.random((3, 1, 8, 8))
    state = _composite_state(rng, cfg)
    y = rng.integers(0, 3, len(x))
    config = TrainConfig(alpha=0.7, epochs=1)
    _, grads = total_loss(x, y, 0, state, config)
    arrays = {k: state.net.params[k] for k in grads}
    name = f"composite_{arch}"
    return _check(name, lambda: total_loss(x, y, 0, state, config)[0], arrays, grads, corrupt, tol)


CHECKS = (
    check_dense,
    check_relu,
    check_conv,
    check_max_pool,
    check_global_avg_pool,
    check_softmax_ce,
)


def run_gradcheck(seed: int = 0, corrupt: str | None = None, tol: float = TOLERANCE) -> list[CheckResult]:
    """Run every check once. ``corrupt`` names a check whose analytic gradient is perturbed."""
    rng = np.random.default_rng(seed)
    results = [check(rng, corrupt, tol) for check in CHECKS]
    results.append(check_conv(rng, corrupt, tol, stride=2, padding=0, size=6, name="conv2d_stride2"))
    results.append(check_composite(rng, corrupt, tol, "mlp"))
    results.append(check_composite(rng, corrupt, tol, "conv6"))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<24} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    lines.append("PASS" if all(r.passed for r in results) else "FAIL")
    return "\n".join(lines)
