"""Central finite-difference checks of every differentiable op and the full network.

All checks run in float64.  Op checks perturb every input coordinate and
use the elementwise relative error
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.  The network
check samples coordinates of each parameter tensor and compares the two
gradient vectors: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .imageops import resize
from .metrics import multiscale_l1
from .model import ModelConfig, init_params, overnet_forward, tiny_config
from .tensor import Tensor

EPS = 1e-3
FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    worst: float
    checked: int
    skipped: int = 0


def _pattern(fn) -> tuple[float, list[np.ndarray]]:
    with T.no_grad(), T.record_kinks() as kinks:
        value = float(fn().data)
    return value, kinks


def _same_piece(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def central_difference(fn, flat: np.ndarray, i: int, base: list[np.ndarray], eps: float = EPS):
    """``(estimate, smooth)``; ``smooth`` is False when the stencil straddles a kink."""
    orig = flat[i]
    flat[i] = orig + eps
    up, kup = _pattern(fn)
    flat[i] = orig - eps
    down, kdown = _pattern(fn)
    flat[i] = orig
    return (up - down) / (2 * eps), _same_piece(kup, base) and _same_piece(kdown, base)


def rel_error(a: float, b: float, floor: float = FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def vector_rel_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def check_function(
    fn: Callable[[list[Tensor]], Tensor],
    inputs: list[np.ndarray],
    rng: np.random.Generator,
    samples: int | None = None,
    eps: float = EPS,
) -> float:
    """Worst relative error of ``d fn / d inputs`` over sampled coordinates.

    ``fn`` must return a scalar tensor.  With ``samples=None`` every
    coordinate is perturbed.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    T.backward(fn(leaves))
    _, base = _pattern(lambda: fn(leaves))
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for i in idx:
            est, smooth = central_difference(lambda: fn(leaves), flat, i, base, eps)
            if smooth:
                worst = max(worst, rel_error(analytic.reshape(-1)[i], est))
    return worst


def _probe(rng, shape):
    """Fixed random projection so a tensor-valued op becomes a scalar loss."""
    return Tensor(rng.standard_normal(shape))


def _scalarize(out: Tensor, rng_seed: int) -> Tensor:
    w = _probe(np.random.default_rng(rng_seed), out.shape)
    return T.sum_all(T.mul(out, w))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance of each differentiable op, wrapped as a scalar function."""
    s = int(rng.integers(1 << 30))
    x = rng.standard_normal((2, 3, 5, 4))

    def gated(ts):
        return _scalarize(T.mul(ts[1], ts[0]), s)

    # keep relu inputs away from the kink so the central difference is smooth
    xr = rng.standard_normal((2, 3, 5, 4))
    xr = np.where(np.abs(xr) < 10 * EPS, xr + 0.1, xr)
    cases = {
        "conv3x3": (lambda ts: _scalarize(T.conv2d(ts[0], ts[1], ts[2]), s),
                    [x, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "conv1x1": (lambda ts: _scalarize(T.conv2d(ts[0], ts[1], ts[2]), s),
                    [x, rng.standard_normal((5, 3, 1, 1)), rng.standard_normal(5)]),
        "weight_norm": (lambda ts: _scalarize(T.weight_norm(ts[0], ts[1]), s),
                        [rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "relu": (lambda ts: _scalarize(T.relu(ts[0]), s), [xr]),
        "sigmoid": (lambda ts: _scalarize(T.sigmoid(ts[0]), s), [x]),
        "add_broadcast": (lambda ts: _scalarize(T.add(ts[0], ts[1]), s),
                          [x, rng.standard_normal((2, 3, 1, 1))]),
        "mul_channel": (lambda ts: _scalarize(T.mul(ts[0], ts[1]), s),
                        [x, rng.standard_normal((2, 3, 1, 1))]),
        "scalar_gate": (gated, [x, rng.standard_normal(1)]),
        "global_avg_pool": (lambda ts: _scalarize(T.global_avg_pool(ts[0]), s), [x]),
        "concat_channels": (lambda ts: _scalarize(T.concat_channels(ts), s),
                            [x, rng.standard_normal((2, 2, 5, 4))]),
        "pixelshuffle": (lambda ts: _scalarize(T.pixelshuffle(ts[0], 2), s),
                         [rng.standard_normal((1, 8, 3, 2))]),
        "resize_up": (lambda ts: _scalarize(resize(ts[0], 11, 9), s), [x]),
        "resize_down": (lambda ts: _scalarize(resize(ts[0], 3, 2, "cubic"), s), [x]),
        "resize_bilinear": (lambda ts: _scalarize(resize(ts[0], 3, 7, "linear"), s), [x]),
    }
    # L1 needs residuals away from zero
    a = rng.standard_normal((2, 3, 5, 4))
    b = a + rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.05, 0.5, size=a.shape)
    cases["mean_abs_error"] = (lambda ts: T.mean_abs_error(ts[0], ts[1]), [a, b])
    return cases


def check_ops(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, inputs) in op_cases(rng).items():
        out.append(CheckResult(name, check_function(fn, inputs, rng), sum(x.size for x in inputs)))
    return out


def check_model(
    seed: int,
    cfg: ModelConfig | None = None,
    lr_size: int = 6,
    per_tensor: int = 4,
    scales=(2, 3, 4),
    max_tries: int = 10,
) -> CheckResult:
    """Full forward + multi-scale L1 against sampled coordinates of every parameter.

    Targets sit a random margin away from the outputs so no L1 residual
    crosses zero under the perturbation.
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, dtype=np.float64)
    for name, p in params.items():
        # random gates and biases so no branch is trivially symmetric
        if name.endswith((".b", "lam_o", "lam_i", "lam0", "lam1")):
            p.value.data[...] = rng.uniform(0.5, 1.5, size=p.value.shape) if "lam" in name else \
                rng.normal(0, 0.1, size=p.value.shape)
    lr = Tensor(rng.uniform(0, 1, size=(1, 3, lr_size, lr_size)))
    with T.no_grad():
        ref = overnet_forward(lr, params, cfg, scales)
    targets = {
        s: t.data + rng.choice([-1.0, 1.0], size=t.shape) * rng.uniform(0.05, 0.3, size=t.shape)
        for s, t in ref.items()
    }

    def loss() -> Tensor:
        return multiscale_l1(overnet_forward(lr, params, cfg, scales), None, targets=targets)

    params.zero_grad()
    T.backward(loss())
    _, base = _pattern(loss)
    worst, checked, skipped = 0.0, 0, 0
    for name, p in params.items():
        flat = p.value.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        an, fd = [], []
        # coordinates whose stencil crosses a ReLU kink are replaced by fresh ones
        for i in rng.permutation(flat.size)[: max_tries * per_tensor]:
            est, smooth = central_difference(loss, flat, i, base)
            if not smooth:
                skipped += 1
                continue
            an.append(analytic[i])
            fd.append(est)
            if len(an) == per_tensor:
                break
        worst = max(worst, vector_rel_error(an, fd))
        checked += len(an)
    return CheckResult("overnet_tiny", worst, checked, skipped)


def run_suite(seeds: int = 20, start: int = 0, cfg: ModelConfig | None = None) -> list[CheckResult]:
    """Every op and the full model over ``seeds`` seeds; one result per check name (worst case)."""
    worst: dict[str, CheckResult] = {}
    for seed in range(start, start + seeds):
        for r in check_ops(seed) + [check_model(seed, cfg)]:
            prev = worst.get(r.name)
            if prev is None:
                worst[r.name] = r
                continue
            prev.worst = max(prev.worst, r.worst)
            prev.checked += r.checked
            prev.skipped += r.skipped
    return list(worst.values())
