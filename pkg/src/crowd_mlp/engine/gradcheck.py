"""Central finite-difference oracles for the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from crowd_mlp.engine import ops
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import ParameterError, Tape, Tensor, backward

ScalarFn = Callable[[Tensor], Tensor]
LossFn = Callable[[], Tensor]

_DENOMINATOR_FLOOR = 1e-8
_KINK_TOLERANCE = 1e-3
_ROUNDING = 1e-12


def finite_diff_check(f: ScalarFn, x: Tensor, step: float = 1e-5) -> float:
    """Return max_i |analytic_i - fd_i| / (|analytic_i| + 1e-8) over every coordinate of ``x``."""
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    point = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(point)
    backward(loss, tape)
    analytic = point.grad.copy()

    flat = point.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        numeric[i] = _central_difference(lambda: f(point), flat, i, step)
    errors = np.abs(analytic.reshape(-1) - numeric) / (
        np.abs(analytic.reshape(-1)) + _DENOMINATOR_FLOOR
    )
    return float(errors.max()) if errors.size else 0.0


def gradcheck_parameters(
    loss_fn: LossFn,
    params: Mapping[str, Tensor],
    *,
    step: float = 1e-5,
    coords_per_param: int = 4,
    rng: RngState | None = None,
    step_retries: int = 3,
) -> dict[str, float]:
    """Per-parameter norm-wise relative error over a sample of coordinates.

    Per-coordinate ratios are dominated by rounding noise wherever a true gradient is
    near zero, so each tensor is scored as ||analytic - fd|| / (||analytic|| + 1e-8)
    over its sampled coordinates. ``loss_fn`` must be deterministic (eval mode).

    When the one-sided slopes around a coordinate disagree, a relu or max kink lies
    inside the stencil; the step shrinks tenfold, up to ``step_retries`` times.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    rng = rng or RngState(0)
    for param in params.values():
        param.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    base = loss.item()

    report: dict[str, float] = {}
    for name, param in params.items():
        flat = param.data.reshape(-1)
        picks = min(coords_per_param, flat.size)
        coords = rng.derive(name).permutation(flat.size)[:picks]
        analytic = param.grad.reshape(-1)[coords]
        numeric = np.array(
            [
                _central_difference(loss_fn, flat, int(i), step, base=base, retries=step_retries)
                for i in coords
            ]
        )
        report[name] = float(
            np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + _DENOMINATOR_FLOOR)
        )
    return report


def _central_difference(
    evaluate: LossFn,
    flat: np.ndarray,
    index: int,
    step: float,
    *,
    base: float | None = None,
    retries: int = 0,
) -> float:
    original = flat[index]
    for attempt in range(retries + 1):
        try:
            flat[index] = original + step
            upper = evaluate().item()
            flat[index] = original - step
            lower = evaluate().item()
        finally:
            flat[index] = original
        if base is None or attempt == retries:
            break
        forward = (upper - base) / step
        backward_slope = (base - lower) / step
        allowed = _KINK_TOLERANCE * max(abs(forward), abs(backward_slope))
        allowed += _ROUNDING * max(1.0, abs(base)) / step
        if abs(forward - backward_slope) <= allowed:
            break
        step *= 0.1
    return (upper - lower) / (2.0 * step)


def check_primitives(rng: RngState | None = None, step: float = 1e-5) -> dict[str, float]:
    """finite_diff_check for every primitive on random inputs away from kinks and ties."""
    rng = rng or RngState(0)

    def draw(key: str, *shape: int) -> Tensor:
        return Tensor(rng.derive(key).normal(0.0, 1.0, shape))

    def away_from_zero(key: str, *shape: int) -> Tensor:
        values = rng.derive(key).uniform(0.2, 1.5, shape)
        signs = np.where(rng.derive(key, "sign").random(shape) < 0.5, -1.0, 1.0)
        return Tensor(values * signs)

    def project(y: Tensor, key: str) -> Tensor:
        weights = Tensor(rng.derive("project", key).normal(0.0, 1.0, y.shape))
        return ops.reduce_sum(ops.mul(y, weights))

    weight = draw("linear.w", 4, 2)
    bias = draw("linear.b", 2)
    kernel = draw("conv.k", 3, 2, 3, 3)
    features = draw("bn.x", 8, 4)
    gamma, beta = draw("bn.g", 4), draw("bn.b", 4)
    pieces = draw("split.x", 2, 5)
    other = draw("pair.b", 3, 4)
    apart = Tensor(other.data + away_from_zero("abs.gap", 3, 4).data)

    def batch_norm(x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, gamma, beta, np.zeros(4), np.ones(4), mode)

    def renormalized(x: Tensor) -> Tensor:
        # Running statistics far from the batch keep both corrections clipped.
        far = np.full(4, 100.0)
        return ops.batch_norm(x, gamma, beta, far, far.copy(), "train", renorm=(3.0, 5.0))

    checks: dict[str, tuple[ScalarFn, Tensor]] = {
        "add": (lambda x: project(ops.add(x, other), "add"), draw("add", 3, 4)),
        "sub": (lambda x: project(ops.sub(x, other), "sub"), draw("sub", 3, 4)),
        "mul": (lambda x: project(ops.mul(x, other), "mul"), draw("mul", 3, 4)),
        "scale": (lambda x: project(ops.scale(x, -2.5), "scale"), draw("scale", 3, 4)),
        "square": (lambda x: project(ops.square(x), "square"), draw("square", 3, 4)),
        "relu": (lambda x: project(ops.relu(x), "relu"), away_from_zero("relu", 3, 4)),
        "abs_err": (lambda x: ops.abs_err(x, other), apart),
        "linear.x": (lambda x: project(ops.linear(x, weight, bias), "linear"), draw("lx", 3, 4)),
        "linear.weight": (
            lambda w: project(ops.linear(draw("lx", 3, 4), w, bias), "linear"),
            weight,
        ),
        "conv2d.x": (
            lambda x: project(ops.conv2d(x, kernel, None, 1, 1), "conv"),
            draw("cx", 2, 5, 5),
        ),
        "conv2d.kernel": (
            lambda k: project(ops.conv2d(draw("cx", 2, 5, 5), k, bias=None, stride=2), "conv2"),
            kernel,
        ),
        "batch_norm.train": (lambda x: project(batch_norm(x, "train"), "bn"), features),
        "batch_norm.eval": (lambda x: project(batch_norm(x, "eval"), "bn"), features),
        "batch_norm.renorm": (lambda x: project(renormalized(x), "bn"), features),
        "batch_norm.gamma": (
            lambda g: project(
                ops.batch_norm(features, g, beta, np.zeros(4), np.ones(4), "train"), "bn"
            ),
            gamma,
        ),
        "dropout": (
            lambda x: project(ops.dropout(x, 0.3, rng.derive("dropout"), "train"), "drop"),
            draw("drop", 3, 4),
        ),
        "max_pool2": (lambda x: project(ops.max_pool2(x), "pool"), draw("pool", 2, 4, 4)),
        "transpose": (lambda x: project(ops.transpose(x, 0, 1), "t"), draw("t", 3, 4)),
        "permute": (lambda x: project(ops.permute(x, (2, 0, 1)), "perm"), draw("perm", 2, 3, 4)),
        "reshape": (lambda x: project(ops.reshape(x, (4, 3)), "reshape"), draw("reshape", 3, 4)),
        "concat": (
            lambda x: project(ops.concat([x, other, x], axis=0), "concat"),
            draw("concat", 3, 4),
        ),
        "split": (
            lambda x: project(ops.split(x, [2, 3], axis=1)[1], "split"),
            pieces,
        ),
        "reduce_sum": (lambda x: project(ops.reduce_sum(x, axis=1), "rsum"), draw("rsum", 3, 4)),
        "reduce_mean": (
            lambda x: project(ops.reduce_mean(x, axis=0), "rmean"),
            draw("rmean", 3, 4),
        ),
    }
    return {name: finite_diff_check(f, x, step) for name, (f, x) in checks.items()}
