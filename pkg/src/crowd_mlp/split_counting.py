"""Split-Counting proxy task.

A random rectangle splits each training image into I_P (inside) and I_N (outside).
The shared model counts I, I_P and I_N, and the part counts are tied to the whole:

    L_C  = |P_I - C_gt|
    L_SS = |(P_P + P_N) - P_I|
    L_I  = |(P_P + P_N) - C_gt|
    L    = L_C + (L_SS + L_I) / 2
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from crowd_mlp.engine.gradcheck import gradcheck_parameters
from crowd_mlp.engine.ops import SharedBatchStats, abs_err, add, check_mode, scale
from crowd_mlp.engine.rng import RngState, StackedRng
from crowd_mlp.engine.tensor import DimensionError, ParameterError, Tape, Tensor, backward
from crowd_mlp.model.crowdmlp import CrowdMLP, predict_count

MIN_MASK_IMAGE = 16


class Rect(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@dataclass
class MaskPair:
    M: np.ndarray
    rect: Rect
    I_P: np.ndarray | None = None
    I_N: np.ndarray | None = None

    def decouple(self, image: np.ndarray) -> MaskPair:
        i_p, i_n = apply_decoupling(image, self)
        return MaskPair(M=self.M, rect=self.rect, I_P=i_p, I_N=i_n)


@dataclass(frozen=True)
class LossBundle:
    L_C: float
    L_SS: float
    L_I: float
    L: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "L", self.L_C + 0.5 * (self.L_SS + self.L_I))

    def as_dict(self) -> dict[str, float]:
        return {"L_C": self.L_C, "L_SS": self.L_SS, "L_I": self.L_I, "L": self.L}

    @classmethod
    def mean(cls, bundles: Sequence[LossBundle]) -> LossBundle:
        if not bundles:
            raise ParameterError("Cannot average an empty list of loss bundles")
        n = len(bundles)
        return cls(
            L_C=math.fsum(b.L_C for b in bundles) / n,
            L_SS=math.fsum(b.L_SS for b in bundles) / n,
            L_I=math.fsum(b.L_I for b in bundles) / n,
        )


@dataclass(frozen=True)
class EnsembleSample:
    m1: float
    m23: float
    y: float


@dataclass
class StepResult:
    loss: LossBundle
    per_example: list[LossBundle]
    gradients: dict[str, np.ndarray]
    masks: list[MaskPair]


def sample_mask(rng: RngState, H: int) -> MaskPair:
    """Rectangle with sides uniform in [H/8, 7H/8], placed uniformly inside the H×H frame."""
    if H < MIN_MASK_IMAGE:
        raise ParameterError(f"Mask sampling needs H >= {MIN_MASK_IMAGE}, got {H}")
    low = math.ceil(H / 8)
    high = (7 * H) // 8
    height = int(rng.integers(low, high))
    width = int(rng.integers(low, high))
    top = int(rng.integers(0, H - height))
    left = int(rng.integers(0, H - width))
    mask = np.zeros((H, H))
    mask[top : top + height, left : left + width] = 1.0
    return MaskPair(M=mask, rect=Rect(top, left, height, width))


def apply_decoupling(image: np.ndarray, mask: MaskPair) -> tuple[np.ndarray, np.ndarray]:
    """I_P = I·M and I_N = I·(1 - M); both keep the full frame."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != mask.M.shape:
        raise DimensionError(f"Mask {mask.M.shape} does not match image {image.shape}")
    return image * mask.M, image * (1.0 - mask.M)


def compute_losses(P_I: float, P_P: float, P_N: float, C_gt: float) -> LossBundle:
    parts = P_P + P_N
    return LossBundle(L_C=abs(P_I - C_gt), L_SS=abs(parts - P_I), L_I=abs(parts - C_gt))


def verify_decomposition(samples: Sequence[EnsembleSample]) -> float:
    """Max residual of (M̂-y)² = ½((m1-y)² + (m23-y)²) - (m1-M̂)² with M̂ = ½(m1 + m23)."""
    if not samples:
        raise ParameterError("verify_decomposition needs at least one sample")
    m1, m23, y = _columns(samples)
    ensemble = 0.5 * (m1 + m23)
    lhs = (ensemble - y) ** 2
    rhs = 0.5 * ((m1 - y) ** 2 + (m23 - y) ** 2) - (m1 - ensemble) ** 2
    return float(np.max(np.abs(lhs - rhs)))


def ensemble_corollary(samples: Sequence[EnsembleSample], tol: float = 1e-9) -> float:
    """Fraction of samples whose ensemble error does not exceed the mean individual error."""
    if not samples:
        raise ParameterError("ensemble_corollary needs at least one sample")
    m1, m23, y = _columns(samples)
    ensemble_error = (0.5 * (m1 + m23) - y) ** 2
    average_error = 0.5 * ((m1 - y) ** 2 + (m23 - y) ** 2)
    holds = ensemble_error <= average_error + tol * np.maximum(1.0, average_error)
    return float(np.mean(holds))


def draw_ensemble_samples(rng: RngState, n: int, high: float = 1000.0) -> list[EnsembleSample]:
    values = rng.uniform(0.0, high, (n, 3))
    return [EnsembleSample(float(a), float(b), float(c)) for a, b, c in values]


def split_counting_loss(
    model: CrowdMLP,
    images: np.ndarray,
    counts: np.ndarray,
    masks: Sequence[MaskPair],
    rng: RngState | None,
    mode: str,
    *,
    use_proxy: bool = True,
    raw_rng: RngState | StackedRng | None = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Batch-mean objective and the three prediction vectors (P_I, P_P, P_N).

    Records onto the active tape, if any. ``images`` is N×3×H×H with one mask per example.
    """
    if len(masks) != images.shape[0]:
        raise DimensionError(f"Got {len(masks)} masks for {images.shape[0]} images")
    stacked = np.stack([m.M for m in masks])[:, None]
    views = {"whole": images, "inside": images * stacked, "outside": images * (1.0 - stacked)}
    if raw_rng is None and rng is not None:
        raw_rng = rng.derive("raw")
    # The whole-image pass records train-mode normalizers; the part passes replay them.
    shared = SharedBatchStats()
    predictions = []
    for key, view in views.items():
        with shared:
            predictions.append(
                predict_count(
                    model,
                    Tensor(view),
                    rng.derive("pass", key) if rng is not None else None,
                    mode,
                    raw_rng=raw_rng.derive() if raw_rng is not None else None,
                )
            )
    p_i, p_p, p_n = predictions
    gt = Tensor(counts)
    total = abs_err(p_i, gt)
    if use_proxy:
        parts = add(p_p, p_n)
        total = add(total, scale(add(abs_err(parts, p_i), abs_err(parts, gt)), 0.5))
    return scale(total, 1.0 / len(masks)), p_i, p_p, p_n


def split_counting_step(
    images: np.ndarray,
    counts: Sequence[float] | np.ndarray,
    model: CrowdMLP,
    rng: RngState,
    mode: str = "train",
    *,
    use_proxy: bool = True,
    masks: Sequence[MaskPair] | None = None,
    raw_rng: RngState | StackedRng | None = None,
) -> StepResult:
    """Three passes (I, I_P, I_N) through one parameter set, one backward pass on L.

    ``images`` is N×3×H×H (a single 3×H×H image is treated as N=1). The optimized loss is
    the mean of the per-example L, or of L_C alone when ``use_proxy`` is off. Gradients
    are returned as copies; the model's parameter ``grad`` buffers are overwritten.
    """
    check_mode(mode)
    batch = np.asarray(images, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[-1] != batch.shape[-2]:
        raise DimensionError(f"split_counting_step expects N×3×H×H images, got {batch.shape}")
    n, _, height, _ = batch.shape
    targets = np.asarray(counts, dtype=np.float64).reshape(-1)
    if targets.shape != (n,):
        raise DimensionError(f"Got {targets.size} counts for {n} images")
    if masks is None:
        masks = [sample_mask(rng.derive("mask", i), height) for i in range(n)]

    model.store.zero_grad()
    with Tape() as tape:
        loss, p_i, p_p, p_n = split_counting_loss(
            model, batch, targets, masks, rng, mode, use_proxy=use_proxy, raw_rng=raw_rng
        )
    backward(loss, tape)

    per_example = [
        compute_losses(float(a), float(b), float(c), float(y))
        for a, b, c, y in zip(p_i.data, p_p.data, p_n.data, targets)
    ]
    gradients = {name: p.grad.copy() for name, p in model.params.items()}
    return StepResult(
        loss=LossBundle.mean(per_example),
        per_example=per_example,
        gradients=gradients,
        masks=list(masks),
    )


def with_random_offsets(model: CrowdMLP, rng: RngState, scale: float = 0.1) -> CrowdMLP:
    """Deep copy of ``model`` whose biases and batch-norm shifts are drawn from N(0, scale²).

    Zero offsets put relu inputs exactly at the kink wherever an input region is zero,
    such as the blanked side of a split image.
    """
    offset = copy.deepcopy(model)
    for name, param in offset.params.items():
        if name.endswith((".bias", ".beta")):
            param.data[...] = rng.derive(name).normal(0.0, scale, param.shape)
    return offset


def gradcheck_split_counting(
    model: CrowdMLP,
    images: np.ndarray,
    counts: np.ndarray,
    rng: RngState,
    *,
    coords_per_param: int = 4,
    step: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of the full objective in eval mode, per named parameter.

    The check runs on ``with_random_offsets(model)``; ``model`` itself is left untouched.
    """
    height = images.shape[-1]
    masks = [sample_mask(rng.derive("mask", i), height) for i in range(images.shape[0])]
    checked = with_random_offsets(model, rng.derive("offsets"))
    return gradcheck_parameters(
        lambda: split_counting_loss(checked, images, counts, masks, None, "eval")[0],
        checked.params,
        step=step,
        coords_per_param=coords_per_param,
        rng=rng.derive("coords"),
    )


def _columns(samples: Sequence[EnsembleSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    table = np.array([(s.m1, s.m23, s.y) for s in samples], dtype=np.float64)
    return table[:, 0], table[:, 1], table[:, 2]
