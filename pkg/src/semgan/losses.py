"""Objective terms: least-squares adversarial, cycle, and the
boundary-weighted gradient loss, composed into the full training total.

All expectations are realized as means over batch and spatial elements,
and L1 norms are normalized by element count (mean-L1), which keeps the
loss weights meaningful across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import engine
from .engine import ShapeError, Tensor
from .gradfilters import LabelMap, boundary_mask, gradient_magnitude, label_grad_pair, sobel_pair


@dataclass(frozen=True)
class SoftnessParams:
    """Boundary weight alpha, everywhere weight beta; alpha + beta = 1."""

    alpha: float
    beta: float

    def __post_init__(self):
        problems = []
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if abs(self.alpha + self.beta - 1.0) > 1e-6:
            problems.append(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class LossWeights:
    """Relative importance of the cycle and gradient terms."""

    lambda_c: float = 10.0
    lambda_g: float = 5.0

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ValueError(
                f"loss weights must be non-negative, got "
                f"lambda_c={self.lambda_c}, lambda_g={self.lambda_g}"
            )


LOSS_FIELDS = ("adv_g_v2r", "adv_g_r2v", "adv_d_r", "adv_d_v", "cycle", "grad_sens", "total")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar losses; total composes the generator-side terms."""

    adv_g_v2r: float
    adv_g_r2v: float
    adv_d_r: float
    adv_d_v: float
    cycle: float
    grad_sens: float
    total: float

    @classmethod
    def from_components(cls, adv_g_v2r: float, adv_g_r2v: float, adv_d_r: float,
                        adv_d_v: float, cycle: float, grad_sens: float,
                        weights: LossWeights) -> "LossReport":
        total = adv_g_v2r + adv_g_r2v + weights.lambda_c * cycle + weights.lambda_g * grad_sens
        return cls(adv_g_v2r, adv_g_r2v, adv_d_r, adv_d_v, cycle, grad_sens, total)

    def csv_values(self) -> list:
        return [getattr(self, name) for name in LOSS_FIELDS]


def mean_l1(x: Tensor) -> Tensor:
    """L1 norm divided by element count."""
    return engine.mul(engine.reduce(x, "l1_norm"), 1.0 / x.size)


def discriminator_loss_ls(d_on_real: Tensor, d_on_fake: Tensor) -> Tensor:
    """mean((d_real - 1)^2) + mean(d_fake^2); zero iff scores are ideal."""
    if d_on_real.shape != d_on_fake.shape:
        raise ShapeError(
            f"discriminator_loss_ls: score maps {d_on_real.shape} and "
            f"{d_on_fake.shape} do not match"
        )
    real_err = engine.sub(d_on_real, 1.0)
    real_term = engine.reduce(engine.mul(real_err, real_err), "mean")
    fake_term = engine.reduce(engine.mul(d_on_fake, d_on_fake), "mean")
    return engine.add(real_term, fake_term)


def generator_adv_loss_ls(d_on_fake: Tensor) -> Tensor:
    """mean((d_fake - 1)^2): the generator wants fakes scored as real."""
    err = engine.sub(d_on_fake, 1.0)
    return engine.reduce(engine.mul(err, err), "mean")


def cycle_loss(v: Tensor, v_cycled: Tensor, r: Tensor, r_cycled: Tensor) -> Tensor:
    """Mean-L1 reconstruction error of both round trips."""
    if v.shape != v_cycled.shape:
        raise ShapeError(f"cycle_loss: {v.shape} vs {v_cycled.shape}")
    if r.shape != r_cycled.shape:
        raise ShapeError(f"cycle_loss: {r.shape} vs {r_cycled.shape}")
    return engine.add(mean_l1(engine.sub(v_cycled, v)),
                      mean_l1(engine.sub(r_cycled, r)))


def soft_grad_loss(x: Tensor, x_adapted: Tensor, labels: LabelMap,
                   params: SoftnessParams) -> Tensor:
    """Mean-L1 of the gradient-magnitude discrepancy, weighted
    alpha on semantic boundaries and beta everywhere.

    Labels contribute no gradient; adaptation should change texture, not
    where region edges sit.
    """
    if x.shape != x_adapted.shape:
        raise ShapeError(f"soft_grad_loss: {x.shape} vs {x_adapted.shape}")
    b, _, h, w = x.shape
    if labels.shape != (b, h, w):
        raise ShapeError(
            f"soft_grad_loss: labels {labels.shape} do not match images ({b}, {h}, {w})"
        )
    image_filters = sobel_pair()
    gm_x = gradient_magnitude(x, image_filters)
    gm_a = gradient_magnitude(x_adapted, image_filters)
    discrepancy = engine.absolute(engine.sub(gm_x, gm_a))
    mask = boundary_mask(labels, label_grad_pair())
    weight = engine.add(engine.mul(mask, params.alpha), params.beta)
    return mean_l1(engine.mul(discrepancy, weight))


def full_grad_objective(v: Tensor, v_adapted: Tensor, labels_v: LabelMap,
                        r: Tensor, r_adapted: Tensor, labels_r: LabelMap,
                        params: SoftnessParams) -> Tensor:
    """Gradient-sensitive terms of both adaptation directions, summed."""
    return engine.add(soft_grad_loss(v, v_adapted, labels_v, params),
                      soft_grad_loss(r, r_adapted, labels_r, params))


def total_objective(adv_g_v2r: Tensor, adv_g_r2v: Tensor, cycle: Tensor,
                    grad_sens: Tensor, weights: LossWeights) -> Tensor:
    """Generator-side total: adv(V->R) + adv(R->V) + lc*cycle + lg*grad."""
    total = engine.add(adv_g_v2r, adv_g_r2v)
    total = engine.add(total, engine.mul(cycle, weights.lambda_c))
    return engine.add(total, engine.mul(grad_sens, weights.lambda_g))
