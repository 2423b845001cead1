# explain.py
# LeaSE Engine - Adversarial-Perturbation Explanations
# Created by Digital COE Gen AI Team

from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np
from loguru import logger

from leasenas.ai.autodiff import (
    ParamSet, Tensor, abs_, add, clamp_min, constant, cross_entropy, div, max_per_example,
    mul_elementwise, no_trace, softmax_rows, stop_gradient, value_and_grad
)
from leasenas.ai.nn import explainer_forward
from leasenas.exceptions import ConfigError, NonFiniteError, ShapeMismatchError
from leasenas.models.schemas import ExplainerSpec, ReweighMode


# Initial perturbations are uniform in +/- INIT_FRACTION * epsilon
INIT_FRACTION = 0.01
# Floor of the per-example max |delta| in abs-normalized reweighing
REWEIGH_FLOOR = 1e-12


class PerturbationSet(ParamSet):
    """Per-example perturbations Δ (one tensor shaped like the image batch) plus step size and box bound."""

    KEY = "delta"

    def __init__(self, arrays, step: float = 0.0, bound: float = np.inf):
        super().__init__(arrays)
        self.step = float(step)
        self.bound = float(bound)

    def _like(self, arrays) -> "PerturbationSet":
        return self.__class__(arrays, step=self.step, bound=self.bound)

    @classmethod
    def from_delta(cls, delta, step: float = 0.0, bound: float = np.inf) -> "PerturbationSet":
        return cls({cls.KEY: delta}, step=step, bound=bound)

    @property
    def delta(self) -> np.ndarray:
        return self[self.KEY]

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


@dataclass
class AttackOutcome:
    """Result of the explanation stage on one batch."""
    delta: PerturbationSet
    start: PerturbationSet  # Δ at the start of the final step
    mask: np.ndarray  # coordinates left untouched by the final projection
    objective_before: float
    objective_after: float


def _delta_tensor(delta) -> Tensor:
    if isinstance(delta, ParamSet):
        return constant(delta[PerturbationSet.KEY])
    if isinstance(delta, Mapping):
        return delta[PerturbationSet.KEY]
    return delta if isinstance(delta, Tensor) else constant(delta)


def init_perturbations(
    shape, epsilon: float, step: float, rng: np.random.Generator
) -> PerturbationSet:
    """Uniform start in [-0.01 epsilon, +0.01 epsilon] per element."""
    radius = INIT_FRACTION * epsilon
    delta = rng.uniform(-radius, radius, size=tuple(shape)) if radius > 0 else np.zeros(tuple(shape))
    return PerturbationSet.from_delta(delta, step=step, bound=epsilon)


def attack_objective(
    x: Tensor,
    delta,
    E,
    A,
    spec: ExplainerSpec,
    detach_target: bool = True,
) -> Tensor:
    """
    Batch-mean discrepancy between predictions on perturbed and clean images.

    Args:
        x: Images, N x C x H x W
        delta: Perturbations shaped like x (Tensor, PerturbationSet or name -> Tensor view)
        E: Explainer weights (ParamSet or views)
        A: Architecture logits (ParamSet or views)
        spec: Explainer specification
        detach_target: Hold the clean-image prediction constant

    Returns:
        Scalar mean_i l(f(x_i + d_i; E), f(x_i; E))
    """
    delta = _delta_tensor(delta)
    if delta.shape != x.shape:
        raise ShapeMismatchError("attack_objective", x.shape, delta.shape)
    perturbed = softmax_rows(explainer_forward(add(x, delta), E, A, spec))
    target = softmax_rows(explainer_forward(x, E, A, spec))
    if detach_target:
        target = stop_gradient(target)
    return cross_entropy(perturbed, target)


def perturb_step(
    x: Tensor,
    delta: PerturbationSet,
    E,
    A,
    spec: ExplainerSpec,
    step: Optional[float] = None,
    bound: Optional[float] = None,
):
    """
    One projected ascent step: clip(Δ + step * grad_Δ attack_objective, -bound, bound).

    Returns:
        (Δ′, interior mask, objective at Δ)
    """
    step = delta.step if step is None else float(step)
    bound = delta.bound if bound is None else float(bound)
    e_views = E.as_constants() if isinstance(E, ParamSet) else E
    a_views = A.as_constants() if isinstance(A, ParamSet) else A
    value, (grad,) = value_and_grad(
        lambda d: attack_objective(x, d, e_views, a_views, spec, detach_target=True), delta
    )
    bad = grad.first_non_finite()
    if bad is not None:
        raise NonFiniteError(f"perturb_step gradient ({bad})")

    raw = delta.delta + step * grad.delta
    mask = np.abs(raw) < bound
    clipped = np.clip(raw, -bound, bound)
    if not mask.all():
        logger.debug(f"perturb_step: projection clipped {int((~mask).sum())}/{mask.size} coordinates")
    return delta._like({PerturbationSet.KEY: clipped}), mask, value


def run_attack(
    x: Tensor,
    start: PerturbationSet,
    E,
    A,
    spec: ExplainerSpec,
    steps: int = 1,
) -> AttackOutcome:
    """Repeat perturb_step `steps` times from `start`; the last step's start and mask are kept for the chain rule."""
    current = start
    mask = np.ones(start.delta.shape, dtype=bool)
    before = None
    step_start = start
    for _ in range(max(1, steps)):
        step_start = current
        current, mask, value = perturb_step(x, current, E, A, spec)
        before = value if before is None else before

    with no_trace():
        after = float(attack_objective(x, current, E, A, spec).data)
    if after < before:
        logger.warning(f"attack objective decreased on ascent ({before:.6g} -> {after:.6g})")
    return AttackOutcome(delta=current, start=step_start, mask=mask, objective_before=before, objective_after=after)


def reweigh_inputs(x: Tensor, delta, mode: Union[ReweighMode, str] = ReweighMode.ABS_NORMALIZED) -> Tensor:
    """
    Explanation-reweighted audience inputs.

    literal: d ⊙ x. abs_normalized: (|d| / max(max|d|, 1e-12)) ⊙ x per example.
    """
    try:
        mode = ReweighMode(mode)
    except ValueError:
        raise ConfigError(f"unknown reweigh mode {mode!r}", field="search.reweigh_mode") from None
    delta = _delta_tensor(delta)
    if delta.shape != x.shape:
        raise ShapeMismatchError("reweigh_inputs", x.shape, delta.shape)
    if mode == ReweighMode.LITERAL:
        return mul_elementwise(delta, x)
    magnitude = abs_(delta)
    scale = clamp_min(max_per_example(magnitude), REWEIGH_FLOOR)
    return mul_elementwise(div(magnitude, scale), x)
