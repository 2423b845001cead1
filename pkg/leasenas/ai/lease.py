# lease.py
# LeaSE Engine - Four-Level Architecture Optimizer
# Created by Digital COE Gen AI Team

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from loguru import logger

from leasenas.ai.autodiff import ParamSet, Tensor, constant, no_trace, scale, value_and_grad
from leasenas.ai.explain import (
    AttackOutcome, PerturbationSet, attack_objective, init_perturbations, reweigh_inputs, run_attack
)
from leasenas.ai.nn import (
    AudienceWeights, ExplainerWeights, audience_forward, classification_loss, explainer_forward,
    init_weights
)
from leasenas.ai.searchspace import ArchParams
from leasenas.exceptions import NonFiniteError
from leasenas.models.schemas import AudienceSpec, ExplainerSpec, Hyperparams, MetricsRow, Mode
from leasenas.services.data import LabeledSet


# fd_hvp returns zero below this direction norm
HVP_NORM_FLOOR = 1e-12

ARCH_STREAM = 3
PERTURB_STREAM = 4

GradFn = Callable[[ParamSet], ParamSet]


# Second-order helpers

def fd_hvp(
    grad_fn: GradFn,
    Y0: ParamSet,
    v: ParamSet,
    alpha_scale: float = 0.01,
    like: Optional[ParamSet] = None,
) -> ParamSet:
    """
    Central-difference mixed second derivative times a vector.

    Args:
        grad_fn: Y -> gradient of g w.r.t. X at (X fixed, Y)
        Y0: Point to expand around
        v: Direction, shaped like Y0
        alpha_scale: Step numerator; the step is alpha_scale / ||v||
        like: Shape template of the result, used when v is (numerically) zero

    Returns:
        (grad_fn(Y0 + a v) - grad_fn(Y0 - a v)) / (2 a)
    """
    norm = v.norm()
    if norm < HVP_NORM_FLOOR:
        return (like if like is not None else grad_fn(Y0)).zeros_like()
    alpha = alpha_scale / norm
    plus = grad_fn(Y0.axpy(alpha, v))
    minus = grad_fn(Y0.axpy(-alpha, v))
    result = (plus - minus) * (1.0 / (2.0 * alpha))
    bad = result.first_non_finite()
    if bad is not None:
        raise NonFiniteError(f"fd_hvp ({bad})")
    return result


def arch_update(
    A: ArchParams,
    g_explainer: ParamSet,
    g_audience: Optional[ParamSet],
    eta: float,
    gamma: float,
) -> ArchParams:
    """A - eta * (g_explainer + gamma * g_audience); a missing audience gradient counts as zero."""
    direction = g_explainer if g_audience is None else g_explainer.axpy(gamma, g_audience)
    return A.axpy(-eta, direction)


def audience_chain(
    v1: ParamSet,
    W: ParamSet,
    delta_start: PerturbationSet,
    E: ParamSet,
    mask: np.ndarray,
    audience_grad_delta: GradFn,
    attack_grad_explainer: GradFn,
    explainer_grad_arch: GradFn,
    hp: Hyperparams,
    like: ParamSet,
) -> ParamSet:
    """
    Right-to-left vector-Jacobian chain through W′(Δ′), Δ′(E′) and E′(A).

    Args:
        v1: Audience validation gradient at W′
        W: Audience weights the virtual audience step started from
        delta_start: Perturbations the final ascent step started from
        E: Explainer weights the virtual explainer step started from
        mask: Coordinates of Δ′ left interior by the box projection
        audience_grad_delta: w -> grad over Δ′ of the audience training loss
        attack_grad_explainer: d -> grad over E′ of the negated attack objective (minimized form)
        explainer_grad_arch: e -> grad over A of the explainer training loss
        hp: Step sizes and the finite-difference rule
        like: Result template (shaped like A)

    Returns:
        Audience-path hypergradient shaped like A; exactly zero when any factor vanishes
    """
    if hp.xi_w == 0 or hp.xi_delta == 0 or hp.xi_e == 0 or v1.is_zero():
        return like.zeros_like()

    v2 = fd_hvp(audience_grad_delta, W, v1, hp.alpha_scale, like=delta_start) * -hp.xi_w
    v2 = v2.map(lambda a: np.where(mask, a, 0.0))
    if v2.is_zero():
        return like.zeros_like()

    v3 = fd_hvp(attack_grad_explainer, delta_start, v2, hp.alpha_scale, like=E) * -hp.xi_delta
    if v3.is_zero():
        return like.zeros_like()

    return fd_hvp(explainer_grad_arch, E, v3, hp.alpha_scale, like=like) * -hp.xi_e


# State

@dataclass
class LeaseState:
    """Persistent variables of the search loop; confined to one worker at a time."""
    E: ExplainerWeights
    W: AudienceWeights
    A: ArchParams
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def initial(cls, seed: int, explainer_spec: ExplainerSpec, audience_spec: AudienceSpec) -> "LeaseState":
        return cls(
            E=init_weights(seed, explainer_spec),
            W=init_weights(seed, audience_spec),
            A=ArchParams.initial(explainer_spec.cell, np.random.default_rng([seed, ARCH_STREAM])),
            iteration=0,
            rng=np.random.default_rng([seed, PERTURB_STREAM]),
        )

    def first_non_finite(self) -> Optional[str]:
        for name, params in (("E", self.E), ("W", self.W), ("A", self.A)):
            bad = params.first_non_finite()
            if bad is not None:
                return f"{name}.{bad}"
        return None


@dataclass
class IterationBatches:
    """One batch from each of the four splits."""
    e_train: LabeledSet
    a_train: LabeledSet
    e_val: LabeledSet
    a_val: LabeledSet


@dataclass
class IterationReport:
    """Diagnostics of one outer iteration; None marks a stage the mode skipped."""
    iteration: int
    explainer_train_loss: float
    explainer_val_loss: float
    outer_objective: float
    audience_train_loss: Optional[float] = None
    audience_val_loss: Optional[float] = None
    attack_objective: Optional[float] = None
    attack_objective_before: Optional[float] = None
    explainer_grad_norm: float = 0.0
    audience_grad_norm: Optional[float] = None
    delta: Optional[PerturbationSet] = None

    def to_metrics_row(self, wall_ms: Optional[float] = None) -> MetricsRow:
        return MetricsRow(
            iteration=self.iteration,
            explainer_train_loss=self.explainer_train_loss,
            explainer_val_loss=self.explainer_val_loss,
            audience_train_loss=self.audience_train_loss,
            audience_val_loss=self.audience_val_loss,
            attack_objective=self.attack_objective,
            outer_objective=self.outer_objective,
            wall_ms=wall_ms,
        )


# Engine

class LeaseEngine:
    """
    Four-level search step: explainer, explanation, audience and architecture.

    Every method is a pure function of its arguments; state lives in LeaseState.
    """

    def __init__(
        self,
        explainer_spec: ExplainerSpec,
        audience_spec: AudienceSpec,
        hp: Hyperparams,
        mode: Mode = Mode.LEASE,
    ):
        self.explainer_spec = explainer_spec
        self.audience_spec = audience_spec
        self.hp = hp
        self.mode = Mode(mode)

    # Losses

    def explainer_loss(self, E, A, batch: LabeledSet) -> Tensor:
        return classification_loss(explainer_forward(constant(batch.images), E, A, self.explainer_spec), batch.labels)

    def audience_loss(self, W, inputs: Tensor, labels) -> Tensor:
        return classification_loss(audience_forward(inputs, W, self.audience_spec), labels)

    def _explainer_grad_arch(self, A: ArchParams, batch: LabeledSet) -> GradFn:
        def grad_fn(e: ParamSet) -> ParamSet:
            _, (grad,) = value_and_grad(lambda ev, av: self.explainer_loss(ev, av, batch), e, A, wrt=(1,))
            return grad
        return grad_fn

    # Virtual steps

    def virtual_explainer_step(self, E: ExplainerWeights, A: ArchParams, batch: LabeledSet):
        """E′ = E - xi_e * grad_E L(E, A, batch). Returns (E′, loss at E)."""
        loss, (grad,) = value_and_grad(lambda ev, av: self.explainer_loss(ev, av, batch), E, A, wrt=(0,))
        bad = grad.first_non_finite()
        if bad is not None:
            raise NonFiniteError(f"explainer gradient ({bad})")
        return E.axpy(-self.hp.xi_e, grad), loss

    def virtual_audience_step(self, W: AudienceWeights, inputs: Tensor, labels):
        """W′ = W - xi_W * grad_W L(W, inputs). Returns (W′, loss at W)."""
        loss, (grad,) = value_and_grad(lambda wv: self.audience_loss(wv, inputs, labels), W)
        bad = grad.first_non_finite()
        if bad is not None:
            raise NonFiniteError(f"audience gradient ({bad})")
        return W.axpy(-self.hp.xi_w, grad), loss

    def attack(self, images: np.ndarray, start: PerturbationSet, E: ExplainerWeights, A: ArchParams) -> AttackOutcome:
        return run_attack(constant(images), start, E, A, self.explainer_spec, self.hp.attack_steps)

    def reweigh(self, images: np.ndarray, delta) -> Tensor:
        return reweigh_inputs(constant(images), delta, self.hp.reweigh_mode)

    # Outer objective & hypergradients

    def outer_objective(
        self,
        E_virtual: ExplainerWeights,
        A: ArchParams,
        W_virtual: AudienceWeights,
        e_val: LabeledSet,
        a_val: LabeledSet,
        gamma: Optional[float] = None,
    ) -> float:
        """L(E′, A, e_val) + gamma * L(W′, a_val), with the audience-only mode dropping the first term."""
        gamma = self.hp.gamma if gamma is None else gamma
        with no_trace():
            explainer = float(self.explainer_loss(E_virtual, A, e_val).data)
            audience = float(self.audience_loss(W_virtual, constant(a_val.images), a_val.labels).data)
        return self._combine(explainer, audience, gamma)

    def _combine(self, explainer: float, audience: Optional[float], gamma: float) -> float:
        if self.mode == Mode.DARTS1ST or audience is None:
            return explainer
        if self.mode == Mode.AUDIENCE_ONLY:
            return gamma * audience
        return explainer + gamma * audience

    def hypergrad_explainer_path(
        self,
        E: ExplainerWeights,
        A: ArchParams,
        E_virtual: ExplainerWeights,
        train: LabeledSet,
        val: LabeledSet,
    ):
        """
        grad_A L(E′, A, val) - xi_e * H_{A,E} L(E, A, train) . grad_E′ L(E′, A, val).

        Returns:
            (hypergradient shaped like A, validation loss at E′)
        """
        val_loss, (grad_e, direct) = value_and_grad(
            lambda ev, av: self.explainer_loss(ev, av, val), E_virtual, A, wrt=(0, 1)
        )
        if self.hp.xi_e == 0:
            return direct, val_loss
        hvp = fd_hvp(self._explainer_grad_arch(A, train), E, grad_e, self.hp.alpha_scale, like=A)
        return direct.axpy(-self.hp.xi_e, hvp), val_loss

    def hypergrad_audience_path(
        self,
        E: ExplainerWeights,
        A: ArchParams,
        E_virtual: ExplainerWeights,
        W: AudienceWeights,
        W_virtual: AudienceWeights,
        outcome: AttackOutcome,
        batches: IterationBatches,
    ):
        """
        Chain-rule path (dE′/dA)(dΔ′/dE′)(dW′/dΔ′) grad_W′ L(W′, a_val).

        Returns:
            (hypergradient shaped like A, audience validation loss at W′)
        """
        a_train, a_val = batches.a_train, batches.a_val
        images = constant(a_train.images)
        val_loss, (v1,) = value_and_grad(
            lambda wv: self.audience_loss(wv, constant(a_val.images), a_val.labels), W_virtual
        )
        delta = outcome.delta
        a_views = A.as_constants()

        def audience_grad_delta(w: ParamSet) -> ParamSet:
            _, (grad,) = value_and_grad(
                lambda wv, dv: self.audience_loss(wv, reweigh_inputs(images, dv, self.hp.reweigh_mode), a_train.labels),
                w, delta, wrt=(1,),
            )
            return grad

        def attack_grad_explainer(d: ParamSet) -> ParamSet:
            _, (grad,) = value_and_grad(
                lambda ev, dv: scale(attack_objective(images, dv, ev, a_views, self.explainer_spec, detach_target=False), -1.0),
                E_virtual, d, wrt=(0,),
            )
            return grad

        g_audience = audience_chain(
            v1, W, outcome.start, E, outcome.mask,
            audience_grad_delta, attack_grad_explainer, self._explainer_grad_arch(A, batches.e_train),
            self.hp, like=A,
        )
        return g_audience, val_loss

    # Outer iteration

    def iterate(self, state: LeaseState, batches: IterationBatches):
        """
        One outer iteration.

        Commits E on e_train, attacks a_train with the committed E, commits W on the reweighted
        images, then re-derives fresh virtual E′, Δ′ and W′ for the architecture step.

        Returns:
            (next LeaseState, IterationReport)
        """
        hp, mode = self.hp, self.mode
        E, W, A = state.E, state.W, state.A

        E, e_train_loss = self.virtual_explainer_step(E, A, batches.e_train)

        audience_train_loss = attack_before = attack_after = None
        start = None
        if mode != Mode.DARTS1ST:
            start = init_perturbations(batches.a_train.images.shape, hp.epsilon, hp.xi_delta, state.rng)
            committed = self.attack(batches.a_train.images, start, E, A)
            attack_before, attack_after = committed.objective_before, committed.objective_after
            W, audience_train_loss = self.virtual_audience_step(
                W, self.reweigh(batches.a_train.images, committed.delta), batches.a_train.labels
            )

        E_virtual, _ = self.virtual_explainer_step(E, A, batches.e_train)
        if mode == Mode.AUDIENCE_ONLY:
            with no_trace():
                e_val_loss = float(self.explainer_loss(E_virtual, A, batches.e_val).data)
            g_explainer = A.zeros_like()
        else:
            g_explainer, e_val_loss = self.hypergrad_explainer_path(E, A, E_virtual, batches.e_train, batches.e_val)

        g_audience = a_val_loss = None
        outcome = None
        if mode != Mode.DARTS1ST:
            outcome = self.attack(batches.a_train.images, start, E_virtual, A)
            W_virtual, _ = self.virtual_audience_step(
                W, self.reweigh(batches.a_train.images, outcome.delta), batches.a_train.labels
            )
            g_audience, a_val_loss = self.hypergrad_audience_path(E, A, E_virtual, W, W_virtual, outcome, batches)

        gamma = 0.0 if mode == Mode.DARTS1ST else hp.gamma
        A_next = arch_update(A, g_explainer, g_audience, hp.eta, gamma)

        report = IterationReport(
            iteration=state.iteration + 1,
            explainer_train_loss=e_train_loss,
            explainer_val_loss=e_val_loss,
            outer_objective=self._combine(e_val_loss, a_val_loss, gamma),
            audience_train_loss=audience_train_loss,
            audience_val_loss=a_val_loss,
            attack_objective=attack_after,
            attack_objective_before=attack_before,
            explainer_grad_norm=g_explainer.norm(),
            audience_grad_norm=None if g_audience is None else g_audience.norm(),
            delta=None if outcome is None else outcome.delta,
        )
        logger.debug(
            f"iter {report.iteration}: outer={report.outer_objective:.6g} "
            f"|g_e|={report.explainer_grad_norm:.3e} |g_a|={report.audience_grad_norm}"
        )
        return replace(state, E=E, W=W, A=A_next, iteration=state.iteration + 1), report
