# test_lease.py
# LeaSE Engine - Four-Level Optimizer Tests
# Created by Digital COE Gen AI Team

import numpy as np
import pytest

from leasenas.ai.autodiff import ParamSet, constant, value_and_grad
from leasenas.ai.lease import (
    IterationBatches, LeaseEngine, LeaseState, arch_update, audience_chain, fd_hvp
)
from leasenas.ai.explain import PerturbationSet
from leasenas.ai.searchspace import ArchParams
from leasenas.models.schemas import Hyperparams, Mode
from leasenas.services.gradcheck import (
    HVP_TOLERANCE, HYPERGRAD_TOLERANCE, bilinear_hvp_error, explainer_hypergradient_error,
    network_hvp_error, relative_error, scalar_chain_error
)


@pytest.fixture
def batches(batch_factory):
    return IterationBatches(
        e_train=batch_factory(), a_train=batch_factory(), e_val=batch_factory(), a_val=batch_factory()
    )


@pytest.fixture
def make_engine(tiny_explainer_spec, tiny_audience_spec, tiny_hp):
    def build(mode=Mode.LEASE, **updates):
        return LeaseEngine(tiny_explainer_spec, tiny_audience_spec, tiny_hp.model_copy(update=updates), mode)
    return build


@pytest.fixture
def state(tiny_explainer_spec, tiny_audience_spec):
    return LeaseState.initial(11, tiny_explainer_spec, tiny_audience_spec)


class TestVirtualSteps:
    def test_zero_step_keeps_weights(self, make_engine, tiny_weights, tiny_batch):
        E, W, A = tiny_weights
        engine = make_engine(xi_e=0.0, xi_w=0.0)
        E_virtual, loss = engine.virtual_explainer_step(E, A, tiny_batch)
        assert E_virtual.flat().tobytes() == E.flat().tobytes()
        assert loss > 0
        W_virtual, _ = engine.virtual_audience_step(W, constant(tiny_batch.images), tiny_batch.labels)
        assert W_virtual.flat().tobytes() == W.flat().tobytes()

    def test_step_follows_negative_gradient(self, make_engine, tiny_weights, tiny_batch):
        E, _, A = tiny_weights
        engine = make_engine()
        _, (grad,) = value_and_grad(lambda ev: engine.explainer_loss(ev, A, tiny_batch), E)
        E_virtual, _ = engine.virtual_explainer_step(E, A, tiny_batch)
        np.testing.assert_allclose(E_virtual.flat(), E.flat() - 0.05 * grad.flat(), rtol=1e-12)


class TestOuterObjective:
    @pytest.mark.parametrize("mode, expected", [
        (Mode.LEASE, lambda e, a: e + 2.0 * a),
        (Mode.DARTS1ST, lambda e, a: e),
        (Mode.AUDIENCE_ONLY, lambda e, a: 2.0 * a),
    ])
    def test_mode_combination(self, make_engine, tiny_weights, batches, mode, expected):
        E, W, A = tiny_weights
        engine = make_engine(mode)
        e_val = engine.explainer_loss(E, A, batches.e_val).item()
        a_val = engine.audience_loss(W, constant(batches.a_val.images), batches.a_val.labels).item()
        value = engine.outer_objective(E, A, W, batches.e_val, batches.a_val, gamma=2.0)
        assert value == pytest.approx(expected(e_val, a_val), rel=1e-12)


class TestFiniteDifferenceHvp:
    @pytest.mark.parametrize("seed", range(5))
    def test_bilinear_is_exact(self, seed):
        assert bilinear_hvp_error(seed) < 1e-10

    def test_zero_direction_gives_zero(self):
        calls = []

        def grad_fn(y):
            calls.append(y)
            return ParamSet({"x": y["y"]})

        like = ParamSet({"x": np.ones(2)})
        result = fd_hvp(grad_fn, ParamSet({"y": np.ones(2)}), ParamSet({"y": np.zeros(2)}), like=like)
        assert result.is_zero()
        assert list(result) == ["x"]
        assert calls == []

    def test_network_matches_nested_differences(self):
        assert network_hvp_error(0) < HVP_TOLERANCE


class TestHypergradients:
    def test_explainer_path_without_step_is_direct_gradient(self, make_engine, tiny_weights, batches):
        E, _, A = tiny_weights
        engine = make_engine(xi_e=0.0)
        E_virtual, _ = engine.virtual_explainer_step(E, A, batches.e_train)
        hypergrad, _ = engine.hypergrad_explainer_path(E, A, E_virtual, batches.e_train, batches.e_val)
        _, (direct,) = value_and_grad(lambda av: engine.explainer_loss(E, av, batches.e_val), A)
        np.testing.assert_array_equal(hypergrad.logits, direct.logits)

    @pytest.mark.slow
    def test_explainer_path_matches_unrolled_differences(self):
        assert explainer_hypergradient_error(0) < HYPERGRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(10))
    def test_scalar_chain_matches_closed_form(self, seed):
        assert scalar_chain_error(seed) < HVP_TOLERANCE

    def test_chain_vanishes_with_zero_step(self):
        like = ParamSet({"alpha": np.ones(3)})
        v1 = ParamSet({"w": np.ones(2)})
        fail = lambda _: pytest.fail("chain should short-circuit")
        result = audience_chain(
            v1, v1, PerturbationSet.from_delta(np.zeros(2)), ParamSet({"e": np.ones(2)}), np.ones(2, dtype=bool),
            fail, fail, fail, Hyperparams(xi_w=0.0), like,
        )
        assert result.is_zero()

    def test_chain_vanishes_when_projection_saturates(self):
        like = ParamSet({"alpha": np.ones(3)})
        v1 = ParamSet({"w": np.ones(2)})
        fail = lambda _: pytest.fail("chain should stop after the mask")
        result = audience_chain(
            v1, v1, PerturbationSet.from_delta(np.zeros(2)), ParamSet({"e": np.ones(2)}), np.zeros(2, dtype=bool),
            lambda w: ParamSet({"delta": 3.0 * w["w"]}), fail, fail, Hyperparams(), like,
        )
        assert result.is_zero()

    def test_arch_update(self):
        A = ArchParams.from_logits(np.ones((2, 3)))
        g_e = ParamSet({"alpha": np.full((2, 3), 2.0)})
        g_a = ParamSet({"alpha": np.full((2, 3), 4.0)})
        np.testing.assert_allclose(arch_update(A, g_e, g_a, 0.1, 0.5).logits, 1.0 - 0.1 * 4.0)
        np.testing.assert_allclose(arch_update(A, g_e, None, 0.1, 0.5).logits, 1.0 - 0.1 * 2.0)
        assert isinstance(arch_update(A, g_e, None, 0.1, 0.5), ArchParams)


class TestIterate:
    def test_zero_gamma_matches_darts_first_order(self, make_engine, state, batches):
        lease_state, _ = make_engine(Mode.LEASE, gamma=0.0).iterate(state, batches)
        darts_state, report = make_engine(Mode.DARTS1ST).iterate(state, batches)
        np.testing.assert_array_equal(lease_state.A.logits, darts_state.A.logits)
        np.testing.assert_array_equal(lease_state.E.flat(), darts_state.E.flat())
        assert report.audience_val_loss is None and report.attack_objective is None

    def test_zero_gamma_matches_darts_reference_over_iterations(self, make_engine, state, batch_factory):
        engine = make_engine(Mode.LEASE, gamma=0.0)
        for _ in range(10):
            batches = IterationBatches(batch_factory(), batch_factory(), batch_factory(), batch_factory())
            expected = _darts_reference(engine, state, batches, xi=0.05, eta=0.01)
            state, _ = engine.iterate(state, batches)
            np.testing.assert_allclose(state.A.logits, expected, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("factor", ["xi_w", "xi_delta", "xi_e"])
    def test_audience_path_vanishes_with_any_zero_step(self, make_engine, state, batches, factor):
        _, report = make_engine(Mode.LEASE, **{factor: 0.0}).iterate(state, batches)
        assert report.audience_grad_norm == 0.0

    def test_audience_only_uses_audience_gradient(self, make_engine, state, batches):
        next_state, report = make_engine(Mode.AUDIENCE_ONLY).iterate(state, batches)
        assert report.explainer_grad_norm == 0.0
        assert report.outer_objective == pytest.approx(report.audience_val_loss)
        assert not np.array_equal(next_state.A.logits, state.A.logits)

    def test_deterministic_per_seed(self, make_engine, tiny_explainer_spec, tiny_audience_spec, batches):
        def run():
            current = LeaseState.initial(3, tiny_explainer_spec, tiny_audience_spec)
            engine = make_engine()
            for _ in range(2):
                current, report = engine.iterate(current, batches)
            return current.A.logits.tobytes(), report.outer_objective

        assert run() == run()

    def test_five_iteration_smoke(self, make_engine, state, batches):
        engine = make_engine()
        rows = []
        for _ in range(5):
            state, report = engine.iterate(state, batches)
            rows.append(report.to_metrics_row())
        assert state.iteration == 5
        assert [row.iteration for row in rows] == [1, 2, 3, 4, 5]
        assert all(row.first_non_finite() is None for row in rows)
        assert state.first_non_finite() is None
        assert report.delta.max_abs <= engine.hp.epsilon


def _darts_reference(engine, state, batches, xi, eta):
    """Committed step, virtual step and second-order explainer update written out by hand."""
    E, A = state.E, state.A

    def grad_e(e):
        return value_and_grad(lambda ev: engine.explainer_loss(ev, A, batches.e_train), e)[1][0]

    E_committed = E.axpy(-xi, grad_e(E))
    E_virtual = E_committed.axpy(-xi, grad_e(E_committed))
    _, (g_val_e, g_val_a) = value_and_grad(
        lambda ev, av: engine.explainer_loss(ev, av, batches.e_val), E_virtual, A, wrt=(0, 1)
    )
    hvp = fd_hvp(
        lambda e: value_and_grad(lambda av: engine.explainer_loss(e, av, batches.e_train), A)[1][0],
        E_committed, g_val_e, like=A,
    )
    return A.logits - eta * (g_val_a.logits - xi * hvp.logits)
