# test_searchspace.py
# LeaSE Engine - Search Space Tests
# Created by Digital COE Gen AI Team

import itertools

import numpy as np
import pytest

from leasenas.ai import autodiff as ad
from leasenas.ai.autodiff import backward, constant, finite_diff_gradient, leaf
from leasenas.ai.searchspace import (
    ArchParams, apply_op, cell_forward, discrete_cell_forward, discretize, edge_weight_name,
    mixed_edge_forward, mixing_weights, node_weight_name, random_genotype
)
from leasenas.exceptions import ShapeMismatchError
from leasenas.models.schemas import DEFAULT_OPS, CellSpec, Genotype
from leasenas.services.gradcheck import relative_error


OPS = DEFAULT_OPS
SKIP, CONV = OPS.index("skip"), OPS.index("conv3x3_relu")


def _cell_kernels(spec, rng):
    return {
        edge_weight_name(edge, "conv3x3_relu"): constant(rng.normal(size=(spec.channels, spec.channels, 3, 3)))
        for edge in range(spec.num_edges)
    }


class TestCellSpec:
    def test_edges_enumerate_every_earlier_node(self):
        spec = CellSpec(n_nodes=3)
        assert spec.edges == [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3), (0, 4), (1, 4), (2, 4), (3, 4)]
        assert spec.num_edges == 9
        assert spec.num_ops == 5

    def test_zero_op_required(self):
        with pytest.raises(ValueError):
            CellSpec(candidate_ops=["skip", "conv3x3_relu"])


class TestMixedEdge:
    def test_uniform_logits_weigh_ops_equally(self):
        weights = mixing_weights(constant(np.zeros(5))).data
        np.testing.assert_allclose(weights, np.full((1, 5), 0.2))

    def test_saturated_skip_returns_input(self, rng):
        x = constant(rng.uniform(size=(1, 1, 4, 4)))
        logits = np.full(5, -40.0)
        logits[SKIP] = 40.0
        kernel = {"conv3x3_relu": constant(rng.normal(size=(1, 1, 3, 3)))}
        out = mixed_edge_forward(x, constant(logits), kernel, OPS)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_matches_op_by_op_weighted_sum(self, rng):
        x = constant(rng.uniform(size=(1, 1, 4, 4)))
        logits = rng.normal(size=5)
        kernel = constant(rng.normal(size=(1, 1, 3, 3)))
        mix = np.exp(logits) / np.exp(logits).sum()
        outputs = [
            np.zeros((1, 1, 4, 4)),
            x.data,
            ad.relu(ad.conv2d(x, kernel, pad=1)).data,
            ad.avg_pool(x, 3).data,
            ad.max_pool(x, 3).data,
        ]
        expected = sum(w * y for w, y in zip(mix, outputs))
        out = mixed_edge_forward(x, constant(logits), {"conv3x3_relu": kernel}, OPS)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_logits_length_checked(self, rng):
        with pytest.raises(ShapeMismatchError):
            mixed_edge_forward(constant(np.zeros((1, 1, 3, 3))), constant(np.zeros(4)), {}, OPS)

    def test_logit_gradient_matches_finite_differences(self, rng):
        x = constant(rng.uniform(size=(1, 1, 4, 4)))
        kernel = {"conv3x3_relu": constant(rng.normal(size=(1, 1, 3, 3)))}
        projection = constant(rng.normal(size=(1, 1, 4, 4)))
        logits = rng.normal(size=5)

        def f(values):
            return ad.sum_(ad.mul_elementwise(mixed_edge_forward(x, values, kernel, OPS), projection))

        handle = leaf(logits)
        analytic = backward(f(handle)).wrt(handle)
        numeric = finite_diff_gradient(lambda p: f(constant(p)), logits).data
        assert relative_error(analytic, numeric) < 1e-5


class TestCellForward:
    def test_output_channels(self, rng):
        spec = CellSpec(n_nodes=3, channels=2)
        inputs = (constant(rng.normal(size=(2, 2, 4, 4))), constant(rng.normal(size=(2, 2, 4, 4))))
        out = cell_forward(inputs, ArchParams.initial(spec), _cell_kernels(spec, rng), spec)
        assert out.shape == (2, 6, 4, 4)

    def test_zero_saturated_logits_give_zero_output(self, rng):
        spec = CellSpec(n_nodes=2, channels=1)
        logits = np.full((spec.num_edges, spec.num_ops), -40.0)
        logits[:, OPS.index("zero")] = 40.0
        inputs = (constant(rng.uniform(size=(1, 1, 4, 4))), constant(rng.uniform(size=(1, 1, 4, 4))))
        out = cell_forward(inputs, ArchParams.from_logits(logits), _cell_kernels(spec, rng), spec)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_skip_path_reproduces_input(self, rng):
        spec = CellSpec(n_nodes=1, channels=1)
        logits = np.full((spec.num_edges, spec.num_ops), -40.0)
        logits[0, OPS.index("zero")] = 40.0
        logits[1, SKIP] = 40.0
        inputs = (constant(rng.uniform(size=(1, 1, 4, 4))), constant(rng.uniform(size=(1, 1, 4, 4))))
        out = cell_forward(inputs, ArchParams.from_logits(logits), _cell_kernels(spec, rng), spec)
        np.testing.assert_allclose(out.data, inputs[1].data, atol=1e-12)

    def test_two_node_cell_matches_hand_expansion(self, rng):
        spec = CellSpec(n_nodes=2, channels=1)
        logits = rng.normal(size=(spec.num_edges, spec.num_ops))
        kernels = _cell_kernels(spec, rng)
        s0, s1 = constant(rng.uniform(size=(1, 1, 4, 4))), constant(rng.uniform(size=(1, 1, 4, 4)))

        def edge(e, x):
            mix = np.exp(logits[e]) / np.exp(logits[e]).sum()
            conv = ad.relu(ad.conv2d(x, kernels[edge_weight_name(e, "conv3x3_relu")], pad=1)).data
            return mix[1] * x.data + mix[2] * conv + mix[3] * ad.avg_pool(x, 3).data + mix[4] * ad.max_pool(x, 3).data

        node2 = edge(0, s0) + edge(1, s1)
        node3 = edge(2, s0) + edge(3, s1) + edge(4, constant(node2))
        out = cell_forward((s0, s1), ArchParams.from_logits(logits), kernels, spec)
        np.testing.assert_allclose(out.data, np.concatenate([node2, node3], axis=1), rtol=1e-12)


class TestDiscretize:
    def test_dominant_conv_edges_selected(self):
        spec = CellSpec(n_nodes=1)
        logits = np.zeros((spec.num_edges, spec.num_ops))
        logits[:, CONV] = 10.0
        genotype = discretize(ArchParams.from_logits(logits), spec)
        assert genotype.nodes[0].inputs == [(0, "conv3x3_relu"), (1, "conv3x3_relu")]

    def test_zero_never_retained(self):
        spec = CellSpec(n_nodes=2)
        logits = np.zeros((spec.num_edges, spec.num_ops))
        logits[:, OPS.index("zero")] = 50.0
        genotype = discretize(ArchParams.from_logits(logits), spec)
        assert all(op != "zero" for node in genotype.nodes for _, op in node.inputs)

    def test_ties_prefer_lower_edge_then_lower_op(self):
        spec = CellSpec(n_nodes=2)
        genotype = discretize(ArchParams.from_logits(np.zeros((spec.num_edges, spec.num_ops))), spec)
        assert genotype.nodes[0].inputs == [(0, "skip"), (1, "skip")]
        assert genotype.nodes[1].inputs == [(0, "skip"), (1, "skip")]

    def test_shift_invariance(self, rng):
        spec = CellSpec(n_nodes=3)
        logits = rng.normal(size=(spec.num_edges, spec.num_ops))
        shifted = logits.copy()
        shifted[4] += 7.5
        assert discretize(ArchParams.from_logits(logits), spec) == discretize(ArchParams.from_logits(shifted), spec)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_selection(self, seed):
        spec = CellSpec(n_nodes=3)
        logits = np.random.default_rng(seed).normal(size=(spec.num_edges, spec.num_ops))
        weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        nonzero = [o for o in range(spec.num_ops) if OPS[o] != "zero"]
        expected = []
        for node in range(2, 5):
            incoming = [e for e, (_, target) in enumerate(spec.edges) if target == node]
            best_pair, best_score = None, -np.inf
            for pair in itertools.combinations(incoming, 2):
                score = sum(max(weights[e, o] for o in nonzero) for e in pair)
                if score > best_score:
                    best_pair, best_score = pair, score
            inputs = []
            for e in best_pair:
                op = max(nonzero, key=lambda o: weights[e, o])
                inputs.append((spec.edges[e][0], OPS[op]))
            expected.append(sorted(inputs))
        genotype = discretize(ArchParams.from_logits(logits), spec)
        assert [node.inputs for node in genotype.nodes] == expected


class TestDiscreteCell:
    def test_random_genotype_is_valid(self, rng):
        spec = CellSpec(n_nodes=3)
        genotype = random_genotype(spec, rng)
        assert isinstance(genotype, Genotype)
        for node in genotype.nodes:
            sources = [src for src, _ in node.inputs]
            assert len(set(sources)) == 2
            assert all(src < node.node for src in sources)

    def test_discrete_cell_sums_selected_ops(self, rng):
        spec = CellSpec(n_nodes=1, channels=1)
        genotype = Genotype(
            n_nodes=1, candidate_ops=OPS,
            nodes=[{"node": 2, "inputs": [(0, "skip"), (1, "conv3x3_relu")]}],
        )
        kernel = constant(rng.normal(size=(1, 1, 3, 3)))
        s0, s1 = constant(rng.uniform(size=(1, 1, 4, 4))), constant(rng.uniform(size=(1, 1, 4, 4)))
        out = discrete_cell_forward((s0, s1), genotype, {node_weight_name(2, 1, "conv3x3_relu"): kernel})
        np.testing.assert_allclose(out.data, s0.data + apply_op("conv3x3_relu", s1, kernel).data)
