# searchspace.py
# LeaSE Engine - Differentiable Cell Search Space
# Created by Digital COE Gen AI Team

from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from leasenas.ai.autodiff import (
    ParamSet, Tensor, add, avg_pool, concat, constant, conv2d, index, max_pool,
    mul_elementwise, relu, reshape, softmax_rows
)
from leasenas.exceptions import ShapeMismatchError
from leasenas.models.schemas import CandidateOp, CellSpec, Genotype, GenotypeNode


ARCH_INIT_SCALE = 1e-3


class ArchParams(ParamSet):
    """Per-edge, per-op architecture logits (num_edges x num_ops)."""

    KEY = "alpha"

    @classmethod
    def from_logits(cls, logits) -> "ArchParams":
        return cls({cls.KEY: logits})

    @classmethod
    def initial(cls, spec: CellSpec, rng: Optional[np.random.Generator] = None) -> "ArchParams":
        """Small random logits (all zeros without an rng)."""
        shape = (spec.num_edges, spec.num_ops)
        if rng is None:
            return cls.from_logits(np.zeros(shape))
        return cls.from_logits(ARCH_INIT_SCALE * rng.standard_normal(shape))

    @property
    def logits(self) -> np.ndarray:
        return self[self.KEY]


def arch_tensor(A) -> Tensor:
    if isinstance(A, ParamSet):
        return constant(A[ArchParams.KEY])
    if isinstance(A, Mapping):
        return A[ArchParams.KEY]
    return A if isinstance(A, Tensor) else constant(A)


def apply_op(op: str, x: Tensor, kernel: Optional[Tensor] = None) -> Optional[Tensor]:
    """Evaluate one candidate op; `zero` yields None (a zero contribution)."""
    if op == CandidateOp.ZERO.value:
        return None
    if op == CandidateOp.SKIP.value:
        return x
    if op == CandidateOp.CONV3X3_RELU.value:
        if kernel is None:
            raise ShapeMismatchError("conv3x3_relu (missing kernel)", x.shape)
        return relu(conv2d(x, kernel, stride=1, pad=1))
    if op == CandidateOp.AVG_POOL3.value:
        return avg_pool(x, 3, stride=1, pad=1)
    if op == CandidateOp.MAX_POOL3.value:
        return max_pool(x, 3, stride=1, pad=1)
    raise ValueError(f"unknown candidate op {op!r}")


def mixing_weights(edge_logits: Tensor) -> Tensor:
    """Softmax of one edge's logits as a 1 x num_ops row."""
    return softmax_rows(reshape(edge_logits, (1, edge_logits.shape[-1])))


def mixed_edge_forward(
    x: Tensor,
    edge_logits: Tensor,
    edge_weights: Mapping[str, Tensor],
    ops: Sequence[str],
) -> Tensor:
    """
    Weighted sum of every candidate op applied to x.

    Args:
        x: Edge input, N x C x H x W
        edge_logits: This edge's row of the architecture logits
        edge_weights: Kernels of the parametric ops, keyed by op name
        ops: Candidate op names in logit order

    Returns:
        sum_o softmax(edge_logits)_o * op_o(x)
    """
    if edge_logits.shape != (len(ops),):
        raise ShapeMismatchError("mixed_edge_forward", edge_logits.shape, (len(ops),))
    mix = mixing_weights(edge_logits)
    out = None
    for position, op in enumerate(ops):
        y = apply_op(op, x, edge_weights.get(op))
        if y is None:
            continue
        if y.shape != x.shape:
            raise ShapeMismatchError(f"mixed_edge_forward ({op})", x.shape, y.shape)
        term = mul_elementwise(index(mix, (0, position)), y)
        out = term if out is None else add(out, term)
    if out is None:
        # every candidate is `zero`; keep the mixing weights on the graph
        out = mul_elementwise(index(mix, (0, 0)), constant(np.zeros(x.shape)))
    return out


def edge_weight_name(edge: int, op: str) -> str:
    return f"edge{edge}.{op}"


def cell_forward(
    inputs: Tuple[Tensor, Tensor],
    A,
    cell_weights: Mapping[str, Tensor],
    spec: CellSpec,
) -> Tensor:
    """
    Mixed-op cell: node j sums mixed edges from every earlier node.

    Args:
        inputs: The two cell inputs, each N x channels x H x W
        A: Architecture logits (Tensor, ArchParams or name -> Tensor view)
        cell_weights: This cell's kernels keyed by edge_weight_name()
        spec: Cell specification

    Returns:
        Channel concatenation of the intermediate nodes, N x (n_nodes * channels) x H x W
    """
    logits = arch_tensor(A)
    if logits.shape != (spec.num_edges, spec.num_ops):
        raise ShapeMismatchError("cell_forward", logits.shape, (spec.num_edges, spec.num_ops))
    for tensor in inputs:
        if tensor.ndim != 4 or tensor.shape[1] != spec.channels:
            raise ShapeMismatchError("cell_forward input", tensor.shape, ("N", spec.channels, "H", "W"))

    states: List[Tensor] = list(inputs)
    edge = 0
    for _ in range(spec.n_nodes):
        node_value = None
        for source in range(len(states)):
            kernels = {
                op: cell_weights[edge_weight_name(edge, op)]
                for op in spec.candidate_ops
                if edge_weight_name(edge, op) in cell_weights
            }
            y = mixed_edge_forward(states[source], index(logits, edge), kernels, spec.candidate_ops)
            node_value = y if node_value is None else add(node_value, y)
            edge += 1
        states.append(node_value)
    return concat(states[2:], axis=1)


# Discrete cells

def node_weight_name(node: int, slot: int, op: str) -> str:
    return f"node{node}.in{slot}.{op}"


def discrete_cell_forward(
    inputs: Tuple[Tensor, Tensor],
    genotype: Genotype,
    cell_weights: Mapping[str, Tensor],
) -> Tensor:
    """Evaluate a discretized cell: each node sums its two selected ops, no mixtures."""
    states: List[Tensor] = list(inputs)
    for entry in genotype.nodes:
        node_value = None
        for slot, (source, op) in enumerate(entry.inputs):
            y = apply_op(op, states[source], cell_weights.get(node_weight_name(entry.node, slot, op)))
            node_value = y if node_value is None else add(node_value, y)
        states.append(node_value)
    return concat(states[2:], axis=1)


def discretize(A, spec: CellSpec) -> Genotype:
    """
    Keep, per intermediate node, the two incoming edges whose strongest non-zero op
    carries the highest softmax weight.

    Ties break by lower edge index, then lower op index.
    """
    logits = np.asarray(A.logits if isinstance(A, ArchParams) else arch_tensor(A).data)
    if not np.all(np.isfinite(logits)):
        raise ValueError("discretize: architecture logits must be finite")
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights = shifted / shifted.sum(axis=1, keepdims=True)
    candidates = [i for i, op in enumerate(spec.candidate_ops) if op != CandidateOp.ZERO.value]

    edges = spec.edges
    nodes = []
    for node in range(2, spec.n_nodes + 2):
        scored = []
        for edge, (source, target) in enumerate(edges):
            if target != node:
                continue
            best = max(candidates, key=lambda o: (weights[edge, o], -o))
            scored.append((-weights[edge, best], edge, source, spec.candidate_ops[best]))
        kept = sorted(scored)[:2]
        inputs = sorted((source, op) for _, _, source, op in kept)
        nodes.append(GenotypeNode(node=node, inputs=inputs))
    return Genotype(n_nodes=spec.n_nodes, candidate_ops=list(spec.candidate_ops), nodes=nodes)


def random_genotype(spec: CellSpec, rng: np.random.Generator) -> Genotype:
    """Uniform baseline: two distinct inputs per node, each with a uniform non-zero op."""
    ops = [op for op in spec.candidate_ops if op != CandidateOp.ZERO.value]
    nodes = []
    for node in range(2, spec.n_nodes + 2):
        sources = sorted(int(s) for s in rng.choice(node, size=2, replace=False))
        nodes.append(GenotypeNode(node=node, inputs=[(s, ops[int(rng.integers(len(ops)))]) for s in sources]))
    return Genotype(n_nodes=spec.n_nodes, candidate_ops=list(spec.candidate_ops), nodes=nodes)
