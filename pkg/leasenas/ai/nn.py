# nn.py
# LeaSE Engine - Explainer & Audience Networks
# Created by Digital COE Gen AI Team

from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np

from leasenas.ai.autodiff import (
    DTYPE, ParamSet, Tensor, add, conv2d, cross_entropy, global_avg_pool, matmul,
    max_pool, one_hot, relu, softmax_rows
)
from leasenas.ai.searchspace import (
    arch_tensor, cell_forward, discrete_cell_forward, edge_weight_name, node_weight_name
)
from leasenas.exceptions import ShapeMismatchError
from leasenas.models.schemas import PARAMETRIC_OPS, AudienceSpec, ExplainerSpec, Genotype


Params = Union[ParamSet, Mapping[str, Tensor]]

# independent random streams per network kind
EXPLAINER_STREAM = 1
AUDIENCE_STREAM = 2


class ExplainerWeights(ParamSet):
    """Named explainer tensors: stem, per-cell preprocessing and edge kernels, classifier."""


class AudienceWeights(ParamSet):
    """Named audience tensors: conv1, conv2, dense.weight, dense.bias."""


def _views(params: Params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return params.as_constants()
    return params


def _scoped(views: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    return {name[len(prefix):]: tensor for name, tensor in views.items() if name.startswith(prefix)}


def _check_input(x: Tensor, in_channels: int, where: str):
    if x.ndim != 4 or x.shape[1] != in_channels:
        raise ShapeMismatchError(where, x.shape, ("N", in_channels, "H", "W"))


# Weight shapes

def _cell_inputs(spec: ExplainerSpec, cell: int):
    """Channel counts feeding cell `cell`'s two 1x1 preprocessing convs."""
    out = spec.cell.n_nodes * spec.channels
    prev_prev = spec.channels if cell < 2 else out
    prev = spec.channels if cell < 1 else out
    return prev_prev, prev


def explainer_shapes(spec: ExplainerSpec, genotype: Optional[Genotype] = None) -> Dict[str, tuple]:
    """
    Tensor shapes of the mixed-cell explainer, or of the discrete one when a genotype is given.

    Kernels are (out, in, kh, kw); the classifier weight is (features, classes).
    """
    c = spec.channels
    shapes = {"stem": (c, spec.in_channels, 3, 3)}
    for cell in range(spec.cells):
        prev_prev, prev = _cell_inputs(spec, cell)
        shapes[f"cell{cell}.pre0"] = (c, prev_prev, 1, 1)
        shapes[f"cell{cell}.pre1"] = (c, prev, 1, 1)
        if genotype is None:
            for edge in range(spec.cell.num_edges):
                for op in spec.cell.candidate_ops:
                    if op in PARAMETRIC_OPS:
                        shapes[f"cell{cell}.{edge_weight_name(edge, op)}"] = (c, c, 3, 3)
        else:
            for entry in genotype.nodes:
                for slot, (_, op) in enumerate(entry.inputs):
                    if op in PARAMETRIC_OPS:
                        shapes[f"cell{cell}.{node_weight_name(entry.node, slot, op)}"] = (c, c, 3, 3)
    features = spec.cell.n_nodes * c
    shapes["classifier.weight"] = (features, spec.num_classes)
    shapes["classifier.bias"] = (spec.num_classes,)
    return shapes


def audience_shapes(spec: AudienceSpec) -> Dict[str, tuple]:
    return {
        "conv1": (spec.conv1_channels, spec.in_channels, 3, 3),
        "conv2": (spec.conv2_channels, spec.conv1_channels, 3, 3),
        "dense.weight": (spec.conv2_channels, spec.num_classes),
        "dense.bias": (spec.num_classes,),
    }


def _kaiming(rng: np.random.Generator, shapes: Mapping[str, tuple]) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return arrays


def init_weights(
    seed: int,
    spec: Union[ExplainerSpec, AudienceSpec],
    genotype: Optional[Genotype] = None,
) -> Union[ExplainerWeights, AudienceWeights]:
    """
    Kaiming-normal kernels and zero biases, deterministic per seed.

    Args:
        seed: Run seed
        spec: ExplainerSpec or AudienceSpec
        genotype: Build the discrete explainer's tensors instead of the mixed-cell ones

    Returns:
        ExplainerWeights or AudienceWeights
    """
    if isinstance(spec, AudienceSpec):
        rng = np.random.default_rng([seed, AUDIENCE_STREAM])
        return AudienceWeights(_kaiming(rng, audience_shapes(spec)))
    rng = np.random.default_rng([seed, EXPLAINER_STREAM])
    return ExplainerWeights(_kaiming(rng, explainer_shapes(spec, genotype)))


def count_params(weights: ParamSet) -> int:
    return weights.num_params


# Forward passes

def _head(state: Tensor, views: Mapping[str, Tensor]) -> Tensor:
    return add(matmul(global_avg_pool(state), views["classifier.weight"]), views["classifier.bias"])


def _stack(x: Tensor, views: Mapping[str, Tensor], spec: ExplainerSpec, run_cell) -> Tensor:
    _check_input(x, spec.in_channels, "explainer_forward")
    stem = conv2d(x, views["stem"], stride=1, pad=1)
    prev_prev, prev = stem, stem
    for cell in range(spec.cells):
        scoped = _scoped(views, f"cell{cell}.")
        s0 = conv2d(prev_prev, scoped["pre0"])
        s1 = conv2d(prev, scoped["pre1"])
        prev_prev, prev = prev, run_cell((s0, s1), scoped)
    return _head(prev, views)


def explainer_forward(x: Tensor, E: Params, A, spec: ExplainerSpec) -> Tensor:
    """
    Mixed-cell explainer: stem conv, `spec.cells` searchable cells, global pool, dense head.

    Args:
        x: Images, N x C x H x W
        E: ExplainerWeights or name -> Tensor views
        A: ArchParams or its name -> Tensor view; every cell shares the same logits
        spec: Explainer specification

    Returns:
        Logits, N x K
    """
    views = _views(E)
    logits = arch_tensor(A)
    return _stack(x, views, spec, lambda inputs, scoped: cell_forward(inputs, logits, scoped, spec.cell))


def discrete_explainer_forward(x: Tensor, E: Params, genotype: Genotype, spec: ExplainerSpec) -> Tensor:
    """Evaluation-phase explainer: the same stack with every cell fixed to the genotype."""
    views = _views(E)
    return _stack(x, views, spec, lambda inputs, scoped: discrete_cell_forward(inputs, genotype, scoped))


def audience_forward(x: Tensor, W: Params, spec: Optional[AudienceSpec] = None) -> Tensor:
    """conv3x3 + relu + maxpool(3, stride 2), conv3x3 + relu + global pool, dense."""
    views = _views(W)
    if spec is not None:
        _check_input(x, spec.in_channels, "audience_forward")
    hidden = max_pool(relu(conv2d(x, views["conv1"], stride=1, pad=1)), 3, stride=2, pad=1)
    hidden = global_avg_pool(relu(conv2d(hidden, views["conv2"], stride=1, pad=1)))
    return add(matmul(hidden, views["dense.weight"]), views["dense.bias"])


# Losses & metrics

def classification_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean cross-entropy of softmax(logits) against one-hot labels."""
    return cross_entropy(softmax_rows(logits), one_hot(labels, logits.shape[1]))


def accuracy(logits: Union[Tensor, np.ndarray], labels: Sequence[int]) -> float:
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(scores, axis=1) == labels))
