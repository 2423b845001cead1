# gradcheck.py
# LeaSE Engine - In-Process Oracle Suites
# Created by Digital COE Gen AI Team

import time
from typing import Callable, Dict, List, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel

from leasenas.ai import autodiff as ad
from leasenas.ai.autodiff import ParamSet, backward, constant, finite_diff_gradient, leaf, value_and_grad
from leasenas.ai.lease import LeaseEngine, audience_chain, fd_hvp
from leasenas.ai.nn import (
    audience_forward, classification_loss, explainer_forward, init_weights
)
from leasenas.ai.searchspace import ArchParams
from leasenas.models.schemas import AudienceSpec, CellSpec, ExplainerSpec, Hyperparams
from leasenas.services.data import LabeledSet


PRIMITIVE_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4
HVP_TOLERANCE = 1e-3
HYPERGRAD_TOLERANCE = 1e-2
NETWORK_FD_STEP = 1e-6
# small finite-difference steps keep the oracles clear of relu and max-pool kinks
CHECK_ALPHA_SCALE = 1e-4


class CheckResult(BaseModel):
    test_name: str
    status: str
    duration_ms: int
    message: str


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def run_check(name: str, check: Callable[[], float], tolerance: float) -> CheckResult:
    """Run one oracle; PASS when the returned error is within tolerance, ERROR on an exception."""
    start = time.perf_counter()
    try:
        error = check()
        status = "PASS" if error < tolerance else "FAIL"
        message = f"max relative error {error:.2e} (tolerance {tolerance:.0e})"
    except Exception as e:
        status = "ERROR"
        message = str(e)[:100]
    duration = int((time.perf_counter() - start) * 1000)
    return CheckResult(test_name=name, status=status, duration_ms=duration, message=message)


# Primitive gradients

def primitive_gradient_error(op: Callable, inputs: Sequence[np.ndarray], rng: np.random.Generator, h=None) -> float:
    """
    Worst relative error between backward() and central differences over every argument of op.

    The output is contracted with a fixed random tensor so every output coordinate matters.
    """
    with ad.no_trace():
        sample = op(*[constant(x) for x in inputs])
    weights = constant(rng.uniform(-1.0, 1.0, size=sample.shape))

    def scalar(*tensors):
        return ad.sum_(ad.mul_elementwise(op(*tensors), weights))

    worst = 0.0
    for position in range(len(inputs)):
        leaves = [leaf(x) if i == position else constant(x) for i, x in enumerate(inputs)]
        analytic = backward(scalar(*leaves)).wrt(leaves[position])

        def f(point, position=position):
            return scalar(*[constant(point) if i == position else constant(x) for i, x in enumerate(inputs)])

        numeric = finite_diff_gradient(f, inputs[position], h).data
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (op, inputs) drawn uniformly from [-1, 1]."""
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)
    return {
        "add": (ad.add, [u(3, 4), u(3, 4)]),
        "add (bias broadcast)": (ad.add, [u(3, 4), u(4)]),
        "sub": (ad.sub, [u(3, 4), u(3, 4)]),
        "mul_elementwise": (ad.mul_elementwise, [u(2, 3), u(2, 3)]),
        "div": (ad.div, [u(2, 3), 1.5 + u(2, 3)]),
        "scale": (lambda a: ad.scale(a, -0.7), [u(3, 3)]),
        "relu": (ad.relu, [u(4, 4)]),
        "abs": (ad.abs_, [u(4, 4)]),
        "clamp_min": (lambda a: ad.clamp_min(a, 0.1), [u(4, 4)]),
        "reshape": (lambda a: ad.reshape(a, (6, 2)), [u(3, 4)]),
        "index": (lambda a: ad.index(a, 1), [u(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [u(2, 2, 3, 3), u(2, 1, 3, 3)]),
        "sum": (lambda a: ad.reshape(ad.sum_(a), (1,)), [u(3, 4)]),
        "mean": (lambda a: ad.reshape(ad.mean(a), (1,)), [u(3, 4)]),
        "global_avg_pool": (ad.global_avg_pool, [u(2, 3, 4, 4)]),
        "max_per_example": (ad.max_per_example, [u(3, 2, 3, 3)]),
        "matmul": (ad.matmul, [u(3, 4), u(4, 2)]),
        "conv2d": (lambda x, k: ad.conv2d(x, k, stride=1, pad=1), [u(2, 2, 5, 5), u(3, 2, 3, 3)]),
        "conv2d (stride 2)": (lambda x, k: ad.conv2d(x, k, stride=2, pad=0), [u(1, 2, 7, 7), u(2, 2, 3, 3)]),
        "avg_pool": (lambda a: ad.avg_pool(a, 3), [u(2, 2, 5, 5)]),
        "max_pool": (lambda a: ad.max_pool(a, 3), [u(2, 2, 5, 5)]),
        "max_pool (stride 2)": (lambda a: ad.max_pool(a, 3, stride=2, pad=1), [u(1, 2, 6, 6)]),
        "softmax_rows": (ad.softmax_rows, [u(3, 5)]),
        "cross_entropy": (
            lambda p, q: ad.reshape(ad.cross_entropy(ad.softmax_rows(p), ad.softmax_rows(q)), (1,)),
            [u(4, 3), u(4, 3)],
        ),
    }


def primitive_suite(seeds: int = 20) -> List[CheckResult]:
    results = []
    for name in primitive_cases(np.random.default_rng(0)):
        def check(name=name):
            worst = 0.0
            for seed in range(seeds):
                rng = np.random.default_rng(seed)
                op, inputs = primitive_cases(rng)[name]
                worst = max(worst, primitive_gradient_error(op, inputs, rng))
            return worst
        results.append(run_check(f"primitive {name}", check, PRIMITIVE_TOLERANCE))
    return results


# Network gradients

def tiny_explainer_spec(n_nodes: int = 2, channels: int = 2, num_classes: int = 3) -> ExplainerSpec:
    return ExplainerSpec(in_channels=1, num_classes=num_classes, cells=1, cell=CellSpec(n_nodes=n_nodes, channels=channels))


def tiny_batch(rng: np.random.Generator, n: int = 2, size: int = 5, num_classes: int = 3) -> LabeledSet:
    return LabeledSet(images=rng.uniform(0.0, 1.0, size=(n, 1, size, size)), labels=np.arange(n) % num_classes)


def paramset_fd_gradient(f: Callable[[ParamSet], float], params: ParamSet, h: float = NETWORK_FD_STEP) -> ParamSet:
    """Central differences of a scalar function of a whole ParamSet."""
    flat = finite_diff_gradient(lambda vector: f(params.with_flat(vector)), params.flat(), h).data
    return params.with_flat(flat)


def network_gradient_errors(seed: int) -> Dict[str, float]:
    """Autodiff vs central differences for both networks w.r.t. weights, logits and inputs."""
    rng = np.random.default_rng(seed)
    spec = tiny_explainer_spec()
    E = init_weights(seed, spec)
    A = ArchParams.from_logits(rng.normal(size=(spec.cell.num_edges, spec.cell.num_ops)))
    batch = tiny_batch(rng)
    x = ParamSet({"x": batch.images})

    def explainer_loss(ev, av, xv):
        return classification_loss(explainer_forward(xv["x"], ev, av, spec), batch.labels)

    _, (g_e, g_a, g_x) = value_and_grad(explainer_loss, E, A, x, wrt=(0, 1, 2))
    errors = {
        "explainer wrt E": relative_error(g_e.flat(), paramset_fd_gradient(lambda e: explainer_loss(e.as_constants(), A, x.as_constants()).data, E).flat()),
        "explainer wrt A": relative_error(g_a.flat(), paramset_fd_gradient(lambda a: explainer_loss(E, a.as_constants(), x.as_constants()).data, A).flat()),
        "explainer wrt x": relative_error(g_x.flat(), paramset_fd_gradient(lambda p: explainer_loss(E, A, p.as_constants()).data, x).flat()),
    }

    aspec = AudienceSpec(in_channels=1, num_classes=3, conv1_channels=2, conv2_channels=3)
    W = init_weights(seed, aspec)

    def audience_loss(wv, xv):
        return classification_loss(audience_forward(xv["x"], wv, aspec), batch.labels)

    _, (g_w, g_xa) = value_and_grad(audience_loss, W, x, wrt=(0, 1))
    errors["audience wrt W"] = relative_error(g_w.flat(), paramset_fd_gradient(lambda w: audience_loss(w.as_constants(), x.as_constants()).data, W).flat())
    errors["audience wrt x"] = relative_error(g_xa.flat(), paramset_fd_gradient(lambda p: audience_loss(W, p.as_constants()).data, x).flat())
    return errors


def network_suite(seeds: int = 20) -> List[CheckResult]:
    cache: Dict[int, Dict[str, float]] = {}

    def errors(seed):
        if seed not in cache:
            cache[seed] = network_gradient_errors(seed)
        return cache[seed]

    names = ["explainer wrt E", "explainer wrt A", "explainer wrt x", "audience wrt W", "audience wrt x"]
    return [
        run_check(f"network {name}", lambda name=name: max(errors(s)[name] for s in range(seeds)), NETWORK_TOLERANCE)
        for name in names
    ]


# Second-order oracles

def bilinear_hvp_error(seed: int) -> float:
    """g(X, Y) = X^T M Y: grad_X = M Y, so fd_hvp must return M v for any step."""
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(4, 3))
    Y0 = ParamSet({"y": rng.normal(size=3)})
    v = ParamSet({"y": rng.normal(size=3)})
    result = fd_hvp(lambda y: ParamSet({"x": M @ y["y"]}), Y0, v)
    return relative_error(result["x"], M @ v["y"])


def network_hvp_error(seed: int) -> float:
    """fd_hvp of grad_A L(E, A) along v in E-space against nested central differences."""
    rng = np.random.default_rng(seed)
    spec = tiny_explainer_spec(n_nodes=1, channels=2)
    engine = LeaseEngine(spec, AudienceSpec(num_classes=3), Hyperparams())
    E = init_weights(seed, spec)
    A = ArchParams.from_logits(rng.normal(size=(spec.cell.num_edges, spec.cell.num_ops)))
    batch = tiny_batch(rng)
    v = E.map(lambda a: rng.normal(size=a.shape))
    v = v * (1.0 / v.norm())

    grad_fn = engine._explainer_grad_arch(A, batch)
    result = fd_hvp(grad_fn, E, v, alpha_scale=CHECK_ALPHA_SCALE, like=A)

    def directional(t: float) -> np.ndarray:
        moved = E.axpy(t, v)
        return finite_diff_gradient(lambda a: engine.explainer_loss(moved, ArchParams.from_logits(a), batch).data, A.logits).data

    step = 1e-5
    oracle = (directional(step) - directional(-step)) / (2 * step)
    return relative_error(result.logits, oracle)


def explainer_hypergradient_error(seed: int, xi_e: float = 0.1) -> float:
    """Explainer-path hypergradient against d/dA L_val(E - xi_e grad_E L_tr(E, A), A) by nested differences."""
    rng = np.random.default_rng(seed)
    spec = tiny_explainer_spec(n_nodes=2, channels=1)
    hp = Hyperparams(xi_e=xi_e, alpha_scale=CHECK_ALPHA_SCALE)
    engine = LeaseEngine(spec, AudienceSpec(num_classes=3), hp)
    E = init_weights(seed, spec)
    A = ArchParams.from_logits(rng.normal(size=(spec.cell.num_edges, spec.cell.num_ops)))
    train, val = tiny_batch(rng), tiny_batch(rng)

    E_virtual, _ = engine.virtual_explainer_step(E, A, train)
    hypergrad, _ = engine.hypergrad_explainer_path(E, A, E_virtual, train, val)

    def unrolled(logits: np.ndarray) -> float:
        arch = ArchParams.from_logits(logits)
        stepped, _ = engine.virtual_explainer_step(E, arch, train)
        return engine.explainer_loss(stepped, arch, val).data

    oracle = finite_diff_gradient(unrolled, A.logits, 1e-5).data
    return relative_error(hypergrad.logits, oracle)


def scalar_chain_error(seed: int) -> float:
    """
    Audience chain on scalar affine-quadratic stages against the closed-form product.

    L_tr = E^2/2 - c1 E A, -obj = D^2/2 - c2 E' D, L_a = W^2/2 - c3 W D', L_val = (W' - t)^2/2.
    """
    rng = np.random.default_rng(seed)
    c1, c2, c3 = rng.uniform(0.5, 2.0, size=3)
    hp = Hyperparams(xi_e=0.3, xi_delta=0.2, xi_w=0.4)
    scalar = lambda value, key: ParamSet({key: np.array(value)})
    v1 = scalar(rng.normal(), "w")
    W, E = scalar(rng.normal(), "w"), scalar(rng.normal(), "e")
    start = scalar(rng.normal() * 0.01, "delta")
    result = audience_chain(
        v1, W, start, E, np.array(True),
        audience_grad_delta=lambda w: scalar(-c3 * w["w"], "delta"),
        attack_grad_explainer=lambda d: scalar(-c2 * d["delta"], "e"),
        explainer_grad_arch=lambda e: scalar(-c1 * e["e"], "alpha"),
        hp=hp, like=scalar(0.0, "alpha"),
    )
    expected = float(v1["w"]) * hp.xi_w * c3 * hp.xi_delta * c2 * hp.xi_e * c1
    return relative_error(result["alpha"], expected)


def second_order_suite(seeds: int = 20) -> List[CheckResult]:
    return [
        run_check("fd_hvp bilinear", lambda: max(bilinear_hvp_error(s) for s in range(seeds)), 1e-12),
        run_check("fd_hvp network", lambda: max(network_hvp_error(s) for s in range(3)), HVP_TOLERANCE),
        run_check("hypergradient explainer path", lambda: max(explainer_hypergradient_error(s) for s in range(2)), HYPERGRAD_TOLERANCE),
        run_check("hypergradient audience chain", lambda: max(scalar_chain_error(s) for s in range(seeds)), HVP_TOLERANCE),
    ]


SUITES = {
    "primitives": primitive_suite,
    "networks": network_suite,
    "second_order": second_order_suite,
}


def run_gradcheck(seeds: int = 20, suites: Sequence[str] = tuple(SUITES)) -> List[CheckResult]:
    """Run the selected suites, logging one line per check."""
    results: List[CheckResult] = []
    for suite in suites:
        for result in SUITES[suite](seeds):
            level = "INFO" if result.status == "PASS" else "ERROR"
            logger.log(level, f"{result.status:<5} {result.test_name} ({result.duration_ms} ms): {result.message}")
            results.append(result)
    passed = sum(r.status == "PASS" for r in results)
    logger.info(f"gradcheck: {passed}/{len(results)} checks passed")
    return results
