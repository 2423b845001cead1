# harness.py
# LeaSE Engine - Search, Evaluation, Sweep & Baseline Runs
# Created by Digital COE Gen AI Team

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from leasenas.ai.autodiff import constant, no_trace, value_and_grad
from leasenas.ai.lease import IterationBatches, LeaseEngine, LeaseState
from leasenas.ai.nn import (
    ExplainerWeights, accuracy, classification_loss, count_params, discrete_explainer_forward,
    init_weights
)
from leasenas.ai.searchspace import discretize, random_genotype
from leasenas.config import with_overrides
from leasenas.exceptions import NonFiniteError, NumericAbortError
from leasenas.models.schemas import (
    BASELINE_COLUMNS, EVAL_COLUMNS, METRICS_COLUMNS, SWEEP_COLUMNS, BaselineKind, BaselineRow,
    EvalEpochRow, EvalResult, Genotype, MetricsRow, RunConfig, SweepRow
)
from leasenas.services.data import SPLIT_NAMES, BatchIterator, DatasetSplits, LabeledSet, load_splits
from leasenas.services.storage import StorageService


METRICS_FILE = "metrics.csv"
EVAL_METRICS_FILE = "eval_metrics.csv"
GENOTYPE_FILE = "genotype.json"
SWEEP_FILE = "sweep.csv"
BASELINE_FILE = "baseline.csv"
CHECKPOINT_DIR = "checkpoints"

BASELINE_STREAM = 20


@dataclass
class SearchResult:
    genotype: Genotype
    genotype_path: Path
    metrics_path: Path
    checkpoint_dir: Path
    state: LeaseState
    rows: List[MetricsRow] = field(default_factory=list)
    search_seconds: float = 0.0

    @property
    def final_row(self) -> Optional[MetricsRow]:
        return self.rows[-1] if self.rows else None


def _save_state(directory: Path, state: LeaseState, saliency=None):
    StorageService.save_params(directory / "explainer.json", state.E, "explainer")
    StorageService.save_params(directory / "audience.json", state.W, "audience")
    StorageService.save_params(directory / "arch.json", state.A, "arch")
    if saliency is not None:
        StorageService.save_params(directory / "saliency.json", saliency, "saliency")


# Search phase

def run_search(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> SearchResult:
    """
    Run cfg.run.iterations outer iterations and write metrics, genotype and checkpoints.

    Args:
        cfg: Validated run configuration
        out_dir: Overrides cfg.run.out_dir

    Returns:
        SearchResult with the discretized genotype and the final state

    Raises:
        NumericAbortError: a logged quantity or state tensor went non-finite
    """
    out = Path(out_dir or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed, mode = cfg.run.seed, cfg.run.mode
    splits = load_splits(cfg.data, seed)
    engine = LeaseEngine(cfg.explainer_spec(), cfg.audience_spec(), cfg.search, mode)
    state = LeaseState.initial(seed, engine.explainer_spec, engine.audience_spec)
    streams = [
        iter(BatchIterator(getattr(splits, name), cfg.data.batch_size, seed, stream))
        for stream, name in enumerate(SPLIT_NAMES)
    ]

    logger.info(
        f"Search: mode={mode.value} seed={seed} iterations={cfg.run.iterations} "
        f"gamma={cfg.search.gamma} A={state.A.shapes()['alpha']} |E|={state.E.num_params} |W|={state.W.num_params}"
    )
    checkpoint_dir = out / CHECKPOINT_DIR
    metrics_path = out / METRICS_FILE
    rows: List[MetricsRow] = []
    started = time.perf_counter()
    report = None
    try:
        for _ in range(cfg.run.iterations):
            batches = IterationBatches(*(next(stream) for stream in streams))
            tick = time.perf_counter()
            try:
                state, report = engine.iterate(state, batches)
            except NonFiniteError as e:
                logger.error(f"Aborting search at iteration {state.iteration + 1}: {e}")
                raise NumericAbortError(e.where, state.iteration + 1) from e

            wall_ms = (time.perf_counter() - tick) * 1000.0 if cfg.run.record_timing else None
            row = report.to_metrics_row(wall_ms)
            bad = row.first_non_finite() or state.first_non_finite()
            if bad is not None:
                logger.error(f"Aborting search at iteration {row.iteration}: {bad} is not finite")
                raise NumericAbortError(bad, row.iteration)
            rows.append(row)

            if cfg.run.checkpoint_every and state.iteration % cfg.run.checkpoint_every == 0:
                saliency = report.delta if cfg.run.dump_saliency else None
                _save_state(checkpoint_dir / f"iter_{state.iteration:05d}", state, saliency)
    finally:
        StorageService.write_rows(metrics_path, rows, METRICS_COLUMNS)

    search_seconds = time.perf_counter() - started
    _save_state(checkpoint_dir / "final", state, report.delta if report is not None and cfg.run.dump_saliency else None)
    genotype = discretize(state.A, cfg.cell)
    genotype_path = StorageService.save_genotype(out / GENOTYPE_FILE, genotype)
    logger.info(f"Search finished: {len(rows)} iterations in {search_seconds:.1f}s")
    if rows:
        logger.info(f"Outer objective {rows[0].outer_objective:.6g} -> {rows[-1].outer_objective:.6g}")
    return SearchResult(
        genotype=genotype,
        genotype_path=genotype_path,
        metrics_path=metrics_path,
        checkpoint_dir=checkpoint_dir,
        state=state,
        rows=rows,
        search_seconds=search_seconds,
    )


# Evaluation phase

def _evaluate(E: ExplainerWeights, genotype: Genotype, spec, ds: LabeledSet):
    with no_trace():
        logits = discrete_explainer_forward(constant(ds.images), E, genotype, spec)
        loss = float(classification_loss(logits, ds.labels).data)
    return loss, accuracy(logits, ds.labels)


def train_discrete(
    cfg: RunConfig,
    genotype: Genotype,
    train: LabeledSet,
    test: LabeledSet,
    seed: int,
):
    """
    Retrain the stacked discrete explainer from scratch with plain gradient descent.

    Returns:
        (final weights, one EvalEpochRow per epoch, epoch 0 being the untrained network)
    """
    spec = cfg.explainer_spec(evaluation=True)
    E = init_weights(seed, spec, genotype)
    num_params = count_params(E)
    batches = BatchIterator(train, cfg.data.batch_size, seed, stream=len(SPLIT_NAMES))
    step = cfg.search.xi_e

    def loss_fn(ev, batch):
        return classification_loss(discrete_explainer_forward(constant(batch.images), ev, genotype, spec), batch.labels)

    test_loss, test_accuracy = _evaluate(E, genotype, spec, test)
    rows = [EvalEpochRow(epoch=0, test_loss=test_loss, test_accuracy=test_accuracy, num_params=num_params)]
    for epoch in range(1, cfg.run.eval_epochs + 1):
        losses = []
        for batch in batches.epoch_batches():
            loss, (grad,) = value_and_grad(lambda ev: loss_fn(ev, batch), E)
            E = E.axpy(-step, grad)
            losses.append(loss)
        bad = E.first_non_finite()
        if bad is not None:
            raise NumericAbortError(f"eval weights {bad}", epoch)
        test_loss, test_accuracy = _evaluate(E, genotype, spec, test)
        rows.append(EvalEpochRow(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            test_loss=test_loss,
            test_accuracy=test_accuracy,
            num_params=num_params,
        ))
        logger.debug(f"eval epoch {epoch}: train={rows[-1].train_loss:.4f} test_acc={test_accuracy:.4f}")
    return E, rows


def run_eval(
    cfg: RunConfig,
    genotype: Union[Genotype, str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    splits: Optional[DatasetSplits] = None,
) -> EvalResult:
    """
    Stack cfg.network.eval_cells copies of the genotype's cell, retrain on the training splits,
    and score the held-out test set.
    """
    out = Path(out_dir or cfg.run.out_dir)
    if not isinstance(genotype, Genotype):
        genotype = StorageService.load_genotype(genotype, cfg.cell)
    splits = splits or load_splits(cfg.data, cfg.run.seed)
    _, rows = train_discrete(cfg, genotype, splits.training_union(), splits.test, cfg.run.seed)

    metrics_path = StorageService.write_rows(out / EVAL_METRICS_FILE, rows, EVAL_COLUMNS)
    final = rows[-1]
    result = EvalResult(
        test_accuracy=final.test_accuracy,
        test_error=1.0 - final.test_accuracy,
        test_loss=final.test_loss,
        final_train_loss=final.train_loss,
        num_params=final.num_params,
        metrics_path=metrics_path,
    )
    logger.info(
        f"Eval: {cfg.network.eval_cells} cells, {result.num_params} params, "
        f"test accuracy {result.test_accuracy:.4f} after {cfg.run.eval_epochs} epochs"
    )
    return result


# Sweeps & baselines

def _sweep_point(cfg: RunConfig, index: int, gamma: float, out: Path) -> SweepRow:
    run_cfg = with_overrides(cfg, **{"search.gamma": gamma, "run.seed": cfg.run.seed + index})
    run_out = out / f"gamma_{index:02d}"
    search = run_search(run_cfg, run_out)
    result = run_eval(run_cfg, search.genotype, run_out)
    final = search.final_row
    row = SweepRow(
        gamma=gamma,
        seed=run_cfg.run.seed,
        test_error=result.test_error,
        test_accuracy=result.test_accuracy,
        explainer_val_loss=final.explainer_val_loss if final else None,
        audience_val_loss=final.audience_val_loss if final else None,
        genotype_path=search.genotype_path,
    )
    logger.info(f"Sweep gamma={gamma}: test error {row.test_error:.4f}")
    return row


def gamma_sweep(
    cfg: RunConfig,
    gammas: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[SweepRow]:
    """
    One search + eval per gamma, run i seeded with seed + i; rows keep the input order.

    Runs are independent and may execute on parallel worker threads.
    """
    gammas = list(cfg.run.gammas if gammas is None else gammas)
    if any(g < 0 for g in gammas):
        raise ValueError("gamma values must be >= 0")
    workers = workers or cfg.run.workers
    out = Path(out_dir or cfg.run.out_dir)
    logger.info(f"Gamma sweep over {gammas} with {workers} worker(s)")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda item: _sweep_point(cfg, item[0], item[1], out), enumerate(gammas)))
    else:
        rows = [_sweep_point(cfg, index, gamma, out) for index, gamma in enumerate(gammas)]

    StorageService.write_rows(out / SWEEP_FILE, rows, SWEEP_COLUMNS)
    return rows


def run_baseline(
    cfg: RunConfig,
    genotype: Optional[Union[Genotype, str, Path]] = None,
    runs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[BaselineRow]:
    """
    Compare a searched genotype against uniformly random genotypes trained identically.

    Without a genotype a search is run first. Run k uses seed + k for both kinds.
    """
    out = Path(out_dir or cfg.run.out_dir)
    runs = runs or cfg.run.baseline_runs
    if genotype is None:
        searched = run_search(cfg, out / "search")
        genotype, genotype_path = searched.genotype, searched.genotype_path
    elif isinstance(genotype, Genotype):
        genotype_path = None
    else:
        genotype_path = Path(genotype)
        genotype = StorageService.load_genotype(genotype_path, cfg.cell)

    rows: List[BaselineRow] = []
    for run in range(runs):
        seed = cfg.run.seed + run
        run_cfg = with_overrides(cfg, **{"run.seed": seed})
        splits = load_splits(run_cfg.data, seed)
        rng = np.random.default_rng([seed, BASELINE_STREAM])
        candidates = [
            (BaselineKind.SEARCHED, genotype, genotype_path),
            (BaselineKind.RANDOM, random_genotype(cfg.cell, rng), None),
        ]
        for kind, candidate, path in candidates:
            run_out = out / f"baseline_{run:02d}_{kind.value}"
            if kind == BaselineKind.RANDOM:
                path = StorageService.save_genotype(run_out / GENOTYPE_FILE, candidate)
            result = run_eval(run_cfg, candidate, run_out, splits=splits)
            rows.append(BaselineRow(
                run=run, seed=seed, kind=kind,
                test_accuracy=result.test_accuracy, test_error=result.test_error, genotype_path=path,
            ))

    StorageService.write_rows(out / BASELINE_FILE, rows, BASELINE_COLUMNS)
    for kind in BaselineKind:
        mean = np.mean([r.test_accuracy for r in rows if r.kind == kind])
        logger.info(f"Baseline mean test accuracy ({kind.value}): {mean:.4f}")
    return rows
