"""Per-domain training with metric-wise and interval checkpoint harvesting.

The pre-merge phase trains a forecaster and then a planner per source domain,
tracking the best validation checkpoint for each metric (strictly-better
updates, ties keep the earliest) and snapshotting parameters every ``interval``
epochs. All harvested snapshots across domains land in one deduplicated
:class:`~planmerge.checkpoints.CheckpointPool` that shares the initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .checkpoints import (
    Checkpoint,
    CheckpointPool,
    REASON_FOR_METRIC,
    Reason,
    Stage,
    assemble_pool,
)
from .errors import InputError, NumericError, TrainingError
from .io import stable_seed
from .metrics import METRIC_NAMES, MetricReport, evaluate
from .net import GROUP_NAMES, Planner
from .params import ParamVector
from .scenes import Scene, SceneBatch


@dataclass(frozen=True)
class TrainConfig:
    """One training run: epoch budget, Adam settings, harvest interval."""

    total_epochs: int = 30
    learning_rate: float = 1e-3
    interval: int = 5
    batch_size: int = 64
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_epochs < 0:
            raise InputError("total_epochs must be >= 0")
        if self.interval < 1:
            raise InputError("interval must be >= 1")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise InputError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class TrainTrace:
    """Per-epoch validation reports, per-epoch training loss, best epochs."""

    reports: list[MetricReport]
    losses: list[float]
    best_epoch: dict[str, int]

    def __len__(self) -> int:
        return len(self.losses)


class Adam:
    """Plain Adam on a flat float64 vector."""

    def __init__(self, dim: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return values - lr * mhat / (np.sqrt(vhat) + self.eps)


class _Plateau:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stall = 0

    def update(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.stall = 0
        else:
            self.stall += 1
            if self.stall > self.patience:
                self.lr *= self.factor
                self.stall = 0
        return self.lr


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _trainable_mask(planner: Planner, groups: Sequence[str]) -> np.ndarray:
    mask = np.zeros(planner.layout.total_len, dtype=bool)
    for g in groups:
        mask[planner.layout.indices(g)] = True
    return mask


def run_training(
    planner: Planner,
    params0: ParamVector,
    train: Sequence[Scene],
    cfg: TrainConfig,
    loss_and_grad: Callable[[ParamVector, Sequence[Scene]], tuple[float, ParamVector]],
    trainable_groups: Sequence[str] = GROUP_NAMES,
    eval_epoch: Callable[[ParamVector, int], tuple[MetricReport, float]] | None = None,
    harvest_metrics: Sequence[str] = (),
    harvest_interval: int | None = None,
    stage: Stage = Stage.PLANNER,
    domain_id: str = "",
) -> tuple[ParamVector, TrainTrace | None, list[Checkpoint]]:
    """Generic Adam loop with optional metric tracking and snapshot harvesting.

    Returns the final parameters, the trace (``None`` when no ``eval_epoch``
    is given), and harvested checkpoints in the order: interval snapshots as
    they fire, then one best snapshot per tracked metric.
    """
    if len(train) == 0:
        raise InputError("empty training split")
    if (harvest_metrics or harvest_interval) and eval_epoch is None:
        raise InputError("harvesting requires per-epoch evaluation")

    values = params0.values.copy()
    adam = Adam(len(values), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sched = _Plateau(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience)
    rng = np.random.default_rng(cfg.seed)
    mask = _trainable_mask(planner, trainable_groups)

    interval_ckpts: list[Checkpoint] = []
    best: dict[str, tuple[float, int, np.ndarray, MetricReport]] = {}
    reports: list[MetricReport] = []
    losses: list[float] = []
    lr = cfg.learning_rate

    for epoch in range(1, cfg.total_epochs + 1):
        loss_sum, seen = 0.0, 0
        for batch_idx in _epoch_batches(len(train), cfg.batch_size, rng):
            scenes = [train[i] for i in batch_idx]
            try:
                loss, grad = loss_and_grad(ParamVector(values, planner.layout), scenes)
            except NumericError as exc:
                raise TrainingError(f"{domain_id or 'training'} diverged at epoch {epoch}: {exc}")
            g = grad.values.copy()
            g[~mask] = 0.0
            values = adam.step(values, g, lr)
            loss_sum += loss * len(batch_idx)
            seen += len(batch_idx)
        epoch_loss = loss_sum / seen
        if not np.isfinite(epoch_loss) or not np.isfinite(values).all():
            raise TrainingError(f"{domain_id or 'training'} diverged at epoch {epoch}")
        losses.append(epoch_loss)

        sched_loss = epoch_loss
        if eval_epoch is not None:
            report, val_loss = eval_epoch(ParamVector(values, planner.layout), epoch)
            reports.append(report)
            sched_loss = val_loss
            if harvest_interval is not None and epoch % harvest_interval == 0:
                interval_ckpts.append(
                    Checkpoint(
                        params=ParamVector(values.copy(), planner.layout),
                        domain_id=domain_id,
                        epoch=epoch,
                        reason=Reason.INTERVAL,
                        stage=stage,
                        metrics=report,
                    )
                )
            for metric in harvest_metrics:
                value = report.value(metric)
                if metric not in best or value < best[metric][0]:
                    best[metric] = (value, epoch, values.copy(), report)
        lr = sched.update(sched_loss)

    best_ckpts = [
        Checkpoint(
            params=ParamVector(snapshot, planner.layout),
            domain_id=domain_id,
            epoch=epoch,
            reason=REASON_FOR_METRIC[metric],
            stage=stage,
            metrics=report,
        )
        for metric, (_, epoch, snapshot, report) in best.items()
    ]
    trace = None
    if eval_epoch is not None:
        trace = TrainTrace(
            reports=reports,
            losses=losses,
            best_epoch={m: best[m][1] for m in best},
        )
    return ParamVector(values, planner.layout), trace, interval_ckpts + best_ckpts


# ------------------------------------------------------------ forecaster path


def forecast_report(planner: Planner, params: ParamVector, scenes: Sequence[Scene]) -> MetricReport:
    """Agent-level metrics of the forecaster: each valid agent is one sample."""
    preds = planner.forecasts_for(params, scenes)
    batch = SceneBatch.from_scenes(scenes)
    mask = batch.agent_mask
    plans = preds[mask]                   # (n_valid, F, 2)
    gts = batch.surr_future_gt[mask]
    err = np.linalg.norm(plans - gts, axis=-1)
    final = err[:, -1]
    # Collision: predicted agent track vs other valid agents' true tracks.
    d = np.linalg.norm(preds[:, :, None, :, :] - batch.surr_future_gt[:, None, :, :, :], axis=-1)
    pair = mask[:, :, None] & mask[:, None, :]
    M = mask.shape[1]
    pair[:, np.arange(M), np.arange(M)] = False
    d = np.where(pair[:, :, :, None], d, np.inf)
    collided = d.min(axis=(2, 3))[mask] < 0.6
    return MetricReport(
        ade=float(err.mean()),
        fde=float(final.mean()),
        collision_rate=float(collided.mean()),
        miss_rate=float((final > 0.5).mean()),
        n_samples=int(mask.sum()),
    )


def train_forecaster(
    planner: Planner,
    train: Sequence[Scene],
    val: Sequence[Scene],
    cfg: TrainConfig,
    init: ParamVector,
    domain_id: str = "",
) -> tuple[ParamVector, TrainTrace, list[Checkpoint]]:
    """Adam on the forecast MSE; harvests ADE-best plus interval checkpoints."""
    if cfg.total_epochs < 1:
        raise InputError("forecaster training needs total_epochs >= 1")

    def eval_epoch(params: ParamVector, epoch: int):
        report = forecast_report(planner, params, val)
        val_loss, _ = planner.forecast_loss_and_grad(params, val)
        return report, val_loss

    return run_training(
        planner, init, train, cfg,
        loss_and_grad=planner.forecast_loss_and_grad,
        trainable_groups=("fore",),
        eval_epoch=eval_epoch,
        harvest_metrics=("ade",),
        harvest_interval=cfg.interval,
        stage=Stage.FORECASTER,
        domain_id=domain_id,
    )


def train_planner(
    planner: Planner,
    train: Sequence[Scene],
    val: Sequence[Scene],
    cfg: TrainConfig,
    init: ParamVector,
    domain_id: str = "",
    metric_eval_fn: Callable[[ParamVector, int], MetricReport] | None = None,
) -> tuple[ParamVector, TrainTrace, list[Checkpoint]]:
    """Planner training with the forecaster frozen.

    Harvests interval checkpoints at ``cfg.interval`` and the per-metric best
    checkpoints over {ade, fde, collision_rate, miss_rate}. ``metric_eval_fn``
    replaces the real validation evaluation (used by bookkeeping tests).
    """
    if cfg.total_epochs < 1:
        raise InputError("planner training needs total_epochs >= 1")

    def eval_epoch(params: ParamVector, epoch: int):
        if metric_eval_fn is not None:
            report = metric_eval_fn(params, epoch)
        else:
            report = evaluate(planner, params, val)
        return report, planner.loss_value(params, val)

    return run_training(
        planner, init, train, cfg,
        loss_and_grad=planner.loss_and_grad,
        trainable_groups=("ego", "surr", "inter", "else"),
        eval_epoch=eval_epoch,
        harvest_metrics=list(METRIC_NAMES),
        harvest_interval=cfg.interval,
        stage=Stage.PLANNER,
        domain_id=domain_id,
    )


def finetune(
    planner: Planner,
    params: ParamVector,
    train: Sequence[Scene],
    cfg: TrainConfig,
) -> ParamVector:
    """Continue total-loss gradient descent on all parameters.

    Serves adaptation baselines as well: from the shared initialization this
    is the target-only baseline, from a source-union model it is domain
    adaptation. Never reads a validation split; the plateau scheduler runs on
    the training loss. Zero epochs returns the input unchanged.
    """
    if cfg.total_epochs == 0:
        return params
    out, _, _ = run_training(
        planner, params, train, cfg,
        loss_and_grad=planner.loss_and_grad,
        trainable_groups=GROUP_NAMES,
    )
    return out


def train_union(
    planner: Planner,
    sources: Sequence,
    cfg: TrainConfig,
    base: ParamVector,
) -> ParamVector:
    """Single training run over the concatenated source training sets."""
    if len(sources) == 0:
        raise InputError("need at least one source dataset")
    scenes = [s for ds in sources for s in ds.train]
    return finetune(planner, base, scenes, cfg)


def build_pool(
    planner: Planner,
    sources: Sequence,
    fore_cfg: TrainConfig,
    plan_cfg: TrainConfig,
    base: ParamVector,
    jobs: int = 1,
) -> tuple[CheckpointPool, dict[str, dict[str, TrainTrace]]]:
    """Run both training stages per source domain and assemble the pool.

    The planner starts from the forecaster's best-ADE parameters with the
    ``fore`` group frozen, so every planner checkpoint carries its domain's
    trained forecaster. Deterministic per (config seeds, domain names).
    """
    if len(sources) == 0:
        raise InputError("need at least one source domain")
    names = [ds.domain.name for ds in sources]
    if len(set(names)) != len(names):
        raise InputError(f"duplicate source domain names: {names}")

    args = [(planner, ds, fore_cfg, plan_cfg, base) for ds in sources]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_one_domain, args))
    else:
        results = [_train_one_domain(a) for a in args]

    candidates: list[Checkpoint] = []
    traces: dict[str, dict[str, TrainTrace]] = {}
    for name, ckpts, fore_trace, plan_trace in results:
        candidates.extend(ckpts)
        traces[name] = {"forecaster": fore_trace, "planner": plan_trace}
    return assemble_pool(base, candidates), traces


def _train_one_domain(args) -> tuple[str, list[Checkpoint], TrainTrace, TrainTrace]:
    planner, ds, fore_cfg, plan_cfg, base = args
    name = ds.domain.name
    fore_cfg = replace(fore_cfg, seed=stable_seed(fore_cfg.seed, "forecaster", name))
    plan_cfg = replace(plan_cfg, seed=stable_seed(plan_cfg.seed, "planner", name))
    try:
        _, fore_trace, fore_ckpts = train_forecaster(
            planner, ds.train, ds.val, fore_cfg, base, domain_id=name
        )
        fore_best = next(c for c in fore_ckpts if c.reason is Reason.BEST_ADE)
        _, plan_trace, plan_ckpts = train_planner(
            planner, ds.train, ds.val, plan_cfg, fore_best.params, domain_id=name
        )
    except TrainingError:
        raise
    except NumericError as exc:
        raise TrainingError(f"{name}: {exc}") from exc
    return name, fore_ckpts + plan_ckpts, fore_trace, plan_trace
