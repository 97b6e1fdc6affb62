"""Task-vector merging with learnable weights, plus all comparison strategies.

The learned merge treats the per-checkpoint (and per parameter group, at
``group`` granularity) mixing weights as the only trainable variables:
parameters are composed as ``theta0 + lam * sum_i w_i * tau_i``, the planning
loss is evaluated on target training scenes, and weights follow its exact
chain-rule gradient ``dL/dw_{i,g} = lam * sum_{j in g} tau_i[j] * dL/dtheta[j]``.

Also here: parameter averaging, task arithmetic with a scale grid, trim /
elect-sign / disjoint-merge, prediction ensembles, and the rank correlation
between learned weights and zero-shot source similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .checkpoints import Checkpoint, CheckpointPool, Reason, Stage
from .errors import InputError, NumericError
from .metrics import evaluate
from .net import Planner
from .params import ParamVector, compose, task_vector
from .scenes import Scene
from .training import Adam, _Plateau, _epoch_batches


class Granularity(str, Enum):
    MODEL = "model"          # one weight per checkpoint
    GROUP = "group"          # one weight per checkpoint per module-group cell
    PARAMETER = "parameter"  # one weight per checkpoint per coordinate


@dataclass(frozen=True)
class MergeOptConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InputError("bad merge optimizer settings")


@dataclass(frozen=True)
class MergeRecipe:
    """How to merge: granularity, optional group-cell pairing, fixed scale.

    ``group_partition`` lists cells as tuples of layout group names and must
    cover every group exactly once; ``None`` gives each group its own cell.
    ``weight_init=None`` initializes every weight to ``1/|pool|`` so the
    starting model equals the pool average.
    """

    granularity: Granularity = Granularity.GROUP
    group_partition: tuple[tuple[str, ...], ...] | None = None
    lam: float = 1.0
    weight_init: float | None = None
    opt: MergeOptConfig = field(default_factory=MergeOptConfig)


@dataclass
class MergeResult:
    params: ParamVector
    cell_labels: tuple[str, ...]
    weight_matrix: np.ndarray            # (n_ckpts, n_cells) or (n_ckpts, total_len)
    cell_means: np.ndarray               # (n_ckpts, n_cells); == weight_matrix unless parameter-level
    granularity: Granularity
    weight_history: list[np.ndarray]     # per-epoch (n_ckpts, n_cells) cell means
    final_train_loss: float

    def entry_mean_weights(self) -> np.ndarray:
        """One scalar per checkpoint: its mean learned weight across cells."""
        return self.cell_means.mean(axis=1)


def _resolve_cells(
    layout, recipe: MergeRecipe
) -> tuple[tuple[str, ...], list[tuple[str, ...]]]:
    names = layout.group_names()
    if recipe.granularity is Granularity.MODEL:
        cells = [tuple(names)]
    elif recipe.group_partition is None:
        cells = [(g,) for g in names]
    else:
        cells = [tuple(c) for c in recipe.group_partition]
        flat = [g for cell in cells for g in cell]
        if sorted(flat) != sorted(names):
            raise InputError(
                f"group partition {cells} must cover layout groups {names} exactly once"
            )
    labels = tuple("+".join(c) for c in cells)
    return labels, cells


def _weights_by_group(layout, cells, W: np.ndarray, granularity: Granularity) -> dict:
    if granularity is Granularity.PARAMETER:
        return {g: W[:, layout.indices(g)] for g in layout.group_names()}
    out = {}
    for ci, cell in enumerate(cells):
        for g in cell:
            out[g] = W[:, ci]
    return out


def merge_learned(
    planner: Planner,
    pool: CheckpointPool,
    target_train: Sequence[Scene],
    recipe: MergeRecipe,
) -> MergeResult:
    """Learn merge weights on the target training split (never validation).

    Weights start at ``1/|pool|`` (the pool average), are unconstrained reals,
    and are updated with Adam using the analytic chain rule through the
    composed parameters. The composition itself goes through
    :func:`planmerge.params.compose`.
    """
    if pool.size == 0:
        raise InputError("empty checkpoint pool")
    if len(target_train) == 0:
        raise InputError("empty target training split")
    layout = pool.base.layout
    labels, cells = _resolve_cells(layout, recipe)
    cell_idx = [np.concatenate([layout.indices(g) for g in cell]) for cell in cells]
    taus = [task_vector(e.params, pool.base) for e in pool.entries]
    T = np.stack([t.values for t in taus])
    n = pool.size
    lam = recipe.lam
    opt = recipe.opt

    w0 = (1.0 / n) if recipe.weight_init is None else recipe.weight_init
    if recipe.granularity is Granularity.PARAMETER:
        W = np.full((n, layout.total_len), w0)
    else:
        W = np.full((n, len(cells)), w0)

    def composed(W):
        return compose(pool.base, lam, _weights_by_group(layout, cells, W, recipe.granularity), taus)

    adam = Adam(W.size, opt.adam_beta1, opt.adam_beta2, opt.adam_eps)
    sched = _Plateau(opt.learning_rate, opt.plateau_factor, opt.plateau_patience)
    rng = np.random.default_rng(opt.seed)
    lr = opt.learning_rate
    history: list[np.ndarray] = []
    final_loss = math.nan
    step = 0
    for epoch in range(1, opt.epochs + 1):
        loss_sum, seen = 0.0, 0
        for batch_idx in _epoch_batches(len(target_train), opt.batch_size, rng):
            step += 1
            scenes = [target_train[i] for i in batch_idx]
            theta = composed(W)
            loss, grad = planner.loss_and_grad(theta, scenes)
            if not np.isfinite(loss):
                raise NumericError(f"merge loss diverged at step {step}")
            g = grad.values
            if recipe.granularity is Granularity.PARAMETER:
                GW = lam * T * g[None, :]
            else:
                GW = np.empty_like(W)
                for ci, idx in enumerate(cell_idx):
                    GW[:, ci] = lam * (T[:, idx] @ g[idx])
            W = adam.step(W.ravel(), GW.ravel(), lr).reshape(W.shape)
            loss_sum += loss * len(batch_idx)
            seen += len(batch_idx)
        final_loss = loss_sum / seen
        lr = sched.update(final_loss)
        history.append(_cell_means(W, cell_idx, recipe.granularity))

    return MergeResult(
        params=composed(W),
        cell_labels=labels,
        weight_matrix=W,
        cell_means=_cell_means(W, cell_idx, recipe.granularity),
        granularity=recipe.granularity,
        weight_history=history,
        final_train_loss=final_loss,
    )


def _cell_means(W: np.ndarray, cell_idx, granularity: Granularity) -> np.ndarray:
    if granularity is not Granularity.PARAMETER:
        return W.copy()
    return np.stack([W[:, idx].mean(axis=1) for idx in cell_idx], axis=1)


# ------------------------------------------------------------------ baselines


def merge_average(pool: CheckpointPool) -> ParamVector:
    """Elementwise mean over pool checkpoints (the base is not an entry)."""
    if pool.size == 0:
        raise InputError("empty checkpoint pool")
    stacked = np.stack([e.params.values for e in pool.entries])
    return ParamVector(values=stacked.mean(axis=0), layout=pool.base.layout)


@dataclass(frozen=True)
class TaskArithmeticResult:
    params: ParamVector
    chosen_lambda: float
    candidate_ades: tuple[tuple[float, float], ...]  # (lambda, validation ADE)


def task_arithmetic_candidate(pool: CheckpointPool, lam: float) -> ParamVector:
    """``theta0 + lam * sum_i tau_i`` for one scale value."""
    if pool.size == 0:
        raise InputError("empty checkpoint pool")
    total = np.zeros_like(pool.base.values)
    for entry in pool.entries:
        total += entry.params.values - pool.base.values
    return ParamVector(values=pool.base.values + lam * total, layout=pool.base.layout)


def merge_task_arithmetic(
    planner: Planner,
    pool: CheckpointPool,
    lambdas: Sequence[float],
    target_val: Sequence[Scene],
) -> TaskArithmeticResult:
    """Sum all task vectors, scale by each grid value, keep the best-ADE scale."""
    if len(lambdas) == 0:
        raise InputError("empty lambda grid")
    best = None
    ades = []
    for lam in lambdas:
        candidate = task_arithmetic_candidate(pool, lam)
        score = evaluate(planner, candidate, target_val).ade
        ades.append((float(lam), float(score)))
        if best is None or score < best[1]:
            best = (candidate, score, float(lam))
    return TaskArithmeticResult(
        params=best[0], chosen_lambda=best[2], candidate_ades=tuple(ades)
    )


def merge_ties(pool: CheckpointPool, keep_fraction: float = 0.2, lam: float = 1.0) -> ParamVector:
    """Trim / elect-sign / disjoint-merge over the pool's task vectors.

    Per task vector, all but the top ``ceil(keep_fraction * d)`` coordinates by
    magnitude are zeroed (stable ordering breaks magnitude ties). Per
    coordinate, the sign of the sum of kept values is elected (a zero sum
    resolves to positive) and the merged value is the mean of kept values
    agreeing with that sign, zero where none agree.
    """
    if pool.size == 0:
        raise InputError("empty checkpoint pool")
    if not (0.0 < keep_fraction <= 1.0):
        raise InputError("keep_fraction must lie in (0, 1]")
    T = np.stack([e.params.values - pool.base.values for e in pool.entries])
    n, d = T.shape
    k = math.ceil(keep_fraction * d)
    kept = np.zeros_like(T)
    for i in range(n):
        order = np.argsort(-np.abs(T[i]), kind="stable")
        kept[i, order[:k]] = T[i, order[:k]]
    sign_sum = kept.sum(axis=0)
    elected = np.where(sign_sum < 0, -1.0, 1.0)
    agree = (kept != 0) & (np.sign(kept) == elected)
    count = agree.sum(axis=0)
    merged = (kept * agree).sum(axis=0) / np.maximum(count, 1)
    return ParamVector(values=pool.base.values + lam * merged, layout=pool.base.layout)


def domain_best_models(pool: CheckpointPool) -> list[Checkpoint]:
    """One representative model per source domain: the planner ADE-best."""
    out = []
    for domain in pool.domains():
        match = [
            e for e in pool.entries
            if e.domain_id == domain and e.stage is Stage.PLANNER and e.reason is Reason.BEST_ADE
        ]
        if match:
            out.append(match[0])
    return out


def ensemble_plans(
    planner: Planner,
    models: Sequence[ParamVector],
    scenes: Sequence[Scene],
    mode: str,
) -> np.ndarray:
    """Combine member plans: pointwise mean (``avg``) or per-sample
    oracle-best-ADE member selection (``wta``)."""
    if len(models) == 0:
        raise InputError("empty ensemble")
    if mode not in ("wta", "avg"):
        raise InputError(f"unknown ensemble mode {mode!r}")
    member = np.stack([planner.plans_for(m, scenes) for m in models])  # (K, N, F, 2)
    if mode == "avg":
        return member.mean(axis=0)
    gts = np.stack([s.ego_future_gt for s in scenes])
    per_sample_ade = np.linalg.norm(member - gts[None], axis=-1).mean(axis=-1)  # (K, N)
    pick = np.argmin(per_sample_ade, axis=0)
    return member[pick, np.arange(len(scenes))]


def ensemble_predict(
    planner: Planner, models: Sequence[ParamVector], scene: Scene, mode: str
) -> np.ndarray:
    """Single-scene ensemble plan."""
    return ensemble_plans(planner, models, [scene], mode)[0]


# ------------------------------------------------- weight/similarity analysis


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties; NaN if degenerate."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("spearman expects two equal-length 1-D sequences")
    if len(x) < 2:
        raise InputError("need at least two observations")
    rx, ry = _average_ranks(x), _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return math.nan
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WeightSimilarityReport:
    coefficient: float
    rows: tuple[tuple[str, float, float], ...]  # (domain, zero-shot ADE, mean weight)
    degenerate: bool


def weight_similarity_correlation(
    planner: Planner,
    result: MergeResult,
    pool: CheckpointPool,
    target_val: Sequence[Scene],
) -> WeightSimilarityReport:
    """Rank correlation between per-domain mean learned weight and similarity.

    Similarity proxy per source domain: negated zero-shot target ADE of its
    best planner checkpoint (lower error = more similar). Requires checkpoints
    from at least three domains.
    """
    domains = pool.domains()
    if len(domains) < 3:
        raise InputError("need checkpoints from at least three source domains")
    if result.weight_matrix.shape[0] != pool.size:
        raise InputError("merge result does not match the pool")
    best = {c.domain_id: c for c in domain_best_models(pool)}
    missing = [d for d in domains if d not in best]
    if missing:
        raise InputError(f"domains without a planner ADE-best checkpoint: {missing}")
    entry_means = result.entry_mean_weights()
    rows = []
    for domain in domains:
        zero_shot = evaluate(planner, best[domain].params, target_val).ade
        idx = [i for i, e in enumerate(pool.entries) if e.domain_id == domain]
        rows.append((domain, float(zero_shot), float(entry_means[idx].mean())))
    coeff = spearman([-r[1] for r in rows], [r[2] for r in rows])
    return WeightSimilarityReport(
        coefficient=coeff, rows=tuple(rows), degenerate=math.isnan(coeff)
    )
