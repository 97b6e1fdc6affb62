"""Reference planning network with analytic forward and backward passes.

The model is a hierarchy of small modules over ego-centric coordinates:

- ``fore``:  per-agent GRU over observed agent pasts + linear readout of
  future offsets (the forecaster),
- ``ego``:   GRU over the ego past,
- ``surr``:  per-agent GRU over observed past concatenated with forecast,
- ``inter``: single-head scaled dot-product attention (ego state as query,
  agent states as keys/values) with a residual tanh feed-forward block,
- ``else``:  feed-forward readout decoding cumulative plan offsets.

Everything is float64 numpy with hand-derived backward passes; the training
loss is imitation (mean squared L2 to the ground-truth ego future) plus a
squared-hinge collision penalty against surrounding agents' true futures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError, StateError
from .params import GroupLayout, ParamVector
from .scenes import Scene, SceneBatch

# Fixed coordinate scale applied to encoder inputs: keeps typical scene
# coordinates (a few meters) inside the saturating range of the gates.
INPUT_SCALE = 0.1

GROUP_NAMES = ("fore", "ego", "surr", "inter", "else")


@dataclass(frozen=True)
class PlannerConfig:
    """Shapes and loss constants of the reference planner."""

    t_obs: int = 8
    t_fut: int = 12
    hidden_dim: int = 32
    attn_dim: int = 32
    max_agents: int = 8
    collision_margin: float = 0.6
    collision_weight: float = 0.1

    def __post_init__(self) -> None:
        if min(self.t_obs, self.t_fut, self.hidden_dim, self.attn_dim, self.max_agents) < 1:
            raise InputError("all planner dimensions must be >= 1")
        if self.collision_weight < 0:
            raise InputError("collision_weight must be >= 0")


@dataclass(frozen=True)
class ActivationBundle:
    """Forward features of one scene: ego state, per-agent states, fused state."""

    h_ego: np.ndarray    # (hidden_dim,)
    h_surr: np.ndarray   # (n_valid, hidden_dim)
    h_inter: np.ndarray  # (hidden_dim,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _gru_param_specs(prefix: str, in_dim: int, hidden: int) -> list[tuple[str, tuple, int]]:
    gin = in_dim + hidden
    return [
        (f"{prefix}.wzr", (gin, 2 * hidden), gin),
        (f"{prefix}.bzr", (2 * hidden,), gin),
        (f"{prefix}.wn", (gin, hidden), gin),
        (f"{prefix}.bn", (hidden,), gin),
    ]


def gru_forward(x, wzr, bzr, wn, bn, want_cache=True):
    """Run a GRU over ``x`` of shape (B, T, in); returns final state (B, H)."""
    B, T, _ = x.shape
    H = wn.shape[1]
    h = np.zeros((B, H))
    steps = [] if want_cache else None
    for t in range(T):
        xt = x[:, t, :]
        u = np.concatenate([xt, h], axis=1)
        zr = _sigmoid(u @ wzr + bzr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.concatenate([xt, r * h], axis=1)
        n = np.tanh(c @ wn + bn)
        h_new = (1.0 - z) * n + z * h
        if want_cache:
            steps.append((xt, h, z, r, n))
        h = h_new
    return h, steps


def gru_backward(dh, steps, wzr, wn, grads, prefix):
    """Backprop ``dh`` (B, H) through cached GRU steps; returns input grads (B, T, in)."""
    H = wn.shape[1]
    I = steps[0][0].shape[1]
    B, T = dh.shape[0], len(steps)
    dx = np.zeros((B, T, I))
    dwzr, dbzr = grads[prefix + ".wzr"], grads[prefix + ".bzr"]
    dwn, dbn = grads[prefix + ".wn"], grads[prefix + ".bn"]
    for t in range(T - 1, -1, -1):
        xt, hprev, z, r, n = steps[t]
        dz = dh * (hprev - n)
        dn = dh * (1.0 - z)
        dhprev = dh * z
        an = dn * (1.0 - n * n)
        dwn += np.concatenate([xt, r * hprev], axis=1).T @ an
        dbn += an.sum(axis=0)
        dc = an @ wn.T
        dxt = dc[:, :I].copy()
        drh = dc[:, I:]
        dr = drh * hprev
        dhprev = dhprev + drh * r
        azr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        dwzr += np.concatenate([xt, hprev], axis=1).T @ azr
        dbzr += azr.sum(axis=0)
        du = azr @ wzr.T
        dxt += du[:, :I]
        dhprev = dhprev + du[:, I:]
        dx[:, t, :] = dxt
        dh = dhprev
    return dx


@dataclass
class _PlanCache:
    ego_steps: list
    surr_steps: list
    h_ego: np.ndarray
    h_surr_flat: np.ndarray
    q: np.ndarray
    k: np.ndarray
    vv: np.ndarray
    p: np.ndarray
    ctx: np.ndarray
    u: np.ndarray
    f: np.ndarray
    d1: np.ndarray
    h_inter: np.ndarray
    has: np.ndarray
    mask: np.ndarray


class Planner:
    """Bundles a :class:`PlannerConfig` with its flat-parameter layout and ops.

    All methods are pure functions of (parameters, scenes); instances hold no
    mutable state and are safe to share across threads.
    """

    def __init__(self, cfg: PlannerConfig | None = None):
        self.cfg = cfg or PlannerConfig()
        c = self.cfg
        f2 = 2 * c.t_fut
        h, a = c.hidden_dim, c.attn_dim
        specs: list[tuple[str, tuple, int]] = []
        specs += _gru_param_specs("fore", 2, h)
        specs += [("fore.out_w", (h, f2), h), ("fore.out_b", (f2,), h)]
        specs += _gru_param_specs("ego", 2, h)
        specs += _gru_param_specs("surr", 2, h)
        specs += [
            ("inter.wq", (h, a), h), ("inter.bq", (a,), h),
            ("inter.wk", (h, a), h), ("inter.bk", (a,), h),
            ("inter.wv", (h, a), h), ("inter.bv", (a,), h),
            ("inter.wo", (a, h), a), ("inter.bo", (h,), a),
            ("inter.ff1_w", (h, h), h), ("inter.ff1_b", (h,), h),
            ("inter.ff2_w", (h, h), h), ("inter.ff2_b", (h,), h),
        ]
        specs += [
            ("else.dec1_w", (h, h), h), ("else.dec1_b", (h,), h),
            ("else.dec2_w", (h, f2), h), ("else.dec2_b", (f2,), h),
        ]
        self._specs = specs
        spans: dict[str, tuple[int, int, tuple]] = {}
        sizes: dict[str, int] = {g: 0 for g in GROUP_NAMES}
        offset = 0
        for name, shape, _ in specs:
            size = int(np.prod(shape))
            spans[name] = (offset, offset + size, shape)
            sizes[name.split(".")[0]] += size
            offset += size
        self._spans = spans
        self.layout = GroupLayout.from_sizes(sizes)

    # ------------------------------------------------------------------ params

    def n_params(self) -> int:
        return self.layout.total_len

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named reshaped views into a flat array (writes go through)."""
        return {name: flat[s:e].reshape(shape) for name, (s, e, shape) in self._spans.items()}

    def init_params(self, seed: int) -> ParamVector:
        """Shared uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        rng = np.random.default_rng(seed)
        flat = np.empty(self.layout.total_len)
        for name, shape, fan_in in self._specs:
            s, e, _ = self._spans[name]
            bound = 1.0 / np.sqrt(fan_in)
            flat[s:e] = rng.uniform(-bound, bound, size=e - s)
        return ParamVector(values=flat, layout=self.layout)

    def zero_params(self) -> ParamVector:
        return ParamVector(values=np.zeros(self.layout.total_len), layout=self.layout)

    def _check_params(self, params: ParamVector) -> None:
        if params.layout != self.layout:
            raise InputError("parameter vector does not match this planner's layout")
        if not np.isfinite(params.values).all():
            raise NumericError("non-finite parameters")

    # ---------------------------------------------------------------- forecast

    def _forecast_batch(self, v, batch: SceneBatch, want_cache=True):
        c = self.cfg
        B, M = batch.agent_mask.shape
        x = (INPUT_SCALE * batch.surr_past).reshape(B * M, c.t_obs, 2)
        hM, steps = gru_forward(x, v["fore.wzr"], v["fore.bzr"], v["fore.wn"], v["fore.bn"],
                                want_cache=want_cache)
        offs = (hM @ v["fore.out_w"] + v["fore.out_b"]).reshape(B, M, c.t_fut, 2)
        last = batch.surr_past[:, :, -1, :]
        raw = last[:, :, None, :] + np.cumsum(offs, axis=2)
        pred = np.where(batch.agent_mask[:, :, None, None], raw, 0.0)
        cache = (steps, hM) if want_cache else None
        return pred, cache

    def _forecast_backward(self, v, g, batch: SceneBatch, dpred, cache):
        c = self.cfg
        steps, hM = cache
        B, M = batch.agent_mask.shape
        d = np.where(batch.agent_mask[:, :, None, None], dpred, 0.0)
        # pred[t] = last + sum_{s<=t} offs[s]  =>  doffs[s] = sum_{t>=s} dpred[t]
        doffs = np.flip(np.cumsum(np.flip(d, axis=2), axis=2), axis=2)
        doffs = doffs.reshape(B * M, 2 * c.t_fut)
        g["fore.out_w"] += hM.T @ doffs
        g["fore.out_b"] += doffs.sum(axis=0)
        dh = doffs @ v["fore.out_w"].T
        gru_backward(dh, steps, v["fore.wzr"], v["fore.wn"], g, "fore")

    def forecast(self, params: ParamVector, scene: Scene) -> np.ndarray:
        """Predict surrounding-agent futures; masked rows are exactly zero."""
        self._check_params(params)
        batch = SceneBatch.from_scenes([scene])
        pred, _ = self._forecast_batch(self.views(params.values), batch, want_cache=False)
        return pred[0]

    # -------------------------------------------------------------------- plan

    def _plan_batch(self, v, batch: SceneBatch, pred, want_cache=True):
        c = self.cfg
        B, M = batch.agent_mask.shape
        sq = float(np.sqrt(c.attn_dim))
        mask = batch.agent_mask
        has = mask.any(axis=1)

        h_ego, ego_steps = gru_forward(
            INPUT_SCALE * batch.ego_past,
            v["ego.wzr"], v["ego.bzr"], v["ego.wn"], v["ego.bn"], want_cache=want_cache)
        xs = INPUT_SCALE * np.concatenate([batch.surr_past, pred], axis=2)
        h_surr_flat, surr_steps = gru_forward(
            xs.reshape(B * M, c.t_obs + c.t_fut, 2),
            v["surr.wzr"], v["surr.bzr"], v["surr.wn"], v["surr.bn"], want_cache=want_cache)
        h_surr = h_surr_flat.reshape(B, M, c.hidden_dim)

        q = h_ego @ v["inter.wq"] + v["inter.bq"]
        k = h_surr @ v["inter.wk"] + v["inter.bk"]
        vv = h_surr @ v["inter.wv"] + v["inter.bv"]
        scores = np.einsum("bma,ba->bm", k, q) / sq
        smax = np.max(scores, axis=1, initial=-np.inf, where=mask)
        smax = np.where(has, smax, 0.0)
        # Masked slots get their row max so the shifted exponent is never positive.
        shifted = np.where(mask, scores, smax[:, None]) - smax[:, None]
        e = np.where(mask, np.exp(shifted), 0.0)
        ssum = e.sum(axis=1)
        p = e / np.where(ssum > 0, ssum, 1.0)[:, None]
        ctx = np.einsum("bm,bma->ba", p, vv)
        u = h_ego + ctx @ v["inter.wo"] + v["inter.bo"]
        f = np.tanh(u @ v["inter.ff1_w"] + v["inter.ff1_b"])
        hi = u + f @ v["inter.ff2_w"] + v["inter.ff2_b"]
        # No valid agents: the fused state falls back to the ego state.
        h_inter = np.where(has[:, None], hi, h_ego)

        d1 = np.tanh(h_inter @ v["else.dec1_w"] + v["else.dec1_b"])
        offs = (d1 @ v["else.dec2_w"] + v["else.dec2_b"]).reshape(B, c.t_fut, 2)
        plans = np.cumsum(offs, axis=1)
        cache = None
        if want_cache:
            cache = _PlanCache(ego_steps, surr_steps, h_ego, h_surr_flat,
                               q, k, vv, p, ctx, u, f, d1, h_inter, has, mask)
        return plans, cache

    def _plan_backward(self, v, g, batch: SceneBatch, dplans, cache: _PlanCache):
        c = self.cfg
        B, M = batch.agent_mask.shape
        sq = float(np.sqrt(c.attn_dim))

        doffs = np.flip(np.cumsum(np.flip(dplans, axis=1), axis=1), axis=1)
        doffs = doffs.reshape(B, 2 * c.t_fut)
        g["else.dec2_w"] += cache.d1.T @ doffs
        g["else.dec2_b"] += doffs.sum(axis=0)
        da1 = (doffs @ v["else.dec2_w"].T) * (1.0 - cache.d1 ** 2)
        g["else.dec1_w"] += cache.h_inter.T @ da1
        g["else.dec1_b"] += da1.sum(axis=0)
        dh_inter = da1 @ v["else.dec1_w"].T

        hasf = cache.has[:, None]
        dhi = np.where(hasf, dh_inter, 0.0)
        dh_ego = np.where(hasf, 0.0, dh_inter)

        g["inter.ff2_w"] += cache.f.T @ dhi
        g["inter.ff2_b"] += dhi.sum(axis=0)
        daf = (dhi @ v["inter.ff2_w"].T) * (1.0 - cache.f ** 2)
        g["inter.ff1_w"] += cache.u.T @ daf
        g["inter.ff1_b"] += daf.sum(axis=0)
        du = dhi + daf @ v["inter.ff1_w"].T

        g["inter.wo"] += cache.ctx.T @ du
        g["inter.bo"] += du.sum(axis=0)
        dctx = du @ v["inter.wo"].T
        dh_ego = dh_ego + du

        dp = np.einsum("ba,bma->bm", dctx, cache.vv)
        dvv = cache.p[:, :, None] * dctx[:, None, :]
        dscores = cache.p * (dp - np.sum(cache.p * dp, axis=1)[:, None])
        dq = np.einsum("bm,bma->ba", dscores, cache.k) / sq
        dk = dscores[:, :, None] * cache.q[:, None, :] / sq

        g["inter.wq"] += cache.h_ego.T @ dq
        g["inter.bq"] += dq.sum(axis=0)
        dh_ego = dh_ego + dq @ v["inter.wq"].T

        dkf = dk.reshape(B * M, c.attn_dim)
        dvf = dvv.reshape(B * M, c.attn_dim)
        g["inter.wk"] += cache.h_surr_flat.T @ dkf
        g["inter.bk"] += dkf.sum(axis=0)
        g["inter.wv"] += cache.h_surr_flat.T @ dvf
        g["inter.bv"] += dvf.sum(axis=0)
        dh_surr = dkf @ v["inter.wk"].T + dvf @ v["inter.wv"].T

        dxs = gru_backward(dh_surr, cache.surr_steps, v["surr.wzr"], v["surr.wn"], g, "surr")
        dxs = dxs.reshape(B, M, c.t_obs + c.t_fut, 2)
        dpred = INPUT_SCALE * dxs[:, :, c.t_obs:, :]
        gru_backward(dh_ego, cache.ego_steps, v["ego.wzr"], v["ego.wn"], g, "ego")
        return dpred

    def plan_forward(self, params: ParamVector, scene: Scene) -> tuple[np.ndarray, ActivationBundle]:
        """Plan one scene. Requires ``scene.surr_future_pred`` to be filled."""
        self._check_params(params)
        if scene.surr_future_pred is None:
            raise StateError("surr_future_pred is not filled; run the forecaster first")
        batch = SceneBatch.from_scenes([scene])
        pred = np.where(batch.agent_mask[:, :, None, None],
                        np.asarray(scene.surr_future_pred, dtype=np.float64)[None], 0.0)
        plans, cache = self._plan_batch(self.views(params.values), batch, pred, want_cache=True)
        acts = ActivationBundle(
            h_ego=cache.h_ego[0].copy(),
            h_surr=cache.h_surr_flat.reshape(batch.agent_mask.shape + (-1,))[0][scene.agent_mask],
            h_inter=cache.h_inter[0].copy(),
        )
        return plans[0], acts

    def plans_for(
        self,
        params: ParamVector,
        scenes: Sequence[Scene],
        batch_size: int = 128,
        forecaster_params: ParamVector | None = None,
    ) -> np.ndarray:
        """Forecast + plan every scene; optionally override the ``fore`` group."""
        self._check_params(params)
        values = params.values
        if forecaster_params is not None:
            self._check_params(forecaster_params)
            values = values.copy()
            idx = self.layout.indices("fore")
            values[idx] = forecaster_params.values[idx]
        v = self.views(values)
        out = []
        for lo in range(0, len(scenes), batch_size):
            batch = SceneBatch.from_scenes(scenes[lo : lo + batch_size])
            pred, _ = self._forecast_batch(v, batch, want_cache=False)
            plans, _ = self._plan_batch(v, batch, pred, want_cache=False)
            out.append(plans)
        if not out:
            raise InputError("no scenes to plan")
        return np.concatenate(out, axis=0)

    def forecasts_for(
        self, params: ParamVector, scenes: Sequence[Scene], batch_size: int = 256
    ) -> np.ndarray:
        """Forecast every scene; returns (N, max_agents, t_fut, 2)."""
        self._check_params(params)
        v = self.views(params.values)
        out = []
        for lo in range(0, len(scenes), batch_size):
            batch = SceneBatch.from_scenes(scenes[lo : lo + batch_size])
            pred, _ = self._forecast_batch(v, batch, want_cache=False)
            out.append(pred)
        if not out:
            raise InputError("no scenes to forecast")
        return np.concatenate(out, axis=0)

    # ------------------------------------------------------------------ losses

    def _loss_terms(self, plans: np.ndarray, batch: SceneBatch):
        c = self.cfg
        r = plans - batch.ego_future_gt
        l_imit = (r ** 2).sum(axis=(1, 2)) / c.t_fut
        diff = plans[:, None, :, :] - batch.surr_future_gt
        dist = np.linalg.norm(diff, axis=-1)
        viol = np.maximum(0.0, c.collision_margin - dist)
        viol = np.where(batch.agent_mask[:, :, None], viol, 0.0)
        l_col = (viol ** 2).sum(axis=(1, 2))
        return l_imit, l_col, r, diff, dist, viol

    def loss_value(self, params: ParamVector, scenes: Sequence[Scene], batch_size: int = 256) -> float:
        """Forward-only total loss (scene mean), chunked over the split."""
        if len(scenes) == 0:
            raise InputError("empty batch")
        self._check_params(params)
        v = self.views(params.values)
        total, seen = 0.0, 0
        for lo in range(0, len(scenes), batch_size):
            batch = SceneBatch.from_scenes(scenes[lo : lo + batch_size])
            pred, _ = self._forecast_batch(v, batch, want_cache=False)
            plans, _ = self._plan_batch(v, batch, pred, want_cache=False)
            l_imit, l_col, *_ = self._loss_terms(plans, batch)
            total += float((l_imit + self.cfg.collision_weight * l_col).sum())
            seen += batch.size
        return total / seen

    def loss_and_grad(self, params: ParamVector, scenes: Sequence[Scene]) -> tuple[float, ParamVector]:
        """Total training loss and its exact gradient over the full flat vector.

        Per scene: mean-over-steps squared L2 imitation error plus
        ``collision_weight`` times the squared hinge on distances to valid
        agents' ground-truth futures; the batch loss is the scene mean. The
        forecaster is part of the graph: gradients flow into ``fore`` through
        the predicted futures consumed by the surrounding-agent encoder.
        """
        if len(scenes) == 0:
            raise InputError("empty batch")
        self._check_params(params)
        c = self.cfg
        batch = SceneBatch.from_scenes(scenes)
        v = self.views(params.values)
        B = batch.size

        pred, fcache = self._forecast_batch(v, batch)
        plans, pcache = self._plan_batch(v, batch, pred)
        l_imit, l_col, r, diff, dist, viol = self._loss_terms(plans, batch)
        loss = float(np.mean(l_imit + c.collision_weight * l_col))

        grad_flat = np.zeros(self.layout.total_len)
        g = self.views(grad_flat)
        dplans = (2.0 / (B * c.t_fut)) * r
        safe = np.where(dist > 1e-12, dist, 1.0)
        coldir = np.where((dist > 1e-12)[..., None], diff / safe[..., None], 0.0)
        dplans += (-2.0 * c.collision_weight / B) * np.einsum("bmf,bmfc->bfc", viol, coldir)
        dpred = self._plan_backward(v, g, batch, dplans, pcache)
        self._forecast_backward(v, g, batch, dpred, fcache)
        return loss, ParamVector(values=grad_flat, layout=self.layout)

    def forecast_loss_and_grad(self, params: ParamVector, scenes: Sequence[Scene]) -> tuple[float, ParamVector]:
        """Mean squared forecast error over valid (agent, step) pairs + gradient."""
        if len(scenes) == 0:
            raise InputError("empty batch")
        self._check_params(params)
        c = self.cfg
        batch = SceneBatch.from_scenes(scenes)
        v = self.views(params.values)
        pred, fcache = self._forecast_batch(v, batch)
        mask4 = batch.agent_mask[:, :, None, None]
        err = np.where(mask4, pred - batch.surr_future_gt, 0.0)
        n_pairs = float(batch.agent_mask.sum()) * c.t_fut
        grad_flat = np.zeros(self.layout.total_len)
        if n_pairs == 0:
            return 0.0, ParamVector(values=grad_flat, layout=self.layout)
        loss = float((err ** 2).sum() / n_pairs)
        g = self.views(grad_flat)
        self._forecast_backward(v, g, batch, (2.0 / n_pairs) * err, fcache)
        return loss, ParamVector(values=grad_flat, layout=self.layout)
