"""Flat parameter vectors, named group layouts, and task-vector arithmetic.

A model's parameters live in one flat float64 array. A :class:`GroupLayout`
names disjoint index ranges of that array (forecaster, ego encoder, ...), and
all merging operates on (base, task-vector) pairs expressed in that layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, LayoutError, NumericError

Range = tuple[int, int]


@dataclass(frozen=True)
class GroupLayout:
    """Ordered partition of ``[0, total_len)`` into named groups.

    ``groups`` maps each group name to one or more half-open index ranges.
    Ranges must be disjoint and must jointly cover the whole vector.
    """

    groups: tuple[tuple[str, tuple[Range, ...]], ...]
    total_len: int

    def __post_init__(self) -> None:
        names = [name for name, _ in self.groups]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate group names in layout: {names}")
        covered = np.zeros(self.total_len, dtype=bool)
        for name, ranges in self.groups:
            for start, end in ranges:
                if not (0 <= start < end <= self.total_len):
                    raise LayoutError(f"group {name!r} range ({start}, {end}) out of bounds")
                if covered[start:end].any():
                    raise LayoutError(f"group {name!r} overlaps an earlier range")
                covered[start:end] = True
        if not covered.all():
            raise LayoutError("group ranges do not cover the full vector")

    @classmethod
    def from_sizes(cls, sizes: Mapping[str, int] | Iterable[tuple[str, int]]) -> "GroupLayout":
        """Build a layout of contiguous groups from an ordered name -> size map."""
        items = sizes.items() if isinstance(sizes, Mapping) else list(sizes)
        groups = []
        offset = 0
        for name, size in items:
            groups.append((name, ((offset, offset + size),)))
            offset += size
        return cls(groups=tuple(groups), total_len=offset)

    def group_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.groups)

    def ranges(self, name: str) -> tuple[Range, ...]:
        for gname, ranges in self.groups:
            if gname == name:
                return ranges
        raise LayoutError(f"no group named {name!r}")

    def group_len(self, name: str) -> int:
        return sum(end - start for start, end in self.ranges(name))

    def indices(self, name: str) -> np.ndarray:
        """All flat indices belonging to ``name``, in range order."""
        parts = [np.arange(start, end) for start, end in self.ranges(name)]
        return np.concatenate(parts) if parts else np.array([], dtype=int)

    def to_json(self) -> dict:
        return {
            "groups": [[name, [list(r) for r in ranges]] for name, ranges in self.groups],
            "total_len": self.total_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroupLayout":
        groups = tuple(
            (name, tuple((int(s), int(e)) for s, e in ranges)) for name, ranges in obj["groups"]
        )
        return cls(groups=groups, total_len=int(obj["total_len"]))


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat float64 parameter vector tied to a :class:`GroupLayout`."""

    values: np.ndarray
    layout: GroupLayout

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutError(f"expected a flat vector, got shape {values.shape}")
        if values.shape[0] != self.layout.total_len:
            raise LayoutError(
                f"vector length {values.shape[0]} != layout total_len {self.layout.total_len}"
            )
        if not np.isfinite(values).all():
            raise NumericError("parameter vector contains NaN/Inf")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def group(self, name: str) -> np.ndarray:
        """Read-only copy of the entries belonging to ``name``."""
        return self.values[self.layout.indices(name)]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, layout=self.layout)

    def bit_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()


def task_vector(ckpt: ParamVector, base: ParamVector) -> ParamVector:
    """Elementwise difference ``ckpt - base`` with the shared layout."""
    if ckpt.layout != base.layout:
        raise LayoutError("task_vector requires identical layouts")
    return ParamVector(values=ckpt.values - base.values, layout=base.layout)


def compose(
    base: ParamVector,
    lam: float,
    weights: Mapping[str, Sequence[float] | np.ndarray],
    taus: Sequence[ParamVector],
    layout: GroupLayout | None = None,
) -> ParamVector:
    """Weighted task-vector composition.

    For every flat index ``j`` in group ``g``::

        out[j] = base[j] + lam * sum_i weights[g][i] * taus[i][j]

    ``weights[g]`` is either one scalar weight per task vector, or a
    ``(n_taus, group_len)`` array of per-coordinate weights. The inner sum runs
    sequentially over task vectors so the arithmetic per index is independent
    of how groups are partitioned (group-wise composition with identical weight
    lists is bit-identical to model-level composition).
    """
    layout = layout or base.layout
    if base.layout != layout:
        raise LayoutError("base layout does not match the requested layout")
    for i, tau in enumerate(taus):
        if tau.layout != layout:
            raise LayoutError(f"task vector {i} has a mismatched layout")
    if not np.isfinite(lam):
        raise NumericError("lambda is not finite")

    n = len(taus)
    norm_weights: dict[str, np.ndarray] = {}
    for name, _ in layout.groups:
        if name not in weights:
            raise LayoutError(f"no weights supplied for group {name!r}")
        w = np.asarray(weights[name], dtype=np.float64)
        if not np.isfinite(w).all():
            raise NumericError(f"group {name!r} has non-finite weights")
        if w.ndim not in (1, 2) or w.shape[0] != n:
            raise LayoutError(
                f"group {name!r}: expected {n} weights (or weight rows), got shape {w.shape}"
            )
        if w.ndim == 2 and w.shape[1] != layout.group_len(name):
            raise LayoutError(
                f"group {name!r}: per-coordinate weights have width {w.shape[1]}, "
                f"expected {layout.group_len(name)}"
            )
        norm_weights[name] = w

    out = base.values.copy()
    for name, ranges in layout.groups:
        w = norm_weights[name]
        offset = 0
        for start, end in ranges:
            # w_slice[i] is a scalar (1-D weights) or a per-coordinate row (2-D).
            w_slice = w if w.ndim == 1 else w[:, offset : offset + (end - start)]
            acc = np.zeros(end - start, dtype=np.float64)
            for i in range(n):
                acc += w_slice[i] * taus[i].values[start:end]
            out[start:end] += lam * acc
            offset += end - start
    if not np.isfinite(out).all():
        raise NumericError("composition produced non-finite values")
    return ParamVector(values=out, layout=layout)


def uniform_weights(layout: GroupLayout, n_taus: int, value: float) -> dict[str, np.ndarray]:
    """One identical scalar weight per task vector for every group."""
    if n_taus < 1:
        raise InputError("need at least one task vector")
    return {name: np.full(n_taus, value, dtype=np.float64) for name in layout.group_names()}
