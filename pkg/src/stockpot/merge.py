"""Anchored stock merging and the baselines it is compared with.

A stock merge places the merged weight at ``t * avg + (1 - t) * w0`` where
``avg`` is the mean of ``N`` fine-tuned models, ``w0`` the pre-trained
anchor, and ``t = N cos(theta) / (1 + (N - 1) cos(theta))`` depends only on
the angle between fine-tuning deltas.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from stockpot._reduce import cosine, norm, pairwise_sum, parallel_map
from stockpot.geometry import (
    Granularity,
    Unit,
    canonical_order,
    eps_norm,
    gather,
    mean_arrays,
    pseudo_center,
    scatter,
    units_for,
)
from stockpot.tensor_store import Checkpoint, SchemaError, require_compatible

logger = logging.getLogger(__name__)

EPS_DENOM = 1e-6


def interpolation_ratio(cos_theta: float, n: int) -> Tuple[float, bool]:
    """Closed-form anchored ratio for ``n`` models with pairwise cosine ``cos_theta``.

    Returns ``(t, clamped)``; ``t`` is forced into [0, 1], and to 0 when the
    denominator ``1 + (n - 1) cos`` is at or below ``EPS_DENOM``.
    """
    if not -1.0 <= cos_theta <= 1.0:
        raise ValueError(f"cos_theta must lie in [-1, 1], got {cos_theta}")
    if n < 2:
        raise ValueError("interpolation_ratio needs n >= 2")
    denom = 1.0 + (n - 1) * cos_theta
    if denom <= EPS_DENOM:
        return 0.0, True
    t = n * cos_theta / denom
    if t < 0.0:
        return 0.0, True
    if t > 1.0:
        return 1.0, True
    return t, False


@dataclass
class UnitRatio:
    unit: str
    cls: str
    cos_theta: Optional[float]
    t: float
    clamped: bool
    degenerate: bool
    n_models: int
    period: Optional[int] = None


RATIO_COLUMNS = ["unit", "class", "cos_theta", "t", "clamped", "degenerate", "N", "period"]


@dataclass
class RatioReport:
    units: List[UnitRatio]
    warnings: List[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> UnitRatio:
        for u in self.units:
            if u.unit == key:
                return u
        raise KeyError(key)

    def to_json(self) -> dict:
        return {"units": [asdict(u) for u in self.units], "warnings": list(self.warnings)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RATIO_COLUMNS)
        for u in self.units:
            cos = "" if u.cos_theta is None else repr(u.cos_theta)
            period = "" if u.period is None else u.period
            writer.writerow([u.unit, u.cls, cos, repr(u.t), int(u.clamped), int(u.degenerate), u.n_models, period])
        return buf.getvalue()


def _mean_pairwise_cosine(vectors: Sequence[np.ndarray], n: int) -> Optional[float]:
    eps = eps_norm(n)
    live = [v for v in vectors if norm(v) > eps]
    if len(live) < 2:
        return None
    cosines = [cosine(live[i], live[j]) for i in range(len(live)) for j in range(i + 1, len(live))]
    return pairwise_sum(cosines) / len(cosines)


def stock_merge(
    anchor: Checkpoint,
    models: Sequence[Checkpoint],
    granularity: Granularity = Granularity(),
) -> Tuple[Checkpoint, RatioReport]:
    """Merge fine-tuned ``models`` onto ``anchor`` with a per-unit closed-form ratio.

    cos(theta) for a unit is the mean of all pairwise delta cosines. Units
    whose deltas all vanish get ``t = 1``; tensors the anchor lacks are
    plainly averaged (``t = 1``) and reported in ``warnings``.
    """
    if len(models) < 2:
        raise ValueError("stock_merge needs at least two models")
    require_compatible(models)
    members = canonical_order(models)
    schema = members[0].schema
    dtypes = members[0].dtypes

    anchored = {}
    missing = []
    for name, shape in schema.items():
        if name not in anchor:
            missing.append(name)
        elif anchor[name].shape != shape:
            raise SchemaError(f"tensor {name!r}: anchor shape {list(anchor[name].shape)} != model shape {list(shape)}")
        else:
            anchored[name] = shape
    warnings = [f"tensor {name!r} missing from anchor; averaged without anchoring" for name in missing]
    for w in warnings:
        logger.warning(w)
    extra = [name for name in anchor.names if name not in schema]
    if extra:
        logger.warning("anchor tensors %s are not in the models and are dropped", extra)

    avg = mean_arrays(members)
    base = {name: anchor[name].values for name in anchored}
    member_arrays = [m.arrays() for m in members]
    out = {name: np.empty(shape, dtype=np.float64) for name, shape in schema.items()}
    n_models = len(members)

    def work(unit: Unit) -> UnitRatio:
        b = gather(base, unit)
        cos = _mean_pairwise_cosine([gather(a, unit) - b for a in member_arrays], unit.n)
        if cos is None:
            t, clamped = 1.0, False
        else:
            t, clamped = interpolation_ratio(cos, n_models)
        scatter(out, unit, t * gather(avg, unit) + (1.0 - t) * b)
        return UnitRatio(unit.key, unit.cls, cos, t, clamped, cos is None, n_models)

    ratios = parallel_map(work, units_for(anchored, granularity))
    for name in missing:
        out[name][...] = avg[name]
        shape = schema[name]
        cls = "weight" if len(shape) >= 2 else "bias" if len(shape) == 1 else "other"
        ratios.append(UnitRatio(name, cls, None, 1.0, False, False, n_models))

    out_dtypes = {name: anchor[name].dtype if name in anchor else dtypes[name] for name in schema}
    merged = Checkpoint.from_arrays(out, out_dtypes)
    ratios.sort(key=lambda r: r.unit.encode("utf-8"))
    return merged, RatioReport(ratios, warnings)


def uniform_soup(models: Sequence[Checkpoint]) -> Checkpoint:
    return pseudo_center(models)


@dataclass
class GreedyStep:
    index: int
    digest: str
    individual_score: float
    soup_score: float
    accepted: bool


class ScorerError(RuntimeError):
    def __init__(self, index: int, digest: str, cause: BaseException):
        self.index = index
        self.digest = digest
        super().__init__(f"scorer failed on model {index} ({digest[:12]}): {cause}")


def greedy_soup(
    models: Sequence[Checkpoint], scorer: Callable[[Checkpoint], float]
) -> Tuple[Checkpoint, List[GreedyStep]]:
    """Greedy soup: add models best-first, keeping each one that does not lower the score."""
    if not models:
        raise ValueError("greedy_soup needs at least one model")
    require_compatible(models)

    def score(ckpt, index, digest):
        try:
            return float(scorer(ckpt))
        except Exception as exc:
            raise ScorerError(index, digest, exc) from exc

    scored = [(score(m, i, m.digest), m.digest, i, m) for i, m in enumerate(models)]
    scored.sort(key=lambda s: (-s[0], s[1]))

    first_score, first_digest, first_index, first = scored[0]
    chosen = [first]
    soup = Checkpoint(first.tensors)
    best = first_score
    trace = [GreedyStep(first_index, first_digest, first_score, first_score, True)]
    for individual, digest, index, model in scored[1:]:
        candidate = uniform_soup(chosen + [model])
        s = score(candidate, index, digest)
        keep = s >= best
        trace.append(GreedyStep(index, digest, individual, s, keep))
        if keep:
            chosen.append(model)
            soup, best = candidate, s
    return soup, trace


def _check_coefficient(value: float, name: str, allow_extrapolation: bool) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if not allow_extrapolation and not 0.0 <= value <= 1.0:
        raise ValueError(f"{name}={value} outside [0, 1]; pass allow_extrapolation=True to extrapolate")


def interpolate_pair(a: Checkpoint, b: Checkpoint, t: float, allow_extrapolation: bool = False) -> Checkpoint:
    """``t * a + (1 - t) * b`` elementwise, stored in ``a``'s dtypes."""
    require_compatible([a, b])
    _check_coefficient(t, "t", allow_extrapolation)
    if t == 1.0:
        return a
    if t == 0.0:
        return b
    bv = b.arrays()
    out = {r.name: t * r.values + (1.0 - t) * bv[r.name] for r in a}
    return Checkpoint.from_arrays(out, a.dtypes)


def wise_ft(anchor: Checkpoint, model: Checkpoint, alpha: float, allow_extrapolation: bool = False) -> Checkpoint:
    """``alpha * model + (1 - alpha) * anchor``; the endpoints return the inputs unchanged."""
    require_compatible([anchor, model])
    _check_coefficient(alpha, "alpha", allow_extrapolation)
    if alpha == 0.0:
        return anchor
    if alpha == 1.0:
        return model
    av = anchor.arrays()
    out = {r.name: alpha * r.values + (1.0 - alpha) * av[r.name] for r in model}
    return Checkpoint.from_arrays(out, anchor.dtypes)


def variance_optimal_ratio(trace_a: float, trace_b: float) -> float:
    """Weight on ``a`` minimizing the expected squared distance of ``t a + (1 - t) b`` to its mean."""
    if trace_a < 0 or trace_b < 0:
        raise ValueError("covariance traces must be non-negative")
    if trace_a == 0 and trace_b == 0:
        raise ValueError("both traces are zero; every ratio is optimal")
    return trace_b / (trace_a + trace_b)


@dataclass
class ReplayResult:
    final: Checkpoint
    reports: List[RatioReport]
    merged: List[Checkpoint]


def periodic_merge_replay(
    anchor: Checkpoint,
    trajectories: Sequence[Sequence[Checkpoint]],
    granularity: Granularity = Granularity(),
) -> ReplayResult:
    """Stock-merge the per-seed checkpoints of every period.

    With one period this is the post-training variant.
    """
    if not trajectories:
        raise ValueError("no trajectories given")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"ragged trajectories: lengths {sorted(lengths)}")
    (length,) = lengths
    if length < 1:
        raise ValueError("trajectories must hold at least one period")
    reports = []
    merged = []
    for p in range(length):
        ckpt, report = stock_merge(anchor, [t[p] for t in trajectories], granularity)
        for u in report.units:
            u.period = p + 1
        merged.append(ckpt)
        reports.append(report)
    return ReplayResult(merged[-1], reports, merged)


class MethodKind(str, Enum):
    STOCK = "stock"
    UNIFORM = "uniform"
    GREEDY = "greedy"
    WISE = "wise"
    PAIR = "pair"


@dataclass
class MergeMethod:
    kind: MethodKind
    alpha: Optional[float] = None
    t: Optional[float] = None
    scorer: Optional[Callable[[Checkpoint], float]] = None
    granularity: Granularity = field(default_factory=Granularity)
    allow_extrapolation: bool = False

    def __post_init__(self):
        self.kind = MethodKind(self.kind)
        if self.kind is MethodKind.WISE:
            if self.alpha is None:
                raise ValueError("wise merge needs alpha")
            _check_coefficient(self.alpha, "alpha", self.allow_extrapolation)
        if self.kind is MethodKind.PAIR:
            if self.t is None:
                raise ValueError("pair merge needs t")
            _check_coefficient(self.t, "t", self.allow_extrapolation)
        if self.kind is MethodKind.GREEDY and self.scorer is None:
            raise ValueError("greedy merge needs a scorer")


@dataclass
class MergeOutcome:
    checkpoint: Checkpoint
    ratios: Optional[RatioReport] = None
    trace: Optional[List[GreedyStep]] = None


def merge(method: MergeMethod, models: Sequence[Checkpoint], anchor: Optional[Checkpoint] = None) -> MergeOutcome:
    kind = method.kind
    if kind in (MethodKind.STOCK, MethodKind.WISE) and anchor is None:
        raise ValueError(f"{kind.value} merge needs an anchor")
    if kind is MethodKind.STOCK:
        ckpt, report = stock_merge(anchor, models, method.granularity)
        return MergeOutcome(ckpt, ratios=report)
    if kind is MethodKind.UNIFORM:
        return MergeOutcome(uniform_soup(models))
    if kind is MethodKind.GREEDY:
        ckpt, trace = greedy_soup(models, method.scorer)
        return MergeOutcome(ckpt, trace=trace)
    if kind is MethodKind.WISE:
        if len(models) != 1:
            raise ValueError("wise merge takes exactly one model")
        return MergeOutcome(wise_ft(anchor, models[0], method.alpha, method.allow_extrapolation))
    if len(models) != 2:
        raise ValueError("pair merge takes exactly two models")
    return MergeOutcome(interpolate_pair(models[0], models[1], method.t, method.allow_extrapolation))
