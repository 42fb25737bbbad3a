"""Weight-space geometry of fine-tuned ensembles.

All angles and norms are measured on deltas ``w - w0`` against the
pre-trained anchor ``w0``. A *unit* is the vector over which one angle is
taken: the whole model, one tensor, one leading-dimension slice (filter) of
a tensor, or a named group of tensors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from stockpot._reduce import cosine, dot, norm, pairwise_sum, parallel_map
from stockpot.tensor_store import Checkpoint, SchemaError, require_compatible

GLOBAL_UNIT = "__global__"


class DegenerateUnitError(ArithmeticError):
    """A vector is too close to zero for an angle to be defined."""


def eps_norm(n: int) -> float:
    return 1e-12 * math.sqrt(n)


def classify(rank: int) -> str:
    if rank >= 2:
        return "weight"
    if rank == 1:
        return "bias"
    return "other"


class Kind(str, Enum):
    GLOBAL = "global"
    TENSOR = "tensor"
    FILTER = "filter"
    BLOCK = "block"


@dataclass(frozen=True)
class Granularity:
    kind: Kind = Kind.TENSOR
    block_map: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.BLOCK and self.block_map is None:
            raise ValueError("block granularity needs a block_map")

    @classmethod
    def parse(cls, text: str, block_map: Optional[Mapping[str, str]] = None) -> "Granularity":
        return cls(Kind(text), dict(block_map) if block_map is not None else None)

    def __str__(self) -> str:
        return self.kind.value


# (tensor name, leading index or None for the whole tensor)
Part = Tuple[str, Optional[int]]


@dataclass(frozen=True)
class Unit:
    key: str
    parts: Tuple[Part, ...]
    n: int
    cls: str


def units_for(schema: Mapping[str, Tuple[int, ...]], granularity: Granularity) -> List[Unit]:
    """Enumerate merge units for a schema (name -> shape), in canonical order."""
    names = sorted(schema, key=lambda s: s.encode("utf-8"))
    kind = granularity.kind

    def tensor_unit(name):
        shape = schema[name]
        return Unit(name, ((name, None),), math.prod(shape), classify(len(shape)))

    def grouped(key, members):
        parts = tuple((m, None) for m in members)
        classes = {classify(len(schema[m])) for m in members}
        cls = classes.pop() if len(classes) == 1 else "other"
        return Unit(key, parts, sum(math.prod(schema[m]) for m in members), cls)

    if kind is Kind.GLOBAL:
        return [grouped(GLOBAL_UNIT, names)] if names else []
    if kind is Kind.TENSOR:
        return [tensor_unit(n) for n in names]
    if kind is Kind.FILTER:
        units = []
        for name in names:
            shape = schema[name]
            if len(shape) < 2:
                units.append(tensor_unit(name))
                continue
            size = math.prod(shape[1:])
            units.extend(Unit(f"{name}[{i}]", ((name, i),), size, "weight") for i in range(shape[0]))
        return units
    # block: tensors missing from the map stay as their own unit
    groups: Dict[str, List[str]] = {}
    loose = []
    for name in names:
        label = granularity.block_map.get(name)
        if label is None:
            loose.append(name)
        else:
            groups.setdefault(label, []).append(name)
    units = [grouped(label, members) for label, members in groups.items()]
    units.extend(tensor_unit(n) for n in loose)
    return sorted(units, key=lambda u: u.key.encode("utf-8"))


def gather(arrays: Mapping[str, np.ndarray], unit: Unit) -> np.ndarray:
    pieces = []
    for name, index in unit.parts:
        arr = arrays[name]
        pieces.append(np.ravel(arr if index is None else arr[index]))
    if len(pieces) == 1:
        return np.asarray(pieces[0], dtype=np.float64)
    return np.concatenate(pieces).astype(np.float64, copy=False)


def scatter(out: Mapping[str, np.ndarray], unit: Unit, vec: np.ndarray) -> None:
    pos = 0
    for name, index in unit.parts:
        target = out[name] if index is None else out[name][index]
        size = target.size
        target[...] = vec[pos : pos + size].reshape(target.shape)
        pos += size


def _find_unit(schema, unit: Union[Unit, str]) -> Unit:
    if isinstance(unit, Unit):
        return unit
    if unit == GLOBAL_UNIT:
        return units_for(schema, Granularity(Kind.GLOBAL))[0]
    if unit in schema:
        return units_for({unit: schema[unit]}, Granularity(Kind.TENSOR))[0]
    if unit.endswith("]") and "[" in unit:
        name, _, idx = unit[:-1].rpartition("[")
        if name in schema and len(schema[name]) >= 2:
            i = int(idx)
            if not 0 <= i < schema[name][0]:
                raise KeyError(unit)
            return Unit(unit, ((name, i),), math.prod(schema[name][1:]), "weight")
    raise KeyError(f"unknown unit {unit!r}")


def canonical_order(ensemble: Sequence[Checkpoint]) -> List[Checkpoint]:
    return sorted(ensemble, key=lambda c: c.digest)


# ---------------------------------------------------------------------------
# deltas and angles


@dataclass(frozen=True)
class DeltaCheckpoint:
    anchor_id: str
    deltas: Mapping[str, np.ndarray]

    @property
    def schema(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.deltas.items()}


def delta(ckpt: Checkpoint, anchor: Checkpoint) -> DeltaCheckpoint:
    require_compatible([ckpt, anchor])
    deltas = {}
    for r in ckpt:
        d = np.array(r.values - anchor[r.name].values, dtype=np.float64)
        d.flags.writeable = False
        deltas[r.name] = d
    return DeltaCheckpoint(anchor.digest, deltas)


def pairwise_angle(da: DeltaCheckpoint, db: DeltaCheckpoint, unit: Union[Unit, str]) -> float:
    """Angle in degrees between two deltas restricted to ``unit``."""
    if da.anchor_id != db.anchor_id:
        raise SchemaError("deltas were taken against different anchors")
    if da.schema != db.schema:
        raise SchemaError("deltas have different schemas")
    u = _find_unit(da.schema, unit)
    a = gather(da.deltas, u)
    b = gather(db.deltas, u)
    eps = eps_norm(u.n)
    if norm(a) <= eps or norm(b) <= eps:
        raise DegenerateUnitError(f"unit {u.key!r}: delta norm below {eps:.3g}")
    return math.degrees(math.acos(cosine(a, b)))


# ---------------------------------------------------------------------------
# ensemble statistics


@dataclass
class UnitGeometry:
    unit: str
    cls: str
    n: int
    mean_angle_deg: float
    std_angle_deg: float
    mean_norm_per_sqrt_n: float
    std_norm: float
    pairs: int
    degenerate: bool = False


CSV_COLUMNS = [
    "unit",
    "class",
    "n",
    "mean_angle_deg",
    "std_angle_deg",
    "mean_norm_per_sqrt_n",
    "std_norm",
    "pairs",
]


@dataclass
class GeometryReport:
    units: List[UnitGeometry]
    n_models: int
    granularity: str

    def __getitem__(self, key: str) -> UnitGeometry:
        for u in self.units:
            if u.unit == key:
                return u
        raise KeyError(key)

    def to_json(self) -> dict:
        return {
            "n_models": self.n_models,
            "granularity": self.granularity,
            "units": [asdict(u) for u in self.units],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS + ["degenerate"])
        for u in self.units:
            writer.writerow(
                [u.unit, u.cls, u.n, repr(u.mean_angle_deg), repr(u.std_angle_deg),
                 repr(u.mean_norm_per_sqrt_n), repr(u.std_norm), u.pairs, int(u.degenerate)]
            )
        return buf.getvalue()


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    mean = pairwise_sum(arr) / arr.size
    var = pairwise_sum((arr - mean) ** 2) / arr.size
    return mean, math.sqrt(var)


def _unit_geometry(unit: Unit, vectors: Sequence[np.ndarray]) -> UnitGeometry:
    eps = eps_norm(unit.n)
    norms = [norm(v) for v in vectors]
    ok = [nv > eps for nv in norms]
    angles = []
    n = len(vectors)
    for i in range(n):
        for j in range(i + 1, n):
            if ok[i] and ok[j]:
                angles.append(math.degrees(math.acos(cosine(vectors[i], vectors[j]))))
    mean_a, std_a = _mean_std(angles)
    scaled = [nv / math.sqrt(unit.n) for nv in norms] if unit.n else [0.0] * n
    mean_l, std_l = _mean_std(scaled)
    return UnitGeometry(
        unit=unit.key,
        cls=unit.cls,
        n=unit.n,
        mean_angle_deg=mean_a,
        std_angle_deg=std_a,
        mean_norm_per_sqrt_n=mean_l,
        std_norm=std_l,
        pairs=n * (n - 1) // 2,
        degenerate=not all(ok),
    )


def geometry_report(
    ensemble: Sequence[Checkpoint],
    anchor: Checkpoint,
    granularity: Granularity = Granularity(),
) -> GeometryReport:
    """Per-unit mean/std of pairwise delta angles and of ``||delta|| / sqrt(n)``.

    Units where some member's delta vanishes are flagged ``degenerate``; their
    angle statistics cover only the pairs where both deltas are nonzero.
    """
    if len(ensemble) < 2:
        raise ValueError("geometry_report needs at least two checkpoints")
    require_compatible(list(ensemble) + [anchor])
    members = canonical_order(ensemble)
    anchor_arrays = anchor.arrays()
    member_arrays = [m.arrays() for m in members]

    def work(unit):
        base = gather(anchor_arrays, unit)
        return _unit_geometry(unit, [gather(a, unit) - base for a in member_arrays])

    units = parallel_map(work, units_for(anchor.schema, granularity))
    return GeometryReport(units, len(ensemble), str(granularity))


def mean_arrays(ensemble: Sequence[Checkpoint]) -> Dict[str, np.ndarray]:
    """Elementwise float64 mean, accumulated in canonical (digest) order."""
    members = canonical_order(ensemble)
    total = {r.name: np.array(r.values, dtype=np.float64) for r in members[0]}
    for m in members[1:]:
        for r in m:
            total[r.name] += r.values
    n = float(len(members))
    return {k: v / n for k, v in total.items()}


def pseudo_center(ensemble: Sequence[Checkpoint], dtype: Optional[str] = None) -> Checkpoint:
    """Arithmetic mean of an ensemble.

    The result keeps each tensor's input dtype unless ``dtype`` is given.
    Output is bitwise independent of the input order.
    """
    if not ensemble:
        raise ValueError("pseudo_center needs at least one checkpoint")
    require_compatible(ensemble)
    if len(ensemble) == 1 and dtype is None:
        return Checkpoint(ensemble[0].tensors)
    dtypes = dtype or ensemble[0].dtypes
    return Checkpoint.from_arrays(mean_arrays(ensemble), dtypes)


@dataclass
class DistanceReport:
    global_distance: float
    units: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"global": self.global_distance, "units": dict(self.units)}


def distance_to(
    ckpt: Checkpoint, center: Checkpoint, granularity: Granularity = Granularity()
) -> DistanceReport:
    require_compatible([ckpt, center])
    a = ckpt.arrays()
    c = center.arrays()
    diffs = {k: a[k] - c[k] for k in a}
    units = units_for(ckpt.schema, granularity)
    per_unit = dict(zip((u.key for u in units), parallel_map(lambda u: norm(gather(diffs, u)), units)))
    flat = gather(diffs, Unit(GLOBAL_UNIT, tuple((k, None) for k in ckpt.names), ckpt.numel, "other"))
    return DistanceReport(norm(flat), per_unit)


# ---------------------------------------------------------------------------
# thin-shell properties

PROPERTIES = ("lemma", "prop1_thin_shell", "prop2_anchor_orthogonality", "prop3_mutual_orthogonality")


@dataclass
class PropertyResult:
    name: str
    max_residual: float
    tolerance: float
    degenerate_units: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance and not self.degenerate_units


@dataclass
class PropertyReport:
    properties: Dict[str, PropertyResult]
    per_unit: Dict[str, Dict[str, float]]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties.values())

    def __getitem__(self, name: str) -> PropertyResult:
        return self.properties[name]

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "properties": {
                k: {
                    "max_residual": p.max_residual,
                    "tolerance": p.tolerance,
                    "passed": p.passed,
                    "degenerate_units": p.degenerate_units,
                }
                for k, p in self.properties.items()
            },
            "per_unit": self.per_unit,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["unit", *PROPERTIES])
        for unit, row in self.per_unit.items():
            writer.writerow([unit, *(repr(row[p]) for p in PROPERTIES)])
        return buf.getvalue()


def _shell_residuals(unit: Unit, deltas: Sequence[np.ndarray], mu: np.ndarray):
    """Residuals for one unit; ``None`` marks a degenerate test."""
    eps = eps_norm(unit.n)
    mu_norm = norm(mu)
    mu_sq = dot(mu, mu)
    out: Dict[str, Optional[float]] = {}

    lemma = []
    for w in deltas:
        wn = norm(w)
        if wn <= eps or mu_norm <= eps:
            lemma = None
            break
        lemma.append(abs(dot(w, mu) - mu_sq) / (wn * mu_norm))
    out["lemma"] = None if lemma is None else max(lemma)

    rel = [w - mu for w in deltas]
    dists = [norm(r) for r in rel]
    ok = [d > eps for d in dists]
    mean_d, std_d = _mean_std(dists)
    out["prop1_thin_shell"] = std_d / mean_d if all(ok) else None

    if mu_norm <= eps or not all(ok):
        out["prop2_anchor_orthogonality"] = None
    else:
        neg = -mu
        out["prop2_anchor_orthogonality"] = max(abs(cosine(neg, r)) for r in rel)

    if not all(ok):
        out["prop3_mutual_orthogonality"] = None
    else:
        out["prop3_mutual_orthogonality"] = max(
            abs(cosine(rel[i], rel[j])) for i in range(len(rel)) for j in range(i + 1, len(rel))
        )
    return out


def verify_shell_properties(
    ensemble: Sequence[Checkpoint],
    anchor: Checkpoint,
    center: Checkpoint,
    tolerance: float = 0.05,
    granularity: Granularity = Granularity(),
) -> PropertyReport:
    """Check the lemma and the three thin-shell propositions per unit.

    Residuals are normalized so that 0 means the property holds exactly:

    * lemma: ``|w_i . mu - mu . mu| / (|w_i| |mu|)``
    * prop1: relative std of ``|w_i - mu|``
    * prop2: ``|cos((w0 - mu), (w_i - mu))|`` with ``w0 - mu = -mu`` on deltas
    * prop3: ``|cos((w_i - mu), (w_j - mu))|`` over all pairs
    """
    if len(ensemble) < 3:
        raise ValueError("verify_shell_properties needs at least three checkpoints")
    require_compatible(list(ensemble) + [anchor, center])
    members = canonical_order(ensemble)
    base = anchor.arrays()
    mu_arrays = center.arrays()
    member_arrays = [m.arrays() for m in members]
    units = units_for(anchor.schema, granularity)

    def work(unit):
        b = gather(base, unit)
        return _shell_residuals(unit, [gather(a, unit) - b for a in member_arrays], gather(mu_arrays, unit) - b)

    rows = parallel_map(work, units)
    props = {p: PropertyResult(p, 0.0, tolerance) for p in PROPERTIES}
    per_unit = {}
    for unit, row in zip(units, rows):
        per_unit[unit.key] = {p: (float("nan") if row[p] is None else row[p]) for p in PROPERTIES}
        for p in PROPERTIES:
            if row[p] is None:
                props[p].degenerate_units.append(unit.key)
            else:
                props[p].max_residual = max(props[p].max_residual, row[p])
    return PropertyReport(props, per_unit)


# ---------------------------------------------------------------------------
# perturbation around the center


def sigma_from_geometry(report: GeometryReport) -> Dict[str, float]:
    """Per-unit noise scale matching an ensemble's shell around its center.

    The shell radius around the center is ``l * sqrt(1 - cos(theta))`` for
    delta norm ``l`` and pairwise angle ``theta``; dividing by ``sqrt(n)``
    gives the per-element standard deviation.
    """
    out = {}
    for u in report.units:
        if u.degenerate or math.isnan(u.mean_angle_deg):
            out[u.unit] = 0.0
            continue
        c = math.cos(math.radians(u.mean_angle_deg))
        out[u.unit] = u.mean_norm_per_sqrt_n * math.sqrt(max(0.0, 1.0 - c))
    return out


def perturb_from_center(
    center: Checkpoint,
    sigma: Union[float, Mapping[str, float]],
    seed: int,
    granularity: Granularity = Granularity(),
) -> Checkpoint:
    """Add i.i.d. zero-mean Gaussian noise with a per-unit std to ``center``."""
    units = units_for(center.schema, granularity)
    if isinstance(sigma, Mapping):
        missing = [u.key for u in units if u.key not in sigma]
        if missing:
            raise KeyError(f"sigma missing for units {missing}")
        scales = {u.key: float(sigma[u.key]) for u in units}
    else:
        scales = {u.key: float(sigma) for u in units}
    bad = [k for k, s in scales.items() if not s >= 0.0]
    if bad:
        raise ValueError(f"negative or NaN sigma for units {bad}")

    rng = np.random.default_rng(seed)
    out = {r.name: np.array(r.values, dtype=np.float64) for r in center}
    for unit in units:
        noise = rng.standard_normal(unit.n)
        scale = scales[unit.key]
        if scale == 0.0:
            continue
        scatter(out, unit, gather(out, unit) + scale * noise)
    return Checkpoint.from_arrays(out, center.dtypes)
