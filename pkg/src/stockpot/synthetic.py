"""Gaussian weight ensembles with a known center, and brute-force oracles.

Fine-tuned weights are modelled per unit as ``w ~ N(mu, sigma^2 I)`` with the
pre-trained anchor at ``mu + offset``. Everything is emitted as ordinary
checkpoints so the geometry and merge code runs on it unchanged. The oracles
here deliberately avoid the closed forms they check.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stockpot.geometry import Granularity, geometry_report
from stockpot.merge import stock_merge
from stockpot.tensor_store import Checkpoint, require_compatible


class SpecError(ValueError):
    pass


# spawn keys separating the independent random streams of one seed
_STRUCTURE, _SAMPLES, _TRAJECTORY, _PAIRS = 0, 1, 2, 3


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class UnitSpec:
    name: str
    shape: Tuple[int, ...]

    @property
    def n(self) -> int:
        return math.prod(self.shape)


@dataclass
class SyntheticSpec:
    units: Tuple[UnitSpec, ...]
    mu: Dict[str, np.ndarray]
    sigma: Dict[str, float]
    anchor_offset: Dict[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        self.units = tuple(self.units)
        if not self.units:
            raise SpecError("spec needs at least one unit")
        names = [u.name for u in self.units]
        if len(set(names)) != len(names):
            raise SpecError("unit names must be unique")
        for u in self.units:
            if any(d < 1 for d in u.shape):
                raise SpecError(f"unit {u.name!r}: dimensions must be >= 1")
            for label, table in (("mu", self.mu), ("anchor_offset", self.anchor_offset)):
                if u.name not in table:
                    raise SpecError(f"unit {u.name!r}: missing {label}")
                table[u.name] = np.asarray(table[u.name], dtype=np.float64).reshape(u.shape)
            s = self.sigma.get(u.name)
            if s is None or not s >= 0:
                raise SpecError(f"unit {u.name!r}: sigma must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise SpecError("seed must be an unsigned 64-bit integer")

    @classmethod
    def build(
        cls,
        units: Sequence[Tuple[str, Sequence[int]]],
        sigma=0.01,
        mu_scale: float = 0.02,
        offset_ratio=1.0,
        seed: int = 0,
    ) -> "SyntheticSpec":
        """Draw mu and the anchor offset from ``seed``.

        ``sigma`` and ``offset_ratio`` are scalars or name -> value maps.
        ``||offset|| = offset_ratio * sigma * sqrt(n)``, i.e. a multiple of the
        shell radius, so ``offset_ratio = 1`` gives deltas at 60 degrees.
        """
        specs = tuple(UnitSpec(name, tuple(int(d) for d in shape)) for name, shape in units)
        rng = _rng(seed, _STRUCTURE)
        mu, offset, sig = {}, {}, {}
        for u in specs:
            s = float(sigma[u.name] if isinstance(sigma, Mapping) else sigma)
            ratio = float(offset_ratio[u.name] if isinstance(offset_ratio, Mapping) else offset_ratio)
            mu[u.name] = mu_scale * rng.standard_normal(u.shape)
            direction = rng.standard_normal(u.shape)
            direction /= np.linalg.norm(direction)
            offset[u.name] = ratio * s * math.sqrt(u.n) * direction
            sig[u.name] = s
        return cls(specs, mu, sig, offset, seed)

    @classmethod
    def from_json(cls, config: Mapping) -> "SyntheticSpec":
        """Config: ``{"seed", "sigma", "mu_scale", "offset_ratio", "units": [...]}``.

        Each unit is ``{"name", "shape"}`` and may override ``sigma`` and
        ``offset_ratio``, or give explicit ``mu`` / ``anchor_offset`` lists.
        """
        try:
            seed = int(config.get("seed", 0))
            units = [(u["name"], tuple(u["shape"])) for u in config["units"]]
            default_sigma = float(config.get("sigma", 0.01))
            default_ratio = float(config.get("offset_ratio", 1.0))
            sigma = {u["name"]: float(u.get("sigma", default_sigma)) for u in config["units"]}
            ratio = {u["name"]: float(u.get("offset_ratio", default_ratio)) for u in config["units"]}
            spec = cls.build(units, sigma, float(config.get("mu_scale", 0.02)), ratio, seed)
            for u in config["units"]:
                if "mu" in u:
                    spec.mu[u["name"]] = np.asarray(u["mu"], dtype=np.float64)
                if "anchor_offset" in u:
                    spec.anchor_offset[u["name"]] = np.asarray(u["anchor_offset"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"invalid synthetic spec: {exc}") from None
        return cls(spec.units, spec.mu, spec.sigma, spec.anchor_offset, seed)

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return SyntheticSpec(self.units, dict(self.mu), dict(self.sigma), dict(self.anchor_offset), seed)

    def anchor_arrays(self) -> Dict[str, np.ndarray]:
        return {u.name: self.mu[u.name] + self.anchor_offset[u.name] for u in self.units}


def default_spec(seed: int = 0, offset_ratio: float = 1.0) -> SyntheticSpec:
    """Three 100x100 units, sigma 0.01, anchor one shell radius from mu."""
    return SyntheticSpec.build(
        [("block0.weight", (100, 100)), ("block1.weight", (100, 100)), ("block2.weight", (100, 100))],
        sigma=0.01,
        offset_ratio=offset_ratio,
        seed=seed,
    )


def load_spec(path) -> SyntheticSpec:
    with open(path) as fh:
        return SyntheticSpec.from_json(json.load(fh))


@dataclass
class Ensemble:
    models: List[Checkpoint]
    anchor: Checkpoint
    center: Checkpoint


def sample_ensemble(spec: SyntheticSpec, n: int) -> Ensemble:
    """Draw ``n`` models ``w_i ~ N(mu, sigma^2 I)`` per unit (stored as F64)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    models = []
    for i in range(n):
        rng = _rng(spec.seed, _SAMPLES, i)
        arrays = {}
        for u in spec.units:
            arrays[u.name] = spec.mu[u.name] + spec.sigma[u.name] * rng.standard_normal(u.shape)
        models.append(Checkpoint.from_arrays(arrays, "F64"))
    anchor = Checkpoint.from_arrays(spec.anchor_arrays(), "F64")
    center = Checkpoint.from_arrays(spec.mu, "F64")
    return Ensemble(models, anchor, center)


@dataclass
class UnitConcentration:
    unit: str
    n: int
    predicted_norm_mean: float
    measured_norm_mean: float
    predicted_norm_std: float
    measured_norm_std: float
    predicted_angle_deg: float
    measured_angle_deg: float
    predicted_angle_std_deg: float
    measured_angle_std_deg: float

    @property
    def norm_rel_dev(self) -> float:
        if self.predicted_norm_mean == 0:
            return 0.0 if self.measured_norm_mean == 0 else math.inf
        return abs(self.measured_norm_mean - self.predicted_norm_mean) / self.predicted_norm_mean

    @property
    def angle_dev_deg(self) -> float:
        return abs(self.measured_angle_deg - self.predicted_angle_deg)


def predicted_concentration(offset_sq: float, sigma: float, n: int) -> Tuple[float, float, float, float]:
    """Closed-form delta-norm mean/std and pairwise angle mean/std (degrees).

    For deltas ``m + sigma z`` with ``|m|^2 = offset_sq``: the squared norm has
    mean ``S = offset_sq + n sigma^2`` and variance ``2 n sigma^4 + 4 sigma^2
    offset_sq``. The pairwise cosine is expanded to first order in the
    projections ``sigma m.z``, the cross term ``sigma^2 z_i.z_j`` and the
    chi-squared fluctuation of ``|sigma z|^2``, giving
    ``var(cos) = (2 sigma^6 n^2 offset_sq + n sigma^4 S^2 + n sigma^4 offset_sq^2) / S^4``.
    """
    sq = offset_sq + n * sigma**2
    if sq == 0:
        return 0.0, 0.0, float("nan"), float("nan")
    norm_mean = math.sqrt(sq)
    norm_std = math.sqrt(2 * n * sigma**4 + 4 * sigma**2 * offset_sq) / (2 * norm_mean)
    cos = offset_sq / sq
    angle = math.degrees(math.acos(min(1.0, cos)))
    cos_var = (2 * sigma**6 * n**2 * offset_sq + n * sigma**4 * sq**2 + n * sigma**4 * offset_sq**2) / sq**4
    cos_std = math.sqrt(cos_var)
    sin = math.sqrt(max(0.0, 1 - cos * cos))
    angle_std = math.degrees(cos_std / sin) if sin > 0 else 0.0
    return norm_mean, norm_std, angle, angle_std


def concentration_stats(spec: SyntheticSpec, samples: int) -> List[UnitConcentration]:
    if samples < 2:
        raise ValueError("samples must be >= 2")
    ens = sample_ensemble(spec, samples)
    report = geometry_report(ens.models, ens.anchor, Granularity())
    out = []
    for u in spec.units:
        offset_sq = float(np.sum(spec.anchor_offset[u.name] ** 2))
        p_mean, p_std, p_angle, p_angle_std = predicted_concentration(offset_sq, spec.sigma[u.name], u.n)
        g = report[u.name]
        root_n = math.sqrt(u.n)
        out.append(
            UnitConcentration(
                unit=u.name,
                n=u.n,
                predicted_norm_mean=p_mean,
                measured_norm_mean=g.mean_norm_per_sqrt_n * root_n,
                predicted_norm_std=p_std,
                measured_norm_std=g.std_norm * root_n,
                predicted_angle_deg=p_angle,
                measured_angle_deg=g.mean_angle_deg,
                predicted_angle_std_deg=p_angle_std,
                measured_angle_std_deg=g.std_angle_deg,
            )
        )
    return out


# ---------------------------------------------------------------------------
# fine-tuning trajectories


@dataclass
class TrajectoryParams:
    """Per-epoch dynamics ``w <- w + eta (mu - w) + s_e sigma xi``.

    ``noise`` holds one multiplier ``s_e`` of the unit sigma per epoch.
    """

    epochs: int
    eta: float
    noise: Tuple[float, ...]
    rebranch: bool = False

    def __post_init__(self):
        self.noise = tuple(float(s) for s in self.noise)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if len(self.noise) != self.epochs:
            raise ValueError("noise schedule needs one entry per epoch")
        if any(s < 0 for s in self.noise):
            raise ValueError("noise scales must be >= 0")
        if any(b > a for a, b in zip(self.noise, self.noise[1:])):
            raise ValueError("noise schedule must be non-increasing")

    @classmethod
    def decaying(cls, epochs: int, eta: float = 0.5, start: float = 1.0, decay: float = 0.8, rebranch: bool = False):
        return cls(epochs, eta, tuple(start * decay**e for e in range(epochs)), rebranch)


@dataclass
class TrajectoryRun:
    anchor: Checkpoint
    trajectories: List[List[Checkpoint]]
    centers: List[Checkpoint]
    merged: List[Checkpoint] = field(default_factory=list)


def simulate_trajectories(
    spec: SyntheticSpec,
    params: TrajectoryParams,
    seeds: Sequence[int],
    granularity: Granularity = Granularity(),
) -> TrajectoryRun:
    """Run one noisy contraction toward mu per seed.

    ``centers[e]`` is the expected weight after epoch ``e + 1`` given the
    epoch's starting point. With ``rebranch`` every seed restarts each epoch
    from the stock merge of the previous epoch's endpoints.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    if params.rebranch and len(seeds) < 2:
        raise ValueError("rebranching needs at least two seeds to merge")
    anchor_arrays = spec.anchor_arrays()
    anchor = Checkpoint.from_arrays(anchor_arrays, "F64")
    rngs = [_rng(spec.seed, _TRAJECTORY, int(s)) for s in seeds]
    states = [{k: v.copy() for k, v in anchor_arrays.items()} for _ in seeds]
    start = {k: v.copy() for k, v in anchor_arrays.items()}
    trajectories: List[List[Checkpoint]] = [[] for _ in seeds]
    centers, merged = [], []
    eta = params.eta
    for e in range(params.epochs):
        scale = params.noise[e]
        # (1 - eta) w + eta mu lands exactly on mu when eta == 1
        center = {u.name: (1.0 - eta) * start[u.name] + eta * spec.mu[u.name] for u in spec.units}
        centers.append(Checkpoint.from_arrays(center, "F64"))
        for s, rng in enumerate(rngs):
            state = states[s]
            for u in spec.units:
                w = state[u.name]
                noise = scale * spec.sigma[u.name] * rng.standard_normal(u.shape)
                state[u.name] = (1.0 - eta) * w + eta * spec.mu[u.name] + noise
            trajectories[s].append(Checkpoint.from_arrays(state, "F64"))
        if params.rebranch:
            m, _ = stock_merge(anchor, [t[-1] for t in trajectories], granularity)
            merged.append(m)
            start = {k: np.array(v) for k, v in m.arrays().items()}
            states = [{k: v.copy() for k, v in start.items()} for _ in seeds]
        else:
            start = center
    return TrajectoryRun(anchor, trajectories, centers, merged)


# ---------------------------------------------------------------------------
# brute-force oracles


def _t_grid(step: float) -> np.ndarray:
    if not 0 < step <= 0.5:
        raise ValueError("grid_step must lie in (0, 0.5]")
    k = int(math.floor(1.0 / step + 1e-9))
    grid = np.arange(k + 1) * step
    if grid[-1] < 1.0 - 1e-12:
        grid = np.append(grid, 1.0)
    return np.minimum(grid, 1.0)


def _flat(ckpt: Checkpoint) -> np.ndarray:
    return np.concatenate([np.ravel(r.values) for r in ckpt])


def brute_force_optimal_t(
    anchor: Checkpoint,
    models: Sequence[Checkpoint],
    true_center: Checkpoint,
    grid_step: float = 0.001,
    chunk: int = 64,
) -> Tuple[float, float]:
    """Scan ``t`` over a grid for the point ``t avg + (1 - t) anchor`` nearest ``true_center``."""
    require_compatible(list(models) + [anchor, true_center])
    w0 = _flat(anchor)
    avg = np.mean([_flat(m) for m in models], axis=0)
    mu = _flat(true_center)
    grid = _t_grid(grid_step)
    best_t, best_d = None, math.inf
    for lo in range(0, grid.size, chunk):
        ts = grid[lo : lo + chunk, None]
        points = ts * avg + (1.0 - ts) * w0
        dists = np.sqrt(np.sum((points - mu) ** 2, axis=1))
        i = int(np.argmin(dists))
        if dists[i] < best_d:
            best_t, best_d = float(grid[lo + i]), float(dists[i])
    return best_t, best_d


def monte_carlo_pair_ratio(
    trace_a: float,
    trace_b: float,
    dim: int = 1000,
    samples: int = 400,
    seed: int = 0,
    grid_step: float = 0.01,
) -> float:
    """Empirical argmin over ``t`` of ``E|t a + (1 - t) b - (t mu_a + (1 - t) mu_b)|^2``."""
    rng = _rng(seed, _PAIRS)
    mu_a = rng.standard_normal(dim)
    mu_b = rng.standard_normal(dim)
    a = mu_a + math.sqrt(trace_a / dim) * rng.standard_normal((samples, dim))
    b = mu_b + math.sqrt(trace_b / dim) * rng.standard_normal((samples, dim))
    best_t, best = 0.0, math.inf
    for t in _t_grid(grid_step):
        w = t * a + (1 - t) * b
        target = t * mu_a + (1 - t) * mu_b
        msd = float(np.mean(np.sum((w - target) ** 2, axis=1)))
        if msd < best:
            best_t, best = float(t), msd
    return best_t
