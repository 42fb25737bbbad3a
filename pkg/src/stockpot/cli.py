"""``stockpot`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 schema/format error, 3 numeric or
property failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

from stockpot import __version__
from stockpot.geometry import (
    DegenerateUnitError,
    GeometryReport,
    Granularity,
    UnitGeometry,
    distance_to,
    geometry_report,
    perturb_from_center,
    pseudo_center,
    sigma_from_geometry,
    verify_shell_properties,
)
from stockpot.merge import (
    RatioReport,
    ScorerError,
    greedy_soup,
    interpolate_pair,
    periodic_merge_replay,
    stock_merge,
    uniform_soup,
    wise_ft,
)
from stockpot.plane import PlaneError, manifest, plane_grid
from stockpot.synthetic import (
    SpecError,
    TrajectoryParams,
    concentration_stats,
    default_spec,
    load_spec,
    sample_ensemble,
    simulate_trajectories,
)
from stockpot.tensor_store import (
    Checkpoint,
    FormatError,
    SchemaError,
    atomic_write,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return value


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _write_json(path, payload) -> None:
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_report(path, report, as_csv: bool) -> None:
    if as_csv:
        _write_text(path, report.to_csv())
    else:
        _write_json(path, report.to_json())


def _load(paths: Sequence[str]) -> List[Checkpoint]:
    out = []
    for p in paths:
        try:
            out.append(load_checkpoint(p))
        except FormatError as exc:
            raise FormatError(f"{p}: {exc}") from None
    return out


def _granularity(args) -> Granularity:
    block_map = None
    if args.block_map is not None:
        text = args.block_map
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        try:
            block_map = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--block-map is not valid JSON: {exc}") from None
    if args.granularity == "block" and block_map is None:
        raise UsageError("--granularity block requires --block-map")
    return Granularity.parse(args.granularity, block_map)


def _add_granularity(p):
    p.add_argument("--granularity", choices=["global", "tensor", "filter", "block"], default="tensor")
    p.add_argument("--block-map", help="JSON object (inline or file) mapping tensor name -> block label")


def _provenance(method: str, params: dict, inputs: Sequence[Checkpoint], anchor: Optional[Checkpoint]) -> dict:
    meta = {
        "stockpot.method": method,
        "stockpot.params": json.dumps(params, sort_keys=True),
        "stockpot.inputs": json.dumps(sorted(c.digest for c in inputs)),
        "stockpot.version": __version__,
    }
    if anchor is not None:
        meta["stockpot.anchor"] = anchor.digest
    return meta


def _sidecar(out: str, suffix: str, as_csv: bool) -> Path:
    path = Path(out)
    return path.with_name(path.name + suffix + (".csv" if as_csv else ".json"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_inspect(args) -> int:
    rows = []
    for path, ckpt in zip(args.checkpoints, _load(args.checkpoints)):
        tensors = []
        for r in ckpt:
            v = r.values
            tensors.append(
                {
                    "name": r.name,
                    "dtype": r.dtype,
                    "shape": list(r.shape),
                    "n": r.numel,
                    "norm": float(math.sqrt(float((v * v).sum()))) if r.numel else 0.0,
                }
            )
        rows.append({"path": path, "digest": ckpt.digest, "metadata": ckpt.metadata, "tensors": tensors})
        print(f"{path}: {len(ckpt)} tensors, {ckpt.numel} values, sha256 {ckpt.digest[:16]}")
        for t in tensors:
            print(f"  {t['name']:<40} {t['dtype']:<5} {str(t['shape']):<20} |w|={t['norm']:.6g}")
    if args.out:
        _write_json(args.out, rows)
    return EXIT_OK


def cmd_geometry(args) -> int:
    models = _load(args.models)
    anchor = load_checkpoint(args.anchor)
    report = geometry_report(models, anchor, _granularity(args))
    for u in report.units:
        flag = " (degenerate)" if u.degenerate else ""
        print(
            f"{u.unit:<40} {u.cls:<6} angle {u.mean_angle_deg:8.3f} +- {u.std_angle_deg:.3f} deg  "
            f"|dw|/sqrt(n) {u.mean_norm_per_sqrt_n:.6g} +- {u.std_norm:.3g}{flag}"
        )
    if args.out:
        _write_report(args.out, report, args.csv)
    return EXIT_OK


def cmd_center(args) -> int:
    center = pseudo_center(_load(args.models), dtype=args.dtype)
    save_checkpoint(center, args.out)
    print(f"pseudo-center of {len(args.models)} models -> {args.out}")
    return EXIT_OK


def cmd_distance(args) -> int:
    center = load_checkpoint(args.center)
    granularity = _granularity(args)
    rows = []
    for path, ckpt in zip(args.models, _load(args.models)):
        d = distance_to(ckpt, center, granularity)
        rows.append({"path": path, **d.to_json()})
        print(f"{path}: {d.global_distance:.6g}")
    if args.out:
        if args.csv:
            lines = ["path,unit,distance"]
            for row in rows:
                lines.append(f"{row['path']},__global__,{row['global']!r}")
                lines.extend(f"{row['path']},{k},{v!r}" for k, v in row["units"].items())
            _write_text(args.out, "\n".join(lines) + "\n")
        else:
            _write_json(args.out, rows)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_shell_properties(
        _load(args.models), load_checkpoint(args.anchor), load_checkpoint(args.center), args.tol, _granularity(args)
    )
    for name, p in report.properties.items():
        status = "PASS" if p.passed else "FAIL"
        extra = f" degenerate={p.degenerate_units}" if p.degenerate_units else ""
        print(f"{status} {name}: max residual {p.max_residual:.4g} (tol {p.tolerance}){extra}")
    if args.out:
        _write_report(args.out, report, args.csv)
    if not report.passed:
        failed = [n for n, p in report.properties.items() if not p.passed]
        raise NumericFailure(f"shell properties failed: {', '.join(failed)}")
    return EXIT_OK


def _distance_scorer(target: Checkpoint):
    def score(ckpt):
        return -distance_to(ckpt, target).global_distance

    return score


def _command_scorer(command: str):
    argv = shlex.split(command)

    def score(ckpt):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "candidate.st")
            save_checkpoint(ckpt, path)
            done = subprocess.run(argv + [path], capture_output=True, text=True, check=True)
        return float(done.stdout.strip().split()[-1])

    return score


def cmd_merge(args) -> int:
    models = _load(args.models)
    anchor = load_checkpoint(args.anchor) if args.anchor else None
    method = args.method
    report: Optional[RatioReport] = None
    params: dict = {}
    if method in ("stock", "wise") and anchor is None:
        raise UsageError(f"--method {method} requires --anchor")
    if method == "stock":
        granularity = _granularity(args)
        params = {"granularity": str(granularity)}
        merged, report = stock_merge(anchor, models, granularity)
    elif method == "uniform":
        merged = uniform_soup(models)
    elif method == "wise":
        if args.alpha is None or len(models) != 1:
            raise UsageError("--method wise takes --alpha and exactly one model")
        params = {"alpha": args.alpha}
        merged = wise_ft(anchor, models[0], args.alpha)
    elif method == "pair":
        if args.t is None or len(models) != 2:
            raise UsageError("--method pair takes --t and exactly two models")
        params = {"t": args.t}
        merged = interpolate_pair(models[0], models[1], args.t, allow_extrapolation=args.extrapolate)
    else:
        if bool(args.score_distance_to) == bool(args.score_cmd):
            raise UsageError("--method greedy needs exactly one of --score-distance-to / --score-cmd")
        if args.score_distance_to:
            scorer = _distance_scorer(load_checkpoint(args.score_distance_to))
            params = {"score": "negative-distance", "target": args.score_distance_to}
        else:
            scorer = _command_scorer(args.score_cmd)
            params = {"score": "command", "command": args.score_cmd}
        merged, trace = greedy_soup(models, scorer)
        _write_json(
            _sidecar(args.out, ".greedy", False),
            [
                {"model": args.models[s.index], "digest": s.digest, "individual_score": s.individual_score,
                 "soup_score": s.soup_score, "accepted": s.accepted}
                for s in trace
            ],
        )
    inputs = models + ([anchor] if anchor is not None else [])
    # an output identical to one of its inputs is written untouched
    if merged.digest not in {c.digest for c in inputs}:
        merged = merged.with_metadata(_provenance(method, params, models, anchor))
    save_checkpoint(merged, args.out)
    print(f"{method} merge of {len(models)} model(s) -> {args.out}")
    if report is not None:
        _write_report(_sidecar(args.out, ".ratios", args.csv), report, args.csv)
        for u in report.units:
            cos = "n/a" if u.cos_theta is None else f"{u.cos_theta:.4f}"
            flags = "".join([" clamped" if u.clamped else "", " degenerate" if u.degenerate else ""])
            print(f"  {u.unit:<40} cos {cos:>8}  t {u.t:.4f}{flags}")
    return EXIT_OK


def cmd_periodic(args) -> int:
    anchor = load_checkpoint(args.anchor)
    trajectories = []
    for directory in args.trajectory:
        files = sorted(p for p in Path(directory).iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise UsageError(f"trajectory directory {directory} is empty")
        trajectories.append(_load([str(f) for f in files]))
    granularity = _granularity(args)
    result = periodic_merge_replay(anchor, trajectories, granularity)
    out = Path(args.out)
    for p, ckpt in enumerate(result.merged, start=1):
        meta = _provenance("periodic", {"granularity": str(granularity), "period": p},
                           [t[p - 1] for t in trajectories], anchor)
        target = out if p == len(result.merged) else out.with_name(f"{out.stem}.period{p}{out.suffix}")
        save_checkpoint(ckpt.with_metadata(meta), target)
    reports = RatioReport([u for r in result.reports for u in r.units])
    _write_report(_sidecar(args.out, ".ratios", args.csv), reports, args.csv)
    print(f"merged {len(trajectories)} trajectories over {len(result.merged)} periods -> {args.out}")
    return EXIT_OK


def cmd_plane(args) -> int:
    w0, wa, wb = _load([args.w0, args.wa, args.wb])
    plane, points = plane_grid(w0, wa, wb, args.rows, args.cols, args.margin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid, files = [], []
    for g in points:
        name = f"grid_r{g.row:03d}_c{g.col:03d}.st"
        save_checkpoint(g.checkpoint, out / name)
        grid.append(g)
        files.append(name)
    _write_json(out / "manifest.json", manifest(plane, grid, files))
    print(f"wrote {len(files)} grid checkpoints and manifest.json to {out}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    center = load_checkpoint(args.center)
    granularity = _granularity(args)
    if (args.sigma is None) == (args.sigma_from is None):
        raise UsageError("give exactly one of --sigma / --sigma-from")
    if args.sigma is not None:
        sigma = args.sigma
    else:
        with open(args.sigma_from) as fh:
            raw = json.load(fh)
        if "units" in raw and isinstance(raw["units"], list):
            report = GeometryReport([UnitGeometry(**u) for u in raw["units"]], raw["n_models"], raw["granularity"])
            sigma = sigma_from_geometry(report)
        else:
            sigma = {k: float(v) for k, v in raw.items()}
    if args.seed is None:
        raise UsageError("perturb requires --seed")
    try:
        out = perturb_from_center(center, sigma, args.seed, granularity)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    save_checkpoint(out, args.out)
    print(f"perturbed {args.center} with seed {args.seed} -> {args.out}")
    return EXIT_OK


def _synth_spec(args):
    spec = load_spec(args.spec) if args.spec else default_spec()
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    return spec


def cmd_synth_sample(args) -> int:
    spec = _synth_spec(args)
    ens = sample_ensemble(spec, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(args.n - 1)))
    for i, m in enumerate(ens.models):
        save_checkpoint(m, out / f"model_{i:0{width}d}.st")
    save_checkpoint(ens.anchor, out / "anchor.st")
    save_checkpoint(ens.center, out / "center.st")
    print(f"sampled {args.n} models (seed {spec.seed}) into {out}")
    return EXIT_OK


def cmd_synth_trajectory(args) -> int:
    spec = _synth_spec(args)
    params = TrajectoryParams.decaying(args.epochs, args.eta, args.noise, args.decay, args.rebranch)
    run = simulate_trajectories(spec, params, list(range(args.seeds)))
    out = Path(args.out)
    for s, traj in enumerate(run.trajectories):
        d = out / f"seed_{s:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for e, ckpt in enumerate(traj, start=1):
            save_checkpoint(ckpt, d / f"epoch_{e:03d}.st")
    centers = out / "centers"
    centers.mkdir(parents=True, exist_ok=True)
    for e, c in enumerate(run.centers, start=1):
        save_checkpoint(c, centers / f"epoch_{e:03d}.st")
    for e, m in enumerate(run.merged, start=1):
        (out / "merged").mkdir(exist_ok=True)
        save_checkpoint(m, out / "merged" / f"epoch_{e:03d}.st")
    save_checkpoint(run.anchor, out / "anchor.st")
    print(f"simulated {args.seeds} trajectories x {args.epochs} epochs into {out}")
    return EXIT_OK


def cmd_synth_validate(args) -> int:
    spec = _synth_spec(args)
    rows = concentration_stats(spec, args.samples)
    payload = []
    failed = []
    for r in rows:
        ok = r.norm_rel_dev <= args.tol and r.angle_dev_deg <= args.angle_tol
        if not ok:
            failed.append(r.unit)
        payload.append({**r.__dict__, "norm_rel_dev": r.norm_rel_dev, "angle_dev_deg": r.angle_dev_deg, "passed": ok})
        print(
            f"{'PASS' if ok else 'FAIL'} {r.unit}: |dw| {r.measured_norm_mean:.6g} vs {r.predicted_norm_mean:.6g} "
            f"({100 * r.norm_rel_dev:.2f}%), angle {r.measured_angle_deg:.3f} vs {r.predicted_angle_deg:.3f} deg"
        )
    if args.out:
        _write_json(args.out, payload)
    if failed:
        raise NumericFailure(f"concentration check failed for {failed}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stockpot", description="Checkpoint geometry and anchored weight merging.")
    parser.add_argument("--version", action="version", version=f"stockpot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="list tensors, dtypes, shapes and norms")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("geometry", help="per-unit angle/norm statistics of an ensemble")
    p.add_argument("models", nargs="+")
    p.add_argument("--anchor", required=True)
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    _add_granularity(p)
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("center", help="pseudo-center (elementwise mean)")
    p.add_argument("models", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=["F16", "BF16", "F32", "F64"])
    p.set_defaults(func=cmd_center)

    p = sub.add_parser("distance", help="Euclidean distance of each model to a center")
    p.add_argument("models", nargs="+")
    p.add_argument("--center", required=True)
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    _add_granularity(p)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("verify", help="check the thin-shell lemma and propositions")
    p.add_argument("models", nargs="+")
    p.add_argument("--anchor", required=True)
    p.add_argument("--center", required=True)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    _add_granularity(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("merge", help="merge checkpoints")
    p.add_argument("models", nargs="+")
    p.add_argument("--method", choices=["stock", "uniform", "wise", "greedy", "pair"], required=True)
    p.add_argument("--anchor")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=_unit_interval)
    p.add_argument("--t", type=float)
    p.add_argument("--extrapolate", action="store_true", help="allow --t outside [0, 1]")
    p.add_argument("--score-distance-to")
    p.add_argument("--score-cmd")
    p.add_argument("--csv", action="store_true")
    _add_granularity(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("periodic", help="replay per-period stock merges over trajectories")
    p.add_argument("--anchor", required=True)
    p.add_argument("--trajectory", action="append", required=True, help="directory of one seed's per-period files")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    _add_granularity(p)
    p.set_defaults(func=cmd_periodic)

    p = sub.add_parser("plane", help="emit a 2-D grid of checkpoints through w0, wA, wB")
    p.add_argument("w0")
    p.add_argument("wa")
    p.add_argument("wb")
    p.add_argument("--rows", type=int, default=11)
    p.add_argument("--cols", type=int, default=11)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plane)

    p = sub.add_parser("perturb", help="add per-unit Gaussian noise to a center")
    p.add_argument("--center", required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma-from", help="geometry report JSON, or a unit -> sigma JSON map")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out", required=True)
    _add_granularity(p)
    p.set_defaults(func=cmd_perturb)

    synth = sub.add_parser("synth", help="synthetic Gaussian ensembles")
    ssub = synth.add_subparsers(dest="synth_command", required=True, parser_class=_Parser)

    p = ssub.add_parser("sample")
    p.add_argument("--spec")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_sample)

    p = ssub.add_parser("trajectory")
    p.add_argument("--spec")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0, help="first-epoch noise multiplier")
    p.add_argument("--decay", type=float, default=0.8, help="per-epoch noise decay factor")
    p.add_argument("--rebranch", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_trajectory)

    p = ssub.add_parser("validate")
    p.add_argument("--spec")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--tol", type=float, default=0.02, help="relative tolerance on mean delta norm")
    p.add_argument("--angle-tol", type=float, default=1.5, help="tolerance on mean angle (degrees)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_validate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SchemaError, SpecError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericFailure, DegenerateUnitError, PlaneError, ScorerError, ValueError, ArithmeticError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
