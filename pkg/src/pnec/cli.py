"""``pnec`` command-line front end.

Exit codes: 0 success, 2 usage or parse error, 3 numerical failure,
4 verification breach. Every command that takes ``--out`` writes a
``manifest.json`` next to its artifacts; nothing time- or host-dependent
goes into any artifact, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, gradients
from .config import FORMAT_VERSION, content_hash, from_dict, to_dict
from .energy import PnecProblem
from .geometry import Camera
from .io import (
    ParseError,
    dump_json,
    format_correspondences,
    format_problem,
    parse_correspondences,
    parse_poses,
    pose_record,
)
from .learning import LearningConfig, TrainingDivergedError, diverse_config, overfit_config, train_covariances
from .metrics import rpe1, rpen, trajectory_table, translation_errors
from .montecarlo import VarianceSweepConfig, sweep_csv, variance_sweep
from .rng import ALGORITHM
from .solver import (
    DegenerateConfigurationError,
    InsufficientDataError,
    NumericalFailureError,
    SolverConfig,
    StageError,
    estimate_pose_multistage,
)
from .synthgen import GenerationError, SceneConfig, generate_problem
from .verification import eigen_angle_entropies, run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BREACH = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class EstimateConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    camera: tuple = (720.0, 720.0, 620.0, 185.0)  # fx, fy, cx, cy
    reprojection_clip: tuple = (0.01, 4.0)  # px^2 bounds of the reprojection-oracle covariances

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = from_dict(SolverConfig, self.solver)
        self.camera = tuple(float(v) for v in self.camera)
        self.reprojection_clip = tuple(float(v) for v in self.reprojection_clip)
        if len(self.camera) != 4:
            raise ValueError("camera needs fx, fy, cx, cy")


@dataclass
class GradcheckConfig:
    n_configs: int = 100
    n_problems: int = 20
    n_points: int = 20
    entropy_samples: int = 1000
    seed: int = 0


# ---------------------------------------------------------------------------
# helpers


def _load_config(cls, path, defaults=None):
    """``defaults`` (a dataclass instance) updated with the JSON object in ``path``."""
    base = to_dict(defaults if defaults is not None else cls())
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        base = _merge(base, data)
    try:
        return from_dict(cls, base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _override(cfg, **values):
    values = {k: v for k, v in values.items() if v is not None}
    try:
        return dataclasses.replace(cfg, **values) if values else cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid option: {exc}") from exc


def _manifest(command: str, cfg, extra=None) -> dict:
    cfg_dict = to_dict(cfg)
    out = {
        "command": command,
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "rng": ALGORITHM,
        "config": cfg_dict,
        "input_hash": content_hash({"command": command, "config": cfg_dict, "rng": ALGORITHM}),
    }
    if extra:
        out.update(extra)
    return out


class _Writer:
    """Single sink for artifacts: files under ``--out`` or stdout."""

    def __init__(self, out):
        self.out = Path(out) if out else None
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str, primary: bool = False):
        if self.out:
            (self.out / name).write_text(text)
        elif primary:
            sys.stdout.write(text)


def _csv_to_json(text: str) -> str:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        rows.append({h: _num(v) for h, v in zip(header, vals)})
    return dump_json(rows)


def _num(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def _table(text: str, fmt: str) -> str:
    return text if fmt == "csv" else _csv_to_json(text)


def _ext(fmt):
    return "csv" if fmt == "csv" else "json"


# ---------------------------------------------------------------------------
# commands


def _learning_cfg(args, factory) -> LearningConfig:
    cfg = _load_config(LearningConfig, args.config, factory())
    cfg = _override(cfg, seed=args.seed, epochs=args.epochs, n_problems=args.n_problems,
                    batch_size=args.batch_size, lr=args.lr)
    if args.init_from_truth:
        cfg = dataclasses.replace(cfg, init_from_truth=True)
    if args.no_baselines:
        cfg = dataclasses.replace(cfg, evaluate_baselines=False)
    return cfg


def _write_learning(w: _Writer, command, rec, fmt, recovery: bool):
    w.write(f"curve.{_ext(fmt)}", _table(rec.curve_csv(), fmt), primary=True)
    if rec.params2 is not None:
        w.write("covariances.json", dump_json(rec.covariance_dump()))
        if recovery:
            w.write(f"recovery.{_ext(fmt)}", _table(rec.recovery_csv(), fmt))
    w.write("manifest.json", dump_json(dict(rec.manifest(), command=command)))


def _cmd_learning(args, factory, command, recovery):
    cfg = _learning_cfg(args, factory)
    w = _Writer(args.out)
    try:
        rec = train_covariances(cfg)
    except TrainingDivergedError as exc:
        _write_learning(w, command, exc.record, args.format, recovery)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_learning(w, command, rec, args.format, recovery)
    return EXIT_OK


def cmd_synth_overfit(args):
    return _cmd_learning(args, overfit_config, "synth-overfit", recovery=False)


def cmd_synth_diverse(args):
    return _cmd_learning(args, diverse_config, "synth-diverse", recovery=True)


def reprojection_covariances(obs, truth, clip=(0.01, 4.0)) -> np.ndarray:
    """Isotropic ``||obs - truth||^2 I`` per point, clipped to ``clip``."""
    d2 = np.clip(np.sum((np.asarray(obs) - np.asarray(truth)) ** 2, axis=-1), *clip)
    return d2[..., None, None] * np.eye(2)


def cmd_synth_problem(args):
    cfg = _load_config(SceneConfig, args.config)
    cfg = _override(cfg, seed=args.seed, n_points=args.n_points, outlier_fraction=args.outlier_fraction)
    try:
        sp = generate_problem(cfg)
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    w = _Writer(args.out)
    w.write("problem.json", format_problem(sp), primary=True)
    w.write("correspondences.csv", format_correspondences(sp.correspondences(noisy=True)))
    w.write("truth.csv", format_correspondences(sp.correspondences(noisy=False)))
    w.write("pose_gt.json", dump_json(pose_record(sp.pose)))
    w.write("manifest.json", dump_json(_manifest("synth-problem", cfg, {"seed": cfg.seed})))
    return EXIT_OK


def cmd_estimate(args):
    cfg = _load_config(EstimateConfig, args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, solver=dataclasses.replace(cfg.solver, seed=args.seed))
    try:
        corr = parse_correspondences(Path(args.input).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from exc
    except ParseError as exc:
        raise UsageError(f"{args.input}: {exc}") from exc
    if len(corr) < 8:
        raise UsageError(f"{args.input}: need at least 8 correspondences, got {len(corr)}")
    if args.reprojection_oracle:
        try:
            gt = parse_correspondences(Path(args.reprojection_oracle).read_text())
        except (OSError, ParseError) as exc:
            raise UsageError(f"cannot read {args.reprojection_oracle}: {exc}") from exc
        if len(gt) != len(corr):
            raise UsageError("reprojection oracle file has a different number of rows")
        corr = dataclasses.replace(corr, cov1=reprojection_covariances(corr.p1, gt.p1, cfg.reprojection_clip),
                                   cov2=reprojection_covariances(corr.p2, gt.p2, cfg.reprojection_clip))
    cam = Camera(*cfg.camera)
    problem = PnecProblem.from_correspondences(corr, cam)
    try:
        rep = estimate_pose_multistage(problem, cfg.solver)
    except InsufficientDataError as exc:
        raise UsageError(str(exc)) from exc
    except (StageError, NumericalFailureError, DegenerateConfigurationError, np.linalg.LinAlgError) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    record = pose_record(rep.pose, rep.inlier_mask, rep.stage_energies,
                         {"iterations": {k: int(v) for k, v in rep.iterations_used.items()},
                          "converged": bool(rep.converged)})
    w = _Writer(args.out)
    w.write("pose.json", dump_json(record), primary=True)
    w.write("manifest.json", dump_json(_manifest("estimate", cfg, {
        "seed": cfg.solver.seed, "input_sha256": content_hash(Path(args.input).read_text())})))
    return EXIT_OK


def cmd_eval(args):
    if len(args.files) % 2:
        raise UsageError("eval expects pairs of files: EST GT [EST GT ...]")
    rows = []
    for k in range(0, len(args.files), 2):
        est_path, gt_path = args.files[k], args.files[k + 1]
        try:
            est = parse_poses(Path(est_path).read_text())
            gt = parse_poses(Path(gt_path).read_text())
        except (OSError, ParseError) as exc:
            raise UsageError(str(exc)) from exc
        if len(est) != len(gt):
            raise UsageError(f"{est_path} has {len(est)} poses, {gt_path} has {len(gt)}")
        try:
            et = translation_errors(est, gt)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rows.append((Path(est_path).stem, rpe1(est, gt), rpen(est, gt), float(np.mean(et)) if et.size else 0.0))
    w = _Writer(args.out)
    w.write(f"metrics.{_ext(args.format)}", _table(trajectory_table(rows), args.format), primary=True)
    w.write("manifest.json", dump_json({
        "command": "eval", "format_version": FORMAT_VERSION, "package_version": __version__,
        "inputs": [[Path(p).name, content_hash(Path(p).read_text())] for p in args.files]}))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(GradcheckConfig, args.config)
    cfg = _override(cfg, seed=args.seed)
    if args.quick:
        cfg = dataclasses.replace(cfg, n_configs=10, n_problems=2, entropy_samples=200)
    for fault in args.inject_fault or ():
        gradients.FAULTS.add(fault)
    try:
        report = run_gradcheck(cfg.seed, cfg.n_configs, cfg.n_problems, cfg.n_points)
        ent = eigen_angle_entropies(cfg.entropy_samples, cfg.n_points, cfg.seed)
    finally:
        for fault in args.inject_fault or ():
            gradients.FAULTS.discard(fault)
    entropy_ok = ent["random"] > ent["fixed"]
    entropy_line = (f"{'eigen_angle_entropy':22s} fixed={ent['fixed']:.4f} random={ent['random']:.4f} "
                    f"{'ok' if entropy_ok else 'BREACH'}")
    lines = [*report.lines(), entropy_line]
    passed = report.passed and entropy_ok
    text = "\n".join(lines) + f"\n{'PASS' if passed else 'FAIL'}\n"
    payload = {"worst_relative_error": report.worst, "tolerances": report.tolerances,
               "eigen_angle_entropy": ent, "passed": passed}
    w = _Writer(args.out)
    if args.format == "json":
        w.write("gradcheck.json", dump_json(payload), primary=True)
    else:
        w.write("gradcheck.txt", text, primary=True)
    if args.out:
        w.write("gradcheck.json", dump_json(payload))
        w.write("manifest.json", dump_json(_manifest("gradcheck", cfg, {"seed": cfg.seed})))
    return EXIT_OK if passed else EXIT_BREACH


def cmd_varapprox(args):
    cfg = _load_config(VarianceSweepConfig, args.config)
    cfg = _override(cfg, seed=args.seed, n_samples=args.samples)
    if args.focals:
        cfg = _override(cfg, focals=tuple(args.focals))
    if args.zero_covariance:
        cfg = dataclasses.replace(cfg, zero_covariance=True)
    rows = variance_sweep(cfg)
    w = _Writer(args.out)
    w.write(f"varapprox.{_ext(args.format)}", _table(sweep_csv(rows), args.format), primary=True)
    w.write("manifest.json", dump_json(_manifest("varapprox", cfg, {"seed": cfg.seed})))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, fmt_default="csv"):
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (default: primary artifact to stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=fmt_default, help="table format")


def _learning_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-problems", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-from-truth", action="store_true", help="start from the generator covariances")
    p.add_argument("--no-baselines", action="store_true", help="skip the unit / NEC-LS / GT baselines")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnec", description="Symmetric PNEC relative pose, covariance learning and checks.")
    parser.add_argument("--version", action="version", version=f"pnec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-overfit", help="learn covariances on one fixed geometry")
    _common(p)
    _learning_flags(p)
    p.set_defaults(func=cmd_synth_overfit)

    p = sub.add_parser("synth-diverse", help="learn frame-2 covariances over random relative poses")
    _common(p)
    _learning_flags(p)
    p.set_defaults(func=cmd_synth_diverse)

    p = sub.add_parser("synth-problem", help="write one synthetic problem (JSON, correspondence CSVs, true pose)")
    _common(p, "json")
    p.add_argument("--n-points", type=int)
    p.add_argument("--outlier-fraction", type=float)
    p.set_defaults(func=cmd_synth_problem)

    p = sub.add_parser("estimate", help="multi-stage pose estimate from a correspondence CSV")
    _common(p, "json")
    p.add_argument("input", help="CSV with header x1,y1,x2,y2[,s1,a1,b1,s2,a2,b2]")
    p.add_argument("--reprojection-oracle", metavar="GT_CSV",
                   help="noise-free correspondences; use clipped isotropic reprojection-error covariances")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="RPE1 / RPEn / e_t for estimated vs ground-truth pose files")
    _common(p)
    p.add_argument("files", nargs="+", metavar="EST GT", help="pairs of 12-number-per-line pose files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference and argmin-oracle derivative checks")
    _common(p, "csv")
    p.add_argument("--quick", action="store_true", help="reduced sizes for smoke testing")
    p.add_argument("--inject-fault", action="append", choices=sorted(gradients.KNOWN_FAULTS),
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("varapprox", help="first-order residual variance vs Monte Carlo over focal lengths")
    _common(p)
    p.add_argument("--samples", type=int, help="Monte Carlo samples per point")
    p.add_argument("--focals", type=float, nargs="+")
    p.add_argument("--zero-covariance", action="store_true")
    p.set_defaults(func=cmd_varapprox)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
