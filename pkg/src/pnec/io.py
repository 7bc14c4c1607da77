"""File formats: correspondence CSV, KITTI-style pose lists and pose records.

Correspondence CSV
    Header ``x1,y1,x2,y2`` optionally followed by ``s1,a1,b1,s2,a2,b2``.
    ``s`` is the covariance trace (px^2), ``a`` the angle (rad) of the
    eigenvector carrying ``b * s`` of it, ``b`` in (0, 1). Without the
    covariance columns every point gets the identity (1 px^2 per axis).

Pose file
    One pose per line, 12 whitespace-separated numbers: the row-major 3x4
    matrix ``[R | p]`` mapping camera ``i`` into the world frame.

Problem JSON (``format_version`` 1)
    ``camera``: ``[fx, fy, cx, cy]``; ``R``: 9 numbers row-major; ``t``: 3
    numbers; ``baseline``; per-point lists ``points`` (3), ``p1``/``p2``/
    ``obs1``/``obs2`` (2), ``cov1``/``cov2`` as upper-triangle triples
    ``[c00, c01, c11]`` and ``outlier`` booleans.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .energy import Correspondences, RelativePose
from .geometry import Camera
from .gradients import cov2d_from_params, cov2d_to_params
from .metrics import Trajectory

POSE_COLUMNS = ("x1", "y1", "x2", "y2")
COV_COLUMNS = ("s1", "a1", "b1", "s2", "a2", "b2")
PROBLEM_FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file."""


def _text(source) -> str:
    if isinstance(source, Path):
        return source.read_text()
    text = str(source)
    if "\n" not in text:
        try:
            if Path(text).is_file():
                return Path(text).read_text()
        except OSError:  # too long or otherwise not a valid path: treat as content
            pass
    return text


def parse_correspondences(source) -> Correspondences:
    """Read a correspondence CSV from a path or a string."""
    rows = list(csv.reader(io.StringIO(_text(source))))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty correspondence file")
    header = tuple(c.strip() for c in rows[0])
    if header not in (POSE_COLUMNS, POSE_COLUMNS + COV_COLUMNS):
        raise ParseError(f"unexpected header {','.join(header)!r}")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ParseError(f"bad correspondence row: {exc}") from exc
    if any(len(r) != len(header) for r in rows[1:]):
        raise ParseError("row length does not match header")
    if not np.all(np.isfinite(data)):
        raise ParseError("non-finite value in correspondence file")
    n = data.shape[0]
    if len(header) == len(POSE_COLUMNS):
        cov1 = cov2 = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    else:
        s1, a1, b1, s2, a2, b2 = data[:, 4:].T
        if np.any(s1 <= 0) or np.any(s2 <= 0) or np.any((b1 <= 0) | (b1 >= 1) | (b2 <= 0) | (b2 >= 1)):
            raise ParseError("covariance parameters out of range (s > 0, 0 < b < 1)")
        cov1, cov2 = cov2d_from_params(s1, a1, b1), cov2d_from_params(s2, a2, b2)
    return Correspondences(data[:, 0:2], data[:, 2:4], cov1, cov2)


def format_correspondences(c: Correspondences, with_covariances: bool = True) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(POSE_COLUMNS + (COV_COLUMNS if with_covariances else ()))
    cols = [c.p1[:, 0], c.p1[:, 1], c.p2[:, 0], c.p2[:, 1]]
    if with_covariances:
        cols += [*cov2d_to_params(c.cov1), *cov2d_to_params(c.cov2)]
    for row in np.stack(cols, axis=-1):
        wr.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def parse_poses(source) -> Trajectory:
    """Read a 12-numbers-per-line pose file."""
    lines = [ln for ln in _text(source).splitlines() if ln.strip()]
    try:
        M = np.array([[float(v) for v in ln.split()] for ln in lines], dtype=float)
    except ValueError as exc:
        raise ParseError(f"bad pose line: {exc}") from exc
    if M.ndim != 2 or M.shape[1] != 12 or M.shape[0] == 0:
        raise ParseError("pose files need one line of 12 numbers per pose")
    M = M.reshape(-1, 3, 4)
    return Trajectory(M[:, :, :3], M[:, :, 3])


def format_poses(traj: Trajectory) -> str:
    M = np.concatenate([traj.R, traj.p[:, :, None]], axis=-1).reshape(-1, 12)
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in M)


def pose_record(pose: RelativePose, inlier_mask=None, stage_energies=None, extra=None) -> dict:
    """JSON-ready record: ``R`` row-major (9 numbers), ``t``, inlier mask and stage energies."""
    rec = {
        "R": [float(v) for v in np.asarray(pose.R).ravel()],
        "t": [float(v) for v in np.asarray(pose.t)],
        "inliers": [] if inlier_mask is None else [bool(v) for v in inlier_mask],
        "stage_energies": {k: float(v) for k, v in (stage_energies or {}).items()},
    }
    if extra:
        rec.update(extra)
    return rec


def dump_json(payload) -> str:
    """Canonical JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _triu(C) -> list:
    C = np.asarray(C)
    return np.stack([C[:, 0, 0], C[:, 0, 1], C[:, 1, 1]], axis=-1).tolist()


def _from_triu(rows) -> np.ndarray:
    a = np.asarray(rows, dtype=float).reshape(-1, 3)
    return np.stack([np.stack([a[:, 0], a[:, 1]], -1), np.stack([a[:, 1], a[:, 2]], -1)], axis=-2)


def problem_to_dict(sp) -> dict:
    """Serialize a :class:`~pnec.synthgen.SyntheticProblem`; floats round-trip exactly."""
    cam = sp.camera
    return {
        "format_version": PROBLEM_FORMAT_VERSION,
        "camera": [float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy)],
        "R": np.asarray(sp.R, dtype=float).ravel().tolist(),
        "t": np.asarray(sp.t, dtype=float).tolist(),
        "baseline": float(sp.baseline),
        "points": np.asarray(sp.points, dtype=float).tolist(),
        "p1": np.asarray(sp.p1, dtype=float).tolist(),
        "p2": np.asarray(sp.p2, dtype=float).tolist(),
        "obs1": np.asarray(sp.obs1, dtype=float).tolist(),
        "obs2": np.asarray(sp.obs2, dtype=float).tolist(),
        "cov1": _triu(sp.cov1),
        "cov2": _triu(sp.cov2),
        "outlier": [bool(v) for v in sp.outlier],
    }


def problem_from_dict(d: dict):
    from .synthgen import SyntheticProblem

    if d.get("format_version") != PROBLEM_FORMAT_VERSION:
        raise ParseError(f"unsupported problem format_version {d.get('format_version')!r}")
    try:
        n = len(d["p1"])
        arr = {k: np.asarray(d[k], dtype=float).reshape(n, w)
               for k, w in (("points", 3), ("p1", 2), ("p2", 2), ("obs1", 2), ("obs2", 2))}
        sp = SyntheticProblem(
            R=np.asarray(d["R"], dtype=float).reshape(3, 3),
            t=np.asarray(d["t"], dtype=float).reshape(3),
            baseline=float(d["baseline"]),
            cov1=_from_triu(d["cov1"]).reshape(n, 2, 2),
            cov2=_from_triu(d["cov2"]).reshape(n, 2, 2),
            outlier=np.asarray(d["outlier"], dtype=bool).reshape(n),
            camera=Camera(*(float(v) for v in d["camera"])),
            **arr,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed problem JSON: {exc}") from exc
    return sp


def format_problem(sp) -> str:
    return dump_json(problem_to_dict(sp))


def parse_problem(source):
    try:
        d = json.loads(_text(source))
    except json.JSONDecodeError as exc:
        raise ParseError(f"problem JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ParseError("problem JSON must be an object")
    return problem_from_dict(d)
