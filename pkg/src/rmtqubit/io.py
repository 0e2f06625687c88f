"""File formats: trajectory CSV, criteria CSV, sweep CSV and report JSON.

Every writer goes through :func:`atomic_write` (temporary file in the target
directory, then rename). Floats are written with ``repr`` so that a file
read back reproduces the in-memory arrays bit for bit.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .dynamics import ChannelTrajectory, ModelParams

TRAJECTORY_COLUMNS = (
    "t", "r", "re_z1", "im_z1", "re_z2", "im_z2",
    "se_r", "se_re_z1", "se_im_z1", "se_re_z2", "se_im_z2",
)
HEADER_KEYS = ("delta", "lambda", "N", "N_sam", "seed")
CRITERIA_COLUMNS = ("t", "delta1", "delta2", "deltaq", "g", "delta1C", "delta2C", "sigma_max", "valid")
SWEEP_COLUMNS = ("delta", "lambda", "t_end", "nm_rhp", "nm_blp", "nm_mdr", "n_samples", "flags")


class TrajectoryFormatError(ValueError):
    """Malformed trajectory file; the message names the offending line."""


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _num(x) -> str:
    return repr(float(x))


def _g15(x) -> str:
    return f"{float(x):.15g}"


def trajectory_text(traj: ChannelTrajectory) -> str:
    p = traj.params
    lines = [
        f"# delta={_num(p.delta)} lambda={_num(p.lam)} N={p.env_dim} "
        f"N_sam={traj.n_accumulated} seed={p.master_seed}",
        ",".join(TRAJECTORY_COLUMNS),
    ]
    cols = (
        traj.t, traj.r, traj.z1.real, traj.z1.imag, traj.z2.real, traj.z2.imag,
        traj.se_r, traj.se_z1.real, traj.se_z1.imag, traj.se_z2.real, traj.se_z2.imag,
    )
    for row in zip(*cols):
        lines.append(",".join(_num(v) for v in row))
    return "\n".join(lines) + "\n"


def write_trajectory(path, traj: ChannelTrajectory) -> Path:
    return atomic_write(path, trajectory_text(traj))


def _parse_header(line: str, lineno: int) -> dict:
    if not line.startswith("#"):
        raise TrajectoryFormatError(f"line {lineno}: expected '# delta=... lambda=...' header")
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise TrajectoryFormatError(f"line {lineno}: malformed header token {token!r}")
        fields[key] = value
    missing = [k for k in HEADER_KEYS if k not in fields]
    if missing:
        raise TrajectoryFormatError(f"line {lineno}: header missing keys {', '.join(missing)}")
    try:
        return {
            "delta": float(fields["delta"]), "lambda": float(fields["lambda"]),
            "N": int(fields["N"]), "N_sam": int(fields["N_sam"]), "seed": int(fields["seed"]),
        }
    except ValueError as exc:
        raise TrajectoryFormatError(f"line {lineno}: bad header value ({exc})") from None


def validate_trajectory_file(path) -> ChannelTrajectory:
    """Parse and check a trajectory CSV.

    Checks the header keys, the column names, a strictly increasing time
    column starting at 0, and that the first row is the identity channel
    ``(r, z1, z2) = (1, 1, 0)`` within its declared standard errors.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise TrajectoryFormatError(f"cannot read {path}: {exc}") from None
    if len(lines) < 3:
        raise TrajectoryFormatError(f"line {len(lines) + 1}: file too short")
    head = _parse_header(lines[0], 1)
    columns = tuple(c.strip() for c in lines[1].split(","))
    if columns != TRAJECTORY_COLUMNS:
        raise TrajectoryFormatError(f"line 2: expected columns {','.join(TRAJECTORY_COLUMNS)}")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(TRAJECTORY_COLUMNS):
            raise TrajectoryFormatError(f"line {lineno}: expected {len(TRAJECTORY_COLUMNS)} fields, got {len(parts)}")
        try:
            values = [float(x) for x in parts]
        except ValueError:
            raise TrajectoryFormatError(f"line {lineno}: non-numeric field") from None
        if not all(np.isfinite(values)):
            raise TrajectoryFormatError(f"line {lineno}: non-finite value")
        if rows and values[0] <= rows[-1][1][0]:
            raise TrajectoryFormatError(f"line {lineno}: time {values[0]!r} not increasing")
        rows.append((lineno, values))
    if not rows:
        raise TrajectoryFormatError(f"line {len(lines) + 1}: no data rows")
    data = np.array([v for _, v in rows])
    first_line, first = rows[0]
    if first[0] != 0.0:
        raise TrajectoryFormatError(f"line {first_line}: time grid must start at 0")
    expected = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    allowed = np.maximum(5.0 * np.array(first[6:11]), 1e-9)
    if np.any(np.abs(np.array(first[1:6]) - expected) > allowed):
        raise TrajectoryFormatError(f"line {first_line}: t=0 row is not the identity channel (1, 1, 0)")
    params = ModelParams(
        head["delta"], head["lambda"], head["N"], head["N_sam"], data[:, 0], head["seed"],
    )
    return ChannelTrajectory(
        params, data[:, 0], data[:, 1], data[:, 2] + 1j * data[:, 3], data[:, 4] + 1j * data[:, 5],
        data[:, 6], data[:, 7] + 1j * data[:, 8], data[:, 9] + 1j * data[:, 10], head["N_sam"],
    )


read_trajectory = validate_trajectory_file


def criteria_text(table: dict, header: str) -> str:
    out = [f"# {header}", ",".join(CRITERIA_COLUMNS)]
    for i in range(len(table["t"])):
        row = []
        for c in CRITERIA_COLUMNS:
            v = table[c][i]
            row.append(str(int(bool(v))) if c == "valid" else _num(v))
        out.append(",".join(row))
    return "\n".join(out) + "\n"


def write_criteria(path, table: dict, header: str) -> Path:
    return atomic_write(path, criteria_text(table, header))


def report_text(report_dict: dict, provenance: dict) -> str:
    payload = dict(report_dict)
    payload["provenance"] = provenance
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_report(path, report_dict: dict, provenance: dict) -> Path:
    return atomic_write(path, report_text(report_dict, provenance))


def sweep_text(records, header: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rec in records:
        w.writerow([
            _g15(rec.delta), _g15(rec.lam), _g15(rec.t_end), _g15(rec.nm_rhp),
            _g15(rec.nm_blp), _g15(rec.nm_mdr), rec.n_samples_used, ";".join(rec.flags),
        ])
    return buf.getvalue()


def write_sweep(path, records, header: str) -> Path:
    return atomic_write(path, sweep_text(records, header))


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        rec = {k: float(row[k]) for k in SWEEP_COLUMNS[:6]}
        rec["n_samples"] = int(row["n_samples"])
        rec["flags"] = [f for f in row["flags"].split(";") if f]
        out.append(rec)
    return out
