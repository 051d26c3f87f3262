"""Run persistence, parallel replication and cloud-data ingestion."""

import csv
import json
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import IngestionError
from ..rng import stream

SCORE_COLUMNS = ("method", "scenario", "metric", "value", "n_reps")


@dataclass
class RunOutputs:
    """Tables produced by one experiment run."""

    scores: list = field(default_factory=list)  # dicts with SCORE_COLUMNS
    diagnostics: list = field(default_factory=list)  # JSON-serializable dicts
    plotdata: dict = field(default_factory=dict)  # name -> list of row dicts
    summary: dict = field(default_factory=dict)  # headline numbers, kept in memory

    def add_score(self, method, scenario, metric, value, n_reps):
        self.scores.append(
            {"method": method, "scenario": scenario, "metric": metric, "value": float(value), "n_reps": int(n_reps)}
        )


def map_replications(fn, args, workers=1):
    """``[fn(a) for a in args]``, optionally across processes; order is preserved."""
    args = list(args)
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args))


def git_describe(cwd=None):
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd or os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v)}")


def write_csv(path, rows, columns=None):
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return ""
    return v


def read_csv(path):
    """Rows of a CSV written by ``write_csv``, with numbers and booleans restored."""
    with open(path, newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _parse_cell(s):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def emit_run(outputs: RunOutputs, config, out_dir=None):
    """Write ``config.json``, ``scores.csv``, ``diagnostics.jsonl`` and ``plotdata/*.csv``.

    Contents depend only on ``(config, seed)``, so reruns are byte-identical.
    Returns the output directory.
    """
    out_dir = out_dir or config.out
    try:
        os.makedirs(os.path.join(out_dir, "plotdata"), exist_ok=True)
        cfg = dict(config.to_dict())
        cfg["git_describe"] = git_describe()
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        write_csv(os.path.join(out_dir, "scores.csv"), outputs.scores, SCORE_COLUMNS)
        with open(os.path.join(out_dir, "diagnostics.jsonl"), "w") as fh:
            for rec in outputs.diagnostics:
                fh.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")
        for name, rows in sorted(outputs.plotdata.items()):
            write_csv(os.path.join(out_dir, "plotdata", f"{name}.csv"), rows)
    except OSError as exc:
        raise OSError(f"could not write run outputs under {out_dir!r}: {exc}") from exc
    return out_dir


# --------------------------------------------------------------------------
# cloud data


@dataclass
class CloudDataset:
    counts: np.ndarray  # (T, n) nonnegative integers
    mask: np.ndarray  # (T, n) True for held-out cells

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise IngestionError("counts must be a T x n matrix")
        if np.any(c < 0):
            r, k = np.argwhere(c < 0)[0]
            raise IngestionError("negative count", int(r), int(k))
        if self.mask.shape != c.shape:
            raise IngestionError("mask shape does not match counts")

    @property
    def T(self):
        return self.counts.shape[0]

    @property
    def n(self):
        return self.counts.shape[1]

    def observed_index(self, t):
        """Indices observed at time ``t`` (1-based)."""
        return np.flatnonzero(~self.mask[t - 1])


def holdout_mask(shape, fraction, seed):
    """Boolean mask with exactly ``ceil(fraction * size)`` held-out cells."""
    T, n = shape
    k = int(np.ceil(fraction * T * n - 1e-9))
    idx = stream(seed, "cloud-holdout").choice(T * n, size=k, replace=False)
    mask = np.zeros(T * n, dtype=bool)
    mask[idx] = True
    return mask.reshape(T, n)


def ingest_cloud_csv(path, seed=0, holdout=0.1):
    """Read a T x n CSV of counts (optional header row) and draw a held-out mask."""
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or all(not c.strip() for c in rec):
                continue
            rows.append((i, rec))
    if not rows:
        raise IngestionError("empty cloud data file")
    first = rows[0][1]
    if all(_not_number(c) for c in first):
        rows = rows[1:]
    if not rows:
        raise IngestionError("cloud data file has a header but no data")
    width = len(rows[0][1])
    counts = np.empty((len(rows), width), dtype=np.int64)
    for r, (line, rec) in enumerate(rows):
        if len(rec) != width:
            raise IngestionError(f"row has {len(rec)} columns, expected {width}", line, None)
        for k, cell in enumerate(rec):
            counts[r, k] = _count(cell, line, k)
    return CloudDataset(counts, holdout_mask(counts.shape, holdout, seed))


def _not_number(s):
    try:
        float(s)
        return False
    except ValueError:
        return True


def _count(cell, row, col):
    s = cell.strip()
    try:
        v = float(s)
    except ValueError:
        raise IngestionError(f"non-numeric entry {cell!r}", row, col) from None
    if not np.isfinite(v) or v != int(v):
        raise IngestionError(f"non-integer entry {cell!r}", row, col)
    if v < 0:
        raise IngestionError(f"negative entry {cell!r}", row, col)
    return int(v)
