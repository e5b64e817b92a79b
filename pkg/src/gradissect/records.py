"""Run records and their CSV serialization.

A RunRecord is the time series produced by one seeded optimizer run.  The
CSV layout is fixed: comment lines carrying the config digest and per-record
metadata, a header ``experiment,method,seed,step,loss`` plus any declared
auxiliary columns, and rows with floats rendered at 17 significant digits so
the files round-trip 64-bit values losslessly and byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

BASE_COLUMNS = ("experiment", "method", "seed", "step", "loss")


def render_float(x: float) -> str:
    """Decimal rendering at 17 significant digits (lossless for float64)."""
    return format(float(x), ".17g")


def config_digest(config: dict) -> str:
    """SHA-256 hex digest of a config dict in canonical JSON form."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def stable_hash64(key: str) -> int:
    """Stable 64-bit integer hash of a string key (for RNG stream ids)."""
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


@dataclass
class RunRecord:
    """Loss time series of one run plus identifying metadata.

    ``aux`` maps additional column names to per-row float lists.  Steps must
    be strictly increasing and losses finite.
    """

    experiment: str
    method: str
    seed: int
    steps: list[int]
    losses: list[float]
    aux: dict[str, list[float]] = field(default_factory=dict)
    problem_hash: str = ""

    def __post_init__(self):
        if len(self.steps) != len(self.losses):
            raise ValueError("steps and losses length mismatch")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly increasing")
        if not all(math.isfinite(x) for x in self.losses):
            raise ValueError("losses must be finite")
        for name, col in self.aux.items():
            if len(col) != len(self.steps):
                raise ValueError(f"aux column {name!r} length mismatch")

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def sort_key(self) -> tuple:
        return (self.experiment, self.method, self.seed)


def problem_hash_of(*arrays) -> str:
    """Short content hash identifying a built problem instance."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


def emit_csv(records: list[RunRecord], path, digest: str) -> None:
    """Write records to one CSV file, in the order given.

    All records must declare the same auxiliary columns.  Output is UTF-8
    with LF line endings.
    """
    if not records:
        raise ValueError("no records to emit")
    aux_names = sorted(records[0].aux.keys())
    for r in records:
        if sorted(r.aux.keys()) != aux_names:
            raise ValueError("records declare inconsistent aux columns")
    lines = [f"# config_digest={digest}"]
    for r in records:
        lines.append(
            f"# record {r.experiment},{r.method},{r.seed},problem={r.problem_hash}"
        )
    lines.append(",".join(BASE_COLUMNS + tuple(aux_names)))
    for r in records:
        aux_cols = [r.aux[n] for n in aux_names]
        for i, (s, loss) in enumerate(zip(r.steps, r.losses)):
            row = [r.experiment, r.method, str(r.seed), str(s), render_float(loss)]
            row.extend(render_float(col[i]) for col in aux_cols)
            lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_csv(path) -> tuple[list[RunRecord], str]:
    """Parse a CSV produced by :func:`emit_csv`; returns (records, digest).

    Record order and row order are preserved, so re-emitting reproduces the
    file byte for byte.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    digest = ""
    meta: list[tuple[str, str, int, str]] = []
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("# config_digest="):
            digest = line.split("=", 1)[1]
        elif line.startswith("# record "):
            spec, problem = line[len("# record ") :].rsplit(",problem=", 1)
            experiment, method, seed = spec.rsplit(",", 2)
            meta.append((experiment, method, int(seed), problem))
        elif not line.startswith("#"):
            body_start = i
            break
    header = lines[body_start].split(",")
    if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
        raise ValueError(f"unexpected CSV header: {header}")
    aux_names = header[len(BASE_COLUMNS) :]
    rows_by_key: dict[tuple[str, str, int], dict] = {}
    for line in lines[body_start + 1 :]:
        if not line:
            continue
        parts = line.split(",")
        experiment, method = parts[0], parts[1]
        key = (experiment, method, int(parts[2]))
        bucket = rows_by_key.setdefault(
            key, {"steps": [], "losses": [], "aux": {n: [] for n in aux_names}}
        )
        bucket["steps"].append(int(parts[3]))
        bucket["losses"].append(float(parts[4]))
        for n, val in zip(aux_names, parts[5:]):
            bucket["aux"][n].append(float(val))
    records = []
    for experiment, method, seed, problem in meta:
        bucket = rows_by_key[(experiment, method, seed)]
        records.append(
            RunRecord(
                experiment=experiment,
                method=method,
                seed=seed,
                steps=bucket["steps"],
                losses=bucket["losses"],
                aux=bucket["aux"],
                problem_hash=problem,
            )
        )
    return records, digest


def emit_table_csv(path, columns: list[str], rows: list[list], digest: str) -> None:
    """Write a plain value table (non-run output) in the same CSV dialect."""
    lines = [f"# config_digest={digest}", ",".join(columns)]
    for row in rows:
        rendered = [
            cell if isinstance(cell, str) else render_float(cell) for cell in row
        ]
        lines.append(",".join(rendered))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
