"""Delimited-text readers and writers for exposures, genotypes and outcomes.

File layouts (UTF-8, comma separated, header row required):

* exposures: ``subject_id,exposure_id,time,value``, one row per observation
* genotypes: ``subject_id,<variant>,<variant>,...``, one row per subject
* outcome: ``subject_id,outcome``, one row per subject

Subject ids are integers. Floats are written with 17 significant digits so
that a write/read cycle reproduces every double exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .estimators import InstrumentMatrix
from .exceptions import SchemaError, SubjectMismatchError
from .fpca import SparseFunctionalSample

__all__ = [
    "EXPOSURE_COLUMNS",
    "OUTCOME_COLUMNS",
    "fmt",
    "write_exposures",
    "read_exposures",
    "write_genotypes",
    "read_genotypes",
    "write_outcome",
    "read_outcome",
    "align_subjects",
    "write_csv",
]

EXPOSURE_COLUMNS = ("subject_id", "exposure_id", "time", "value")
OUTCOME_COLUMNS = ("subject_id", "outcome")


def fmt(value) -> str:
    """Round-trip exact text for numbers; other values pass through ``str``."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return "" if value is None else str(value)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _reader(path, required: Sequence[str]):
    fh = open(path, encoding="utf-8", newline="")
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        fh.close()
        raise SchemaError(f"{path}: empty file, a header row is required") from None
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
    return fh, reader, header


def _int(text, path, line, column):
    try:
        return int(text)
    except ValueError:
        raise SchemaError(f"{path}, line {line}: column '{column}' expects an integer, got {text!r}") from None


def _float(text, path, line, column):
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"{path}, line {line}: column '{column}' expects a number, got {text!r}") from None
    if not np.isfinite(value):
        raise SchemaError(f"{path}, line {line}: column '{column}' is not finite")
    return value


def write_exposures(path, samples_by_exposure: Sequence[Sequence[SparseFunctionalSample]]) -> None:
    """Long-format exposure file; exposure ids are 1-based."""

    def rows():
        for j, samples in enumerate(samples_by_exposure, start=1):
            for s in samples:
                for t, v in zip(s.times, s.values):
                    yield s.subject_id, j, float(t), float(v)

    write_csv(path, EXPOSURE_COLUMNS, rows())


def read_exposures(path) -> Dict[int, List[SparseFunctionalSample]]:
    """Samples per exposure id, each list sorted by subject id."""
    fh, reader, header = _reader(path, EXPOSURE_COLUMNS)
    col = {c: header.index(c) for c in EXPOSURE_COLUMNS}
    obs: Dict[int, Dict[int, list]] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            sid = _int(row[col["subject_id"]], path, line, "subject_id")
            eid = _int(row[col["exposure_id"]], path, line, "exposure_id")
            t = _float(row[col["time"]], path, line, "time")
            v = _float(row[col["value"]], path, line, "value")
            obs.setdefault(eid, {}).setdefault(sid, []).append((t, v))
    if not obs:
        raise SchemaError(f"{path}: no observations")
    out = {}
    for eid in sorted(obs):
        samples = []
        for sid in sorted(obs[eid]):
            tv = np.array(obs[eid][sid])
            try:
                samples.append(SparseFunctionalSample(sid, tv[:, 0], tv[:, 1]))
            except ValueError as exc:
                raise SchemaError(f"{path}: exposure {eid}: {exc}") from None
        out[eid] = samples
    return out


def write_genotypes(path, genotypes, subject_ids: Sequence[int],
                    variant_names: Optional[Sequence[str]] = None) -> None:
    if isinstance(genotypes, InstrumentMatrix):
        names = variant_names or genotypes.column_names
        values = genotypes.values
    else:
        values = np.asarray(genotypes, dtype=float)
        names = variant_names or [f"g{j}" for j in range(values.shape[1])]
    if len(subject_ids) != values.shape[0]:
        raise SchemaError("one subject id per genotype row is required")
    write_csv(path, ["subject_id", *names],
              ([sid, *row] for sid, row in zip(subject_ids, values.tolist())))


def read_genotypes(path):
    """``(subject_ids, variant_names, values)``; constant columns are rejected."""
    fh, reader, header = _reader(path, ("subject_id",))
    if header[0] != "subject_id":
        fh.close()
        raise SchemaError(f"{path}: first column must be subject_id")
    names = header[1:]
    if not names:
        fh.close()
        raise SchemaError(f"{path}: no variant columns")
    ids, rows = [], []
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            ids.append(_int(row[0], path, line, "subject_id"))
            rows.append([_float(x, path, line, names[j]) for j, x in enumerate(row[1:])])
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate subject ids")
    values = np.array(rows, dtype=float).reshape(len(rows), len(names))
    if values.shape[0] < 2:
        raise SchemaError(f"{path}: at least two subjects are required")
    for j, name in enumerate(names):
        if np.ptp(values[:, j]) == 0:
            raise SchemaError(f"{path}: variant column '{name}' is constant")
    return np.array(ids), list(names), values


def write_outcome(path, subject_ids: Sequence[int], outcome) -> None:
    write_csv(path, OUTCOME_COLUMNS, zip(subject_ids, np.asarray(outcome, dtype=float).tolist()))


def read_outcome(path, outcome_type: str = "continuous"):
    fh, reader, header = _reader(path, OUTCOME_COLUMNS)
    ci, co = header.index("subject_id"), header.index("outcome")
    ids, y = [], []
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            ids.append(_int(row[ci], path, line, "subject_id"))
            value = _float(row[co], path, line, "outcome")
            if outcome_type == "binary" and value not in (0.0, 1.0):
                raise SchemaError(f"{path}, line {line}: binary outcome must be 0 or 1, got {row[co]!r}")
            y.append(value)
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate subject ids")
    return np.array(ids), np.array(y)


def align_subjects(exposure_ids: Sequence[Sequence[int]], genotype_ids, outcome_ids) -> np.ndarray:
    """Common sorted subject ids; any id missing from some file is an error."""
    sets = {f"exposure {j}": set(map(int, ids)) for j, ids in enumerate(exposure_ids, start=1)}
    sets["genotypes"] = set(map(int, genotype_ids))
    sets["outcome"] = set(map(int, outcome_ids))
    union = set().union(*sets.values())
    unmatched = {name: len(union - ids) for name, ids in sets.items() if len(union - ids)}
    if unmatched:
        detail = ", ".join(f"{n} lacks {k}" for n, k in unmatched.items())
        raise SubjectMismatchError(
            f"{len(union) - len(set.intersection(*sets.values()))} subject id(s) unmatched ({detail})"
        )
    return np.array(sorted(union))
