"""File formats: model-spec JSON, marked-path CSV/JSON and plain tables.

All CSV files use LF line endings, ``.`` as decimal separator and ``repr``
float formatting, so values round-trip exactly. Components are written
1-based.

Spec JSON::

    {"d": 2, "lambda0": [..], "A": [[..], [..]], "B": [[..], [..]],
     "drift": {"kind": "linear"} | {"kind": "exp_regime", "D": [..], "c": ..},
     "marks": [{"family": "exponential", "rate": 1.0}, ...]}

Path CSV: ``# T=<horizon>`` and optional ``# key=value`` metadata lines,
then a ``t,k,y`` header and one row per event.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import DomainError, ExciterError, FormatError
from .model import ExpRegimeDrift, LinearDrift, MarkedPath, ModelSpec, mark_from_dict


def fmt(x):
    """Shortest round-trip representation of a float."""
    return repr(float(x))


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text(file, text):
    with open(file, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Model spec
# ---------------------------------------------------------------------------


def spec_to_dict(spec):
    drift = {"kind": spec.drift.kind}
    if spec.nonlinear:
        drift["D"] = spec.drift.D_diag.tolist()
        drift["c"] = spec.drift.c
    return {
        "d": spec.d,
        "lambda0": spec.lambda0.tolist(),
        "A": spec.A.tolist(),
        "B": spec.B.tolist(),
        "drift": drift,
        "marks": [m.to_dict() for m in spec.marks],
    }


def _field(doc, name):
    if name not in doc:
        raise FormatError(f"spec field '{name}' is missing")
    return doc[name]


def _numeric(value, shape, name):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"spec field '{name}' must be numeric: {exc}") from exc
    if arr.shape != shape:
        raise FormatError(f"spec field '{name}' must have shape {shape}, got {arr.shape}")
    return arr


def spec_from_dict(doc):
    """Build a :class:`ModelSpec`, raising :class:`FormatError` naming the bad field."""
    if not isinstance(doc, dict):
        raise FormatError("spec must be a JSON object")
    d = _field(doc, "d")
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise FormatError(f"spec field 'd' must be a positive integer, got {d!r}")
    lam0 = _numeric(_field(doc, "lambda0"), (d,), "lambda0")
    A = _numeric(_field(doc, "A"), (d, d), "A")
    B = _numeric(_field(doc, "B"), (d, d), "B")
    marks_doc = _field(doc, "marks")
    if not isinstance(marks_doc, list) or len(marks_doc) != d:
        raise FormatError(f"spec field 'marks' must be a list of {d} mark laws")
    marks = []
    for i, m in enumerate(marks_doc):
        if not isinstance(m, dict):
            raise FormatError(f"spec field 'marks[{i}]' must be an object")
        try:
            marks.append(mark_from_dict(m))
        except DomainError as exc:
            raise FormatError(f"spec field 'marks[{i}]': {exc}") from exc
    drift_doc = doc.get("drift", {"kind": "linear"})
    kind = drift_doc.get("kind") if isinstance(drift_doc, dict) else None
    if kind == "linear":
        drift = LinearDrift()
    elif kind == "exp_regime":
        D = np.array(_field(drift_doc, "D"), dtype=float)
        if D.shape not in ((d,), (d, d)):
            raise FormatError(f"spec field 'drift.D' must have shape ({d},) or ({d}, {d})")
        try:
            drift = ExpRegimeDrift(D, float(_field(drift_doc, "c")))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"spec field 'drift.c' must be numeric: {exc}") from exc
    else:
        raise FormatError(f"spec field 'drift.kind' must be 'linear' or 'exp_regime', got {kind!r}")
    try:
        return ModelSpec(lam0, A, B, tuple(marks), drift)
    except ExciterError as exc:
        raise FormatError(f"invalid spec: {exc}") from exc


def load_spec(file):
    try:
        text = Path(file).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read spec file {file}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{file} is not valid JSON: {exc}") from exc
    return spec_from_dict(doc)


def save_spec(spec, file):
    write_text(file, dumps_json(spec_to_dict(spec)))


# ---------------------------------------------------------------------------
# Marked paths
# ---------------------------------------------------------------------------


def path_to_csv(path):
    buf = io.StringIO()
    buf.write(f"# T={fmt(path.T)}\n")
    buf.write(f"# d={path.d}\n")
    for key in sorted(path.metadata):
        buf.write(f"# {key}={path.metadata[key]}\n")
    buf.write("t,k,y\n")
    for t, k, y in zip(path.times, path.components, path.marks):
        buf.write(f"{fmt(t)},{int(k) + 1},{fmt(y)}\n")
    return buf.getvalue()


def write_path_csv(path, file):
    write_text(file, path_to_csv(path))


def read_path_csv(file, d=None):
    """Parse a path CSV. ``d`` defaults to the ``# d=`` header or the largest component."""
    try:
        lines = Path(file).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read path file {file}: {exc.strerror}") from exc
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition("=")
        meta[key.strip()] = value.strip()
        i += 1
    if "T" not in meta:
        raise FormatError(f"{file}: missing '# T=<horizon>' header line")
    if i >= len(lines) or [c.strip() for c in lines[i].split(",")] != ["t", "k", "y"]:
        raise FormatError(f"{file}: expected header 't,k,y' on line {i + 1}")
    rows = []
    for j, row in enumerate(csv.reader(lines[i + 1:]), start=i + 2):
        if not row:
            continue
        try:
            rows.append((float(row[0]), int(row[1]), float(row[2])))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{file}: bad row on line {j}: {row}") from exc
    try:
        T = float(meta.pop("T"))
        d_file = int(meta.pop("d")) if "d" in meta else None
    except ValueError as exc:
        raise FormatError(f"{file}: bad header value: {exc}") from exc
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    comps = arr[:, 1].astype(np.int64) - 1
    d = d or d_file or (int(comps.max()) + 1 if comps.size else 1)
    try:
        return MarkedPath(T, arr[:, 0], comps, arr[:, 2], d, meta)
    except ExciterError as exc:
        raise FormatError(f"{file}: {exc}") from exc


def path_to_dict(path):
    return {"T": path.T, "d": path.d, "t": path.times.tolist(),
            "k": (path.components + 1).tolist(), "y": path.marks.tolist(),
            "metadata": dict(path.metadata)}


def path_from_dict(doc):
    return MarkedPath(doc["T"], doc["t"], np.asarray(doc["k"], dtype=np.int64) - 1, doc["y"],
                      doc["d"], dict(doc.get("metadata", {})))


# ---------------------------------------------------------------------------
# Generic tables
# ---------------------------------------------------------------------------


def table_csv(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer))
                                                        else fmt(v)) for v in row) + "\n")
    return buf.getvalue()


def write_table_csv(file, header, rows):
    write_text(file, table_csv(header, rows))
