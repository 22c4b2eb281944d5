"""Bit-exact ingestion and emission of cohort data, counting-process data,
run metadata, and result tables.

Data files are comma-separated with a fixed header; times carry 17
significant digits so that write -> read round-trips every float64
exactly.  Parsing is strict: a missing column, an unknown column, a
malformed number, an out-of-range event flag, or a duplicate
(id, cohort) pair each raise SchemaError naming the row.  Every writer
is deterministic (fixed column order, fixed formatting, no timestamps),
which is what makes repeat runs byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math

import numpy as np
import pandas as pd

from .survcore import BiasReport  # noqa: F401  (re-exported for table consumers)


class SchemaError(ValueError):
    """A data file does not match its published schema."""


COHORT_REQUIRED = ("id", "cohort", "entry_time", "event_time", "event")
COHORT_OPTIONAL = ("wait_time", "treatment_start")
COHORT_LATENT = ("frailty_rate", "g_carrier", "untreated_time", "treated_time")
COHORT_LABELS = ("control", "treated")

COUNTING_REQUIRED = ("subject_id", "cluster_id", "start", "stop", "status", "stratum")

RESULT_COLUMNS = (
    "method", "estimand", "hr", "ci_low", "ci_high", "se_log_hr",
    "n_subjects", "n_events", "robust_se_used",
    "percent_bias_unadjusted", "percent_bias_eliminated",
    "error", "warnings",
)

_INT_COLUMNS = {"id", "event", "g_carrier", "subject_id", "cluster_id", "status", "stratum"}


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return format(float(value), ".17g")
    return str(value)


def _parse_float(text, row, column):
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"row {row}: column '{column}': cannot parse {text!r} as a number") from None
    if math.isinf(value) or math.isnan(value):
        raise SchemaError(f"row {row}: column '{column}': non-finite value {text!r}")
    return value


def _parse_int(text, row, column):
    try:
        return int(text)
    except ValueError:
        raise SchemaError(f"row {row}: column '{column}': cannot parse {text!r} as an integer") from None


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path):
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty (no header)") from None
        rows = list(reader)
    return header, rows


# ---------------------------------------------------------------------------
# cohort files
# ---------------------------------------------------------------------------


def _cohort_columns(frame):
    cols = list(COHORT_REQUIRED)
    for c in COHORT_OPTIONAL + COHORT_LATENT:
        if c in frame.columns:
            cols.append(c)
    cols.extend(sorted(c for c in frame.columns if c.startswith("cov_")))
    return cols


def write_cohort(frame, path):
    """Write subject records as CSV; column order and formatting are fixed."""
    missing = [c for c in COHORT_REQUIRED if c not in frame.columns]
    if missing:
        raise SchemaError(f"cohort frame is missing required columns {missing}")
    cols = _cohort_columns(frame)
    _write_table(path, cols, _iter_formatted(frame, cols))


def _iter_formatted(frame, cols):
    arrays = []
    for c in cols:
        values = frame[c].to_numpy()
        if c in _INT_COLUMNS:
            arrays.append([("" if (isinstance(v, float) and math.isnan(v)) else str(int(v))) for v in values])
        elif c == "cohort":
            arrays.append([str(v) for v in values])
        else:
            arrays.append([_fmt(float(v)) for v in values])
    return zip(*arrays)


def read_cohort(path, include_latent=False):
    """Read a cohort CSV into a typed DataFrame, strictly validated.

    Latent generator columns are dropped unless ``include_latent``;
    row order is preserved and nothing is coerced silently.
    """
    header, rows = _read_rows(path)
    known = set(COHORT_REQUIRED) | set(COHORT_OPTIONAL) | set(COHORT_LATENT)
    missing = [c for c in COHORT_REQUIRED if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    dupes = {c for c in header if header.count(c) > 1}
    if dupes:
        raise SchemaError(f"{path}: duplicated header columns {sorted(dupes)}")
    unknown = [c for c in header if c not in known and not c.startswith("cov_")]
    if unknown:
        raise SchemaError(f"{path}: unknown columns {unknown}; covariates must use the 'cov_' prefix")

    idx = {c: header.index(c) for c in header}
    n_fields = len(header)
    data = {c: [] for c in header}
    seen = {}
    for r, row in enumerate(rows, start=2):  # header is line 1
        if len(row) != n_fields:
            raise SchemaError(f"row {r}: expected {n_fields} fields, found {len(row)}")
        rid = _parse_int(row[idx["id"]], r, "id")
        cohort = row[idx["cohort"]]
        if cohort not in COHORT_LABELS:
            raise SchemaError(f"row {r}: column 'cohort': {cohort!r} is not one of {COHORT_LABELS}")
        key = (rid, cohort)
        if key in seen:
            raise SchemaError(f"row {r}: duplicate (id, cohort) pair {key} (first at row {seen[key]})")
        seen[key] = r
        event = _parse_int(row[idx["event"]], r, "event")
        if event not in (0, 1):
            raise SchemaError(f"row {r}: column 'event': must be 0 or 1, got {event}")
        for c in header:
            raw = row[idx[c]]
            if c == "id":
                data[c].append(rid)
            elif c == "cohort":
                data[c].append(cohort)
            elif c == "event":
                data[c].append(event)
            elif c == "g_carrier":
                data[c].append(math.nan if raw == "" else _parse_int(raw, r, c))
            else:
                value = _parse_float(raw, r, c)
                if c in ("entry_time", "event_time") and math.isnan(value):
                    raise SchemaError(f"row {r}: column '{c}': value is required")
                data[c].append(value)
    frame = pd.DataFrame({c: data[c] for c in header})
    frame["id"] = frame["id"].astype(np.int64)
    frame["event"] = frame["event"].astype(np.int64)
    if not include_latent:
        frame = frame.drop(columns=[c for c in COHORT_LATENT if c in frame.columns])
    return frame


# ---------------------------------------------------------------------------
# counting-process files
# ---------------------------------------------------------------------------


def write_counting_process(frame, path):
    missing = [c for c in COUNTING_REQUIRED if c not in frame.columns]
    if missing:
        raise SchemaError(f"counting-process frame is missing required columns {missing}")
    extra = [c for c in frame.columns if c not in COUNTING_REQUIRED]
    cols = list(COUNTING_REQUIRED) + sorted(extra)
    arrays = []
    for c in cols:
        values = frame[c].to_numpy()
        if c in _INT_COLUMNS:
            arrays.append([str(int(v)) for v in values])
        else:
            arrays.append([_fmt(float(v)) for v in values])
    _write_table(path, cols, zip(*arrays))


def read_counting_process(path):
    header, rows = _read_rows(path)
    missing = [c for c in COUNTING_REQUIRED if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    idx = {c: header.index(c) for c in header}
    data = {c: [] for c in header}
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"row {r}: expected {len(header)} fields, found {len(row)}")
        for c in header:
            raw = row[idx[c]]
            if c in ("subject_id", "cluster_id", "status", "stratum"):
                data[c].append(_parse_int(raw, r, c))
            else:
                data[c].append(_parse_float(raw, r, c))
        if data["status"][-1] not in (0, 1):
            raise SchemaError(f"row {r}: column 'status': must be 0 or 1, got {data['status'][-1]}")
    frame = pd.DataFrame(data)
    for c in ("subject_id", "cluster_id", "status", "stratum"):
        frame[c] = frame[c].astype(np.int64)
    return frame


def validate_counting_process(frame):
    """Full invariant check on a counting-process dataset.

    Verifies stop > start everywhere, non-overlapping intervals per
    (subject, stratum), and at most one event per (subject, stratum)
    occurring on that subject's last interval.
    """
    start = frame["start"].to_numpy(dtype=float)
    stop = frame["stop"].to_numpy(dtype=float)
    status = frame["status"].to_numpy()
    if np.any(stop <= start):
        bad = int(np.flatnonzero(stop <= start)[0])
        raise SchemaError(f"row {bad}: stop must exceed start")
    order = np.lexsort((start, frame["stratum"].to_numpy(), frame["subject_id"].to_numpy()))
    sid = frame["subject_id"].to_numpy()[order]
    strat = frame["stratum"].to_numpy()[order]
    s_sorted, e_sorted, st_sorted = start[order], stop[order], status[order]
    same = (sid[1:] == sid[:-1]) & (strat[1:] == strat[:-1])
    overlap = same & (s_sorted[1:] < e_sorted[:-1])
    if np.any(overlap):
        where = int(np.flatnonzero(overlap)[0])
        raise SchemaError(
            f"subject {sid[where + 1]} stratum {strat[where + 1]}: overlapping intervals"
        )
    early_event = same & (st_sorted[:-1] == 1)
    if np.any(early_event):
        where = int(np.flatnonzero(early_event)[0])
        raise SchemaError(
            f"subject {sid[where]} stratum {strat[where]}: event before the last interval"
        )
    return frame


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ResultTable:
    """Estimator results plus optional truth rows and bias columns."""

    rows: list  # of estimators.ResultRow

    @classmethod
    def from_rows(cls, rows):
        return cls(rows=list(rows))

    def to_records(self):
        records = []
        for row in self.rows:
            res = row.result
            bias = getattr(row, "bias", None)
            records.append(
                {
                    "method": row.method,
                    "estimand": row.estimand,
                    "hr": None if res is None else res.hr,
                    "ci_low": None if res is None else res.ci_low,
                    "ci_high": None if res is None else res.ci_high,
                    "se_log_hr": None if res is None else res.se_log_hr,
                    "n_subjects": None if res is None else res.n_subjects,
                    "n_events": None if res is None else res.n_events,
                    "robust_se_used": None if res is None else res.robust_se_used,
                    "percent_bias_unadjusted": None if bias is None else bias.percent_bias_unadjusted,
                    "percent_bias_eliminated": None if bias is None else bias.percent_bias_eliminated,
                    "error": row.error,
                    "warnings": "; ".join(getattr(res, "warnings", ()) or ()) if res else None,
                }
            )
        return records


def format_hr_ci(hr, ci_low, ci_high, decimals=2):
    """Display form used by the result tables, e.g. ``1.55 (1.55-1.56)``."""
    return f"{hr:.{decimals}f} ({ci_low:.{decimals}f}-{ci_high:.{decimals}f})"


def write_results(table, path, fmt="csv"):
    """Write a ResultTable as machine CSV or as an aligned text table."""
    if fmt == "csv":
        records = table.to_records()
        rows = []
        for rec in records:
            rows.append(tuple(_fmt_result_value(rec[c]) for c in RESULT_COLUMNS))
        _write_table(path, RESULT_COLUMNS, rows)
    elif fmt == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_text_table(table))
    else:
        raise ValueError(f"unknown results format {fmt!r}")


def _fmt_result_value(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return _fmt(float(value))
    return str(value)


def read_results(path):
    """Read a results CSV back into plain records (floats or None)."""
    header, rows = _read_rows(path)
    missing = [c for c in RESULT_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing result columns {missing}")
    idx = {c: header.index(c) for c in header}
    records = []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"row {r}: expected {len(header)} fields, found {len(row)}")
        rec = {}
        for c in RESULT_COLUMNS:
            raw = row[idx[c]]
            if c in ("method", "estimand", "error", "warnings"):
                rec[c] = raw or None
            elif c in ("n_subjects", "n_events"):
                rec[c] = None if raw == "" else _parse_int(raw, r, c)
            elif c == "robust_se_used":
                rec[c] = None if raw == "" else bool(_parse_int(raw, r, c))
            else:
                value = float(raw) if raw != "" else None
                if raw != "" and (math.isinf(value)):
                    raise SchemaError(f"row {r}: column '{c}': non-finite value")
                rec[c] = value
        records.append(rec)
    return records


def render_text_table(table):
    """Aligned human-readable table: estimates as ``HR (lo-hi)`` with 2
    decimals, truth rows with 3 decimals and no interval."""
    records = table.to_records()
    header = ("method", "estimand", "hazard ratio (95% CI)", "% bias removed", "notes")
    lines = []
    for rec in records:
        if rec["hr"] is None:
            display = "failed"
        elif rec["method"] == "true":
            display = f"{rec['hr']:.3f}"
        else:
            display = format_hr_ci(rec["hr"], rec["ci_low"], rec["ci_high"])
        pbe = rec["percent_bias_eliminated"]
        if rec["method"] in ("true", "unadjusted") or pbe is None:
            bias_txt = "-"
        elif math.isnan(pbe):
            bias_txt = "undefined"
        else:
            bias_txt = f"{pbe:.1f}%"
        notes = rec["error"] or rec["warnings"] or ""
        lines.append((rec["method"], rec["estimand"].upper(), display, bias_txt, notes))
    widths = [max(len(header[j]), *(len(row[j]) for row in lines)) if lines else len(header[j])
              for j in range(len(header))]
    def fmt_line(parts):
        return "  ".join(str(p).ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [fmt_line(header), fmt_line(["-" * w for w in widths])]
    out.extend(fmt_line(row) for row in lines)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# metadata sidecars
# ---------------------------------------------------------------------------


def metadata_path(path):
    return str(path) + ".meta"


def write_metadata(path, mapping):
    """Key-value sidecar next to an output file; values are JSON-encoded."""
    lines = [f"{key} = {json.dumps(mapping[key], sort_keys=True)}\n" for key in mapping]
    with open(metadata_path(path), "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_metadata(path):
    out = {}
    with open(metadata_path(path), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition(" = ")
            out[key] = json.loads(raw)
    return out


def config_digest(mapping):
    """Stable hash of a configuration mapping, for reproducibility records."""
    canon = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
