"""Bit-stable CSV reports for Monte Carlo runs and generic result tables.

Floats are written with 17 significant digits (``repr``-exact round trip), so
identical results give byte-identical files. Wall-clock times are kept out
of the report and written to a ``.timing.csv`` sidecar.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

from scipy.stats import beta, binom

REPORT_SCHEMA = "lqstab-report/1"
TABLE_SCHEMA = "lqstab-table/1"
FAILURE_REASONS = ("cert-false", "empty-set", "singular-gram", "overflow", "solver-nonconv")
COLUMNS = ("replicate", "seed", "success", "reason", "spectral_radius", "epsilon_tilde",
           "redraws", "episode_lengths")


def fmt(value):
    """Canonical text for a table cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    if isinstance(value, (tuple, list)):
        return ";".join(fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ReplicateRow:
    replicate: int
    seed: int
    success: bool
    reason: str
    spectral_radius: float
    epsilon_tilde: float
    redraws: int
    episode_lengths: tuple
    wall_time: float = field(default=math.nan, compare=False)

    def cells(self):
        return [fmt(getattr(self, name)) for name in COLUMNS]


def clopper_pearson(successes, n, confidence):
    """Two-sided exact binomial interval; ``(nan, nan)`` when ``n == 0``."""
    if n == 0:
        return math.nan, math.nan
    a = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(beta.ppf(a / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(beta.ppf(1 - a / 2, successes + 1, n - successes))
    return lo, hi


@dataclass(frozen=True)
class Aggregate:
    replicates: int
    successes: int
    frequency: float
    ci_low: float
    ci_high: float
    confidence: float
    target: float
    p_value: float
    failures: tuple

    @property
    def defined(self):
        return self.replicates > 0

    @classmethod
    def from_rows(cls, rows, confidence, target):
        n = len(rows)
        k = sum(1 for row in rows if row.success)
        lo, hi = clopper_pearson(k, n, confidence)
        # one-sided: probability of at most k successes if the true rate were the target
        pval = float(binom.cdf(k, n, target)) if n else math.nan
        counts = {reason: 0 for reason in FAILURE_REASONS}
        other = 0
        for row in rows:
            if row.success:
                continue
            if row.reason in counts:
                counts[row.reason] += 1
            else:
                other += 1
        failures = tuple(counts.items()) + (("other", other),)
        return cls(n, k, k / n if n else math.nan, lo, hi, float(confidence), float(target),
                   pval, failures)

    def passes(self, level=None):
        """Frequency at least the target and not rejected by the one-sided binomial test."""
        level = 1.0 - self.confidence if level is None else level
        return self.defined and self.frequency >= self.target and self.p_value >= level

    def header(self):
        fields = [("replicates", self.replicates), ("successes", self.successes),
                  ("frequency", self.frequency), ("defined", self.defined),
                  ("ci_low", self.ci_low), ("ci_high", self.ci_high),
                  ("confidence", self.confidence), ("target", self.target),
                  ("p_value", self.p_value)]
        agg = " ".join(f"{k}={fmt(v)}" for k, v in fields)
        fails = " ".join(f"{k}={v}" for k, v in self.failures)
        return [f"# aggregate {agg}", f"# failures {fails}"]


@dataclass(frozen=True)
class RunReport:
    rows: tuple
    aggregate: Aggregate
    config_echo: str = ""
    sizing: str = ""


def report_to_text(report):
    out = io.StringIO()
    out.write(f"# {REPORT_SCHEMA}\n")
    out.write(f"# config {report.config_echo}\n")
    out.write(f"# sizing {report.sizing}\n")
    for line in report.aggregate.header():
        out.write(line + "\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in report.rows:
        writer.writerow(row.cells())
    return out.getvalue()


def timing_to_text(report):
    lines = ["replicate,wall_time"]
    lines += [f"{row.replicate},{fmt(float(row.wall_time))}" for row in report.rows]
    return "\n".join(lines) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit_report(report, path, timing=True):
    """Write the report CSV and, unless ``timing=False``, the ``.timing.csv`` sidecar."""
    _write(path, report_to_text(report))
    if timing:
        _write(str(path) + ".timing.csv", timing_to_text(report))


def _parse_float(text):
    return float(text) if text else math.nan


def _parse_fields(line, prefix):
    body = line[len(prefix):].strip()
    return dict(item.split("=", 1) for item in body.split()) if body else {}


def parse_report(text):
    """Inverse of :func:`report_to_text` (wall times are not part of the report)."""
    lines = text.splitlines()
    if not lines or lines[0] != f"# {REPORT_SCHEMA}":
        raise ValueError(f"not a {REPORT_SCHEMA} file")
    meta = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if not ln.startswith("#")]
    config_echo = next(ln[len("# config "):] for ln in meta if ln.startswith("# config"))
    sizing = next(ln[len("# sizing"):].strip() for ln in meta if ln.startswith("# sizing"))
    agg = _parse_fields(next(ln for ln in meta if ln.startswith("# aggregate")), "# aggregate")
    fails = _parse_fields(next(ln for ln in meta if ln.startswith("# failures")), "# failures")
    reader = csv.reader(body)
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ValueError("unexpected report columns")
    rows = []
    for cells in reader:
        d = dict(zip(COLUMNS, cells))
        lengths = tuple(int(v) for v in d["episode_lengths"].split(";") if v)
        rows.append(ReplicateRow(int(d["replicate"]), int(d["seed"]), d["success"] == "true",
                                 d["reason"], _parse_float(d["spectral_radius"]),
                                 _parse_float(d["epsilon_tilde"]), int(d["redraws"]), lengths))
    aggregate = Aggregate(int(agg["replicates"]), int(agg["successes"]),
                          float(agg["frequency"]), float(agg["ci_low"]), float(agg["ci_high"]),
                          float(agg["confidence"]), float(agg["target"]), float(agg["p_value"]),
                          tuple((k, int(v)) for k, v in fails.items()))
    return RunReport(tuple(rows), aggregate, config_echo, sizing)


def table_to_text(title, columns, rows, meta=None):
    """Generic bit-stable CSV table with a schema line and ``key=value`` metadata."""
    out = io.StringIO()
    out.write(f"# {TABLE_SCHEMA} {title}\n")
    for key, value in (meta or {}).items():
        out.write(f"# {key}={fmt(value)}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return out.getvalue()


def emit_table(path, title, columns, rows, meta: Optional[dict] = None):
    _write(path, table_to_text(title, columns, rows, meta))
