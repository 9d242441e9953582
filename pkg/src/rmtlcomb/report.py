"""Dataset ingestion and the two-table analysis report.

The descriptive table gives, per group, the RMTL of the event of interest,
the RMST treating competing events as censoring (RMSTi), the RC and the
RMST of the composite endpoint (RMSTc), each with a confidence interval.
The inference table lists the P-values of every two-sample test.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimators import Sample, aalen_johansen, rc, rmst, rmtl, select_tau
from .inference import (
    PermutationPlan,
    combined_tests,
    diff_star_test,
    diff_test,
    gray_test,
    rmst_diff_test,
)

COLUMNS = ("time", "status", "group")
MEASURES = ("RMTL", "RMSTi", "RC", "RMSTc")
TEST_ORDER = ("Gray", "Diff", "PComb", "FComb", "TComb", "DiffStar", "RMSTi", "RMSTc")


class InputError(ValueError):
    """Malformed or unusable input; the CLI exits with status 2."""


class DegenerateError(ValueError):
    """The data do not support the computation; the CLI exits with status 3."""


def parse_dataset(path) -> Sample:
    """Read a ``time,status,group`` CSV with a header row.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise InputError("empty file")
    header = [h.strip().lower() for h in rows[0]]
    if sorted(header) != sorted(COLUMNS):
        raise InputError(f"header must name the columns {','.join(COLUMNS)} (row 1)")
    pos = {name: header.index(name) for name in COLUMNS}
    times, statuses, groups = [], [], []
    for lineno, row in enumerate(rows[1:], 2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(COLUMNS):
            raise InputError(f"expected {len(COLUMNS)} columns, found {len(row)} (row {lineno})")
        raw = {name: row[pos[name]].strip() for name in COLUMNS}
        try:
            t = float(raw["time"])
        except ValueError:
            raise InputError(f"column time: cannot parse {raw['time']!r} (row {lineno})") from None
        if not math.isfinite(t) or t <= 0:
            raise InputError(f"time must be positive (row {lineno})")
        status = _parse_int(raw["status"], "status", lineno)
        if status not in (0, 1, 2):
            raise InputError(f"unknown status {status} (row {lineno})")
        group = _parse_int(raw["group"], "group", lineno)
        if group not in (1, 2):
            raise InputError(f"unknown group {group} (row {lineno})")
        times.append(t)
        statuses.append(status)
        groups.append(group)
    if not times:
        raise InputError("no data rows")
    return Sample(times, statuses, groups)


def _parse_int(value: str, column: str, lineno: int) -> int:
    try:
        x = float(value)
    except ValueError:
        raise InputError(f"column {column}: cannot parse {value!r} (row {lineno})") from None
    if not x.is_integer():
        raise InputError(f"column {column}: {value!r} is not an integer (row {lineno})")
    return int(x)


@dataclass
class Interval:
    point: float
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.point <= self.upper:
            raise ValueError("interval is not well ordered")

    def text(self, digits: int = 2) -> str:
        return f"{self.point:.{digits}f} ({self.lower:.{digits}f}, {self.upper:.{digits}f})"


@dataclass
class GroupSummary:
    group: int
    n: int
    events_interest: int
    events_competing: int
    censored: int
    measures: dict  # measure name -> Interval


@dataclass
class TestRow:
    method: str
    statistic: float | None
    p_value: float | None
    note: str = ""

    __test__ = False


@dataclass
class AnalysisReport:
    tau: float
    tau_source: str
    alpha: float
    seed: int
    permutations: int
    groups: list
    differences: dict  # measure name -> Interval, group 1 minus group 2
    tests: list
    source: str = ""
    notes: list = field(default_factory=list)

    def test(self, method: str) -> TestRow:
        for row in self.tests:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisReport":
        groups = [
            GroupSummary(**{**g, "measures": {k: Interval(**v) for k, v in g["measures"].items()}})
            for g in data["groups"]
        ]
        return cls(
            **{
                **data,
                "groups": groups,
                "differences": {k: Interval(**v) for k, v in data["differences"].items()},
                "tests": [TestRow(**t) for t in data["tests"]],
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        level = round(100 * (1 - self.alpha))
        lines = []
        if self.source:
            lines.append(f"Data: {self.source}")
        lines.append(f"tau = {self.tau:g} ({self.tau_source})")
        lines.append(f"alpha = {self.alpha:g}; permutations = {self.permutations}; seed = {self.seed}")
        lines.append("")
        lines.append(f"Descriptive statistics (estimate and {level}% CI)")
        head = ["Measure"] + [f"Group {g.group} (n={g.n})" for g in self.groups] + ["Difference (1 - 2)"]
        body = [
            [m] + [g.measures[m].text() for g in self.groups] + [self.differences[m].text()]
            for m in MEASURES
        ]
        counts = [
            ["Events of interest"] + [str(g.events_interest) for g in self.groups] + [""],
            ["Competing events"] + [str(g.events_competing) for g in self.groups] + [""],
            ["Censored"] + [str(g.censored) for g in self.groups] + [""],
        ]
        lines += _align([head] + counts + body)
        lines.append("")
        lines.append("Inference")
        rows = [["Test", "Statistic", "P-value", "Note"]]
        for t in self.tests:
            rows.append([t.method, _fmt(t.statistic, 4), _fmt(t.p_value, 4), t.note])
        lines += _align(rows)
        for note in self.notes:
            lines.append(f"Note: {note}")
        return "\n".join(lines) + "\n"


def _fmt(x, digits):
    return "NA" if x is None else f"{x:.{digits}f}"


def _align(rows) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:-1], widths[1:-1])]
        cells.append(r[-1].ljust(widths[-1]) if len(r) > 1 else "")
        out.append("  ".join(cells).rstrip())
    return out


def _interval(est, alpha) -> Interval:
    lo, hi = est.ci(alpha)
    return Interval(float(est.point), float(lo), float(hi))


def _group_measures(sample: Sample, tau: float, alpha: float) -> dict:
    return {
        "RMTL": _interval(rmtl(aalen_johansen(sample, 1), tau), alpha),
        "RMSTi": _interval(rmst(sample, tau, (1,)), alpha),
        "RC": _interval(rc(sample, tau), alpha),
        "RMSTc": _interval(rmst(sample, tau, (1, 2)), alpha),
    }


def _row(outcome) -> TestRow:
    note = ""
    if outcome.meta.get("unstable_variance"):
        note = "variance unstable"
    if "stage" in outcome.meta:
        note = f"stage {outcome.meta['stage']}"
        if outcome.meta.get("warning"):
            note += "; " + outcome.meta["warning"]
    return TestRow(outcome.method, float(outcome.statistic), float(outcome.p_value), note)


def analyze(
    sample: Sample,
    tau: float | None = None,
    alpha: float = 0.05,
    perms: int = 200,
    seed: int = 0,
    n_jobs: int = 1,
    source: str = "",
) -> AnalysisReport:
    """Run every estimator and test on a two-group sample."""
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    if perms < 1:
        raise InputError("permutation count must be >= 1")
    try:
        sample.require_two_groups()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if tau is None:
        try:
            tau = select_tau(sample)
        except ValueError:
            raise DegenerateError(
                "tau undefined: a group has no events of interest; supply it with --tau"
            ) from None
        source_tau = "rule: smaller of the groups' last event-of-interest times"
    else:
        tau = float(tau)
        source_tau = "user-supplied"
        for g in (1, 2):
            last = float(sample.subset(g).time[-1])
            if not 0 < tau <= last:
                raise InputError(f"invalid tau {tau:g}: must lie in (0, {last:g}] for group {g}")

    subsets = [sample.subset(g) for g in (1, 2)]
    try:
        measures = [_group_measures(s, tau, alpha) for s in subsets]
    except ValueError as exc:
        raise DegenerateError(str(exc)) from None
    groups = []
    for g, s, m in zip((1, 2), subsets, measures):
        groups.append(
            GroupSummary(
                group=g,
                n=len(s),
                events_interest=int(np.sum(s.status == 1)),
                events_competing=int(np.sum(s.status == 2)),
                censored=int(np.sum(s.status == 0)),
                measures=m,
            )
        )

    plan = PermutationPlan(count=perms, seed=seed, n_jobs=n_jobs)
    try:
        gray = gray_test(sample)
        diff = diff_test(sample, tau, alpha)
        combined = combined_tests(sample, tau, plan, alpha)
    except ValueError as exc:
        raise DegenerateError(str(exc)) from None
    outcomes = {"Gray": gray, "Diff": diff, **combined}
    notes = []
    for name, fn in (
        ("DiffStar", lambda: diff_star_test(sample, tau, alpha)),
        ("RMSTi", lambda: rmst_diff_test(sample, tau, alpha, "interest")),
        ("RMSTc", lambda: rmst_diff_test(sample, tau, alpha, "composite")),
    ):
        try:
            outcomes[name] = fn()
        except ValueError as exc:
            outcomes[name] = None
            notes.append(f"{name}: {exc}")

    differences = {}
    effect_of = {"RMTL": "Diff", "RC": "DiffStar", "RMSTi": "RMSTi", "RMSTc": "RMSTc"}
    for m in MEASURES:
        out = outcomes.get(effect_of[m])
        if out is not None and out.effect is not None:
            e = out.effect
            differences[m] = Interval(float(e.point), float(e.ci_lower), float(e.ci_upper))
        else:
            point = measures[0][m].point - measures[1][m].point
            differences[m] = Interval(point, point, point)
    tests = []
    for name in TEST_ORDER:
        out = outcomes[name]
        tests.append(_row(out) if out is not None else TestRow(name, None, None, "undefined"))
    return AnalysisReport(
        tau=float(tau),
        tau_source=source_tau,
        alpha=alpha,
        seed=seed,
        permutations=perms,
        groups=groups,
        differences=differences,
        tests=tests,
        source=source,
        notes=notes,
    )


def write_figure_data(sample: Sample, directory) -> list[Path]:
    """Per group, the CIF of interest and one minus the competing CIF.

    Each curve goes to its own ``time,value`` CSV with one row per knot of
    the right-continuous step function, starting at time 0.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for g in (1, 2):
        sub = sample.subset(g)
        curves = {
            f"group{g}_cif_interest.csv": aalen_johansen(sub, 1).cif,
            f"group{g}_one_minus_cif_competing.csv": aalen_johansen(sub, 2).cif.complement(),
        }
        for name, fn in curves.items():
            path = directory / name
            pts = fn.points()
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["time", "value"])
                for t, v in pts:
                    w.writerow([repr(float(t)), repr(float(v))])
            written.append(path)
    return written
