"""Side-by-side deltas between two verification reports."""
from __future__ import annotations

import dataclasses
import os

from frboost.evalbench.report import VerificationReport


@dataclasses.dataclass
class DeltaTable:
    groups: list
    metrics: list
    deltas: dict  # (group, metric) -> b - a
    avg_delta: float | None
    std_delta: float | None

    def format(self, metric: str = "accuracy", label: str = "increase") -> str:
        """One row per report-style column, signed with two decimals (``+1.00``)."""
        head = [str(g) for g in self.groups] + ["Avg", "Std"]
        cells = [_signed(self.deltas.get((g, metric))) for g in self.groups]
        cells += [_signed(self.avg_delta), _signed(self.std_delta)]
        width = max(len(c) for c in head + cells + [label])

        def line(first, xs):
            return " | ".join([first.ljust(width)] + [x.rjust(width) for x in xs])

        return "\n".join([line("", head), line(label, cells)])


def _signed(x) -> str:
    return "n/a" if x is None else f"{x:+.2f}"


def _as_report(r) -> VerificationReport:
    if isinstance(r, VerificationReport):
        return r
    from frboost.runner.stages import load_report

    return load_report(r if isinstance(r, (str, os.PathLike)) else str(r))


def compare_runs(report_a, report_b) -> DeltaTable:
    """Per-group metric deltas (b - a) plus avg/std deltas; reports must share groups and metrics."""
    a, b = _as_report(report_a), _as_report(report_b)
    if set(a.per_group) != set(b.per_group):
        raise ValueError(f"group sets differ: {sorted(a.per_group, key=str)} vs {sorted(b.per_group, key=str)}")
    groups = sorted(a.per_group, key=str)
    metrics = sorted(a.per_group[groups[0]]) if groups else []
    for g in groups:
        if set(a.per_group[g]) != set(b.per_group[g]):
            raise ValueError(f"group {g!r}: metric keys differ")
    deltas = {(g, m): b.per_group[g][m] - a.per_group[g][m] for g in groups for m in a.per_group[g]}
    avg = b.avg - a.avg if a.avg is not None and b.avg is not None else None
    std = b.std - a.std if a.std is not None and b.std is not None else None
    return DeltaTable(groups, metrics, deltas, avg, std)
