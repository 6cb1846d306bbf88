"""Per-group verification reports with cross-group average and spread."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from frboost.evalbench.metrics import lfw_accuracy, roc_sweep, tpr_at_fpr
from frboost.evalbench.protocols import PairProtocol
from frboost.evalbench.scoring import score_pairs


def mean_and_std(values) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; a single value has spread 0."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    mean = math.fsum(v) / v.size
    if v.size == 1:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2) / (v.size - 1))


@dataclasses.dataclass
class VerificationReport:
    """``per_group`` maps group -> {metric: value}; ``modes`` maps metric -> how it was computed."""

    per_group: dict
    avg: float | None
    std: float | None
    modes: dict = dataclasses.field(default_factory=dict)
    flags: dict = dataclasses.field(default_factory=dict)

    def rows(self) -> list[tuple]:
        out = []
        for g in sorted(self.per_group, key=str):
            for metric, value in self.per_group[g].items():
                out.append((g, metric, value, self.modes.get(metric, "")))
        if self.avg is not None:
            out.append(("all", "avg_accuracy", self.avg, self.modes.get("accuracy", "")))
            out.append(("all", "std_accuracy", self.std, "sample"))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "value", "mode"])
        for g, metric, value, mode in self.rows():
            w.writerow([g, metric, repr(float(value)), mode])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "per_group": {str(g): m for g, m in self.per_group.items()},
            "avg": self.avg, "std": self.std, "modes": self.modes,
            "flags": {str(k): v for k, v in self.flags.items()},
        }, indent=2, sort_keys=True)

    def save(self, stem: str | os.PathLike) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json() + "\n", encoding="utf-8")
        return csv_path, json_path


def report(per_group_metrics: dict, modes: dict | None = None, flags: dict | None = None) -> VerificationReport:
    """Average and spread of per-group ``accuracy`` over the groups that have one."""
    if not per_group_metrics:
        raise ValueError("need at least one group")
    accs = [m["accuracy"] for m in per_group_metrics.values() if m.get("accuracy") is not None]
    avg, std = mean_and_std(accs) if accs else (None, None)
    return VerificationReport({g: dict(m) for g, m in per_group_metrics.items()}, avg, std, dict(modes or {}), dict(flags or {}))


def evaluate(
    embedder,
    protocol: PairProtocol,
    fpr_targets=(1e-3, 1e-4),
    loader=None,
    folds: int = 10,
    seed: int = 0,
    accuracy: str = "cv",
    chunk_size: int = 1 << 16,
    sweep: bool = False,
    table=None,
) -> VerificationReport:
    """Score ``protocol`` and build a report.

    Accuracy is computed for groups with explicit negatives (``accuracy``
    selects the cross-validated or the best-single-threshold figure, both are
    stored). TPR@FPR uses the exact rule unless ``sweep`` is set. A
    precomputed embedding ``table`` skips the embedding pass.
    """
    scores = score_pairs(embedder, protocol, chunk_size, loader, table, materialize_implicit=False)
    per_group, flags = {}, {}
    for g, (pos, neg) in scores.items():
        m = {}
        if not callable(neg):
            res = lfw_accuracy(pos, neg, folds, seed)
            m["accuracy"] = res.accuracy if accuracy == "cv" else res.best_threshold_accuracy
            m["accuracy_best_threshold"] = res.best_threshold_accuracy
        for target in fpr_targets:
            r = tpr_at_fpr(roc_sweep(pos, neg), fpr_target=target, mode="sweep") if sweep else tpr_at_fpr(pos, neg, target)
            m[f"tpr@fpr={target:g}"] = r.tpr
            if r.below_resolution:
                flags[(g, target)] = "target below resolution"
        per_group[g] = m
    modes = {"accuracy": accuracy, "accuracy_best_threshold": "best"}
    modes.update({f"tpr@fpr={t:g}": "sweep" if sweep else "exact" for t in fpr_targets})
    flags = {f"{g}@{t:g}": v for (g, t), v in flags.items()}
    return report(per_group, modes, flags)
