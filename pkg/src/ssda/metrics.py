"""Accuracy evaluation, pseudo-label quality diagnostics, and run comparison.

The pseudo-label report splits the unlabeled pool four ways by crossing
(max prob >= mu) with (argmax == truth).  The "rescuable" bucket - below the
threshold but correctly classified - is the population the distillation
stage is supposed to recover.  Diagnostics run on un-augmented features so
the reported counts are free of augmentation noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Sample
from .model import ModelParams, forward_batch

PRESET_ORDER = (
    "source-only",
    "uda",
    "mt",
    "fixmatch",
    "anchors",
    "anchors-fixmatch",
    "anchors-mt",
    "clmt",
)


@dataclass(frozen=True)
class PseudoLabelStats:
    confident_correct: int
    confident_wrong: int
    rescuable: int      # below threshold, argmax correct
    below_wrong: int
    pass_rate: float
    mu: float

    @property
    def total(self) -> int:
        return self.confident_correct + self.confident_wrong + self.rescuable + self.below_wrong

    def to_dict(self) -> dict:
        return {
            "confident_correct": self.confident_correct,
            "confident_wrong": self.confident_wrong,
            "rescuable": self.rescuable,
            "below_wrong": self.below_wrong,
            "pass_rate": self.pass_rate,
            "mu": self.mu,
        }


def _predict(params: ModelParams, samples: list[Sample]) -> np.ndarray:
    X = np.stack([s.features for s in samples])
    return forward_batch(params, X).probs


def accuracy(params: ModelParams, samples: list[Sample]) -> float:
    """Argmax accuracy in percent; ties resolve to the lowest class index."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate accuracy on an empty sample set")
    labels = np.array([s.label for s in samples])
    if any(s.label is None for s in samples):
        raise ValueError("accuracy needs labeled samples")
    preds = _predict(params, samples).argmax(axis=1)
    return float((preds == labels).mean() * 100.0)


def per_class_accuracy(params: ModelParams, samples: list[Sample], num_classes: int) -> list[float | None]:
    """Percent accuracy per class; None where a class has no samples."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate accuracy on an empty sample set")
    labels = np.array([s.label for s in samples])
    preds = _predict(params, samples).argmax(axis=1)
    out: list[float | None] = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float((preds[sel] == c).mean() * 100.0) if sel.any() else None)
    return out


def pseudo_label_report(
    params: ModelParams,
    unlabeled_pool: list[Sample],
    eval_labels: dict[int, int],
    mu: float,
) -> PseudoLabelStats:
    """Categorise each unlabeled sample by confidence gate and correctness."""
    samples = list(unlabeled_pool)
    missing = [s.id for s in samples if s.id not in eval_labels]
    if missing:
        raise ValueError(f"{len(missing)} pool samples have no sealed label (e.g. id {missing[0]})")
    if len(samples) == 0:
        raise ValueError("cannot report pseudo-label stats on an empty pool")
    probs = _predict(params, samples)
    max_probs = probs.max(axis=1)
    preds = probs.argmax(axis=1)
    truth = np.array([eval_labels[s.id] for s in samples])
    passed = max_probs >= mu
    correct = preds == truth
    cc = int(np.sum(passed & correct))
    cw = int(np.sum(passed & ~correct))
    rc = int(np.sum(~passed & correct))
    bw = int(np.sum(~passed & ~correct))
    return PseudoLabelStats(
        confident_correct=cc,
        confident_wrong=cw,
        rescuable=rc,
        below_wrong=bw,
        pass_rate=float((cc + cw) / len(samples)),
        mu=float(mu),
    )


@dataclass
class ExperimentReport:
    preset: str
    seed: int
    k_shot: int
    config: dict
    config_hash: str
    benchmark_manifest: dict
    eval_model: str
    stage1_target_accuracy: float
    stage2_student_target_accuracy: float | None
    stage2_teacher_target_accuracy: float | None
    final_target_accuracy: float
    per_class_accuracy: list
    stage1_pseudo_stats: dict | None
    stage2_pseudo_stats: dict | None
    pseudo_label_series: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    schema_version: int = 1

    def to_json_dict(self) -> dict:
        """Deterministic report payload; wall clock is deliberately excluded
        so identical runs serialise byte-identically."""
        return {
            "schema_version": self.schema_version,
            "preset": self.preset,
            "seed": self.seed,
            "k_shot": self.k_shot,
            "config": self.config,
            "config_hash": self.config_hash,
            "benchmark_manifest": self.benchmark_manifest,
            "eval_model": self.eval_model,
            "stage1_target_accuracy": self.stage1_target_accuracy,
            "stage2_student_target_accuracy": self.stage2_student_target_accuracy,
            "stage2_teacher_target_accuracy": self.stage2_teacher_target_accuracy,
            "final_target_accuracy": self.final_target_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "stage1_pseudo_stats": self.stage1_pseudo_stats,
            "stage2_pseudo_stats": self.stage2_pseudo_stats,
            "pseudo_label_series": self.pseudo_label_series,
            "history": self.history,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _comparability_key(manifest: dict) -> str:
    """Benchmarks are comparable when they differ only by seed."""
    stripped = json.loads(json.dumps(manifest))
    spec = dict(stripped.get("spec", {}))
    spec.pop("seed", None)
    stripped["spec"] = spec
    return json.dumps(stripped, sort_keys=True)


@dataclass
class AblationCell:
    accuracies: list[float] = field(default_factory=list)
    failures: int = 0

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.accuracies)) if self.accuracies else None

    @property
    def std(self) -> float | None:
        return float(np.std(self.accuracies)) if self.accuracies else None


@dataclass
class AblationTable:
    rows: list[tuple[str, dict[int, AblationCell]]]  # (preset, {shot: cell})
    shots: list[int]

    def to_csv_text(self) -> str:
        header = ["preset"]
        for shot in self.shots:
            header += [f"acc_{shot}shot_mean", f"acc_{shot}shot_std", f"runs_{shot}shot", f"failed_{shot}shot"]
        lines = [",".join(header)]
        for preset, cells in self.rows:
            fields = [preset]
            for shot in self.shots:
                cell = cells.get(shot, AblationCell())
                fields += [
                    "" if cell.mean is None else repr(cell.mean),
                    "" if cell.std is None else repr(cell.std),
                    str(len(cell.accuracies)),
                    str(cell.failures),
                ]
            lines.append(",".join(fields))
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        headers = ["preset"] + [f"{shot}-shot" for shot in self.shots]
        body = []
        for preset, cells in self.rows:
            row = [preset]
            for shot in self.shots:
                cell = cells.get(shot, AblationCell())
                if cell.mean is None:
                    row.append("failed" if cell.failures else "-")
                else:
                    text = f"{cell.mean:.1f} +- {cell.std:.1f}"
                    if cell.failures:
                        text += f" ({cell.failures} failed)"
                    row.append(text)
            body.append(row)
        widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
                  for i, h in enumerate(headers)]
        def fmt(row):
            return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(headers), rule] + [fmt(r) for r in body]) + "\n"


def compare_runs(
    reports: list[ExperimentReport],
    failures: list[tuple[str, int, int, str]] | None = None,
) -> AblationTable:
    """Aggregate reports into a preset x shot table of seed-averaged accuracy.

    ``failures`` rows are (preset, shot, seed, error) from runs that raised.
    Reports over different benchmarks (beyond the seed) refuse comparison.
    """
    if not reports and not failures:
        raise ValueError("nothing to compare")
    keys = {_comparability_key(r.benchmark_manifest) for r in reports}
    if len(keys) > 1:
        raise ValueError("reports come from different benchmarks; refusing silent comparison")

    cells: dict[str, dict[int, AblationCell]] = {}
    shots: set[int] = set()
    for r in reports:
        cells.setdefault(r.preset, {}).setdefault(r.k_shot, AblationCell()).accuracies.append(
            r.final_target_accuracy
        )
        shots.add(r.k_shot)
    for preset, shot, _seed, _err in failures or []:
        cell = cells.setdefault(preset, {}).setdefault(shot, AblationCell())
        cell.failures += 1
        shots.add(shot)

    def order_key(preset: str):
        return (PRESET_ORDER.index(preset), "") if preset in PRESET_ORDER else (len(PRESET_ORDER), preset)

    ordered = sorted(cells, key=order_key)
    return AblationTable(rows=[(p, cells[p]) for p in ordered], shots=sorted(shots))
