"""Localization error metrics and machine-readable reports.

The localization error of one lesion is the geodesic distance on the target
mesh between the estimated and ground-truth vertices; the success rate at a
criterion is the fraction of lesions with error strictly below it. Sweeping
the criterion gives a cumulative success curve.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .geodesics import DEFAULT_BACKEND, GeodesicSolver
from .mesh import LesionSet, TexturedMesh

DEFAULT_CRITERIA_MM = tuple(float(c) for c in range(1, 51))


@dataclass(frozen=True)
class EvaluationReport:
    per_loi: tuple                 # (label, cle_mm) pairs, input order
    mean_cle_mm: float
    std_cle_mm: float
    success_rates: tuple           # (criterion_mm, rate) pairs, ascending
    backend_note: str
    config_echo: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config_echo,
            "backend": self.backend_note,
            "per_loi": [
                {"label": label, "cle_mm": cle} for label, cle in self.per_loi
            ],
            "mean_cle_mm": self.mean_cle_mm,
            "std_cle_mm": self.std_cle_mm,
            "success": [
                {"criterion_mm": c, "rate": r} for c, r in self.success_rates
            ],
        }


def cle(
    target: TexturedMesh,
    estimated: int,
    ground_truth: int,
    backend: str = DEFAULT_BACKEND,
    solver: GeodesicSolver = None,
) -> float:
    """Geodesic distance (mm) between estimated and true target vertices."""
    if solver is None:
        solver = GeodesicSolver(target, backend)
    return solver.distance(int(estimated), int(ground_truth))


def success_rate(cles, criterion: float) -> float:
    """Fraction of lesions localized strictly closer than the criterion."""
    cles = np.asarray(cles, dtype=np.float64)
    if cles.size == 0:
        raise EvaluationError("no localization errors to evaluate")
    if not criterion > 0:
        raise EvaluationError("criterion must be positive")
    return float(np.count_nonzero(cles < criterion) / cles.size)


def emit_report(
    records,
    ground_truth: LesionSet,
    target: TexturedMesh,
    criteria=DEFAULT_CRITERIA_MM,
    backend: str = DEFAULT_BACKEND,
    config_echo: dict = None,
    json_path=None,
    csv_path=None,
) -> EvaluationReport:
    """Score correspondence records against ground truth.

    Every record's label must appear in the ground-truth lesion set. Writes
    the report JSON and the success-curve CSV when paths are given.
    """
    solver = GeodesicSolver(target, backend)
    missing = [r.loi_label for r in records if r.loi_label not in ground_truth.labels]
    if missing:
        raise EvaluationError(f"no ground truth for labels: {missing}")
    per_loi = []
    for rec in records:
        true_vertex = ground_truth.vertex_of(rec.loi_label)
        per_loi.append((rec.loi_label, cle(target, rec.target_vertex, true_vertex, solver=solver)))
    errors = np.array([e for _, e in per_loi])
    rates = tuple(
        (float(c), success_rate(errors, float(c))) for c in sorted(criteria)
    )
    report = EvaluationReport(
        per_loi=tuple(per_loi),
        mean_cle_mm=float(errors.mean()),
        std_cle_mm=float(errors.std()),
        success_rates=rates,
        backend_note=f"{backend}-dijkstra",
        config_echo=config_echo or {},
    )
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)
            fh.write("\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["criterion_mm", "rate"])
            for c, r in report.success_rates:
                writer.writerow([c, r])
    return report


def aggregate_reports(report_dicts) -> dict:
    """Cross-subject aggregation: mean and std of per-report success rates.

    All reports must share the same criterion grid.
    """
    if not report_dicts:
        raise EvaluationError("no reports to aggregate")
    grids = []
    for rep in report_dicts:
        grids.append([(s["criterion_mm"], s["rate"]) for s in rep["success"]])
    criteria = [c for c, _ in grids[0]]
    for g in grids[1:]:
        if [c for c, _ in g] != criteria:
            raise EvaluationError("reports use different criterion grids")
    rates = np.array([[r for _, r in g] for g in grids])
    mean_cles = [rep["mean_cle_mm"] for rep in report_dicts]
    return {
        "n_reports": len(report_dicts),
        "success": [
            {
                "criterion_mm": c,
                "mean_rate": float(rates[:, i].mean()),
                "std_rate": float(rates[:, i].std()),
            }
            for i, c in enumerate(criteria)
        ],
        "mean_cle_mm": float(np.mean(mean_cles)),
        "std_mean_cle_mm": float(np.std(mean_cles)),
    }
