"""Report emission: delimited tables, JSON metadata and rendered figures.

Every report path writes the machine-readable table first and then a
matplotlib figure next to it, so a run directory is self-describing.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .modelspec import ModelSpec, SpecError
from .optimizer import FitResult
from .prediction import GofBin, PredictionSet
from .simstudies import StudyReport


def spec_hash(spec: ModelSpec) -> str:
    doc = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(doc).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


def write_fit_report(out_dir, result: FitResult, spec: ModelSpec,
                     seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    table = out / "fit_report.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "estimate", "se", "z", "p_value"])
        for i, (name, est, se) in enumerate(result.summary_rows()):
            if np.isfinite(se) and se > 0:
                z, p = result.wald(i)
            else:
                z, p = np.nan, np.nan
            w.writerow([name, repr(est), repr(se), repr(float(z)), repr(float(p))])

    meta = {
        "loglik": result.loglik,
        "aic": result.aic,
        "n_params": result.n_params,
        "n_subjects": result.n_subjects,
        "iterations": result.iterations,
        "converged": result.converged,
        "criteria": {"step": result.crit_step, "objective": result.crit_obj,
                     "rdm": result.crit_rdm},
        "seed": seed,
        "spec_hash": spec_hash(spec),
    }
    with open(out / "fit_metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")

    _fit_figure(out / "fit_estimates.png", result)
    return table


def _fit_figure(path, result: FitResult):
    names = result.parameter_names
    est = np.asarray(result.theta_hat)
    se = np.asarray(result.se)
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(names))))
    ax.errorbar(est, y, xerr=1.96 * np.where(np.isfinite(se), se, 0.0),
                fmt="o", markersize=3, capsize=2)
    ax.axvline(0.0, color="grey", lw=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("estimate with 95% CI")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def read_params_csv(path, spec: ModelSpec) -> np.ndarray:
    """Flat parameter vector from a fit report, validated against the spec."""
    values = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values[row["parameter"]] = float(row["estimate"])
    names = spec.parameter_names()
    missing = [n for n in names if n not in values]
    if missing:
        raise SpecError(f"parameter file lacks entries: {missing[:5]}")
    return np.array([values[n] for n in names])


# ---------------------------------------------------------------------------
# Predictions and goodness of fit
# ---------------------------------------------------------------------------


_PRED_FIELDS = ("subject_id", "time", "j", "marker", "observed", "marginal",
                "subject_specific", "natural_observed", "natural_marginal",
                "natural_subject_specific", "fold")


def write_predictions(out_dir, preds: PredictionSet,
                      name: str = "predictions.csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / name
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_PRED_FIELDS)
        for r in preds.rows:
            w.writerow([r.subject_id, repr(r.time), r.j, r.marker,
                        repr(r.observed), repr(r.marginal),
                        repr(r.subject_specific), repr(r.natural_observed),
                        repr(r.natural_marginal),
                        repr(r.natural_subject_specific), r.fold])
    meta = {"ndraws": preds.ndraws, "failed_folds": preds.failed_folds,
            "n_rows": len(preds.rows)}
    with open(out / (Path(name).stem + "_metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return table


def write_gof_report(out_dir, bins: list[GofBin],
                     name: str = "gof") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{name}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["marker", "bin_lo", "bin_hi", "n", "observed_mean",
                    "ci_lo", "ci_hi", "predicted_mean"])
        for b in bins:
            w.writerow([b.marker, repr(float(b.bin_lo)), repr(float(b.bin_hi)),
                        b.n, repr(float(b.observed_mean)), repr(float(b.ci_lo)),
                        repr(float(b.ci_hi)), repr(float(b.predicted_mean))])
    _gof_figure(out / f"{name}.png", bins)
    return table


def _gof_figure(path, bins: list[GofBin]):
    markers = sorted({b.marker for b in bins})
    fig, axes = plt.subplots(1, len(markers),
                             figsize=(4 * len(markers), 3.2), squeeze=False)
    for ax, marker in zip(axes[0], markers):
        rows = [b for b in bins if b.marker == marker and b.n > 0]
        mid = np.array([(b.bin_lo + b.bin_hi) / 2 for b in rows])
        obs = np.array([b.observed_mean for b in rows])
        lo = np.array([b.ci_lo for b in rows])
        hi = np.array([b.ci_hi for b in rows])
        pred = np.array([b.predicted_mean for b in rows])
        ax.fill_between(mid, lo, hi, alpha=0.25, label="observed 95% CI")
        ax.plot(mid, obs, "o-", ms=4, label="observed mean")
        ax.plot(mid, pred, "x--", ms=5, label="predicted mean")
        ax.set_title(marker)
        ax.set_xlabel("time")
    axes[0][0].set_ylabel("mean")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def write_study_report(out_dir, report: StudyReport, name: str = "study") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{name}.csv"
    if report.rejection_rates:
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entry", "rejection_rate_pct"])
            for entry, rate in report.rejection_rates.items():
                w.writerow([entry, repr(float(rate))])
        _type1_figure(out / f"{name}.png", report)
    else:
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "true", "mean_estimate", "rel_bias_pct",
                        "ese", "mean_ase", "coverage_pct"])
            for row in report.rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])
        _coverage_figure(out / f"{name}.png", report)
    meta = {"n_replicates": report.n_replicates,
            "n_converged": report.n_converged}
    with open(out / f"{name}_metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return table


def _coverage_figure(path, report: StudyReport):
    y = np.arange(len(report.parameter_names))
    fig, ax = plt.subplots(figsize=(6, max(3, 0.3 * y.size)))
    ax.barh(y, report.coverage_pct, height=0.6)
    ax.axvline(95.0, color="k", lw=0.8, label="nominal 95%")
    ax.set_yticks(y)
    ax.set_yticklabels(report.parameter_names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("coverage of 95% CI (%)")
    ax.set_xlim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _type1_figure(path, report: StudyReport):
    names = list(report.rejection_rates)
    rates = [report.rejection_rates[n] for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x, rates, width=0.6)
    ax.axhline(5.0, color="k", lw=0.8, label="nominal 5%")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("rejection rate (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Matrices (step conversion files)
# ---------------------------------------------------------------------------


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    A = np.asarray(rows, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SpecError(f"{path}: expected a square numeric matrix, got {A.shape}")
    return A


def write_matrix_csv(path, A: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(A, dtype=float):
            w.writerow([repr(float(v)) for v in row])
