"""Long-format longitudinal data: in-memory containers and CSV ingestion.

One CSV row is one marker observation: subject_id, time, marker, value,
plus one column per subject-level covariate (repeated on every row).
Observation times are mapped to grid occasions j = floor(t / delta);
two observations of the same marker in one grid cell are rejected
(pick a smaller step).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .modelspec import INTERCEPT, ModelSpec, SpecError


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Occasion:
    j: int                 # grid index
    mask: np.ndarray       # (K,) bool, observed markers
    values: np.ndarray     # (K,) float, NaN where unobserved
    time: float = 0.0      # representative observation time of the grid cell


@dataclass
class SubjectData:
    id: str
    covariates: dict[str, float]
    occasions: list[Occasion] = field(default_factory=list)

    def n_observations(self) -> int:
        return int(sum(occ.mask.sum() for occ in self.occasions))


@dataclass
class Dataset:
    subjects: list[SubjectData]
    marker_names: tuple[str, ...]
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        self.subjects = sorted(self.subjects, key=lambda s: s.id)

    def __len__(self) -> int:
        return len(self.subjects)

    def n_observations(self) -> int:
        return sum(s.n_observations() for s in self.subjects)

    def marker_values(self, k: int) -> np.ndarray:
        """All observed values of marker k across the dataset."""
        vals = [occ.values[k] for s in self.subjects for occ in s.occasions
                if occ.mask[k]]
        return np.asarray(vals, dtype=float)


def covariates_needed(spec: ModelSpec) -> tuple[str, ...]:
    names: list[str] = []
    for group in (spec.baseline_covariates, spec.trend_covariates,
                  spec.random_effects):
        for per_dim in group:
            names += [n for n in per_dim if n != INTERCEPT]
    names += [n for n in spec.influence.regressors if n != INTERCEPT]
    seen, out = set(), []
    for n in names:
        if n not in seen:
            seen.add(n)
            out.append(n)
    return tuple(out)


def load_long_csv(path, spec: ModelSpec) -> Dataset:
    """Read a long-format CSV and group it into per-subject grid occasions."""
    marker_index = {name: k for k, name in enumerate(spec.marker_names)}
    needed = covariates_needed(spec)
    K = spec.n_markers

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: no records")
        for col in ("subject_id", "time", "marker", "value", *needed):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {col!r}")

        per_subject: dict[str, dict] = {}
        seen_keys: set[tuple[str, float, str]] = set()
        n_rows = 0
        for row in reader:
            n_rows += 1
            line = reader.line_num
            sid = row["subject_id"]
            marker = row["marker"]
            if marker not in marker_index:
                raise DataError(f"{path}:{line}: unknown marker {marker!r}")
            try:
                t = float(row["time"])
                value = float(row["value"])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: malformed numeric field ({exc})") from None
            if t < 0:
                raise DataError(f"{path}:{line}: negative observation time")
            key = (sid, t, marker)
            if key in seen_keys:
                raise DataError(f"{path}:{line}: duplicate observation {key}")
            seen_keys.add(key)

            covs = {}
            for name in needed:
                try:
                    covs[name] = float(row[name])
                except ValueError:
                    raise DataError(
                        f"{path}:{line}: malformed covariate {name!r}") from None

            entry = per_subject.setdefault(sid, {"covariates": covs, "cells": {}})
            if entry["covariates"] != covs:
                raise DataError(f"{path}:{line}: covariates of subject {sid} vary "
                                "between rows")
            j = int(np.floor(t / spec.delta + 1e-9))
            if j > spec.grid_len:
                raise DataError(f"{path}:{line}: time {t} falls beyond the grid "
                                f"(grid_len={spec.grid_len}, delta={spec.delta})")
            cell = entry["cells"].setdefault(j, {"time": t})
            k = marker_index[marker]
            if k in cell:  # "time" key never collides with int marker keys
                raise DataError(f"{path}:{line}: marker {marker!r} observed twice in "
                                f"grid cell {j}; use a smaller delta")
            cell[k] = value

        if n_rows == 0:
            raise DataError(f"{path}: no records")

    subjects = []
    for sid, entry in per_subject.items():
        occasions = []
        for j in sorted(entry["cells"]):
            cell = entry["cells"][j]
            mask = np.zeros(K, dtype=bool)
            values = np.full(K, np.nan)
            for k, v in cell.items():
                if k == "time":
                    continue
                mask[k] = True
                values[k] = v
            occasions.append(Occasion(j=j, mask=mask, values=values,
                                      time=cell["time"]))
        subjects.append(SubjectData(id=sid, covariates=entry["covariates"],
                                    occasions=occasions))
    return Dataset(subjects, spec.marker_names, needed)


def regrid(dataset: Dataset, spec: ModelSpec) -> Dataset:
    """Recompute grid occasions from observation times for a new step.

    Needed when data generated (or loaded) on one discretization grid are
    fitted on another. Two occasions of one subject landing in the same new
    grid cell must not share a marker.
    """
    K = len(dataset.marker_names)
    subjects = []
    for subj in dataset.subjects:
        cells: dict[int, Occasion] = {}
        for occ in subj.occasions:
            j = int(np.floor(occ.time / spec.delta + 1e-9))
            if j > spec.grid_len:
                raise DataError(f"time {occ.time} falls beyond the grid "
                                f"(grid_len={spec.grid_len}, delta={spec.delta})")
            if j not in cells:
                cells[j] = Occasion(j=j, mask=occ.mask.copy(),
                                    values=occ.values.copy(), time=occ.time)
                continue
            tgt = cells[j]
            if (tgt.mask & occ.mask).any():
                raise DataError(f"subject {subj.id}: a marker lands twice in "
                                f"grid cell {j}; use a smaller delta")
            tgt.mask |= occ.mask
            tgt.values = np.where(occ.mask, occ.values, tgt.values)
        occasions = [cells[j] for j in sorted(cells)]
        subjects.append(SubjectData(id=subj.id, covariates=subj.covariates,
                                    occasions=occasions))
    return Dataset(subjects, dataset.marker_names, dataset.covariate_names)


def write_long_csv(dataset: Dataset, path) -> None:
    """Write a dataset back to long format (RFC-4180 quoting)."""
    fields = ["subject_id", "time", "marker", "value", *dataset.covariate_names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for subj in dataset.subjects:
            covs = [repr(float(subj.covariates[n])) for n in dataset.covariate_names]
            for occ in subj.occasions:
                for k in np.flatnonzero(occ.mask):
                    writer.writerow([subj.id, repr(float(occ.time)),
                                     dataset.marker_names[k],
                                     repr(float(occ.values[k])), *covs])
