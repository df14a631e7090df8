"""Data model for two-source studies: records, CSV ingestion, overlap flags,
and outcome residualization.

A study mixes trial units (``source == "rct"``) with observational units
(``source == "os"``).  Overlap membership (``in_overlap``) marks whether a
unit's covariates fall inside the region the trial can speak to; trial units
are inside by definition.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .stat_kernel import fit_linear

__all__ = [
    "RCT",
    "OS",
    "UnitRecord",
    "OverlapRule",
    "StudyData",
    "StudyDataError",
    "load_csv",
    "save_csv",
    "apply_overlap",
    "residualize",
]

RCT = "rct"
OS = "os"


class StudyDataError(ValueError):
    pass


@dataclass(frozen=True)
class UnitRecord:
    """One subject: source study, treatment, outcome, covariates."""

    id: str
    source: str  # "rct" or "os"
    z: int
    y: float
    x: tuple[float, ...]
    block: str | None = None
    in_overlap: bool = True
    y_raw: float | None = None  # original outcome kept through residualization

    def __post_init__(self):
        if self.source not in (RCT, OS):
            raise StudyDataError(f"unknown source {self.source!r} for unit {self.id!r}")
        if self.z not in (0, 1):
            raise StudyDataError(f"treatment must be 0/1 for unit {self.id!r}, got {self.z!r}")
        if not math.isfinite(self.y):
            raise StudyDataError(f"non-finite outcome for unit {self.id!r}")
        if not all(math.isfinite(v) for v in self.x):
            raise StudyDataError(f"non-finite covariate for unit {self.id!r}")
        if self.source == RCT and not self.in_overlap:
            raise StudyDataError(f"RCT unit {self.id!r} cannot lie outside the overlap region")


EXPLICIT = "explicit"
RCT_BOUNDING_BOX = "rct_bounding_box"


@dataclass(frozen=True)
class OverlapRule:
    """Box constraints defining the overlap region.

    ``bounds`` lists (covariate index, lo, hi) closed intervals; use
    ``-inf``/``inf`` for one-sided constraints.  In RCT_BOUNDING_BOX mode
    the bounds are ignored and recomputed as the per-covariate min/max
    over the trial units.
    """

    bounds: tuple[tuple[int, float, float], ...] = ()
    mode: str = EXPLICIT

    def __post_init__(self):
        if self.mode not in (EXPLICIT, RCT_BOUNDING_BOX):
            raise StudyDataError(f"unknown overlap mode {self.mode!r}")
        for idx, lo, hi in self.bounds:
            if lo > hi:
                raise StudyDataError(f"overlap bound for covariate {idx} has lo > hi")
            if idx < 0:
                raise StudyDataError(f"negative covariate index {idx} in overlap rule")


@dataclass(frozen=True)
class StudyData:
    """Immutable collection of unit records with cached numpy views."""

    records: tuple[UnitRecord, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.records:
            raise StudyDataError("study has no records")
        dim = len(self.records[0].x)
        for rec in self.records:
            if len(rec.x) != dim:
                raise StudyDataError(f"covariate dimension differs for unit {rec.id!r}")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise StudyDataError(f"duplicate unit id {rec.id!r}")
            seen.add(rec.id)
        if not self.covariate_names:
            object.__setattr__(
                self, "covariate_names", tuple(f"x{i + 1}" for i in range(dim))
            )

    @property
    def p(self) -> int:
        return len(self.records[0].x)

    def x_matrix(self) -> np.ndarray:
        return np.array([rec.x for rec in self.records], dtype=float)

    def y_vector(self) -> np.ndarray:
        return np.array([rec.y for rec in self.records], dtype=float)

    def z_vector(self) -> np.ndarray:
        return np.array([rec.z for rec in self.records], dtype=int)

    def is_rct(self) -> np.ndarray:
        return np.array([rec.source == RCT for rec in self.records], dtype=bool)

    def overlap_mask(self) -> np.ndarray:
        return np.array([rec.in_overlap for rec in self.records], dtype=bool)

    def by_id(self) -> dict[str, UnitRecord]:
        return {rec.id: rec for rec in self.records}

    @property
    def counts(self) -> tuple[int, int, int, int]:
        """(n_r, n_o, os-treated inside overlap, os-treated outside)."""
        n_r = sum(1 for r in self.records if r.source == RCT)
        n_o = len(self.records) - n_r
        n_o1_plus = sum(
            1 for r in self.records if r.source == OS and r.z == 1 and r.in_overlap
        )
        n_o1_minus = sum(
            1 for r in self.records if r.source == OS and r.z == 1 and not r.in_overlap
        )
        return n_r, n_o, n_o1_plus, n_o1_minus


_REQUIRED_COLUMNS = ("id", "source", "z", "y")


def load_csv(path, covariates: list[str] | None = None) -> StudyData:
    """Read a study from CSV with columns id,source,z,y,x1..xp[,block].

    Covariate columns are auto-detected as ``x1..xp`` in numeric order
    unless an explicit list is given.  Errors cite the file line and the
    offending column.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        rows = [row for row in reader if row and not row[0].startswith("#")]
    if not rows:
        raise StudyDataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in _REQUIRED_COLUMNS:
        if col not in header:
            raise StudyDataError(f"{path}: missing required column {col!r}")
    if covariates is None:
        covariates = sorted(
            (h for h in header if h.startswith("x") and h[1:].isdigit()),
            key=lambda h: int(h[1:]),
        )
        if not covariates:
            raise StudyDataError(f"{path}: no covariate columns (expected x1, x2, ...)")
    for col in covariates:
        if col not in header:
            raise StudyDataError(f"{path}: missing covariate column {col!r}")
    has_block = "block" in header
    col_idx = {name: header.index(name) for name in header}

    records = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise StudyDataError(f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}")

        def cell(name: str) -> str:
            return row[col_idx[name]].strip()

        source = cell("source").lower()
        if source not in (RCT, OS):
            raise StudyDataError(
                f"{path}: row {line_no}, column 'source': unknown tag {cell('source')!r}"
            )
        try:
            z = int(cell("z"))
        except ValueError:
            raise StudyDataError(f"{path}: row {line_no}, column 'z': non-numeric cell") from None
        if z not in (0, 1):
            raise StudyDataError(f"{path}: row {line_no}, column 'z': must be 0 or 1, got {z}")
        try:
            y = float(cell("y"))
        except ValueError:
            raise StudyDataError(f"{path}: row {line_no}, column 'y': non-numeric cell") from None
        xs = []
        for name in covariates:
            try:
                xs.append(float(cell(name)))
            except ValueError:
                raise StudyDataError(
                    f"{path}: row {line_no}, column {name!r}: non-numeric cell"
                ) from None
        block = cell("block") or None if has_block else None
        try:
            records.append(
                UnitRecord(id=cell("id"), source=source, z=z, y=y, x=tuple(xs), block=block)
            )
        except StudyDataError as exc:
            raise StudyDataError(f"{path}: row {line_no}: {exc}") from None
    try:
        return StudyData(records=tuple(records), covariate_names=tuple(covariates))
    except StudyDataError as exc:
        raise StudyDataError(f"{path}: {exc}") from None


def _fmt(value: float) -> str:
    return format(value, ".17g")


def save_csv(data: StudyData, path) -> None:
    """Write a study back to CSV, losslessly (17 significant digits)."""
    has_block = any(rec.block is not None for rec in data.records)
    header = ["id", "source", "z", "y", *data.covariate_names]
    if has_block:
        header.append("block")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for rec in data.records:
            row = [rec.id, rec.source, str(rec.z), _fmt(rec.y), *(_fmt(v) for v in rec.x)]
            if has_block:
                row.append(rec.block or "")
            writer.writerow(row)


def apply_overlap(data: StudyData, rule: OverlapRule) -> StudyData:
    """Set in_overlap for every OS record; RCT records are always inside."""
    p = data.p
    for idx, _, _ in rule.bounds:
        if idx >= p:
            raise StudyDataError(f"overlap rule index {idx} out of range for {p} covariates")
    if rule.mode == RCT_BOUNDING_BOX:
        rct_x = np.array([rec.x for rec in data.records if rec.source == RCT], dtype=float)
        if rct_x.size == 0:
            raise StudyDataError("RCT bounding box requested but the study has no RCT records")
        bounds = [(j, float(rct_x[:, j].min()), float(rct_x[:, j].max())) for j in range(p)]
    else:
        bounds = list(rule.bounds)

    def inside(x: tuple[float, ...]) -> bool:
        return all(lo <= x[j] <= hi for j, lo, hi in bounds)

    records = tuple(
        replace(rec, in_overlap=True if rec.source == RCT else inside(rec.x))
        for rec in data.records
    )
    return StudyData(records=records, covariate_names=data.covariate_names)


def residualize(data: StudyData) -> StudyData:
    """Replace outcomes with residuals from a pooled regression of y on x.

    Both sources are pooled and the treatment indicator is excluded, so
    the regression cannot absorb the effect.  Original outcomes are kept
    in ``y_raw``.
    """
    if len(data.records) < data.p + 2:
        raise StudyDataError(f"residualize needs at least {data.p + 2} records")
    fit = fit_linear(data.x_matrix(), data.y_vector())
    records = tuple(
        replace(rec, y=float(res), y_raw=rec.y if rec.y_raw is None else rec.y_raw)
        for rec, res in zip(data.records, fit.residuals)
    )
    return StudyData(records=records, covariate_names=data.covariate_names)
