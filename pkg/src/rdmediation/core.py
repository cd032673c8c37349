"""Shared data model: subjects, covariate strata, design matrices and summaries.

Every model module in the package builds its regressors through
:class:`DesignMatrixSpec`, so the column order of a coefficient vector is
always the one produced by :meth:`DesignMatrixSpec.column_names`::

    intercept, group, med_1..med_q, group:med_1..q, <factor dummies>,
    group:<factor dummies>, med_j:<factor dummies>

Mediator terms are either powers of the centered mediator (``basis="poly"``)
or indicators of mediator categories 1..K (``basis="category"``).
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("time", "event", "group", "mediator")


class DatasetError(ValueError):
    """Raised when an input dataset violates the schema or record invariants."""


@dataclass(frozen=True)
class Factor:
    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError(f"factor {self.name!r} has no levels")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"factor {self.name!r} has duplicate levels")


@dataclass(frozen=True)
class Schema:
    """Declared categorical covariates of a dataset, in column order."""

    factors: tuple[Factor, ...] = ()
    time_unit: str = "days"

    @classmethod
    def from_dict(cls, factors: dict[str, Sequence[str]], time_unit: str = "days") -> "Schema":
        return cls(tuple(Factor(k, tuple(v)) for k, v in factors.items()), time_unit)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    def factor(self, name: str) -> Factor:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def n_strata(self) -> int:
        return math.prod(len(f.levels) for f in self.factors)


@dataclass(frozen=True)
class SubjectRecord:
    time: float
    event: bool
    group: int
    mediator: float
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise DatasetError(f"time must be positive, got {self.time}")
        if not (self.mediator > 0 and math.isfinite(self.mediator)):
            raise DatasetError(f"mediator must be positive, got {self.mediator}")
        if self.group not in (0, 1):
            raise DatasetError(f"group must be 0 or 1, got {self.group}")


@dataclass(frozen=True)
class CovariateStratum:
    levels: tuple[str, ...]
    index: int

    @property
    def label(self) -> str:
        return "|".join(self.levels) if self.levels else "all"


@dataclass(frozen=True)
class IntervalSummary:
    point: float
    lower: float
    upper: float
    kind: str = "credible"

    def __post_init__(self):
        if self.kind not in ("credible", "bootstrap-percentile"):
            raise ValueError(f"unknown interval kind {self.kind!r}")


# ---------------------------------------------------------------------------
# strata


def enumerate_strata(schema: Schema) -> list[CovariateStratum]:
    """Full cross-product of declared levels in lexicographic declared order."""
    combos = itertools.product(*(f.levels for f in schema.factors))
    return [CovariateStratum(tuple(c), i) for i, c in enumerate(combos)]


def stratum_index(schema: Schema, levels: Sequence[str]) -> int:
    """Mixed-radix index of ``levels``; inverse of :func:`enumerate_strata` order."""
    idx = 0
    for f, lev in zip(schema.factors, levels, strict=True):
        idx = idx * len(f.levels) + f.levels.index(lev)
    return idx


def stratum_of(schema: Schema, record: SubjectRecord) -> CovariateStratum:
    return CovariateStratum(tuple(record.covariates), stratum_index(schema, record.covariates))


# ---------------------------------------------------------------------------
# design matrices


@dataclass(frozen=True)
class DesignMatrixSpec:
    """Column layout for a regression on (group, mediator, covariates).

    ``group_covariate`` and ``mediator_covariate`` list the factor names that
    interact with the group indicator and with every mediator term.
    """

    schema: Schema = field(default_factory=Schema)
    intercept: bool = True
    group: bool = True
    covariates: bool = True
    degree: int = 0
    center: float = 0.0
    group_mediator: bool = False
    group_covariate: tuple[str, ...] = ()
    mediator_covariate: tuple[str, ...] = ()
    basis: str = "poly"
    cutpoints: tuple[float, ...] = ()

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.basis not in ("poly", "category"):
            raise ValueError(f"unknown mediator basis {self.basis!r}")
        if self.basis == "category" and self.degree != len(self.cutpoints):
            raise ValueError("category basis needs degree == number of cutpoints")
        for name in self.group_covariate + self.mediator_covariate:
            self.schema.factor(name)
        if self.degree == 0 and (self.group_mediator or self.mediator_covariate):
            raise ValueError("mediator interactions need at least one mediator term")

    # -- layout -----------------------------------------------------------

    def _dummy_names(self, factors: Iterable[str]) -> list[str]:
        out = []
        for name in factors:
            f = self.schema.factor(name)
            out.extend(f"{name}={lev}" for lev in f.levels[1:])
        return out

    def _med_names(self) -> list[str]:
        if self.basis == "category":
            return [f"medcat{k}" for k in range(1, self.degree + 1)]
        return ["med" if j == 1 else f"med^{j}" for j in range(1, self.degree + 1)]

    def column_names(self) -> list[str]:
        cols = []
        if self.intercept:
            cols.append("(intercept)")
        if self.group:
            cols.append("group")
        med = self._med_names()
        cols.extend(med)
        if self.group_mediator:
            cols.extend(f"group:{m}" for m in med)
        if self.covariates:
            cols.extend(self._dummy_names(self.schema.names))
        cols.extend(f"group:{d}" for d in self._dummy_names(self.group_covariate))
        mc = self._dummy_names(self.mediator_covariate)
        for m in med:
            cols.extend(f"{m}:{d}" for d in mc)
        return cols

    @property
    def n_columns(self) -> int:
        return len(self.column_names())

    def blocks(self) -> dict[str, np.ndarray]:
        """Column indices of each coefficient block, keyed by role.

        Keys: ``intercept``, ``group``, ``med`` (q,), ``group_med`` (q,),
        ``cov``, ``group_cov``, ``med_cov`` (q, n_dummies).
        """
        i = 0
        out: dict[str, np.ndarray] = {}

        def take(n):
            nonlocal i
            idx = np.arange(i, i + n)
            i += n
            return idx

        q = self.degree
        out["intercept"] = take(1 if self.intercept else 0)
        out["group"] = take(1 if self.group else 0)
        out["med"] = take(q)
        out["group_med"] = take(q if self.group_mediator else 0)
        out["cov"] = take(len(self._dummy_names(self.schema.names)) if self.covariates else 0)
        out["group_cov"] = take(len(self._dummy_names(self.group_covariate)))
        nmc = len(self._dummy_names(self.mediator_covariate))
        out["med_cov"] = take(q * nmc).reshape(q, nmc)
        return out

    # -- expansion --------------------------------------------------------

    def dummies(self, levels: Sequence[str], factors: Iterable[str] | None = None) -> np.ndarray:
        """Dummy vector of a covariate pattern restricted to ``factors``."""
        factors = self.schema.names if factors is None else tuple(factors)
        pos = {f.name: i for i, f in enumerate(self.schema.factors)}
        out = []
        for name in factors:
            f = self.schema.factor(name)
            lev = levels[pos[name]]
            if lev not in f.levels:
                raise DatasetError(f"undeclared level {lev!r} for factor {name!r}")
            out.extend(1.0 if lev == other else 0.0 for other in f.levels[1:])
        return np.asarray(out, dtype=float)

    def mediator_basis(self, m) -> np.ndarray:
        """Mediator terms for raw mediator values, shape ``m.shape + (q,)``."""
        m = np.asarray(m, dtype=float)
        q = self.degree
        if self.basis == "category":
            cat = np.searchsorted(np.asarray(self.cutpoints), m, side="right")
            return (cat[..., None] == np.arange(1, q + 1)).astype(float)
        mc = m - self.center
        return mc[..., None] ** np.arange(1, q + 1)

    def row(self, group: int, mediator: float, levels: Sequence[str]) -> np.ndarray:
        return self.matrix(np.array([group]), np.array([mediator]), [tuple(levels)])[0]

    def matrix(self, group, mediator, levels: Sequence[Sequence[str]]) -> np.ndarray:
        """Design matrix for arrays of group, raw mediator and covariate patterns."""
        group = np.asarray(group, dtype=float)
        n = group.shape[0]
        mediator = np.asarray(mediator, dtype=float) if self.degree else np.zeros(n)
        cols = []
        if self.intercept:
            cols.append(np.ones((n, 1)))
        if self.group:
            cols.append(group[:, None])
        med = self.mediator_basis(mediator)
        cols.append(med)
        if self.group_mediator:
            cols.append(group[:, None] * med)
        cache: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        cov_rows, gc_rows, mc_rows = [], [], []
        for lev in levels:
            key = tuple(lev)
            if key not in cache:
                cache[key] = (
                    self.dummies(key) if self.covariates else np.zeros(0),
                    self.dummies(key, self.group_covariate),
                    self.dummies(key, self.mediator_covariate),
                )
            a, b, c = cache[key]
            cov_rows.append(a)
            gc_rows.append(b)
            mc_rows.append(c)
        if n:
            cov = np.vstack(cov_rows)
            gc = np.vstack(gc_rows)
            mcv = np.vstack(mc_rows)
        else:
            cov = np.zeros((0, len(self._dummy_names(self.schema.names)) if self.covariates else 0))
            gc = np.zeros((0, len(self._dummy_names(self.group_covariate))))
            mcv = np.zeros((0, len(self._dummy_names(self.mediator_covariate))))
        cols.append(cov)
        cols.append(group[:, None] * gc)
        for j in range(self.degree):
            cols.append(med[:, j : j + 1] * mcv)
        return np.hstack(cols) if cols else np.zeros((n, 0))

    def with_(self, **kw) -> "DesignMatrixSpec":
        return replace(self, **kw)


def expand_design(record: SubjectRecord, spec: DesignMatrixSpec) -> np.ndarray:
    """Regressor vector of one subject in the spec's column order."""
    return spec.row(record.group, record.mediator, record.covariates)


def design_matrix(records: Sequence[SubjectRecord], spec: DesignMatrixSpec) -> np.ndarray:
    return spec.matrix(
        [r.group for r in records],
        [r.mediator for r in records],
        [r.covariates for r in records],
    )


def pooled_mediator_mean(records: Sequence[SubjectRecord]) -> float:
    return float(np.mean([r.mediator for r in records]))


@dataclass
class OutcomeBlocks:
    """Stratum-specific pieces of an outcome coefficient vector.

    ``group_effect`` is theta1 + theta5'c, ``med`` the mediator-term
    coefficients in the reference group (theta2j + theta6j'c) and
    ``group_med`` the group-by-mediator shifts (theta3j).
    """

    group_effect: np.ndarray
    med: np.ndarray
    group_med: np.ndarray


def outcome_blocks(coef: np.ndarray, spec: DesignMatrixSpec, levels: Sequence[str]) -> OutcomeBlocks:
    """Split coefficients (shape ``(..., p)``) into the pieces used by RD formulas."""
    coef = np.asarray(coef, dtype=float)
    b = spec.blocks()
    lead = coef.shape[:-1]
    q = spec.degree
    if not spec.group:
        raise ValueError("outcome spec has no group main effect")
    gc = spec.dummies(levels, spec.group_covariate)
    mc = spec.dummies(levels, spec.mediator_covariate)
    group_effect = coef[..., b["group"][0]] + coef[..., b["group_cov"]] @ gc
    med = coef[..., b["med"]] if q else np.zeros(lead + (0,))
    if q and mc.size:
        med = med + np.einsum("...jk,k->...j", coef[..., b["med_cov"]], mc)
    if spec.group_mediator:
        group_med = coef[..., b["group_med"]]
    else:
        group_med = np.zeros(lead + (q,))
    return OutcomeBlocks(np.asarray(group_effect), np.asarray(med), np.asarray(group_med))


# ---------------------------------------------------------------------------
# CSV i/o


def _fmt(x: float) -> str:
    return repr(float(x))


def load_dataset(path: str | Path, schema: Schema) -> list[SubjectRecord]:
    """Read and validate a subject CSV.

    The header must be ``time,event,group,mediator`` followed by the schema's
    factor names. All invalid rows are collected into one :class:`DatasetError`
    whose message names each row (1-based, header excluded) and field.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    expected = list(REQUIRED_COLUMNS) + list(schema.names)
    records: list[SubjectRecord] = []
    problems: list[str] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: missing header row") from None
        if header != expected:
            raise DatasetError(f"{path}: header {header} does not match expected {expected}")
        for rowno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                problems.append(f"row {rowno}: expected {len(expected)} fields, got {len(row)}")
                continue
            try:
                records.append(_parse_row(row, schema, rowno))
            except DatasetError as exc:
                problems.append(str(exc))
    if problems:
        raise DatasetError(f"{path}: {len(problems)} invalid row(s):\n" + "\n".join(problems))
    if not records:
        logger.warning("%s: dataset has a header but no rows", path)
    return records


def _parse_row(row: list[str], schema: Schema, rowno: int) -> SubjectRecord:
    def num(name, text):
        try:
            return float(text)
        except ValueError:
            raise DatasetError(f"row {rowno}: field {name!r} is not a number: {text!r}") from None

    time = num("time", row[0])
    if not time > 0:
        raise DatasetError(f"row {rowno}: field 'time' must be positive, got {row[0]!r}")
    ev = row[1].strip()
    if ev not in ("0", "1"):
        raise DatasetError(f"row {rowno}: field 'event' must be 0 or 1, got {row[1]!r}")
    grp = row[2].strip()
    if grp not in ("0", "1"):
        raise DatasetError(f"row {rowno}: field 'group' must be 0 or 1, got {row[2]!r}")
    med = num("mediator", row[3])
    if not med > 0:
        raise DatasetError(f"row {rowno}: field 'mediator' must be positive, got {row[3]!r}")
    levels = tuple(c.strip() for c in row[4:])
    for f, lev in zip(schema.factors, levels):
        if lev not in f.levels:
            raise DatasetError(f"row {rowno}: field {f.name!r} has undeclared level {lev!r}")
    return SubjectRecord(time, ev == "1", int(grp), med, levels)


def write_dataset(records: Sequence[SubjectRecord], path: str | Path, schema: Schema) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + list(schema.names))
        for r in records:
            w.writerow([_fmt(r.time), int(r.event), r.group, _fmt(r.mediator), *r.covariates])


def records_to_arrays(records: Sequence[SubjectRecord]):
    """Columns of a record list as numpy arrays: time, event, group, mediator."""
    t = np.array([r.time for r in records], dtype=float)
    d = np.array([r.event for r in records], dtype=bool)
    g = np.array([r.group for r in records], dtype=int)
    m = np.array([r.mediator for r in records], dtype=float)
    return t, d, g, m


def spec_to_dict(spec: DesignMatrixSpec) -> dict:
    return {
        "schema": {
            "factors": [[f.name, list(f.levels)] for f in spec.schema.factors],
            "time_unit": spec.schema.time_unit,
        },
        "intercept": spec.intercept,
        "group": spec.group,
        "covariates": spec.covariates,
        "degree": spec.degree,
        "center": spec.center,
        "group_mediator": spec.group_mediator,
        "group_covariate": list(spec.group_covariate),
        "mediator_covariate": list(spec.mediator_covariate),
        "basis": spec.basis,
        "cutpoints": list(spec.cutpoints),
    }


def spec_from_dict(d: dict) -> DesignMatrixSpec:
    schema = Schema(
        tuple(Factor(name, tuple(levels)) for name, levels in d["schema"]["factors"]),
        d["schema"].get("time_unit", "days"),
    )
    kw = {k: v for k, v in d.items() if k != "schema"}
    for k in ("group_covariate", "mediator_covariate", "cutpoints"):
        kw[k] = tuple(kw[k])
    return DesignMatrixSpec(schema=schema, **kw)
