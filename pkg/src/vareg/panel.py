"""Student panels, teacher-year class aggregates and within-teacher transforms.

Records are held column-wise in numpy arrays sorted by (teacher, year). A
teacher-year is a *cell*; every estimator downstream works either on the
student rows or on the cell aggregates laid out on a padded
``(n_teachers, max_years)`` grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel input."""


class StudentRecord(NamedTuple):
    student_id: object
    teacher_id: object
    year: int
    score: float
    outcome: float  # nan when missing
    covariates: tuple


def group_means(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Means of ``values`` (1d or 2d, rows aligned with ``groups``) per group."""
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    if values.ndim == 1:
        sums = np.bincount(groups, weights=values, minlength=n_groups)
        return sums / counts
    out = np.empty((n_groups, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = np.bincount(groups, weights=values[:, k], minlength=n_groups)
    return out / counts[:, None]


@dataclass(frozen=True, eq=False)
class PanelData:
    """Student-level panel, sorted by teacher code then year.

    Teachers observed in fewer than two distinct years are dropped at
    construction; their labels are kept in ``excluded_teachers``.
    ``outcome`` holds ``nan`` for students without a long-run outcome.
    """

    student_id: np.ndarray
    teacher: np.ndarray
    year: np.ndarray
    score: np.ndarray
    outcome: np.ndarray
    X: np.ndarray
    teacher_labels: np.ndarray
    covariate_names: tuple = ()
    excluded_teachers: tuple = ()
    cell: np.ndarray = field(init=False, repr=False)
    cell_teacher: np.ndarray = field(init=False, repr=False)
    cell_year: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # rows are sorted by (teacher, year), so cells are runs
        n = self.score.shape[0]
        new_cell = np.ones(n, dtype=bool)
        if n > 1:
            new_cell[1:] = (np.diff(self.teacher) != 0) | (np.diff(self.year) != 0)
        cell = np.cumsum(new_cell) - 1
        starts = np.flatnonzero(new_cell)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "cell_teacher", self.teacher[starts])
        object.__setattr__(self, "cell_year", self.year[starts])

    @classmethod
    def from_arrays(
        cls,
        student_id,
        teacher_id,
        year,
        score,
        outcome=None,
        X=None,
        covariate_names: Sequence[str] | None = None,
    ) -> "PanelData":
        """Validate, sort and index raw columns."""
        score = np.asarray(score, dtype=float)
        n = score.shape[0]
        student_id = np.asarray(student_id)
        teacher_id = np.asarray(teacher_id)
        year = np.asarray(year)
        if not np.issubdtype(year.dtype, np.integer):
            if not np.all(np.equal(np.mod(year.astype(float), 1), 0)):
                raise PanelError("year must hold integers")
            year = year.astype(np.int64)
        outcome = np.full(n, np.nan) if outcome is None else np.asarray(outcome, dtype=float)
        if X is None:
            X = np.empty((n, 0))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        for name, arr in [("student_id", student_id), ("teacher_id", teacher_id),
                          ("year", year), ("outcome", outcome), ("X", X)]:
            if arr.shape[0] != n:
                raise PanelError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(score)):
            raise PanelError("score contains non-finite values")
        if not np.all(np.isfinite(X)):
            raise PanelError("covariates contain non-finite values")
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(X.shape[1]))
        if len(covariate_names) != X.shape[1]:
            raise PanelError("covariate_names does not match the number of columns of X")

        _, sid = np.unique(student_id, return_inverse=True)
        key = np.lexsort((year, sid))
        dup = (np.diff(sid[key]) == 0) & (np.diff(year[key]) == 0)
        if np.any(dup):
            i = key[1:][dup][0]
            raise PanelError(
                f"duplicate (student, year) record: student {student_id[i]!r}, year {year[i]}"
            )

        labels, tcode = np.unique(teacher_id, return_inverse=True)
        cells = np.unique(np.stack([tcode, year]), axis=1)
        years_per = np.bincount(cells[0], minlength=labels.size)
        keep_teacher = years_per >= 2
        excluded = tuple(labels[~keep_teacher].tolist())
        remap = np.cumsum(keep_teacher) - 1
        rows = keep_teacher[tcode]
        tcode = remap[tcode[rows]]
        order = np.lexsort((year[rows], tcode))
        idx = np.flatnonzero(rows)[order]
        return cls(
            student_id=student_id[idx],
            teacher=tcode[order],
            year=year[idx],
            score=score[idx],
            outcome=outcome[idx],
            X=X[idx],
            teacher_labels=labels[keep_teacher],
            covariate_names=tuple(covariate_names),
            excluded_teachers=excluded,
        )

    @classmethod
    def from_records(cls, records: Sequence[StudentRecord], covariate_names=None) -> "PanelData":
        if not records:
            raise PanelError("no records")
        k = len(records[0].covariates)
        for r in records:
            if len(r.covariates) != k:
                raise PanelError(f"record {r.student_id!r} has {len(r.covariates)} covariates, expected {k}")
        cols = list(zip(*records))
        X = np.array(cols[5], dtype=float).reshape(len(records), k)
        return cls.from_arrays(cols[0], cols[1], cols[2], cols[3], cols[4], X, covariate_names)

    @property
    def n_students(self) -> int:
        return self.score.shape[0]

    @property
    def n_teachers(self) -> int:
        return self.teacher_labels.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_teacher.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def has_outcome(self) -> np.ndarray:
        return ~np.isnan(self.outcome)

    @cached_property
    def years_per_teacher(self) -> list[np.ndarray]:
        bounds = np.searchsorted(self.cell_teacher, np.arange(self.n_teachers + 1))
        return [self.cell_year[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def __len__(self) -> int:
        return self.n_students


def load_panel(path, schema: dict | None = None, covariates: Sequence[str] | None = None) -> PanelData:
    """Read a student CSV.

    ``schema`` maps the canonical names (``student_id``, ``teacher_id``,
    ``year``, ``score``, ``outcome``) to column names in the file. Covariates
    default to every column named ``x<digits>``, in file order.
    """
    schema = {**{c: c for c in ("student_id", "teacher_id", "year", "score", "outcome")}, **(schema or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        pos = {h: i for i, h in enumerate(header)}
        for canon in ("student_id", "teacher_id", "year", "score"):
            if schema[canon] not in pos:
                raise PanelError(f"{path}: missing required column {schema[canon]!r}")
        if covariates is None:
            covariates = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        for c in covariates:
            if c not in pos:
                raise PanelError(f"{path}: missing covariate column {c!r}")
        out_col = pos.get(schema["outcome"])
        sid, tid, yr, sc, oc, xs = [], [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                sid.append(row[pos[schema["student_id"]]].strip())
                tid.append(row[pos[schema["teacher_id"]]].strip())
                yr.append(int(row[pos[schema["year"]]]))
                sc.append(float(row[pos[schema["score"]]]))
                raw = row[out_col].strip() if out_col is not None else ""
                oc.append(float(raw) if raw else np.nan)
                xs.append([float(row[pos[c]]) for c in covariates])
            except ValueError as exc:
                raise PanelError(f"{path}: line {line}: {exc}") from None
    X = np.array(xs, dtype=float).reshape(len(sc), len(covariates))
    return PanelData.from_arrays(sid, tid, yr, sc, oc, X, covariate_names=tuple(covariates))


def write_panel(panel: PanelData, path) -> None:
    """Write ``panel`` in the CSV schema read by :func:`load_panel`."""
    names = list(panel.covariate_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "teacher_id", "year", "score", "outcome", *names])
        labels = panel.teacher_labels
        for i in range(panel.n_students):
            y = panel.outcome[i]
            w.writerow([
                panel.student_id[i], labels[panel.teacher[i]], int(panel.year[i]),
                format(panel.score[i], ".17g"), "" if np.isnan(y) else format(y, ".17g"),
                *(format(v, ".17g") for v in panel.X[i]),
            ])


@dataclass(frozen=True, eq=False)
class TeacherYearVars:
    """Teacher-year explanatory variables ``D_jt``."""

    teacher_id: np.ndarray
    year: np.ndarray
    D: np.ndarray
    names: tuple = ()

    def align(self, panel: PanelData) -> np.ndarray:
        """Rows of ``D`` ordered like ``panel``'s cells; error if any cell is missing."""
        lookup = {(t, int(y)): i for i, (t, y) in enumerate(zip(self.teacher_id.tolist(), self.year.tolist()))}
        labels = panel.teacher_labels.tolist()
        rows = np.empty(panel.n_cells, dtype=int)
        for c, (t, y) in enumerate(zip(panel.cell_teacher.tolist(), panel.cell_year.tolist())):
            key = (labels[t], int(y))
            if key not in lookup:
                raise PanelError(f"teacher-year variables missing for teacher {key[0]!r}, year {key[1]}")
            rows[c] = lookup[key]
        return self.D[rows]


def load_teacher_year_vars(path) -> TeacherYearVars:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        for req in ("teacher_id", "year"):
            if req not in header:
                raise PanelError(f"{path}: missing required column {req!r}")
        dcols = [h for h in header if h.startswith("d") and h[1:].isdigit()]
        if not dcols:
            raise PanelError(f"{path}: no d<k> columns")
        it, iy = header.index("teacher_id"), header.index("year")
        tid, yr, ds = [], [], []
        for row in reader:
            if not row:
                continue
            try:
                tid.append(row[it].strip())
                yr.append(int(row[iy]))
                ds.append([float(row[header.index(c)]) for c in dcols])
            except (ValueError, IndexError) as exc:
                raise PanelError(f"{path}: line {reader.line_num}: {exc}") from None
    return TeacherYearVars(np.array(tid), np.array(yr), np.array(ds, dtype=float), tuple(dcols))


def within_transform(values, panel: PanelData) -> np.ndarray:
    """Demean per-cell values within teacher, giving every year equal weight."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != panel.n_cells:
        raise PanelError(f"expected {panel.n_cells} cell values, got {values.shape[0]}")
    if np.any(np.isnan(values)):
        bad = np.flatnonzero(np.isnan(values).reshape(values.shape[0], -1).any(axis=1))[0]
        raise PanelError(
            f"value missing for teacher {panel.teacher_labels[panel.cell_teacher[bad]]!r}, "
            f"year {panel.cell_year[bad]}"
        )
    means = group_means(values, panel.cell_teacher, panel.n_teachers)
    return values - means[panel.cell_teacher]


@dataclass(frozen=True, eq=False)
class ClassPanel:
    """Teacher-year aggregates.

    ``outcome_resid`` is the mean over students with an observed outcome
    (``nan`` if the class has none); ``outcome_covariate_means`` averages the
    covariates over those same students.
    """

    teacher: np.ndarray
    year: np.ndarray
    class_size: np.ndarray
    outcome_count: np.ndarray
    prelim_va: np.ndarray
    outcome_resid: np.ndarray
    covariate_means: np.ndarray
    outcome_covariate_means: np.ndarray
    n_teachers: int

    @property
    def n_cells(self) -> int:
        return self.teacher.shape[0]

    @property
    def has_outcome(self) -> np.ndarray:
        return self.outcome_count > 0

    @cached_property
    def _layout(self):
        starts = np.searchsorted(self.teacher, np.arange(self.n_teachers + 1))
        counts = np.diff(starts)
        tmax = int(counts.max())
        slot = np.arange(self.n_cells) - starts[self.teacher]
        grid = np.full((self.n_teachers, tmax), -1)
        grid[self.teacher, slot] = np.arange(self.n_cells)
        return grid, slot, counts

    @property
    def grid(self) -> np.ndarray:
        """``(n_teachers, max_years)`` cell indices, ``-1`` where padded."""
        return self._layout[0]

    @property
    def slot(self) -> np.ndarray:
        return self._layout[1]

    @property
    def years_per_teacher(self) -> np.ndarray:
        return self._layout[2]

    @property
    def mask(self) -> np.ndarray:
        return self.grid >= 0

    def to_grid(self, values) -> np.ndarray:
        """Scatter per-cell values onto the padded grid (zeros in padding)."""
        values = np.asarray(values, dtype=float)
        out = np.zeros(self.grid.shape + values.shape[1:])
        out[self.teacher, self.slot] = values
        return out

    def from_grid(self, grid_values) -> np.ndarray:
        return np.asarray(grid_values)[self.teacher, self.slot]

    def leaveout_matrix(self, j: int, values=None) -> np.ndarray:
        """``T_j x (T_j - 1)`` matrix; row ``t`` holds the other years in ascending year order."""
        values = self.prelim_va if values is None else np.asarray(values)
        v = values[self.grid[j][self.grid[j] >= 0]]
        T = v.shape[0]
        return np.stack([np.delete(v, t) for t in range(T)]) if T > 1 else np.empty((T, 0))

    @cached_property
    def _grid_years(self) -> np.ndarray:
        yg = np.zeros(self.grid.shape, dtype=np.int64)
        yg[self.teacher, self.slot] = self.year
        return yg

    def design_labels(self, mode: str) -> np.ndarray:
        return self._selector(mode)[0]

    def _selector(self, mode: str):
        cache = self.__dict__.setdefault("_selector_cache", {})
        if mode not in cache:
            cache[mode] = _build_selector(self._grid_years, self.mask, mode)
        return cache[mode]

    def leaveout_design(self, values, mode: str = "stationary") -> np.ndarray:
        """Other-year regressors for every cell.

        ``values`` is on the grid, shape ``(J, T)`` or ``(J, T, K)``. In
        stationary mode column ``g`` of row ``t`` is the sum of values in
        years ``s`` with ``|s - t|`` equal to the ``g``-th gap label; in
        unrestricted mode it is the ``g``-th other year. Returns
        ``(J, T, p)`` or ``(J, T, p, K)``.
        """
        _, sel = self._selector(mode)  # (J|1, T, p, T)
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            return (sel @ v[:, None, :, None])[..., 0]
        return sel @ v[:, None, :, :]

    def centered(self, how: str = "grand") -> "ClassPanel":
        """Subtract cell averages (``grand``) or per-year cell averages (``year``).

        Applied to the scores, outcomes and covariate means alike; equivalent
        to an intercept or year effects in both residualizing regressions.
        """
        if how == "none":
            return self
        if how == "grand":
            groups = np.zeros(self.n_cells, dtype=int)
        elif how == "year":
            groups = np.unique(self.year, return_inverse=True)[1]
        else:
            raise ValueError(f"unknown centering {how!r}")
        ng = groups.max() + 1
        hy = self.has_outcome

        def demean(v, rows):
            out = np.array(v, dtype=float, copy=True)
            if not np.any(rows):
                return out
            g = groups[rows]
            m = group_means(v[rows], g, ng)
            out[rows] = v[rows] - m[g]
            return out

        allrows = np.ones(self.n_cells, dtype=bool)
        return ClassPanel(
            teacher=self.teacher, year=self.year, class_size=self.class_size,
            outcome_count=self.outcome_count,
            prelim_va=demean(self.prelim_va, allrows),
            outcome_resid=demean(self.outcome_resid, hy),
            covariate_means=demean(self.covariate_means, allrows),
            outcome_covariate_means=demean(self.outcome_covariate_means, hy),
            n_teachers=self.n_teachers,
        )


def _build_selector(grid_years, mask, mode):
    J, T = grid_years.shape
    if mode == "stationary":
        d = np.abs(grid_years[:, :, None] - grid_years[:, None, :])
        valid = mask[:, :, None] & mask[:, None, :] & (d > 0)
        labels = np.unique(d[valid])
        if labels.size == 0:
            raise PanelError("no teacher has two or more years")
        shared = bool(np.all(grid_years == grid_years[:1]) and np.all(mask == mask[:1]))
        src_d, src_v = (d[:1], valid[:1]) if shared else (d, valid)
        sel = (src_d[:, :, None, :] == labels[None, None, :, None]) & src_v[:, :, None, :]
        return labels, sel.astype(float)
    if mode == "unrestricted":
        if not (np.all(mask) and np.all(grid_years == grid_years[:1])):
            raise PanelError("unrestricted mode requires every teacher to be observed in the same years")
        t = np.arange(T)
        k = np.arange(T - 1)
        src = np.where(k[None, :] < t[:, None], k[None, :], k[None, :] + 1)  # (T, T-1)
        sel = (src[:, :, None] == t[None, None, :]).astype(float)  # (T, p, T)
        return k + 1, sel[None]
    raise ValueError(f"unknown mode {mode!r}")


def class_aggregate(panel: PanelData, residualized_scores, residualized_outcomes=None) -> ClassPanel:
    """Class means of residualized scores and outcomes, plus covariate means."""
    r = np.asarray(residualized_scores, dtype=float)
    if r.shape[0] != panel.n_students:
        raise PanelError(f"expected {panel.n_students} score residuals, got {r.shape[0]}")
    y = panel.outcome if residualized_outcomes is None else np.asarray(residualized_outcomes, dtype=float)
    if y.shape[0] != panel.n_students:
        raise PanelError(f"expected {panel.n_students} outcome residuals, got {y.shape[0]}")
    C = panel.n_cells
    cell = panel.cell
    size = np.bincount(cell, minlength=C)
    obs = ~np.isnan(y)
    ocount = np.bincount(cell[obs], minlength=C)
    prelim = np.bincount(cell, weights=r, minlength=C) / size
    with np.errstate(invalid="ignore", divide="ignore"):
        yres = np.bincount(cell[obs], weights=y[obs], minlength=C) / ocount
    K = panel.K
    xm = np.zeros((C, K))
    xmo = np.zeros((C, K))
    for k in range(K):
        xm[:, k] = np.bincount(cell, weights=panel.X[:, k], minlength=C) / size
        with np.errstate(invalid="ignore", divide="ignore"):
            xmo[:, k] = np.bincount(cell[obs], weights=panel.X[obs, k], minlength=C) / ocount
    xmo[ocount == 0] = 0.0
    return ClassPanel(
        teacher=panel.cell_teacher, year=panel.cell_year, class_size=size, outcome_count=ocount,
        prelim_va=prelim, outcome_resid=yres, covariate_means=xm, outcome_covariate_means=xmo,
        n_teachers=panel.n_teachers,
    )
