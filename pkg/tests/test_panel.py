import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vareg import PanelData, PanelError, StudentRecord, class_aggregate, load_panel, write_panel
from vareg.panel import TeacherYearVars, load_teacher_year_vars, within_transform

from conftest import random_panel


def test_from_arrays_sorts_and_indexes():
    p = PanelData.from_arrays(
        student_id=["a", "b", "c", "d", "e"], teacher_id=["t2", "t1", "t2", "t1", "t1"],
        year=[2, 2, 1, 1, 1], score=[1.0, 2.0, 3.0, 4.0, 5.0],
    )
    assert p.teacher_labels.tolist() == ["t1", "t2"]
    assert p.teacher.tolist() == [0, 0, 0, 1, 1]
    assert p.year.tolist() == [1, 1, 2, 1, 2]
    assert p.n_cells == 4
    assert p.cell.tolist() == [0, 0, 1, 2, 3]
    assert not p.has_outcome.any()


def test_single_year_teachers_are_excluded():
    p = PanelData.from_arrays(["a", "b", "c", "d"], ["t1", "t1", "t2", "t2"], [1, 2, 1, 1], [0.0, 1.0, 2.0, 3.0])
    assert p.excluded_teachers == ("t2",)
    assert p.n_teachers == 1 and p.n_students == 2


def test_duplicate_student_year_raises():
    with pytest.raises(PanelError, match="duplicate"):
        PanelData.from_arrays(["a", "a"], ["t1", "t2"], [1, 1], [0.0, 1.0])


def test_non_finite_score_raises():
    with pytest.raises(PanelError, match="non-finite"):
        PanelData.from_arrays(["a", "b"], ["t1", "t1"], [1, 2], [0.0, np.nan])


def test_from_records_matches_from_arrays():
    recs = [StudentRecord(f"s{i}", f"t{i % 2}", 1 + i // 4, float(i), np.nan if i == 3 else 2.0 * i, (0.1 * i,))
            for i in range(8)]
    a = PanelData.from_records(recs)
    b = PanelData.from_arrays([r.student_id for r in recs], [r.teacher_id for r in recs], [r.year for r in recs],
                              [r.score for r in recs], [r.outcome for r in recs], [[r.covariates[0]] for r in recs])
    np.testing.assert_array_equal(a.score, b.score)
    np.testing.assert_array_equal(a.X, b.X)
    assert a.has_outcome.sum() == 7


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = random_panel(rng, unbalanced=True, missing=0.2)
    path = tmp_path / "p.csv"
    write_panel(p, path)
    q = load_panel(path)
    np.testing.assert_array_equal(p.score, q.score)
    np.testing.assert_array_equal(p.X, q.X)
    np.testing.assert_array_equal(np.isnan(p.outcome), np.isnan(q.outcome))
    np.testing.assert_array_equal(p.outcome[p.has_outcome], q.outcome[q.has_outcome])
    assert p.teacher_labels.tolist() == q.teacher_labels.tolist()
    assert q.covariate_names == ("x1", "x2")


def test_load_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("student_id,teacher_id,year,score,outcome,x1\ns1,t1,1,0.5,,1\ns2,t1,2,oops,,1\n")
    with pytest.raises(PanelError, match="line 3"):
        load_panel(path)


def test_load_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("student_id,teacher_id,score\ns1,t1,0.5\n")
    with pytest.raises(PanelError, match="year"):
        load_panel(path)


def test_load_with_schema(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,tid,yr,math,earn,x1\na,t,1,1.0,2.0,0.5\nb,t,2,2.0,,0.7\n")
    p = load_panel(path, schema={"student_id": "id", "teacher_id": "tid", "year": "yr",
                                 "score": "math", "outcome": "earn"})
    assert p.n_students == 2 and p.has_outcome.tolist() == [True, False]


def test_class_aggregate_brute_force():
    rng = np.random.default_rng(1)
    p = random_panel(rng, unbalanced=True, missing=0.3)
    r = rng.normal(size=p.n_students)
    cp = class_aggregate(p, r, p.outcome)
    for c in range(p.n_cells):
        rows = p.cell == c
        assert cp.class_size[c] == rows.sum()
        assert cp.prelim_va[c] == pytest.approx(r[rows].mean(), abs=1e-12)
        np.testing.assert_allclose(cp.covariate_means[c], p.X[rows].mean(axis=0), atol=1e-12)
        obs = rows & p.has_outcome
        if obs.any():
            assert cp.outcome_resid[c] == pytest.approx(p.outcome[obs].mean(), abs=1e-12)
            np.testing.assert_allclose(cp.outcome_covariate_means[c], p.X[obs].mean(axis=0), atol=1e-12)
        else:
            assert np.isnan(cp.outcome_resid[c])


def _brute_stationary(cp, values, j, t_slot, labels):
    years = cp.year[cp.teacher == j]
    vals = values[cp.teacher == j]
    t = years[t_slot]
    return np.array([vals[np.abs(years - t) == g].sum() for g in labels])


def test_stationary_design_brute_force():
    rng = np.random.default_rng(2)
    p = random_panel(rng, J=9, T=5, unbalanced=True)
    cp = class_aggregate(p, p.score)
    labels = cp.design_labels("stationary")
    Z = cp.from_grid(cp.leaveout_design(cp.to_grid(cp.prelim_va), "stationary"))
    for c in range(cp.n_cells):
        j = cp.teacher[c]
        np.testing.assert_allclose(Z[c], _brute_stationary(cp, cp.prelim_va, j, cp.slot[c], labels), atol=1e-12)


def test_unrestricted_design_matches_leaveout_matrix():
    rng = np.random.default_rng(3)
    p = random_panel(rng, J=5, T=4)
    cp = class_aggregate(p, p.score)
    Z = cp.leaveout_design(cp.to_grid(cp.prelim_va), "unrestricted")
    for j in range(cp.n_teachers):
        np.testing.assert_allclose(Z[j], cp.leaveout_matrix(j), atol=1e-12)


def test_unrestricted_requires_balance():
    rng = np.random.default_rng(4)
    p = random_panel(rng, J=6, T=4, unbalanced=True)
    cp = class_aggregate(p, p.score)
    if np.all(cp.mask) and len({tuple(y) for y in p.years_per_teacher}) == 1:
        pytest.skip("draw happened to be balanced")
    with pytest.raises(PanelError, match="same years"):
        cp.leaveout_design(cp.to_grid(cp.prelim_va), "unrestricted")


def test_centering():
    rng = np.random.default_rng(5)
    p = random_panel(rng, J=8, T=3, missing=0.1)
    cp = class_aggregate(p, p.score, p.outcome)
    g = cp.centered("grand")
    assert abs(g.prelim_va.mean()) < 1e-12
    assert abs(np.nanmean(g.outcome_resid)) < 1e-12
    y = cp.centered("year")
    for yr in np.unique(cp.year):
        assert abs(y.prelim_va[cp.year == yr].mean()) < 1e-12
    assert cp.centered("none") is cp
    with pytest.raises(ValueError):
        cp.centered("weird")


def test_within_transform_and_teacher_year_vars(tmp_path):
    rng = np.random.default_rng(6)
    p = random_panel(rng, J=4, T=3)
    v = rng.normal(size=p.n_cells)
    w = within_transform(v, p)
    for j in range(p.n_teachers):
        assert abs(w[p.cell_teacher == j].sum()) < 1e-12
    v[2] = np.nan
    with pytest.raises(PanelError, match="missing"):
        within_transform(v, p)

    path = tmp_path / "d.csv"
    lines = ["teacher_id,year,d1"]
    for c in reversed(range(p.n_cells)):
        lines.append(f"{p.teacher_labels[p.cell_teacher[c]]},{p.cell_year[c]},{c}")
    path.write_text("\n".join(lines) + "\n")
    dv = load_teacher_year_vars(path)
    np.testing.assert_array_equal(dv.align(p)[:, 0], np.arange(p.n_cells))
    short = TeacherYearVars(dv.teacher_id[1:], dv.year[1:], dv.D[1:])
    with pytest.raises(PanelError, match="missing"):
        short.align(p)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), J=st.integers(2, 6), T=st.integers(2, 5))
def test_cell_layout_properties(seed, J, T):
    p = random_panel(np.random.default_rng(seed), J=J, T=T, n=3, K=1, unbalanced=True)
    cp = class_aggregate(p, p.score)
    assert cp.class_size.sum() == p.n_students
    assert np.all(cp.years_per_teacher >= 2)
    grid = cp.grid
    assert sorted(grid[grid >= 0].tolist()) == list(range(cp.n_cells))
    back = cp.from_grid(cp.to_grid(cp.prelim_va))
    np.testing.assert_array_equal(back, cp.prelim_va)
