import numpy as np
import pytest
from hypothesis import given, settings

from conftest import params_strategy
from overid.errors import EmptyDatasetError, InvalidParamsError, SchemaError
from overid.scm import (
    DEFAULT_PARAMS,
    VARIABLES,
    Dataset,
    Schema,
    ScmParams,
    implied_covariance,
    restrict,
    sample,
    sample_batch,
    sample_binary_treatment,
    sample_intervention,
    true_effect,
)


def test_no_edges_gives_identity():
    p = ScmParams(0, 0, 0, 0)
    np.testing.assert_array_equal(implied_covariance(p).entries, np.eye(4))


def test_default_covariance_entries():
    cov = implied_covariance(DEFAULT_PARAMS)
    assert cov["X", "X"] == 26
    assert cov["X", "W"] == 5
    assert cov["M", "M"] == 651
    assert cov["M", "X"] == 5 * 26
    # y = 10 m + 4 w + u_y
    assert cov["Y", "W"] == 10 * cov["M", "W"] + 4 * 1
    assert cov["Y", "Y"] == 100 * 651 + 16 + 2 * 10 * 4 * 25 + 1


def test_covariance_matches_large_sample():
    p = ScmParams(2.0, -1.5, 0.7, 1.2, 0.5, 1.3, 0.8, 1.1)
    data = sample(p, 1_000_000, seed=3)
    z = np.column_stack([data.x, data.y, data.w, data.m])
    emp = z.T @ z / data.n
    theory = implied_covariance(p).entries
    rel = np.abs(emp - theory) / np.abs(theory)
    assert rel.max() < 0.01


@pytest.mark.parametrize("n", [1_000, 10_000, 100_000])
def test_sample_covariance_converges(n):
    data = sample(DEFAULT_PARAMS, n, seed=n)
    z = np.column_stack([data.x, data.y, data.w, data.m])
    theory = implied_covariance(DEFAULT_PARAMS).entries
    err = np.abs(z.T @ z / n - theory) / np.abs(theory)
    assert err.max() <= 5 * np.sqrt(1 / n) * (1 + np.abs(theory).max())


@settings(max_examples=200, deadline=None)
@given(params_strategy)
def test_covariance_symmetric_positive_definite(p):
    cov = implied_covariance(p)
    np.testing.assert_allclose(cov.entries, cov.entries.T, atol=1e-12)
    # relative check: entries reach 1e7 for large coefficients
    assert cov.eigenvalues().min() > -1e-9 * np.abs(cov.entries).max()
    np.linalg.cholesky(cov.entries)


@settings(max_examples=50, deadline=None)
@given(params_strategy)
def test_sub_order_is_submatrix(p):
    full = implied_covariance(p)
    for order in (["X", "W"], ["M", "Y", "X"], ["w", "m"]):
        sub = implied_covariance(p, order)
        np.testing.assert_array_equal(sub.entries, full.sub(order).entries)


def test_unknown_variable_is_schema_error():
    with pytest.raises(SchemaError):
        implied_covariance(DEFAULT_PARAMS, ["X", "Z"])


@pytest.mark.parametrize("field", ["var_uw", "var_ux", "var_um", "var_uy"])
@pytest.mark.parametrize("value", [0.0, -1.0])
def test_nonpositive_variance_rejected(field, value):
    with pytest.raises(InvalidParamsError):
        DEFAULT_PARAMS.replace(**{field: value})


def test_non_finite_rejected():
    with pytest.raises(InvalidParamsError):
        ScmParams(np.nan, 1, 1, 1)


@pytest.mark.parametrize("a, c, expected", [(10, 5, 50), (3, 0, 0), (-2, 3, -6)])
def test_true_effect(a, c, expected):
    p = ScmParams(a, 1, c, 1)
    assert true_effect(p) == expected
    assert p.true_effect == expected


def test_degenerate_mediator_noise():
    p = DEFAULT_PARAMS.replace(var_um=1e-12)
    data = sample(p, 100, seed=1)
    np.testing.assert_allclose(data.m, 5 * data.x, atol=1e-5)


def test_sample_is_deterministic():
    a = sample(DEFAULT_PARAMS, 50, seed=9)
    b = sample(DEFAULT_PARAMS, 50, seed=9)
    for name in "xywm":
        np.testing.assert_array_equal(a.columns[name], b.columns[name])
    c = sample(DEFAULT_PARAMS, 50, seed=10)
    assert not np.array_equal(a.x, c.x)


def test_sample_means_near_zero():
    n = 100_000
    data = sample(DEFAULT_PARAMS, n, seed=11)
    cov = implied_covariance(DEFAULT_PARAMS)
    for name in "xywm":
        se = np.sqrt(cov[name, name] / n)
        assert abs(data.columns[name].mean()) < 5 * se


def test_sample_rejects_empty():
    with pytest.raises(EmptyDatasetError):
        sample(DEFAULT_PARAMS, 0, seed=0)


def test_batch_rows_match_single_samples():
    seeds = [4, 17, 99]
    batch = sample_batch(DEFAULT_PARAMS, 30, seeds)
    for r, s in enumerate(seeds):
        single = sample(DEFAULT_PARAMS, 30, s)
        for name in "xywm":
            np.testing.assert_array_equal(batch[name][r], single.columns[name])


def test_restrict_drops_columns():
    data = sample(DEFAULT_PARAMS, 10, seed=0)
    conf = restrict(data, Schema.CONFOUNDER_ONLY)
    med = data.restrict("mediator")
    assert set(conf.columns) == {"x", "y", "w"}
    assert set(med.columns) == {"x", "y", "m"}
    same = restrict(data, "full")
    for name in "xywm":
        np.testing.assert_array_equal(same.columns[name], data.columns[name])


def test_restrict_cannot_add_columns():
    med = sample(DEFAULT_PARAMS, 10, seed=0).restrict("mediator")
    with pytest.raises(SchemaError):
        med.restrict("full")


def test_dataset_validation():
    x = np.arange(5.0)
    with pytest.raises(SchemaError):
        Dataset("full", {"x": x, "y": x, "w": x})
    with pytest.raises(SchemaError):
        Dataset("confounder", {"x": x, "y": x, "w": x, "m": x})
    with pytest.raises(SchemaError):
        Dataset("confounder", {"x": x, "y": x[:4], "w": x})
    with pytest.raises(EmptyDatasetError):
        Dataset("mediator", {"x": [], "y": [], "m": []})
    with pytest.raises(SchemaError):
        Dataset("mediator", {"x": x, "y": x, "m": x}).w


def test_dataset_arrays_are_read_only():
    data = sample(DEFAULT_PARAMS, 5, seed=0)
    with pytest.raises(ValueError):
        data.x[0] = 1.0


def test_binary_treatment_sampler():
    data = sample_binary_treatment(DEFAULT_PARAMS.replace(d=1.0), 2000, seed=5)
    assert set(np.unique(data.x)) == {0.0, 1.0}
    assert 0.3 < data.x.mean() < 0.7


def test_intervention_removes_confounding():
    p = DEFAULT_PARAMS
    treated = sample_intervention(p, 1.0, 200_000, seed=1)
    control = sample_intervention(p, 0.0, 200_000, seed=2)
    diff = treated.y.mean() - control.y.mean()
    se = np.sqrt(treated.y.var() / treated.n + control.y.var() / control.n)
    assert abs(diff - p.true_effect) < 4 * se


def test_variable_order_constant():
    assert VARIABLES == ("X", "Y", "W", "M")
