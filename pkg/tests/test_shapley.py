import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interopt.emulator import EmulatorModel, init_layers
from interopt.errors import ExactModeCapError, ShapeError
from interopt.shapley import (
    BackgroundSet,
    Coalition,
    additivity_check,
    base_value,
    coalition_weight,
    explain,
    global_shapley,
    make_background,
    shapley_exact,
    shapley_sampled,
    value_function,
    write_attributions_csv,
    write_global_json,
)

from shapley_oracle import brute_force_shapley


def random_mlp(n, seed, hidden=(6,)):
    return EmulatorModel(tuple(init_layers([n, *hidden, 1], np.random.default_rng(seed))))


def test_product_of_two_features_splits_evenly():
    f = lambda Z: Z[:, 0] * Z[:, 1]
    bg = BackgroundSet(np.zeros((1, 2)))
    a = shapley_exact(f, bg, [1.0, 2.0])
    np.testing.assert_allclose(a.values, [1.0, 1.0], atol=1e-15)
    assert a.base_value == 0.0 and a.prediction == 2.0


def test_value_function_accepts_coalition_forms():
    f = lambda Z: Z.sum(axis=1)
    bg = BackgroundSet(np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]))
    x = [5.0, 5.0, 5.0]
    assert value_function(f, bg, x, []) == 0.0
    assert value_function(f, bg, x, [0, 2]) == pytest.approx(8.0)
    assert value_function(f, bg, x, np.array([True, False, True])) == pytest.approx(8.0)
    assert value_function(f, bg, x, Coalition.of([0, 2], 3)) == pytest.approx(8.0)
    assert base_value(f, bg) == 3.0


def test_coalition_helpers():
    c = Coalition.of([0, 3], 5)
    assert 3 in c and 1 not in c and len(c) == 2
    assert c.members() == [0, 3]
    assert c.as_bool().tolist() == [True, False, False, True, False]


def test_coalition_weight_values():
    assert coalition_weight(1, 0) == 1.0
    assert coalition_weight(3, 1) == pytest.approx(1 / 6)
    assert coalition_weight(4, 0) == pytest.approx(1 / 4)
    with pytest.raises(ValueError):
        coalition_weight(3, 3)
    # the large-n branch agrees with the exact branch at the boundary
    assert coalition_weight(21, 7) == pytest.approx(
        math.factorial(7) * math.factorial(13) / math.factorial(21), rel=1e-12)


def test_matches_brute_force_on_mlp():
    rng = np.random.default_rng(4)
    m = random_mlp(5, 1)
    bg = BackgroundSet(rng.normal(size=(7, 5)))
    x = rng.normal(size=5)
    np.testing.assert_allclose(shapley_exact(m, bg, x).values, brute_force_shapley(m, bg.rows, x),
                               atol=1e-12)


def test_linear_closed_form():
    rng = np.random.default_rng(5)
    beta = rng.normal(size=6)
    f = lambda Z: Z @ beta + 0.7
    bg = BackgroundSet(rng.normal(size=(20, 6)))
    x = rng.normal(size=6)
    np.testing.assert_allclose(shapley_exact(f, bg, x).values, beta * (x - bg.rows.mean(axis=0)), atol=1e-12)


def test_exact_cap_message_names_sampled_mode():
    bg = BackgroundSet(np.zeros((2, 17)))
    with pytest.raises(ExactModeCapError) as e:
        shapley_exact(lambda Z: Z[:, 0], bg, np.zeros(17))
    assert "shapley_sampled" in str(e.value) and "--sampled" in str(e.value)
    # explain falls back to sampling above the cap
    a = explain(lambda Z: Z[:, 0], bg, np.ones(17), n_permutations=3)
    assert a.values[0] == pytest.approx(1.0)


def test_instance_width_checked():
    with pytest.raises(ShapeError):
        shapley_exact(lambda Z: Z[:, 0], BackgroundSet(np.zeros((2, 3))), np.zeros(4))


def test_sampled_converges_to_exact():
    rng = np.random.default_rng(6)
    m = random_mlp(6, 2, (8,))
    bg = BackgroundSet(rng.normal(size=(16, 6)))
    x = rng.normal(size=6)
    exact = shapley_exact(m, bg, x).values
    s = shapley_sampled(m, bg, x, 400, seed=1)
    assert np.all(np.abs(s.values - exact) <= 3 * s.std_error + 1e-12)
    # efficiency holds for every permutation, so also for their mean
    assert s.efficiency_gap() < 1e-12


def test_sampled_single_permutation_and_seed():
    m = random_mlp(4, 3)
    bg = BackgroundSet(np.random.default_rng(0).normal(size=(5, 4)))
    a = shapley_sampled(m, bg, np.ones(4), 1, seed=1)
    b = shapley_sampled(m, bg, np.ones(4), 1, seed=1)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.std_error, np.zeros(4))
    with pytest.raises(ValueError):
        shapley_sampled(m, bg, np.ones(4), 0)


def test_background_subsampling():
    Z = np.arange(600.0).reshape(200, 3)
    bg = make_background(Z, 64, seed=3)
    assert bg.rows.shape == (64, 3)
    np.testing.assert_array_equal(bg.rows, make_background(Z, 64, seed=3).rows)
    assert make_background(Z[:10], 64).rows.shape == (10, 3)


def test_additivity_report():
    rng = np.random.default_rng(8)
    bg = BackgroundSet(rng.normal(size=(6, 4)))
    rep = additivity_check(random_mlp(4, 1), random_mlp(4, 2), bg, rng.normal(size=4))
    assert rep.passed and rep.max_defect <= 1e-12


def test_physical_units_scaling():
    a = shapley_exact(lambda Z: Z[:, 0], BackgroundSet(np.zeros((1, 2))), [2.0, 1.0])
    p = a.to_physical(10.0, 3.0)
    np.testing.assert_allclose(p.values, [6.0, 0.0])
    assert p.base_value == 10.0 and p.prediction == 16.0
    assert p.efficiency_gap() == 0.0


def test_global_importance_and_reports(tmp_path):
    rng = np.random.default_rng(9)
    m = random_mlp(3, 4)
    bg = BackgroundSet(rng.normal(size=(5, 3)))
    attrs = [shapley_exact(m, bg, rng.normal(size=3), record_id=f"r{i}") for i in range(6)]
    gi = global_shapley(attrs)
    np.testing.assert_allclose(gi.values, np.mean([np.abs(a.values) for a in attrs], axis=0))
    assert [gi.values[k] for k in gi.ranking()] == sorted(gi.values, reverse=True)
    names = ["p", "q", "r"]
    write_attributions_csv(attrs, names, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "id,p,q,r,base_value,prediction" and len(lines) == 7
    for line in lines[1:]:
        cells = line.split(",")
        phi = np.array(list(map(float, cells[1:4])))
        assert abs(phi.sum() + float(cells[4]) - float(cells[5])) < 1e-12
    write_global_json(gi, names, tmp_path / "g.json")
    d = json.loads((tmp_path / "g.json").read_text())
    vals = [e["mean_abs_shap"] for e in d["importance"]]
    assert vals == sorted(vals, reverse=True)
    with pytest.raises(ValueError):
        global_shapley([])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_efficiency_property(n, seed):
    rng = np.random.default_rng(seed)
    m = random_mlp(n, seed % 1000)
    bg = BackgroundSet(rng.normal(size=(rng.integers(1, 9), n)))
    a = shapley_exact(m, bg, rng.normal(size=n))
    assert a.efficiency_gap() <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_dummy_and_symmetry_property(n, seed):
    rng = np.random.default_rng(seed)
    inner = random_mlp(n - 1, seed % 997)
    # feature n-1 is a dummy; features 0 and 1 enter symmetrically through their sum
    def f(Z):
        Y = Z[:, : n - 1].copy()
        s = Y[:, 0] + (Z[:, 1] if n > 2 else 0.0)
        Y[:, 0] = s
        if n > 2:
            Y[:, 1] = s
        return inner(Y)
    bg_rows = rng.normal(size=(5, n))
    x = rng.normal(size=n)
    if n > 2:
        # symmetry needs the pair to be exchangeable in x and in the background
        x[1] = x[0]
        bg_rows[:, 1] = bg_rows[:, 0]
    a = shapley_exact(f, BackgroundSet(bg_rows), x)
    assert abs(a.values[-1]) <= 1e-12
    if n > 2:
        assert abs(a.values[0] - a.values[1]) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 16))
def test_weights_sum_to_one_over_coalitions(n):
    total = sum(math.comb(n - 1, s) * coalition_weight(n, s) for s in range(n))
    assert abs(total - 1.0) <= 1e-12
