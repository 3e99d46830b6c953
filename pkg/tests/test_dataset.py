import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interopt.dataset import (
    Dataset,
    FeatureSchema,
    FeatureSpec,
    NormStats,
    SyntheticGroundTruth,
    WellRecord,
    default_schema,
    default_truth,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    load_schema,
    random_truth,
    save_schema,
    split_loo,
    write_csv,
)
from interopt.errors import (
    CSVParseError,
    DegenerateFeatureError,
    DuplicateKeyError,
    SchemaError,
    SchemaMismatchError,
    TrainTooSmallError,
)


def small_schema(direction="minimize"):
    return FeatureSchema(
        (FeatureSpec("a", "fixed"), FeatureSpec("b", "adjustable", integer_valued=True),
         FeatureSpec("c", "adjustable"), FeatureSpec("y", "target")),
        direction,
    )


def test_schema_roles_and_indices():
    s = small_schema()
    assert s.input_names == ["a", "b", "c"]
    assert s.target == "y"
    assert s.adjustable_index.tolist() == [1, 2]
    assert s.fixed_index.tolist() == [0]
    assert s.target_value == -1.0
    assert small_schema("maximize").target_value == 1.0


@pytest.mark.parametrize("specs", [
    (FeatureSpec("a", "fixed"),),
    (FeatureSpec("a", "fixed"), FeatureSpec("y", "target"), FeatureSpec("z", "target")),
    (FeatureSpec("a", "fixed"), FeatureSpec("a", "target")),
])
def test_schema_rejects_bad_specs(specs):
    with pytest.raises(SchemaError):
        FeatureSchema(specs)


def test_reserved_and_bad_roles():
    with pytest.raises(SchemaError):
        FeatureSpec("id", "fixed")
    with pytest.raises(SchemaError):
        FeatureSpec("a", "tunable")
    with pytest.raises(SchemaError):
        FeatureSchema((FeatureSpec("y", "target"),), "sideways")


def test_optimizable_needs_adjustable():
    s = FeatureSchema((FeatureSpec("a", "fixed"), FeatureSpec("y", "target")))
    with pytest.raises(SchemaError):
        s.require_optimizable()
    default_schema().require_optimizable()


def test_schema_roundtrip_and_fingerprint(tmp_path):
    s = default_schema()
    save_schema(s, tmp_path / "s.json")
    back = load_schema(tmp_path / "s.json")
    assert back == s
    assert back.fingerprint == s.fingerprint
    assert small_schema().fingerprint != small_schema("maximize").fingerprint


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_csv_roundtrip_any_column_order(tmp_path):
    s = small_schema()
    p = _write(tmp_path / "d.csv", "c,id,y,a,b\n0.5,w1,3.0,1.0,4\n1.5,w2,2.0,2.0,5\n")
    d = load_csv(p, s)
    assert d.ids == ("w1", "w2")
    np.testing.assert_array_equal(d.X, [[1.0, 4.0, 0.5], [2.0, 5.0, 1.5]])
    np.testing.assert_array_equal(d.y, [3.0, 2.0])
    write_csv(d, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_text().splitlines()[1] == "w1,1.0,4,0.5,3.0"
    d2 = load_csv(tmp_path / "out.csv", s)
    np.testing.assert_array_equal(d2.X, d.X)
    assert d2.ids == d.ids


def test_csv_without_id_numbers_rows(tmp_path):
    d = load_csv(_write(tmp_path / "d.csv", "a,b,c,y\n1,2,3,4\n5,6,7,8\n"), small_schema())
    assert d.ids == ("0", "1")


def test_csv_header_mismatch_names_column(tmp_path):
    with pytest.raises(SchemaMismatchError) as e:
        load_csv(_write(tmp_path / "d.csv", "a,b,y\n1,2,3\n"), small_schema())
    assert e.value.column == "c"
    with pytest.raises(SchemaMismatchError) as e:
        load_csv(_write(tmp_path / "d.csv", "a,b,c,y,extra\n1,2,3,4,5\n"), small_schema())
    assert e.value.column == "extra"


def test_csv_bad_cell_reports_row_and_column(tmp_path):
    with pytest.raises(CSVParseError) as e:
        load_csv(_write(tmp_path / "d.csv", "a,b,c,y\n1,2,3,4\n1,x,3,4\n"), small_schema())
    assert (e.value.row, e.value.column) == (3, "b")
    with pytest.raises(CSVParseError):
        load_csv(_write(tmp_path / "d.csv", "a,b,c,y\n1,2,inf,4\n"), small_schema())


def test_csv_duplicate_id(tmp_path):
    with pytest.raises(DuplicateKeyError):
        load_csv(_write(tmp_path / "d.csv", "id,a,b,c,y\nw,1,2,3,4\nw,1,2,3,4\n"), small_schema())


def test_csv_target_optional_for_prediction(tmp_path):
    s = small_schema()
    d = load_csv(_write(tmp_path / "d.csv", "a,b,c\n1,2,3\n"), s, require_target=False)
    assert d.y is None and not d.has_targets
    d = load_csv(_write(tmp_path / "d.csv", "a,b,c,y\n1,2,3,\n"), s, require_target=False)
    assert math.isnan(d.y[0])
    with pytest.raises(Exception):
        load_csv(_write(tmp_path / "d.csv", "a,b,c,y\n1,2,3,\n"), s)


def test_dataset_is_read_only():
    d = generate_synthetic(5, default_schema(), default_truth())
    with pytest.raises(ValueError):
        d.X[0, 0] = 1.0


def test_records_and_subset():
    d = generate_synthetic(6, default_schema(), default_truth())
    r = d.record(2)
    assert isinstance(r, WellRecord) and r.id == d.ids[2]
    again = Dataset.from_records(d.schema, list(d.records()))
    np.testing.assert_array_equal(again.X, d.X)
    sub = d.subset([4, 1])
    assert sub.ids == (d.ids[4], d.ids[1])
    assert d.index_of(d.ids[3]) == 3
    with pytest.raises(KeyError):
        d.index_of("nope")


def test_normalizer_population_std():
    d = generate_synthetic(30, default_schema(), default_truth())
    ns = fit_normalizer(d)
    np.testing.assert_allclose(ns.x_std, d.X.std(axis=0, ddof=0))
    Z = ns.normalize_x(d.X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(ns.denormalize_x(Z), d.X, rtol=1e-13)
    back = NormStats.from_dict(json.loads(json.dumps(ns.to_dict())))
    np.testing.assert_array_equal(back.x_mean, ns.x_mean)
    np.testing.assert_array_equal(back.x_std, ns.x_std)
    assert (back.y_mean, back.y_std) == (ns.y_mean, ns.y_std)


def test_normalizer_degenerate_and_small():
    s = small_schema()
    d = Dataset(s, ("0", "1"), np.array([[1.0, 2, 3], [1.0, 3, 4]]), np.array([1.0, 2.0]))
    with pytest.raises(DegenerateFeatureError) as e:
        fit_normalizer(d)
    assert e.value.feature == "a"
    with pytest.raises(TrainTooSmallError):
        fit_normalizer(d.subset([0]))
    flat = Dataset(s, ("0", "1"), np.array([[1.0, 2, 3], [2.0, 3, 4]]), np.array([5.0, 5.0]))
    assert fit_normalizer(flat).y_std == 1.0


def test_split_loo():
    d = generate_synthetic(4, default_schema(), default_truth())
    train_part, held = split_loo(d, 2)
    assert held.id == d.ids[2] and d.ids[2] not in train_part.ids and len(train_part) == 3
    with pytest.raises(IndexError):
        split_loo(d, 4)
    with pytest.raises(TrainTooSmallError):
        split_loo(d.subset([0]), 0)


def test_synthetic_is_seeded_and_in_range():
    s, t = default_schema(), default_truth(seed=5)
    a, b = generate_synthetic(40, s, t), generate_synthetic(40, s, t)
    np.testing.assert_array_equal(a.X, b.X)
    lo = np.array([t.ranges[n][0] for n in s.input_names])
    hi = np.array([t.ranges[n][1] for n in s.input_names])
    assert np.all((a.X >= lo) & (a.X <= hi))
    stages = a.X[:, s.input_names.index("fracturing_stages")]
    np.testing.assert_array_equal(stages, np.round(stages))
    np.testing.assert_allclose(a.y, t.evaluate(s, a.X), atol=0)


def test_saturating_optimum_matches_derivative():
    t = default_truth()
    u = t.saturating_optimum()
    s = t.saturating
    # derivative of slope*u - amp*(1 - exp(-rate (u+1))) vanishes at the optimum
    assert abs(s["slope"] - s["amplitude"] * s["rate"] * math.exp(-s["rate"] * (u + 1))) < 1e-12


def test_truth_roundtrip():
    t = random_truth(small_schema(), seed=2, noise_std=0.1)
    assert SyntheticGroundTruth.from_dict(json.loads(json.dumps(t.to_dict()))).to_dict() == t.to_dict()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=2, max_size=12))
def test_normalize_roundtrip_property(rows):
    X = np.array(rows)
    if np.any(X.std(axis=0) == 0):
        return
    d = Dataset(small_schema(), tuple(map(str, range(len(rows)))), X, np.arange(len(rows), dtype=float))
    ns = fit_normalizer(d)
    np.testing.assert_allclose(ns.denormalize_x(ns.normalize_x(X)), X, rtol=1e-9, atol=1e-9)
