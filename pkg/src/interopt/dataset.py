"""Tabular well data: schema, CSV ingestion, normalization, LOO splits and a
synthetic ground-truth generator used as a verification oracle.

Feature values are stored in physical units in schema order (target
excluded); the target lives in its own vector. All containers are frozen and
their arrays are marked read-only so they can be shared between workers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    CSVParseError,
    DegenerateFeatureError,
    DuplicateKeyError,
    SchemaError,
    SchemaMismatchError,
    TrainTooSmallError,
)

ID_COLUMN = "id"
ROLES = ("adjustable", "fixed", "target")
DIRECTIONS = ("minimize", "maximize")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    role: str
    unit: str = ""
    integer_valued: bool = False

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise SchemaError("feature name must be a non-empty string")
        if self.name == ID_COLUMN:
            raise SchemaError(f"{ID_COLUMN!r} is reserved for the record id column")
        if self.role not in ROLES:
            raise SchemaError(f"feature {self.name!r}: role must be one of {ROLES}")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list with adjustable/fixed/target roles."""

    specs: tuple[FeatureSpec, ...]
    objective_direction: str = "minimize"

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dup}")
        n_target = sum(s.role == "target" for s in self.specs)
        if n_target != 1:
            raise SchemaError(f"schema needs exactly one target, found {n_target}")
        if self.objective_direction not in DIRECTIONS:
            raise SchemaError(f"objective_direction must be one of {DIRECTIONS}")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def target(self) -> str:
        return next(s.name for s in self.specs if s.role == "target")

    @property
    def inputs(self) -> list[FeatureSpec]:
        return [s for s in self.specs if s.role != "target"]

    @property
    def input_names(self) -> list[str]:
        return [s.name for s in self.inputs]

    @property
    def adjustable_index(self) -> np.ndarray:
        """Positions of adjustable features within the input vector."""
        return np.array([i for i, s in enumerate(self.inputs) if s.role == "adjustable"], dtype=int)

    @property
    def fixed_index(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.inputs) if s.role == "fixed"], dtype=int)

    @property
    def target_value(self) -> float:
        """Unreachable bound the transformed prediction is pulled towards."""
        return -1.0 if self.objective_direction == "minimize" else 1.0

    def require_optimizable(self):
        if len(self.adjustable_index) == 0 or len(self.fixed_index) == 0:
            raise SchemaError("optimization needs at least one adjustable and one fixed feature")

    def to_dict(self) -> dict:
        return {
            "objective_direction": self.objective_direction,
            "features": [
                {"name": s.name, "role": s.role, "unit": s.unit, "integer_valued": s.integer_valued}
                for s in self.specs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            specs = tuple(
                FeatureSpec(
                    name=f["name"],
                    role=f["role"],
                    unit=f.get("unit", ""),
                    integer_valued=bool(f.get("integer_valued", False)),
                )
                for f in d["features"]
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc
        return cls(specs, d.get("objective_direction", "minimize"))

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def save_schema(schema: FeatureSchema, path):
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class WellRecord:
    id: str
    values: dict  # feature name -> physical value; target may be absent

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"record {self.id}: non-finite value for {k!r}")


@dataclass(frozen=True)
class Dataset:
    """Wells x features in physical units.

    ``X`` holds the non-target features in ``schema.input_names`` order. ``y``
    is None when the target column is absent; individual unscored records
    carry NaN.
    """

    schema: FeatureSchema
    ids: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        X = _frozen(self.X).reshape(len(self.ids), len(self.schema.inputs))
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = _frozen(self.y).reshape(len(self.ids))
            object.__setattr__(self, "y", y)
        if not np.all(np.isfinite(X)):
            raise ValueError("feature values must be finite")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateKeyError("duplicate record ids in dataset")

    def __len__(self):
        return len(self.ids)

    @property
    def has_targets(self) -> bool:
        return self.y is not None and bool(np.all(np.isfinite(self.y)))

    def require_targets(self):
        if not self.has_targets:
            raise SchemaMismatchError(
                f"target column {self.schema.target!r} is required for training",
                column=self.schema.target,
            )

    def record(self, i: int) -> WellRecord:
        values = dict(zip(self.schema.input_names, map(float, self.X[i])))
        if self.y is not None and np.isfinite(self.y[i]):
            values[self.schema.target] = float(self.y[i])
        return WellRecord(self.ids[i], values)

    def records(self) -> Iterator[WellRecord]:
        return (self.record(i) for i in range(len(self)))

    def index_of(self, record_id: str) -> int:
        try:
            return self.ids.index(str(record_id))
        except ValueError:
            raise KeyError(record_id) from None

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.schema,
            tuple(self.ids[i] for i in idx),
            self.X[idx] if len(idx) else np.empty((0, self.X.shape[1])),
            None if self.y is None else self.y[idx],
        )

    @classmethod
    def from_records(cls, schema: FeatureSchema, records: Sequence[WellRecord]) -> "Dataset":
        X = np.array([[r.values[n] for n in schema.input_names] for r in records], dtype=float)
        ys = [r.values.get(schema.target, math.nan) for r in records]
        y = None if all(math.isnan(v) for v in ys) else np.array(ys, dtype=float)
        return cls(schema, tuple(r.id for r in records), X.reshape(len(records), -1), y)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, schema: FeatureSchema, require_target: bool = True) -> Dataset:
    """Read a comma-separated file whose header names the schema features.

    Column order comes from the header. An ``id`` column is optional; without
    it records are numbered from 0. The target column may be left out (or
    cells left empty) only when ``require_target`` is False.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatchError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_id = ID_COLUMN in header
    columns = [h for h in header if h != ID_COLUMN]
    expected = set(schema.names)
    if not require_target:
        expected_opt = expected - {schema.target}
        if set(columns) == expected_opt:
            expected = expected_opt
    for name in schema.names:
        if name in expected and name not in columns:
            raise SchemaMismatchError(f"{path}: missing column {name!r}", column=name)
    for name in columns:
        if name not in expected:
            raise SchemaMismatchError(f"{path}: unexpected column {name!r}", column=name)
    if len(set(header)) != len(header):
        raise SchemaMismatchError(f"{path}: repeated header names")

    pos = {h: i for i, h in enumerate(header)}
    ids, X, y = [], [], []
    seen = set()
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CSVParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}", row=r)
        rid = row[pos[ID_COLUMN]].strip() if has_id else str(len(ids))
        if rid in seen:
            raise DuplicateKeyError(f"{path}: duplicate id {rid!r} at row {r}")
        seen.add(rid)
        vals = []
        for name in schema.input_names:
            vals.append(_parse_cell(row[pos[name]], path, r, name, allow_empty=False))
        X.append(vals)
        if schema.target in pos:
            y.append(_parse_cell(row[pos[schema.target]], path, r, schema.target,
                                 allow_empty=not require_target))
        ids.append(rid)
    Xa = np.array(X, dtype=float).reshape(len(ids), len(schema.inputs))
    ya = np.array(y, dtype=float) if schema.target in pos else None
    ds = Dataset(schema, tuple(ids), Xa, ya)
    if require_target:
        ds.require_targets()
    return ds


def _parse_cell(cell, path, row, column, allow_empty):
    text = cell.strip()
    if not text and allow_empty:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise CSVParseError(f"{path}: row {row}, column {column!r}: cannot parse {cell!r}",
                            row=row, column=column) from None
    if not math.isfinite(value):
        raise CSVParseError(f"{path}: row {row}, column {column!r}: non-finite value",
                            row=row, column=column)
    return value


def _format_value(v: float, integer_valued: bool) -> str:
    if math.isnan(v):
        return ""
    if integer_valued and float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_csv(data: Dataset, path):
    """Write ``data`` with an id column followed by schema-ordered features."""
    schema = data.schema
    in_pos = {n: i for i, n in enumerate(schema.input_names)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([ID_COLUMN] + schema.names)
        for i, rid in enumerate(data.ids):
            row = [rid]
            for s in schema.specs:
                if s.role == "target":
                    v = math.nan if data.y is None else data.y[i]
                else:
                    v = data.X[i, in_pos[s.name]]
                row.append(_format_value(v, s.integer_valued))
            w.writerow(row)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics (population standard deviation)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_mean", _frozen(self.x_mean))
        object.__setattr__(self, "x_std", _frozen(self.x_std))
        if np.any(self.x_std <= 0) or not self.y_std > 0:
            raise ValueError("standard deviations must be strictly positive")

    def normalize_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def denormalize_x(self, Z):
        return np.asarray(Z, dtype=float) * self.x_std + self.x_mean

    def normalize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def denormalize_y(self, t):
        return np.asarray(t, dtype=float) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.array(d["x_mean"]), np.array(d["x_std"]), float(d["y_mean"]), float(d["y_std"]))


def fit_normalizer(data: Dataset) -> NormStats:
    """Mean and population std per input feature (and the target, if present).

    A constant input column raises :class:`DegenerateFeatureError`. A constant
    target is not an error: its scale falls back to 1 so that degenerate
    fits can still be reported (R^2 flags them downstream).
    """
    if len(data) < 2:
        raise TrainTooSmallError(f"need at least 2 records to normalize, got {len(data)}")
    X = data.X
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for name, s, col in zip(data.schema.input_names, std, X.T):
        if s == 0 or np.all(col == col[0]):
            raise DegenerateFeatureError(name)
    y_mean, y_std = 0.0, 1.0
    if data.has_targets:
        y_mean = float(data.y.mean())
        y_std = float(data.y.std())
        if y_std == 0 or np.all(data.y == data.y[0]):
            y_std = 1.0
    return NormStats(mean, std, y_mean, y_std)


def split_loo(data: Dataset, index: int) -> tuple[Dataset, WellRecord]:
    n = len(data)
    if not 0 <= index < n:
        raise IndexError(f"LOO index {index} out of range for {n} records")
    if n < 2:
        raise TrainTooSmallError("leave-one-out on a single record leaves an empty training set")
    keep = [i for i in range(n) if i != index]
    return data.subset(keep), data.record(index)


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Analytic cost surface over features scaled to u in [-1, 1].

    ``f(x) = intercept + sum_i a_i u_i + sum_(i,j) c_ij u_i u_j
    + slope * u_s - amplitude * (1 - exp(-rate * (u_s + 1)))``

    The last two terms act on a single "saturating" feature: a linear cost
    per unit against a benefit with diminishing returns, giving that feature
    an interior optimum at ``u_s* = ln(amplitude * rate / slope) / rate - 1``.
    """

    ranges: dict
    intercept: float
    linear: dict
    interactions: tuple = ()
    saturating: dict | None = None
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        object.__setattr__(self, "interactions", tuple(tuple(t) for t in self.interactions))

    def scaled(self, schema: FeatureSchema, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.array([self.ranges[n][0] for n in schema.input_names])
        hi = np.array([self.ranges[n][1] for n in schema.input_names])
        return 2.0 * (X - lo) / (hi - lo) - 1.0

    def evaluate(self, schema: FeatureSchema, X) -> np.ndarray:
        """Noiseless target at each row of ``X`` (physical units)."""
        U = self.scaled(schema, X)
        col = {n: U[:, i] for i, n in enumerate(schema.input_names)}
        y = np.full(U.shape[0], float(self.intercept))
        for name, a in self.linear.items():
            y = y + a * col[name]
        for a, b, c in self.interactions:
            y = y + c * col[a] * col[b]
        if self.saturating:
            s = self.saturating
            u = col[s["feature"]]
            y = y + s["slope"] * u - s["amplitude"] * (1.0 - np.exp(-s["rate"] * (u + 1.0)))
        return y

    def saturating_optimum(self) -> float | None:
        """Scaled position of the saturating feature's interior optimum."""
        if not self.saturating:
            return None
        s = self.saturating
        return math.log(s["amplitude"] * s["rate"] / s["slope"]) / s["rate"] - 1.0

    def to_dict(self) -> dict:
        return {
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "intercept": self.intercept,
            "linear": dict(self.linear),
            "interactions": [list(t) for t in self.interactions],
            "saturating": self.saturating,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "SyntheticGroundTruth":
        return cls(
            ranges={k: tuple(v) for k, v in d["ranges"].items()},
            intercept=float(d["intercept"]),
            linear={k: float(v) for k, v in d["linear"].items()},
            interactions=tuple(tuple(t) for t in d.get("interactions", ())),
            saturating=d.get("saturating"),
            noise_std=float(d.get("noise_std", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    def with_(self, **changes) -> "SyntheticGroundTruth":
        d = {**self.__dict__, **changes}
        return SyntheticGroundTruth(**d)


def default_schema() -> FeatureSchema:
    """Shale-gas flavoured 8-input schema: four geological (fixed) and four
    operational (adjustable) features, minimizing average cost."""
    F = FeatureSpec
    return FeatureSchema(
        (
            F("vertical_depth", "fixed", "m"),
            F("toc", "fixed", "%"),
            F("pressure_coefficient", "fixed", ""),
            F("reservoir_thickness", "fixed", "m"),
            F("fracturing_stages", "adjustable", "stages", integer_valued=True),
            F("horizontal_length", "adjustable", "m"),
            F("slick_water", "adjustable", "t"),
            F("proppant", "adjustable", "t"),
            F("average_cost", "target", "CNY/m3"),
        ),
        "minimize",
    )


def default_truth(noise_std: float = 0.0, seed: int = 0) -> SyntheticGroundTruth:
    """Hand-set cost surface matching :func:`default_schema`.

    Stage count carries the saturating term with its optimum near the middle
    of its range, so heavily staged wells are over-spending.
    """
    return SyntheticGroundTruth(
        ranges={
            "vertical_depth": (2300.0, 3500.0),
            "toc": (1.5, 5.0),
            "pressure_coefficient": (1.2, 2.0),
            "reservoir_thickness": (20.0, 60.0),
            "fracturing_stages": (10.0, 30.0),
            "horizontal_length": (1000.0, 2500.0),
            "slick_water": (20000.0, 60000.0),
            "proppant": (1000.0, 3500.0),
        },
        intercept=1.0,
        linear={
            "vertical_depth": 0.08,
            "toc": -0.10,
            "pressure_coefficient": -0.06,
            "reservoir_thickness": -0.05,
            "horizontal_length": -0.04,
            "slick_water": 0.05,
            "proppant": -0.02,
        },
        interactions=(
            ("horizontal_length", "reservoir_thickness", -0.04),
            ("proppant", "toc", -0.05),
            ("slick_water", "vertical_depth", 0.03),
            ("fracturing_stages", "pressure_coefficient", -0.03),
        ),
        saturating={"feature": "fracturing_stages", "slope": 0.12, "amplitude": 0.3, "rate": 1.5},
        noise_std=noise_std,
        seed=seed,
    )


def random_truth(schema: FeatureSchema, seed: int = 0, noise_std: float = 0.0) -> SyntheticGroundTruth:
    """Seeded cost surface for an arbitrary schema.

    Continuous features span [0, 1], integer-valued ones [1, 20]. The first
    integer-valued adjustable feature (else the first adjustable, else the
    first input) gets the saturating term.
    """
    rng = np.random.default_rng(seed)
    inputs = schema.inputs
    ranges = {s.name: ((1.0, 20.0) if s.integer_valued else (0.0, 1.0)) for s in inputs}
    linear = {s.name: float(c) for s, c in zip(inputs, rng.normal(0.0, 0.1, len(inputs)))}
    names = [s.name for s in inputs]
    interactions = []
    if len(names) >= 2:
        for _ in range(min(4, len(names) - 1)):
            a, b = rng.choice(len(names), size=2, replace=False)
            interactions.append((names[a], names[b], float(rng.normal(0.0, 0.05))))
    candidates = [s for s in inputs if s.role == "adjustable" and s.integer_valued]
    candidates = candidates or [s for s in inputs if s.role == "adjustable"] or list(inputs)
    sat = candidates[0].name
    linear.pop(sat, None)
    intercept = 1.0 + sum(abs(v) for v in linear.values()) + sum(abs(t[2]) for t in interactions)
    return SyntheticGroundTruth(
        ranges=ranges,
        intercept=intercept,
        linear=linear,
        interactions=tuple(interactions),
        saturating={"feature": sat, "slope": 0.12, "amplitude": 0.3, "rate": 1.5},
        noise_std=noise_std,
        seed=seed,
    )


def generate_synthetic(n_wells: int, schema: FeatureSchema, truth: SyntheticGroundTruth) -> Dataset:
    """Draw ``n_wells`` records uniformly over ``truth.ranges`` and score them.

    Integer-valued features are rounded to whole numbers before scoring. The
    draw is fully determined by ``truth.seed``.
    """
    if n_wells < 1:
        raise ValueError("n_wells must be >= 1")
    missing = [n for n in schema.input_names if n not in truth.ranges]
    if missing:
        raise SchemaMismatchError(f"ground truth has no range for {missing}", column=missing[0])
    rng = np.random.default_rng(truth.seed)
    cols = []
    for s in schema.inputs:
        lo, hi = truth.ranges[s.name]
        c = rng.uniform(lo, hi, n_wells)
        if s.integer_valued:
            c = np.round(c)
        cols.append(c)
    X = np.column_stack(cols)
    noise = rng.standard_normal(n_wells)
    y = truth.evaluate(schema, X)
    if truth.noise_std > 0:
        y = y + truth.noise_std * noise
    width = max(4, len(str(n_wells)))
    ids = tuple(f"W{i + 1:0{width}d}" for i in range(n_wells))
    return Dataset(schema, ids, X, y)
