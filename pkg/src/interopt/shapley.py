"""Model-agnostic Shapley attribution against a finite background sample.

Absent features are marginalized interventionally: for coalition ``S`` every
background row keeps its own values outside ``S`` and takes the explained
instance's values inside ``S``. With this estimator ``val(empty) = 0`` and
``val(all) = f(x) - base`` hold exactly, so efficiency is an algebraic
identity up to rounding.

``model`` arguments accept an :class:`~interopt.emulator.EmulatorModel` or
any callable mapping an ``(n, p)`` normalized matrix to ``n`` predictions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ExactModeCapError, ShapeError

EXACT_CAP = 16
DEFAULT_BACKGROUND_CAP = 128
# rows per model call when evaluating many coalitions at once
_CHUNK_ROWS = 1 << 18


def _batch_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if callable(model):
        return lambda Z: np.asarray(model(Z), dtype=float).reshape(-1)
    raise TypeError("model must be callable on a 2-D array")


@dataclass(frozen=True)
class BackgroundSet:
    rows: np.ndarray  # normalized, (B, p)
    seed: int | None = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float, ndmin=2)
        if rows.shape[0] < 1:
            raise ValueError("background set needs at least one row")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def make_background(Z, cap: int | None = DEFAULT_BACKGROUND_CAP, seed: int = 0) -> BackgroundSet:
    """Use all rows of ``Z`` or, beyond ``cap``, a seeded subsample without replacement."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("background source must be a non-empty 2-D array")
    if cap is not None and Z.shape[0] > cap:
        idx = np.sort(np.random.default_rng(seed).choice(Z.shape[0], size=cap, replace=False))
        Z = Z[idx]
    return BackgroundSet(Z, seed)


@dataclass(frozen=True)
class Coalition:
    """Subset of feature indices, stored as a bitmask."""

    mask: int
    n: int

    def __post_init__(self):
        if self.mask < 0 or self.mask >> self.n:
            raise ValueError(f"coalition mask {self.mask:b} has members >= n={self.n}")

    @classmethod
    def of(cls, members: Iterable[int], n: int) -> "Coalition":
        mask = 0
        for k in members:
            if not 0 <= k < n:
                raise ValueError(f"feature index {k} out of range for n={n}")
            mask |= 1 << k
        return cls(mask, n)

    def __contains__(self, k: int) -> bool:
        return bool(self.mask >> k & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def members(self) -> list[int]:
        return [k for k in range(self.n) if k in self]

    def as_bool(self) -> np.ndarray:
        return np.array([k in self for k in range(self.n)], dtype=bool)


@dataclass(frozen=True)
class ShapleyAttribution:
    values: np.ndarray  # per-feature phi, normalized-target units
    base_value: float  # mean model output over the background
    prediction: float  # f(x)
    record_id: str | None = None
    feature_names: tuple[str, ...] | None = None
    std_error: np.ndarray | None = None  # sampled mode only

    def efficiency_gap(self) -> float:
        return float(abs(self.values.sum() - (self.prediction - self.base_value)))

    def to_physical(self, y_mean: float, y_std: float) -> "ShapleyAttribution":
        """Rescale to target units: phi scales by the target std, base shifts by its mean."""
        return ShapleyAttribution(
            self.values * y_std,
            self.base_value * y_std + y_mean,
            self.prediction * y_std + y_mean,
            self.record_id,
            self.feature_names,
            None if self.std_error is None else self.std_error * y_std,
        )


def _check_instance(bg: BackgroundSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != bg.width:
        raise ShapeError(f"instance has {x.shape[0]} features, background has {bg.width}")
    return x


def base_value(model, bg: BackgroundSet) -> float:
    return float(np.mean(_batch_fn(model)(bg.rows)))


def value_function(model, bg: BackgroundSet, x, S) -> float:
    """Background-averaged output with coalition ``S`` pinned to ``x``, minus the base value.

    ``S`` may be a :class:`Coalition`, a boolean mask or an iterable of indices.
    """
    x = _check_instance(bg, x)
    n = bg.width
    if isinstance(S, Coalition):
        mask = S.as_bool()
    else:
        S = np.asarray(list(S) if not isinstance(S, np.ndarray) else S)
        if S.dtype == bool:
            mask = S
        else:
            mask = Coalition.of(S.astype(int).tolist(), n).as_bool()
    if not mask.any():
        return 0.0
    f = _batch_fn(model)
    rows = np.array(bg.rows)
    rows[:, mask] = x[mask]
    return float(np.mean(f(rows)) - np.mean(f(bg.rows)))


def coalition_weight(n: int, s: int) -> float:
    """``s! (n-1-s)! / n!``: the share of orderings in which a given player
    joins right after a particular size-``s`` coalition."""
    if n < 1 or not 0 <= s <= n - 1:
        raise ValueError(f"coalition size {s} out of range for n={n}")
    if n <= 20:
        return float(Fraction(math.factorial(s) * math.factorial(n - 1 - s), math.factorial(n)))
    return math.exp(math.lgamma(s + 1) + math.lgamma(n - s) - math.lgamma(n + 1))


def _all_coalition_values(f, bg: BackgroundSet, x: np.ndarray) -> np.ndarray:
    """Mean model output for every coalition mask 0 .. 2^n - 1."""
    n = bg.width
    B = bg.rows.shape[0]
    n_masks = 1 << n
    bits = (np.arange(n_masks)[:, None] >> np.arange(n)[None, :]) & 1  # (2^n, n)
    out = np.empty(n_masks)
    per_chunk = max(1, _CHUNK_ROWS // B)
    for start in range(0, n_masks, per_chunk):
        m = bits[start:start + per_chunk].astype(bool)
        rows = np.where(m[:, None, :], x[None, None, :], bg.rows[None, :, :])
        out[start:start + len(m)] = f(rows.reshape(-1, n)).reshape(len(m), B).mean(axis=1)
    return out


def shapley_exact(model, bg: BackgroundSet, x, record_id=None, feature_names=None,
                  cap: int = EXACT_CAP) -> ShapleyAttribution:
    """Exact Shapley values by enumerating all ``2^n`` coalitions."""
    x = _check_instance(bg, x)
    n = bg.width
    if n > cap:
        raise ExactModeCapError(n, cap)
    f = _batch_fn(model)
    v = _all_coalition_values(f, bg, x)
    base = v[0]
    vals = v - base
    masks = np.arange(1 << n)
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    weights = np.array([coalition_weight(n, s) for s in range(n)])
    phi = np.empty(n)
    for k in range(n):
        without = masks[(masks >> k) & 1 == 0]
        phi[k] = np.sum(weights[sizes[without]] * (vals[without | (1 << k)] - vals[without]))
    return ShapleyAttribution(phi, float(base), float(v[-1]), record_id,
                              None if feature_names is None else tuple(feature_names))


def shapley_sampled(model, bg: BackgroundSet, x, n_permutations: int, seed: int = 0,
                    record_id=None, feature_names=None) -> ShapleyAttribution:
    """Permutation Monte Carlo estimate of the Shapley values.

    Each permutation adds features one at a time; a feature's contribution is
    the change in the background-averaged output when it joins. The estimate
    is the mean over permutations and ``std_error`` the standard error of that
    mean (zero with a single permutation).
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    x = _check_instance(bg, x)
    n = bg.width
    B = bg.rows.shape[0]
    f = _batch_fn(model)
    rng = np.random.default_rng(seed)
    perms = np.array([rng.permutation(n) for _ in range(n_permutations)])
    contrib = np.empty((n_permutations, n))
    base = float(np.mean(f(bg.rows)))
    per_chunk = max(1, _CHUNK_ROWS // (B * (n + 1)))
    for start in range(0, n_permutations, per_chunk):
        P = perms[start:start + per_chunk]
        # masks[p, j] = features present after the first j steps of permutation p
        ranks = np.argsort(P, axis=1)  # position of each feature in the permutation
        steps = np.arange(n + 1)
        masks = ranks[:, None, :] < steps[None, :, None]  # (p, n+1, n)
        rows = np.where(masks[:, :, None, :], x, bg.rows[None, None, :, :])
        means = f(rows.reshape(-1, n)).reshape(len(P), n + 1, B).mean(axis=2)
        deltas = np.diff(means, axis=1)  # deltas[p, j] = gain from feature P[p, j]
        np.put_along_axis(contrib[start:start + len(P)], P, deltas, axis=1)
    phi = contrib.mean(axis=0)
    if n_permutations > 1:
        se = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        se = np.zeros(n)
    pred = float(f(x[None, :])[0])
    return ShapleyAttribution(phi, base, pred, record_id,
                              None if feature_names is None else tuple(feature_names), se)


def explain(model, bg: BackgroundSet, x, *, n_permutations: int | None = None, seed: int = 0,
            record_id=None, feature_names=None) -> ShapleyAttribution:
    """Exact attribution when feasible, else sampled with ``n_permutations`` (default 256)."""
    if n_permutations is None and bg.width <= EXACT_CAP:
        return shapley_exact(model, bg, x, record_id, feature_names)
    return shapley_sampled(model, bg, x, n_permutations or 256, seed, record_id, feature_names)


@dataclass(frozen=True)
class GlobalImportance:
    values: np.ndarray  # mean |phi| per feature
    matrix: np.ndarray  # (records, features) local phi
    feature_names: tuple[str, ...] | None = None
    record_ids: tuple | None = None

    def ranking(self) -> list[int]:
        """Feature indices by descending importance (stable for ties)."""
        return sorted(range(len(self.values)), key=lambda k: -self.values[k])


def global_shapley(attrs: Sequence[ShapleyAttribution]) -> GlobalImportance:
    if not attrs:
        raise ValueError("global importance needs at least one attribution")
    widths = {a.values.shape[0] for a in attrs}
    if len(widths) != 1:
        raise ShapeError(f"attributions disagree on feature count: {sorted(widths)}")
    M = np.vstack([a.values for a in attrs])
    return GlobalImportance(np.abs(M).mean(axis=0), M, attrs[0].feature_names,
                            tuple(a.record_id for a in attrs))


@dataclass(frozen=True)
class AdditivityReport:
    phi_a: np.ndarray
    phi_b: np.ndarray
    phi_sum: np.ndarray
    max_defect: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_defect <= self.tol


def additivity_check(model_a, model_b, bg: BackgroundSet, x, tol: float = 1e-9) -> AdditivityReport:
    fa, fb = _batch_fn(model_a), _batch_fn(model_b)
    pa = shapley_exact(fa, bg, x).values
    pb = shapley_exact(fb, bg, x).values
    ps = shapley_exact(lambda Z: fa(Z) + fb(Z), bg, x).values
    return AdditivityReport(pa, pb, ps, float(np.max(np.abs(ps - (pa + pb)))), tol)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_attributions_csv(attrs: Sequence[ShapleyAttribution], feature_names, path):
    """One row per record: phi per feature, then base value and prediction."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *feature_names, "base_value", "prediction"])
        for a in attrs:
            w.writerow([a.record_id, *map(repr, map(float, a.values)), repr(a.base_value), repr(a.prediction)])


def global_summary(gi: GlobalImportance, feature_names, **extra) -> dict:
    order = gi.ranking()
    return {
        **extra,
        "n_records": int(gi.matrix.shape[0]),
        "importance": [
            {"feature": feature_names[k], "mean_abs_shap": float(gi.values[k])} for k in order
        ],
    }


def write_global_json(gi: GlobalImportance, feature_names, path, **extra):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(global_summary(gi, feature_names, **extra), fh, indent=2)
        fh.write("\n")
