"""Per-well optimization of adjustable features over a trained emulator.

Each well runs an EnRML ensemble over its adjustable features only; fixed
features are spliced back in unchanged before every emulator call. The
emulator output is squashed with ``tanh`` and pulled towards the unreachable
bound -1 (minimize) or +1 (maximize), so the data mismatch stays bounded.
Corrections are reweighted per feature from the well's Shapley values, scaled
by an adaptive step, and grouped into blocks that are rolled back when they
end worse than they started.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import enrml
from .dataset import Dataset, FeatureSchema
from .emulator import EmulatorModel, batch_forward
from .errors import NumericalFailure, SchemaMismatchError, ShapeError
from .shapley import BackgroundSet, ShapleyAttribution, explain, make_background

log = logging.getLogger(__name__)

IMPROVED = "improved"
NO_IMPROVEMENT = "no_improvement"
NOT_CONVERGED = "not_converged"

# reduction-rate histogram edges, percent
BUCKET_EDGES = (1.0, 5.0, 10.0, 20.0, 30.0)
BUCKET_LABELS = ("<1%", "1-5%", "5-10%", "10-20%", "20-30%", ">=30%")


@dataclass(frozen=True)
class InterOptConfig:
    n_ensemble: int = 100
    max_blocks: int = 10
    iters_per_block: int = 10
    # initial correction multiplier; the prior ensemble spread is step_init * C_M
    step_init: float = 0.1
    step_increase: float = 1.5
    step_decrease: float = 0.5
    step_cap: float = 10.0  # multiples of step_init
    step_floor: float = 0.01  # multiples of step_init
    data_multiplier: float = 10.0
    shap_clamp: tuple[float, float] = (1e-6, 0.99)
    objective_direction: str | None = None  # None: take it from the schema
    seed: int = 0
    dynamic_weights: bool = True
    adaptive_step: bool = True
    block_optimization: bool = True
    lam: float = 1.0
    prior_variance: float = 1.0  # C_M diagonal, normalized feature units
    data_variance: float = 1.0  # C_D, tanh-transformed target units
    refresh_attributions: bool = False
    rtol: float = 1e-6
    divergence_bound: float = 1e3
    shap_permutations: int | None = None  # None: exact when <= 16 features
    background_cap: int = 128

    def __post_init__(self):
        object.__setattr__(self, "shap_clamp", tuple(float(c) for c in self.shap_clamp))
        lo, hi = self.shap_clamp
        if not 0 < lo < hi < 1:
            raise ValueError("shap_clamp needs 0 < lo < hi < 1")
        if self.data_multiplier <= 0:
            raise ValueError("data_multiplier must be > 0")
        if self.n_ensemble < 2:
            raise ValueError("n_ensemble must be >= 2")
        if self.max_blocks < 1 or self.iters_per_block < 1:
            raise ValueError("max_blocks and iters_per_block must be >= 1")
        if self.step_init <= 0 or not self.step_increase > 1 or not 0 < self.step_decrease < 1:
            raise ValueError("need step_init > 0, step_increase > 1, 0 < step_decrease < 1")
        if not 0 < self.step_floor <= 1 <= self.step_cap:
            raise ValueError("need 0 < step_floor <= 1 <= step_cap")
        if self.objective_direction not in (None, "minimize", "maximize"):
            raise ValueError("objective_direction must be minimize, maximize or None")
        if self.prior_variance <= 0 or self.data_variance <= 0:
            raise ValueError("prior_variance and data_variance must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shap_clamp"] = list(self.shap_clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InterOptConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown InterOpt config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class WellContext:
    """One well's inputs: physical row, its normalized image and the index split."""

    record_id: str
    x: np.ndarray  # physical input row
    z: np.ndarray  # normalized input row
    adjustable: np.ndarray
    fixed: np.ndarray

    def __post_init__(self):
        for name in ("x", "z"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        adj = np.asarray(self.adjustable, dtype=int)
        fix = np.asarray(self.fixed, dtype=int)
        if sorted(np.concatenate([adj, fix]).tolist()) != list(range(self.z.shape[0])):
            raise ShapeError("adjustable and fixed indices must partition the input features")
        object.__setattr__(self, "adjustable", adj)
        object.__setattr__(self, "fixed", fix)

    @property
    def m_pr(self) -> np.ndarray:
        return self.z[self.adjustable]

    def splice(self, M) -> np.ndarray:
        """Rows of full normalized inputs: ensemble columns of ``M`` in the
        adjustable slots, this well's fixed values everywhere else."""
        M = np.asarray(M, dtype=float).reshape(len(self.adjustable), -1)
        Z = np.repeat(self.z[None, :], M.shape[1], axis=0)
        Z[:, self.adjustable] = M.T
        return Z

    @classmethod
    def from_dataset(cls, model: EmulatorModel, data: Dataset, i: int) -> "WellContext":
        schema = data.schema
        if model.schema is not None and model.schema.fingerprint != schema.fingerprint:
            raise SchemaMismatchError("dataset schema differs from the model's")
        x = data.X[i]
        return cls(data.ids[i], x, model.norm.normalize_x(x), schema.adjustable_index, schema.fixed_index)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    block: int
    predicted_target: float  # physical units, at the ensemble mean
    objective: float
    step: float
    accepted: bool


@dataclass(frozen=True)
class BlockRecord:
    block: int
    entry_objective: float
    end_objective: float
    committed: bool
    best_so_far: float


@dataclass
class OptimizationTrace:
    iterations: list[IterationRecord] = field(default_factory=list)
    blocks: list[BlockRecord] = field(default_factory=list)
    initial_objective: float = math.nan
    final_objective: float = math.nan
    converged: bool = False
    failure: str | None = None


@dataclass(frozen=True)
class WellPlan:
    record_id: str
    feature_names: tuple[str, ...]  # adjustable features
    before: np.ndarray  # physical
    after: np.ndarray  # converged plan, physical
    in_process: np.ndarray  # best plan seen mid-run, physical
    predicted_before: float
    predicted_after: float
    predicted_in_process: float
    reduction: float  # fraction; an increase rate when maximizing
    in_process_reduction: float
    outcome: str
    full_before: np.ndarray  # all inputs, physical
    full_after: np.ndarray
    integer_valued: tuple[bool, ...] = ()

    def rounded(self, values) -> list[float]:
        """Integer-valued features rounded half away from zero (reporting only)."""
        out = []
        for v, is_int in zip(values, self.integer_valued or (False,) * len(values)):
            out.append(float(math.copysign(math.floor(abs(v) + 0.5), v)) if is_int else float(v))
        return out


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def transform_data_mismatch(g_m, direction: str = "minimize") -> np.ndarray:
    """``tanh(g) - t`` with ``t = -1`` (minimize) or ``+1`` (maximize)."""
    if direction not in ("minimize", "maximize"):
        raise ValueError(f"unknown direction {direction!r}")
    target = -1.0 if direction == "minimize" else 1.0
    return np.tanh(np.asarray(g_m, dtype=float)) - target


def dynamic_weights(shap_adjustable, clamp=(1e-6, 0.99)) -> np.ndarray:
    """Per-feature weights ``1 / -log10(|phi|)`` with ``|phi|`` clamped into ``clamp``."""
    lo, hi = clamp
    if not 0 < lo < hi < 1:
        raise ValueError("clamp needs 0 < lo < hi < 1")
    a = np.clip(np.abs(np.asarray(shap_adjustable, dtype=float)), lo, hi)
    return 1.0 / -np.log10(a)


def weighted_correction(delta_model, delta_data, weights, multiplier: float = 10.0) -> np.ndarray:
    """``weights * (delta_model + multiplier * delta_data)``, weights along the feature axis."""
    dm = np.asarray(delta_model, dtype=float)
    dd = np.asarray(delta_data, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if dm.shape != dd.shape or dm.shape[0] != w.shape[0]:
        raise ShapeError(f"shapes disagree: model {dm.shape}, data {dd.shape}, weights {w.shape}")
    w = w.reshape((-1,) + (1,) * (dm.ndim - 1))
    return w * (dm + multiplier * dd)


def adaptive_step(prev_objective: float, new_objective: float, step: float,
                  factors=(1.5, 0.5), bounds=(0.0, math.inf)) -> tuple[bool, float]:
    """Accept and enlarge the step on improvement, reject and shrink it otherwise."""
    if step <= 0:
        raise ValueError("step must be > 0")
    inc, dec = factors
    floor, cap = bounds
    if np.isfinite(new_objective) and new_objective < prev_objective:
        return True, min(step * inc, cap)
    return False, max(step * dec, floor)


class _WellProblem:
    """Forward evaluation and objective for one well's ensemble."""

    def __init__(self, model: EmulatorModel, ctx: WellContext, cfg: InterOptConfig, direction: str):
        self.model = model
        self.ctx = ctx
        self.cfg = cfg
        self.direction = direction
        self.target = -1.0 if direction == "minimize" else 1.0
        n_a = len(ctx.adjustable)
        self.noise = enrml.NoiseModel(np.array([cfg.data_variance]), np.full(n_a, cfg.prior_variance))

    def predict(self, M) -> np.ndarray:
        """Normalized emulator output per realization."""
        return batch_forward(self.model, self.ctx.splice(M))

    def transformed(self, M) -> np.ndarray:
        return np.tanh(self.predict(M))[None, :]

    def objective(self, state: enrml.EnsembleState, G) -> float:
        data, model = enrml.mismatches(state.M, G, state.D_obs, state.M_pr, self.noise)
        return float(np.mean(self.cfg.data_multiplier * data + model))

    def physical_target(self, m) -> float:
        t = self.predict(np.asarray(m).reshape(-1, 1))[0]
        return float(self.model.norm.denormalize_y(t)) if self.model.norm is not None else float(t)

    def gain(self, before: float, after: float) -> float:
        """Fractional reduction (minimize) or increase (maximize) relative to ``before``."""
        diff = before - after if self.direction == "minimize" else after - before
        return diff / abs(before) if before != 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))


def _check_state(state_M, bound):
    if not np.all(np.isfinite(state_M)):
        raise NumericalFailure("ensemble became non-finite")
    if np.max(np.abs(state_M)) > bound:
        raise NumericalFailure(f"ensemble left the divergence bound |z| <= {bound:g}")


def _step_once(problem: _WellProblem, state, G, weights, step, cfg):
    dm, dd = enrml.correction_terms(state, G, problem.noise, cfg.lam)
    M_new = state.M - step * weighted_correction(dm, dd, weights, cfg.data_multiplier)
    _check_state(M_new, cfg.divergence_bound)
    new_state = state.with_M(M_new)
    G_new = problem.transformed(M_new)
    if not np.all(np.isfinite(G_new)):
        raise NumericalFailure("emulator produced non-finite predictions")
    return new_state, G_new, problem.objective(new_state, G_new)


def run_block(problem: _WellProblem, state, G, objective, step, weights, block, cfg, trace,
              on_iterate=None):
    """Run one block of iterations.

    With block optimization on, every iteration inside the block is kept
    (exploration); the block is committed only if its final objective beats
    the entry objective, otherwise the entry state is restored. With block
    optimization off the block is just a counting unit and, when the adaptive
    step is on, individual deteriorating iterations are rejected instead.

    Returns ``(state, G, objective, step)``.
    """
    entry = (state, G, objective)
    lo, hi = cfg.step_floor * cfg.step_init, cfg.step_cap * cfg.step_init
    try:
        for _ in range(cfg.iters_per_block):
            new_state, G_new, obj_new = _step_once(problem, state, G, weights, step, cfg)
            accepted = True
            if cfg.adaptive_step:
                improved, step = adaptive_step(objective, obj_new, step,
                                               (cfg.step_increase, cfg.step_decrease), (lo, hi))
                accepted = improved or cfg.block_optimization
            if accepted:
                state, G, objective = new_state, G_new, obj_new
            it = len(trace.iterations) + 1
            m_now = new_state.M.mean(axis=1)
            trace.iterations.append(IterationRecord(it, block, problem.physical_target(m_now),
                                                    obj_new, step, accepted))
            if on_iterate is not None:
                on_iterate(m_now)
    except NumericalFailure as exc:
        if not cfg.block_optimization:
            raise
        log.debug("well %s block %d aborted: %s", problem.ctx.record_id, block, exc)
        if cfg.adaptive_step:
            step = max(step * cfg.step_decrease, lo)
        prev_best = trace.blocks[-1].best_so_far if trace.blocks else entry[2]
        trace.blocks.append(BlockRecord(block, entry[2], math.nan, False, prev_best))
        return entry[0], entry[1], entry[2], step
    end_objective = objective
    committed = True
    if cfg.block_optimization and not objective < entry[2]:
        state, G, objective = entry
        committed = False
    prev_best = trace.blocks[-1].best_so_far if trace.blocks else entry[2]
    trace.blocks.append(BlockRecord(block, entry[2], end_objective, committed, min(prev_best, objective)))
    return state, G, objective, step


def optimize_well(model: EmulatorModel, ctx: WellContext, attribution: ShapleyAttribution | None,
                  cfg: InterOptConfig = InterOptConfig(), schema: FeatureSchema | None = None,
                  seed: int | None = None, background: BackgroundSet | None = None):
    """Optimize one well's adjustable features; returns ``(WellPlan, OptimizationTrace)``.

    ``attribution`` supplies the Shapley values (normalized target units) for
    this well; it may be None only when ``cfg.dynamic_weights`` is off.
    Numerical trouble is classified in the plan's ``outcome`` instead of
    being raised.
    """
    schema = schema or model.schema
    direction = cfg.objective_direction or (schema.objective_direction if schema else "minimize")
    problem = _WellProblem(model, ctx, cfg, direction)
    names = tuple(schema.input_names[i] for i in ctx.adjustable) if schema else tuple(map(str, ctx.adjustable))
    is_int = tuple(schema.inputs[i].integer_valued for i in ctx.adjustable) if schema else ()
    seed = cfg.seed if seed is None else seed

    def weights_from(attr):
        if not cfg.dynamic_weights:
            return np.ones(len(ctx.adjustable))
        if attr is None:
            raise ValueError("dynamic weights need a Shapley attribution for the well")
        return dynamic_weights(np.asarray(attr.values)[ctx.adjustable], cfg.shap_clamp)

    weights = weights_from(attribution)
    m_pr = ctx.m_pr
    M0 = enrml.init_realizations(m_pr, problem.noise, cfg.n_ensemble, seed, scale=cfg.step_init, center=True)
    D_obs = np.full((1, cfg.n_ensemble), problem.target)
    state = enrml.EnsembleState(M0, M0, D_obs)
    G = problem.transformed(state.M)
    objective = problem.objective(state, G)
    trace = OptimizationTrace(initial_objective=objective)

    before = problem.physical_target(m_pr)
    best = {"m": m_pr.copy(), "target": before}

    def track(m):
        y = problem.physical_target(m)
        if np.isfinite(y) and problem.gain(best["target"], y) > 0:
            best["m"], best["target"] = m.copy(), y

    step = cfg.step_init
    quiet = 0
    try:
        for block in range(cfg.max_blocks):
            prev = objective
            state, G, objective, step = run_block(problem, state, G, objective, step, weights, block,
                                                  cfg, trace, track)
            rel = abs(prev - objective) / max(abs(prev), np.finfo(float).tiny)
            quiet = quiet + 1 if rel < cfg.rtol else 0
            if quiet >= 2:
                trace.converged = True
                break
            if cfg.refresh_attributions and cfg.dynamic_weights and background is not None:
                z = ctx.z.copy()
                z[ctx.adjustable] = state.M.mean(axis=1)
                weights = weights_from(explain(model, background, z, n_permutations=cfg.shap_permutations,
                                               seed=seed))
    except NumericalFailure as exc:
        trace.failure = str(exc)

    trace.final_objective = objective
    m_after = state.M.mean(axis=1)
    if trace.failure is None and not objective <= trace.initial_objective:
        trace.failure = "objective ended above its initial value (diverged)"
    if trace.failure is not None:
        outcome = NOT_CONVERGED
        m_after = m_pr.copy()
        after = before
    else:
        after = problem.physical_target(m_after)
        outcome = IMPROVED if round(problem.gain(before, after), 4) > 0 else NO_IMPROVEMENT

    norm = model.norm
    to_phys = (lambda z, idx: norm.x_std[idx] * z + norm.x_mean[idx]) if norm is not None else (lambda z, idx: z)
    adj_before = np.array(ctx.x[ctx.adjustable])
    adj_after = adj_before.copy() if outcome == NOT_CONVERGED else to_phys(m_after, ctx.adjustable)
    full_after = np.array(ctx.x)
    full_after[ctx.adjustable] = adj_after
    plan = WellPlan(
        record_id=ctx.record_id,
        feature_names=names,
        before=adj_before,
        after=adj_after,
        in_process=to_phys(best["m"], ctx.adjustable) if best["target"] != before else adj_before,
        predicted_before=before,
        predicted_after=after,
        predicted_in_process=best["target"],
        reduction=problem.gain(before, after),
        in_process_reduction=problem.gain(before, best["target"]),
        outcome=outcome,
        full_before=np.array(ctx.x),
        full_after=full_after,
        integer_valued=is_int,
    )
    return plan, trace


# ---------------------------------------------------------------------------
# Campaign
# ---------------------------------------------------------------------------


def well_seed(seed: int, record_id: str) -> int:
    """Per-well seed from the campaign seed and the well id (scheduling independent)."""
    h = zlib.crc32(str(record_id).encode("utf-8"))
    return int(np.random.SeedSequence([seed, h]).generate_state(1)[0])


@dataclass
class WellResult:
    plan: WellPlan
    trace: OptimizationTrace
    attribution: ShapleyAttribution | None = None
    error: str | None = None


@dataclass
class CampaignReport:
    wells: list[WellResult]
    config: InterOptConfig
    direction: str

    @property
    def reductions(self) -> np.ndarray:
        return np.array([w.plan.reduction for w in self.wells])

    @property
    def mean_reduction(self) -> float:
        r = self.reductions
        return float(np.mean(r)) if r.size else math.nan

    def outcome_counts(self) -> dict:
        counts = {IMPROVED: 0, NO_IMPROVEMENT: 0, NOT_CONVERGED: 0}
        for w in self.wells:
            counts[w.plan.outcome] += 1
        return counts

    def histogram(self) -> list[tuple[str, int, float]]:
        return reduction_histogram(100.0 * self.reductions)


def reduction_histogram(percent) -> list[tuple[str, int, float]]:
    """``(label, count, mean reduction %)`` per bucket; the mean is NaN for empty buckets."""
    percent = np.asarray(percent, dtype=float)
    idx = np.searchsorted(np.array(BUCKET_EDGES), percent, side="right")
    rows = []
    for b, label in enumerate(BUCKET_LABELS):
        sel = percent[idx == b]
        rows.append((label, int(sel.size), float(sel.mean()) if sel.size else math.nan))
    return rows


def compute_attributions(model: EmulatorModel, data: Dataset, cfg: InterOptConfig,
                         background: BackgroundSet | None = None) -> list[ShapleyAttribution]:
    Z = model.norm.normalize_x(data.X)
    bg = background or make_background(Z, cfg.background_cap, cfg.seed)
    return [
        explain(model, bg, Z[i], n_permutations=cfg.shap_permutations, seed=well_seed(cfg.seed, rid),
                record_id=rid, feature_names=data.schema.input_names)
        for i, rid in enumerate(data.ids)
    ]


def optimize_campaign(model: EmulatorModel, data: Dataset, cfg: InterOptConfig = InterOptConfig(),
                      attributions: Sequence[ShapleyAttribution] | None = None,
                      background: BackgroundSet | None = None) -> CampaignReport:
    """Optimize every well in ``data``; per-well failures are recorded, never raised."""
    schema = data.schema
    schema.require_optimizable()
    if model.schema is not None and model.schema.fingerprint != schema.fingerprint:
        raise SchemaMismatchError("dataset schema differs from the model's")
    direction = cfg.objective_direction or schema.objective_direction
    Z = model.norm.normalize_x(data.X)
    bg = background or make_background(Z, cfg.background_cap, cfg.seed)
    if attributions is None and cfg.dynamic_weights:
        attributions = compute_attributions(model, data, cfg, bg)
    wells = []
    for i, rid in enumerate(data.ids):
        ctx = WellContext.from_dataset(model, data, i)
        attr = attributions[i] if attributions is not None else None
        try:
            plan, trace = optimize_well(model, ctx, attr, cfg, schema, well_seed(cfg.seed, rid), bg)
            wells.append(WellResult(plan, trace, attr))
        except Exception as exc:  # noqa: BLE001 - recorded per well, campaign continues
            log.warning("well %s failed: %s", rid, exc)
            wells.append(WellResult(_failed_plan(model, ctx, schema, direction), OptimizationTrace(failure=str(exc)),
                                    attr, str(exc)))
    return CampaignReport(wells, cfg, direction)


def _failed_plan(model, ctx: WellContext, schema: FeatureSchema, direction) -> WellPlan:
    adj = np.array(ctx.x[ctx.adjustable])
    try:
        y = float(model.predict(ctx.x[None, :])[0])
    except Exception:  # noqa: BLE001
        y = math.nan
    return WellPlan(ctx.record_id, tuple(schema.input_names[i] for i in ctx.adjustable), adj, adj, adj,
                    y, y, y, 0.0, 0.0, NOT_CONVERGED, np.array(ctx.x), np.array(ctx.x),
                    tuple(schema.inputs[i].integer_valued for i in ctx.adjustable))


ABLATION_GRID = ((True, True), (True, False), (False, True), (False, False))


@dataclass(frozen=True)
class AblationRow:
    block_optimization: bool
    adaptive_step: bool
    not_converged: int
    no_improvement: int
    mean_reduction: float  # fraction

    @property
    def failed(self) -> int:
        return self.not_converged + self.no_improvement


def run_ablation(model: EmulatorModel, data: Dataset, cfg: InterOptConfig = InterOptConfig()):
    """Campaigns over the block-optimization x adaptive-step grid.

    Attributions are computed once and shared by all four runs. Returns
    ``(rows, reports)``.
    """
    Z = model.norm.normalize_x(data.X)
    bg = make_background(Z, cfg.background_cap, cfg.seed)
    attrs = compute_attributions(model, data, cfg, bg) if cfg.dynamic_weights else None
    rows, reports = [], []
    for block, adaptive in ABLATION_GRID:
        c = replace(cfg, block_optimization=block, adaptive_step=adaptive)
        rep = optimize_campaign(model, data, c, attrs, bg)
        counts = rep.outcome_counts()
        rows.append(AblationRow(block, adaptive, counts[NOT_CONVERGED], counts[NO_IMPROVEMENT], rep.mean_reduction))
        reports.append(rep)
    return rows, reports
