"""Ensemble randomized maximum likelihood (EnRML).

Each realization ``m_j`` minimizes

    O_j(m) = 1/2 (g(m) - d_obs,j)^T C_D^-1 (g(m) - d_obs,j)
           + 1/2 (m - m_pr,j)^T C_M^-1 (m - m_pr,j)

by a Levenberg-Marquardt damped Gauss-Newton step in which the sensitivity
products are replaced by ensemble (cross-)covariances:

    m_j <- m_j - 1/(1+lam) [C_Ml - C_MlDl K^-1 C_MlDl^T] C_M^-1 (m_j - m_pr,j)
               - C_MlDl K^-1 (g(m_j) - d_obs,j),       K = (1+lam) C_D + C_Dl

Matrices follow the ensemble-smoother convention: parameters are
``(N_m, N_e)``, predictions and observations ``(N_d, N_e)``. ``C_D`` and
``C_M`` are diagonal and passed as 1-D variance vectors.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NumericalFailure, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal observation (``c_d``) and prior parameter (``c_m``) variances."""

    c_d: np.ndarray
    c_m: np.ndarray

    def __post_init__(self):
        c_d = np.atleast_1d(np.asarray(self.c_d, dtype=float))
        c_m = np.atleast_1d(np.asarray(self.c_m, dtype=float))
        if c_d.ndim != 1 or c_m.ndim != 1:
            raise ShapeError("c_d and c_m must be 1-D variance vectors")
        if np.any(c_d < 0) or np.any(c_m < 0) or not (np.all(np.isfinite(c_d)) and np.all(np.isfinite(c_m))):
            raise ValueError("variances must be finite and non-negative")
        object.__setattr__(self, "c_d", c_d)
        object.__setattr__(self, "c_m", c_m)

    @property
    def n_d(self) -> int:
        return self.c_d.shape[0]

    @property
    def n_m(self) -> int:
        return self.c_m.shape[0]

    def require_invertible(self):
        if np.any(self.c_d <= 0) or np.any(self.c_m <= 0):
            raise ValueError("c_d and c_m must be strictly positive where their inverse is needed")


@dataclass(frozen=True)
class EnsembleState:
    M: np.ndarray  # (N_m, N_e) current realizations
    M_pr: np.ndarray  # (N_m, N_e) prior realizations
    D_obs: np.ndarray  # (N_d, N_e) perturbed observations
    iteration: int = 0

    def __post_init__(self):
        M, M_pr, D = (np.array(a, dtype=float, ndmin=2) for a in (self.M, self.M_pr, self.D_obs))
        if M.shape != M_pr.shape:
            raise ShapeError(f"M {M.shape} and M_pr {M_pr.shape} differ")
        if D.shape[1] != M.shape[1]:
            raise ShapeError(f"D_obs has {D.shape[1]} columns, M has {M.shape[1]}")
        if M.shape[1] < 2:
            raise ShapeError("ensemble needs at least 2 realizations")
        if not all(np.all(np.isfinite(a)) for a in (M, M_pr, D)):
            raise ValueError("ensemble state must be finite")
        for a in (M, M_pr, D):
            a.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "M_pr", M_pr)
        object.__setattr__(self, "D_obs", D)

    @property
    def n_e(self) -> int:
        return self.M.shape[1]

    def with_M(self, M, advance: bool = True) -> "EnsembleState":
        return replace(self, M=M, iteration=self.iteration + int(advance))


@dataclass
class LambdaState:
    value: float = 1.0
    increase: float = 4.0
    decrease: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.value) and self.value >= 0):
            raise ValueError("lambda must be finite and >= 0")
        if not self.increase > 1 or not 0 < self.decrease < 1:
            raise ValueError("need increase > 1 and 0 < decrease < 1")


def _sample(mean, var, n_e, seed, center=False) -> np.ndarray:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    var = np.asarray(var, dtype=float).reshape(-1)
    if var.shape != mean.shape:
        raise ShapeError(f"mean {mean.shape} and variance {var.shape} differ")
    if n_e < 2:
        raise ValueError("ensemble size must be >= 2")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((mean.shape[0], n_e))
    if center:
        eps = eps - eps.mean(axis=1, keepdims=True)
    return mean[:, None] + np.sqrt(var)[:, None] * eps


def perturb_observations(d_obs, noise: NoiseModel, n_e: int, seed: int = 0, center: bool = False) -> np.ndarray:
    """Columns ``d_obs + eps_j`` with ``eps_j ~ N(0, C_D)``.

    ``center=True`` subtracts the sample mean of the perturbations so the
    columns average exactly to ``d_obs``.
    """
    return _sample(d_obs, noise.c_d, n_e, seed, center)


def init_realizations(m_pr, noise: NoiseModel, n_e: int, seed: int = 0, scale: float = 1.0,
                      center: bool = False) -> np.ndarray:
    """Prior draws ``m_pr + eps_j`` with ``eps_j ~ N(0, scale * C_M)``."""
    return _sample(m_pr, scale * noise.c_m, n_e, seed, center)


def ensemble_covariances(M, D):
    """Sample covariances about the ensemble means with ``1/(N_e - 1)`` scaling.

    Returns ``(C_M, C_MD, C_D)`` of shapes ``(N_m, N_m)``, ``(N_m, N_d)``,
    ``(N_d, N_d)``.
    """
    M = np.asarray(M, dtype=float)
    D = np.asarray(D, dtype=float)
    if M.ndim != 2 or D.ndim != 2 or M.shape[1] != D.shape[1]:
        raise ShapeError(f"M {M.shape} and D {D.shape} must be 2-D with equal column counts")
    n_e = M.shape[1]
    if n_e < 2:
        raise ShapeError("covariances need at least 2 realizations")
    dM = M - M.mean(axis=1, keepdims=True)
    dD = D - D.mean(axis=1, keepdims=True)
    k = 1.0 / (n_e - 1)
    return k * dM @ dM.T, k * dM @ dD.T, k * dD @ dD.T


def mismatches(M, G, D_obs, M_pr, noise: NoiseModel):
    """Per-realization ``(data, model)`` mismatch terms, each already halved."""
    noise.require_invertible()
    M, G, D_obs, M_pr = (np.asarray(a, dtype=float) for a in (M, G, D_obs, M_pr))
    if G.shape != D_obs.shape or M.shape != M_pr.shape:
        raise ShapeError("prediction/observation or parameter/prior shapes differ")
    if G.shape[0] != noise.n_d or M.shape[0] != noise.n_m:
        raise ShapeError("noise model dimensions do not match the ensemble")
    r = G - D_obs
    dm = M - M_pr
    data = 0.5 * np.sum(r * r / noise.c_d[:, None], axis=0)
    model = 0.5 * np.sum(dm * dm / noise.c_m[:, None], axis=0)
    return data, model


def objective(m, g_m, d_obs, m_pr, noise: NoiseModel) -> float:
    """Data mismatch plus model mismatch for a single parameter vector."""
    col = lambda a: np.asarray(a, dtype=float).reshape(-1, 1)
    data, model = mismatches(col(m), col(g_m), col(d_obs), col(m_pr), noise)
    return float(data[0] + model[0])


def _solve_spd(K, B):
    """Solve ``K X = B`` for symmetric ``K``, adding jitter if the factorization fails."""
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), B)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        pass
    n_d = K.shape[0]
    jitter = 1e-10 * max(np.trace(K), np.finfo(float).tiny) / n_d
    Kj = K + jitter * np.eye(n_d)
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(Kj), B)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        cond = float(np.linalg.cond(Kj))
        raise NumericalFailure(
            f"(1+lambda) C_D + C_Dl not positive definite after jitter {jitter:.3g} (cond={cond:.3g})",
            condition_number=cond,
        ) from None


def correction_terms(state: EnsembleState, predictions, noise: NoiseModel, lam: float):
    """The two corrections subtracted from ``M`` in one EnRML update.

    Returns ``(delta_model, delta_data)``, each ``(N_m, N_e)``: the damped
    prior-deviation term and the data-residual term. ``M - delta_model -
    delta_data`` is the updated ensemble.
    """
    G = np.asarray(predictions, dtype=float)
    if G.shape != state.D_obs.shape:
        raise ShapeError(f"predictions {G.shape} do not match observations {state.D_obs.shape}")
    if state.M.shape[0] != noise.n_m or G.shape[0] != noise.n_d:
        raise ShapeError("noise model dimensions do not match the ensemble")
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lambda must be finite and >= 0")
    noise.require_invertible()
    C_M, C_MD, C_D = ensemble_covariances(state.M, G)
    K = (1.0 + lam) * np.diag(noise.c_d) + C_D
    # one factorization serves both terms
    KinvR = _solve_spd(K, np.hstack([C_MD.T, G - state.D_obs]))
    KinvCDM = KinvR[:, : C_MD.shape[0]]
    KinvResid = KinvR[:, C_MD.shape[0]:]
    bracket = C_M - C_MD @ KinvCDM
    delta_model = bracket @ ((state.M - state.M_pr) / noise.c_m[:, None]) / (1.0 + lam)
    delta_data = C_MD @ KinvResid
    return delta_model, delta_data


def enrml_update(state: EnsembleState, predictions, noise: NoiseModel, lam: float) -> np.ndarray:
    """Updated realizations ``M'`` after one damped EnRML step."""
    dm, dd = correction_terms(state, predictions, noise, lam)
    return state.M - dm - dd


# ---------------------------------------------------------------------------
# Iteration loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    lam: float
    mean_objective: float
    mean_data_mismatch: float
    mean_model_mismatch: float
    accepted: bool


@dataclass
class EnRMLResult:
    state: EnsembleState
    trace: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    predictions: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.state.M.mean(axis=1)


def _evaluate(forward, M, vectorized):
    if vectorized:
        G = np.asarray(forward(M), dtype=float)
    else:
        G = np.column_stack([np.atleast_1d(np.asarray(forward(M[:, j]), dtype=float)) for j in range(M.shape[1])])
    return np.atleast_2d(G)


def run_enrml(
    forward: Callable[[np.ndarray], np.ndarray],
    m_pr,
    d_obs,
    noise: NoiseModel,
    lam0: float = 1.0,
    max_iters: int = 50,
    seed: int = 0,
    n_e: int = 100,
    *,
    vectorized: bool = False,
    perturb: bool = True,
    init_scale: float = 1.0,
    center: bool = True,
    lam_increase: float = 4.0,
    lam_decrease: float = 0.5,
    max_retries: int = 5,
    rtol: float = 1e-6,
    patience: int = 3,
) -> EnRMLResult:
    """Iterate EnRML updates with a Levenberg-Marquardt lambda schedule.

    An update that lowers the ensemble-mean objective is accepted and lambda
    is halved; otherwise lambda is quadrupled and the step retried from the
    same state, at most ``max_retries`` times before the last attempt is
    accepted anyway. The loop stops after ``max_iters`` updates or once the
    relative objective change stays below ``rtol`` for ``patience``
    consecutive accepted updates. Not converging is reported, not raised.

    With ``center`` (the default) prior and observation perturbations are
    mean-centred, which removes Monte Carlo error from the ensemble mean when
    the forward model is linear.

    ``forward`` maps one parameter vector to one prediction vector, or, with
    ``vectorized=True``, an ``(N_m, N_e)`` matrix to ``(N_d, N_e)``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    m_pr = np.asarray(m_pr, dtype=float).reshape(-1)
    d_obs = np.asarray(d_obs, dtype=float).reshape(-1)
    if m_pr.shape[0] != noise.n_m or d_obs.shape[0] != noise.n_d:
        raise ShapeError("prior/observation lengths do not match the noise model")
    ss = np.random.SeedSequence(seed)
    s_m, s_d = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    M_pr = init_realizations(m_pr, noise, n_e, s_m, scale=init_scale, center=center)
    if perturb:
        D_obs = perturb_observations(d_obs, noise, n_e, s_d, center=center)
    else:
        D_obs = np.repeat(d_obs[:, None], n_e, axis=1)
    state = EnsembleState(M_pr, M_pr, D_obs)
    G = _evaluate(forward, state.M, vectorized)
    data, model = mismatches(state.M, G, state.D_obs, state.M_pr, noise)
    current = float(np.mean(data + model))
    lam = LambdaState(lam0, lam_increase, lam_decrease)
    result = EnRMLResult(state, [TraceRow(0, lam.value, current, float(data.mean()), float(model.mean()), True)])
    quiet = 0
    for it in range(1, max_iters + 1):
        for attempt in range(max_retries + 1):
            M_new = enrml_update(state, G, noise, lam.value)
            G_new = _evaluate(forward, M_new, vectorized)
            d_new, m_new = mismatches(M_new, G_new, state.D_obs, state.M_pr, noise)
            obj = float(np.mean(d_new + m_new))
            improved = np.isfinite(obj) and obj < current
            if improved or attempt == max_retries:
                break
            lam.value *= lam.increase
        if not np.all(np.isfinite(M_new)) or not np.isfinite(obj):
            raise NumericalFailure(f"EnRML iteration {it} produced non-finite values")
        used_lam = lam.value
        if improved:
            lam.value *= lam.decrease
        rel = abs(current - obj) / max(abs(current), np.finfo(float).tiny)
        state, G, current = state.with_M(M_new), G_new, obj
        result.trace.append(TraceRow(it, used_lam, obj, float(d_new.mean()), float(m_new.mean()), bool(improved)))
        quiet = quiet + 1 if (improved and rel < rtol) or rel == 0.0 else 0
        if quiet >= patience:
            result.converged = True
            break
    result.state = state
    result.predictions = G
    log.debug("EnRML finished after %d iterations (converged=%s)", state.iteration, result.converged)
    return result


def write_trace_csv(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lambda", "mean_objective", "mean_data_mismatch", "mean_model_mismatch", "accepted"])
        for r in trace:
            w.writerow([r.iteration, repr(r.lam), repr(r.mean_objective), repr(r.mean_data_mismatch),
                        repr(r.mean_model_mismatch), int(r.accepted)])
