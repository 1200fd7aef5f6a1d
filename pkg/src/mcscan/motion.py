"""Respiratory motion learning.

A breathing waveform is modelled as ``z(t) = z0 - b * cos(pi*t/tau - phi)**(2n)``
with time in frames: ``z0`` is the exhale plateau, ``b`` the inhale depth,
``tau`` the period in frames and ``phi`` the phase.  Because the squared
cosine is pi-periodic and even, ``phi`` is only identifiable modulo pi and is
normalised into ``[0, pi)``.  Larger ``n`` lengthens the exhale plateau
relative to the inhale dip.

The fitting pipeline mirrors the intended deployment: tracked surface points
are reduced to a single displacement per frame (componentwise median over
consistent points), a principal-component basis turns those vectors into a
scalar trace, and a damped Gauss-Newton (Levenberg-Marquardt) fit with an
analytic Jacobian recovers the four model parameters.  A cheap phase-only
refit keeps the model aligned during long runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

AMPLITUDE_FLOOR = 1e-6


class FitError(ValueError):
    """Raised when the model cannot be fitted to a trace."""


class FitNotConverged(FitError):
    """Raised when the iteration budget is exhausted; carries the last iterate."""

    def __init__(self, message: str, last_model: "RespiratoryModel", report: "FitReport"):
        super().__init__(message)
        self.last_model = last_model
        self.report = report


@dataclass(frozen=True)
class RespiratoryModel:
    """Parameters of the breathing waveform (mm, frames, radians)."""

    z0: float
    b: float
    tau: float
    phi: float
    n: int = 3

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.z0, self.b, self.tau, self.phi)):
            raise ValueError("model parameters must be finite")
        if self.b < 0:
            raise ValueError("amplitude b must be non-negative")
        if self.tau <= 0:
            raise ValueError("period tau must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("exponent n must be a positive integer")


def evaluate_model(model: RespiratoryModel, t) -> np.ndarray:
    """Waveform value at frame(s) ``t``; range is ``[z0 - b, z0]``."""
    u = np.pi * np.asarray(t, dtype=float) / model.tau - model.phi
    return model.z0 - model.b * np.cos(u) ** (2 * model.n)


def model_jacobian(model: RespiratoryModel, t) -> np.ndarray:
    """Analytic partials of ``z(t)`` wrt ``(z0, b, tau, phi)``, shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    u = np.pi * t / model.tau - model.phi
    c = np.cos(u)
    s = np.sin(u)
    two_n = 2 * model.n
    c_pow = c ** (two_n - 1)
    dz0 = np.ones_like(t)
    db = -(c_pow * c)
    common = two_n * model.b * c_pow * s
    dtau = -common * np.pi * t / model.tau ** 2
    dphi = -common
    return np.stack([dz0, db, dtau, dphi], axis=-1)


def normalize_phase(phi: float) -> float:
    return float(phi % np.pi)


def phase_distance(a: float, b: float) -> float:
    """Distance between phases under the mod-pi identifiability."""
    d = (a - b) % np.pi
    return float(min(d, np.pi - d))


def wrap_phase_delta(delta: float) -> float:
    """Wrap a phase increment into ``(-pi/2, pi/2]``."""
    return float((delta + np.pi / 2) % np.pi - np.pi / 2)


# ── traces and bases ────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class MotionTrace:
    """Scalar displacement trace sampled at strictly increasing frame times."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise ValueError("times and values must be matching 1-D arrays")
        if t.size >= 2 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0]) if self.times.size else 0.0


@dataclass(frozen=True, eq=False)
class MotionBasis:
    """PCA basis of the observed displacements.

    ``axes`` holds the principal directions as rows (orthonormal), ordered by
    descending ``eigenvalues`` (mm^2).  Projection onto the first axis uses
    the raw dot product (no mean subtraction) so the fitted waveform keeps
    its offset; ``mean`` is retained for reporting.
    """

    axes: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.axes, dtype=float)
        w = np.asarray(self.eigenvalues, dtype=float)
        m = np.asarray(self.mean, dtype=float).reshape(3)
        if a.shape != (3, 3):
            raise ValueError("axes must be 3x3 with principal directions as rows")
        if np.abs(a @ a.T - np.eye(3)).max() > 1e-9:
            raise ValueError("axes rows must be orthonormal")
        if w.shape != (3,) or np.any(np.diff(w) > 1e-9) or np.any(w < -1e-9):
            raise ValueError("eigenvalues must be non-negative and descending")
        object.__setattr__(self, "axes", a)
        object.__setattr__(self, "eigenvalues", np.maximum(w, 0.0))
        object.__setattr__(self, "mean", m)

    @classmethod
    def identity(cls) -> "MotionBasis":
        return cls(np.eye(3), np.array([1.0, 0.0, 0.0]), np.zeros(3))

    def project_scalar(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.axes[0]


def aggregate_displacement(grid) -> np.ndarray:
    """Componentwise median of ``points_ref - points_now`` over consistent points.

    Keeps the reference-minus-current sign convention of the tracker stage;
    callers that need physical displacement from the reference negate it.
    """
    flags = np.asarray(grid.consistent, dtype=bool)
    if not flags.any():
        raise ValueError("no consistent points to aggregate")
    delta = grid.points_ref[flags] - grid.points_now[flags]
    return np.median(delta, axis=0)


def extract_principal_motion(samples: np.ndarray) -> MotionBasis:
    """PCA of per-frame displacement vectors.

    Uses the population covariance (divide by N).  The sign of each axis is
    fixed by making its first nonzero component positive.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("samples must be (N, 3)")
    if x.shape[0] < 3:
        raise ValueError("need at least three samples for a motion basis")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    axes = eigvecs[:, order].T
    if eigvals[0] < 1e-12:
        raise ValueError("degenerate motion: samples have no variance")
    for i in range(3):
        row = axes[i]
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            axes[i] = -row
    return MotionBasis(axes, eigvals, mean)


def predict_displacement(model: RespiratoryModel, basis: MotionBasis, t) -> np.ndarray:
    """Back-project the scalar model into 3-D: ``z(t)`` times the first axis."""
    z = evaluate_model(model, t)
    return np.multiply.outer(np.asarray(z), basis.axes[0]) if np.ndim(z) else z * basis.axes[0]


def exhale_displacement(model: RespiratoryModel, basis: MotionBasis, t) -> np.ndarray:
    """Predicted displacement relative to the exhale plateau (zero at exhale)."""
    z = evaluate_model(model, t) - model.z0
    return np.multiply.outer(np.asarray(z), basis.axes[0]) if np.ndim(z) else z * basis.axes[0]


# ── fitting ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class FitReport:
    residual_rms: float
    iterations: int
    converged: bool
    n_points: int
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "residual_rms": self.residual_rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_points": self.n_points,
            "message": self.message,
        }


def _autocorrelation_period(times: np.ndarray, values: np.ndarray) -> float:
    """Dominant period estimate from the biased autocorrelation of the trace.

    Assumes near-uniform sampling; the returned lag is refined with a
    parabolic fit around the strongest local maximum.
    """
    y = values - values.mean()
    n = y.size
    c = np.correlate(y, y, mode="full")[n - 1:] / n
    max_lag = n // 2
    lags = np.arange(1, max_lag)
    if lags.size < 3:
        raise FitError("trace too short for a period estimate")
    interior = lags[1:-1]
    is_peak = (c[interior] >= c[interior - 1]) & (c[interior] >= c[interior + 1])
    peaks = interior[is_peak]
    if peaks.size == 0:
        # No interior local maximum means no repetition fits inside half the
        # trace.  Falling back to the global argmax here invents a period of
        # one sample, and the subsequent fit can lock onto a sampling alias
        # with a perfect residual, so refuse instead.
        raise FitError("no repeating structure detected in the trace")
    peak = int(peaks[np.argmax(c[peaks])])
    # Parabolic refinement for sub-frame period resolution.  Lag 0 is the
    # autocorrelation spike, so refinement needs peak >= 2; the correction of
    # a genuine quadratic peak never leaves the neighbouring bins, hence the
    # clamp.
    refined = float(peak)
    if 2 <= peak < n - 1:
        y0, y1, y2 = c[peak - 1], c[peak], c[peak + 1]
        denom = y0 - 2 * y1 + y2
        if denom < 0:
            refined = peak + float(np.clip(0.5 * (y0 - y2) / denom, -1.0, 1.0))
    if refined <= 0:
        raise FitError("trace too short for a period estimate")
    dt = np.median(np.diff(times)) if times.size > 1 else 1.0
    return float(refined * dt)


def _initial_guess(trace: MotionTrace, n: int) -> RespiratoryModel:
    values = trace.values
    z0 = float(values.max())
    b = float(values.max() - values.min())
    tau = _autocorrelation_period(trace.times, values)
    best_phi, best_cost = 0.0, np.inf
    for phi in np.linspace(0.0, np.pi, 64, endpoint=False):
        guess = RespiratoryModel(z0, b, tau, float(phi), n)
        r = evaluate_model(guess, trace.times) - values
        cost = float(r @ r)
        if cost < best_cost:
            best_phi, best_cost = float(phi), cost
    return RespiratoryModel(z0, b, tau, best_phi, n)


def _run_lm(trace: MotionTrace, n: int, theta0: np.ndarray,
            max_iterations: int, cost_tol: float) -> tuple[np.ndarray, float, int, bool]:
    """Damped normal equations with a multiplicative lambda schedule."""
    times, values = trace.times, trace.values

    def residual_jac(theta):
        # evaluate without constructing a model: intermediate iterates may
        # wander outside the validated parameter ranges
        u = np.pi * times / theta[2] - theta[3]
        c = np.cos(u)
        z = theta[0] - theta[1] * c ** (2 * n)
        r = z - values
        s = np.sin(u)
        c_pow = c ** (2 * n - 1)
        common = 2 * n * theta[1] * c_pow * s
        jac = np.stack([np.ones_like(times), -(c_pow * c),
                        -common * np.pi * times / theta[2] ** 2, -common], axis=-1)
        return r, jac

    theta = theta0.astype(float).copy()
    r, jac = residual_jac(theta)
    cost = float(r @ r)
    # below this the residual is float rounding, not signal
    eps_scale = 4.0 * np.finfo(float).eps * max(1.0, float(np.abs(values).max()))
    cost_floor = times.size * eps_scale ** 2
    lam = 1e-3
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        a = jac.T @ jac
        g = jac.T @ r
        damping = np.diag(np.maximum(np.diag(a), 1e-12))
        improved = False
        while lam <= 1e15:
            try:
                step = np.linalg.solve(a + lam * damping, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = theta + step
            if not np.all(np.isfinite(cand)) or cand[2] <= 1e-6:
                lam *= 10.0
                continue
            rc, jc = residual_jac(cand)
            cand_cost = float(rc @ rc)
            if cand_cost < cost:
                rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                step_small = bool(np.all(np.abs(step)
                                         <= 1e-12 * (1.0 + np.abs(theta))))
                theta, r, jac, cost = cand, rc, jc, cand_cost
                lam = max(lam / 10.0, 1e-14)
                improved = True
                if rel_drop < cost_tol or cost <= cost_floor or step_small:
                    return theta, cost, iterations, True
                break
            lam *= 10.0
        if not improved:
            # Damping exploded: no descent direction is left at this scale,
            # which means the iterate sits at a (numerical) minimum.
            return theta, cost, iterations, True
    return theta, cost, iterations, False


def fit_model(trace: MotionTrace, n: int = 3, init: RespiratoryModel | None = None,
              max_iterations: int = 200, cost_tol: float = 1e-10
              ) -> tuple[RespiratoryModel, FitReport]:
    """Least-squares fit of the breathing model to a scalar trace.

    When ``init`` is omitted the starting point is derived from the trace:
    plateau from the maximum, depth from the peak-to-peak range, period from
    the dominant autocorrelation peak and phase from a coarse grid search.
    Raises ``FitError`` on degenerate input and ``FitNotConverged`` when the
    iteration budget runs out.
    """
    if trace.times.size < 8:
        raise FitError("insufficient data: need at least 8 samples")
    if float(np.ptp(trace.values)) < AMPLITUDE_FLOOR:
        raise FitError("degenerate trace: amplitude below threshold")
    if init is None:
        init = _initial_guess(trace, n)
    if trace.span < 2.0 * init.tau - 1e-9:
        raise FitError("insufficient data: trace covers less than two periods")

    theta0 = np.array([init.z0, init.b, init.tau, init.phi], dtype=float)
    theta, cost, iterations, converged = _run_lm(trace, n, theta0, max_iterations, cost_tol)
    rms = math.sqrt(cost / trace.times.size)
    if not converged:
        model = RespiratoryModel(theta[0], abs(theta[1]), theta[2],
                                 normalize_phase(theta[3]), n)
        report = FitReport(rms, iterations, False, trace.times.size,
                           "iteration budget exhausted")
        raise FitNotConverged("fit did not converge within the iteration budget",
                              model, report)
    if theta[1] <= 0:
        raise FitError("degenerate fit: non-positive amplitude")
    # re-check against the fitted period: a bad initial period estimate must
    # not smuggle an unsupported fit past the two-period requirement
    if trace.span < 2.0 * theta[2] - 1e-9:
        raise FitError("insufficient data: trace covers less than two periods")
    model = RespiratoryModel(float(theta[0]), float(theta[1]), float(theta[2]),
                             normalize_phase(float(theta[3])), n)
    return model, FitReport(rms, iterations, True, trace.times.size)


def update_phase(model: RespiratoryModel, window: MotionTrace,
                 cap: float = 0.05) -> RespiratoryModel:
    """Phase-only refit over a recent window spanning at least two periods.

    All parameters except ``phi`` are frozen.  The applied change is wrapped
    into the mod-pi identifiability interval and clamped to ``cap`` radians
    per call so a single noisy window cannot yank the model.  A flat window
    (or a static model) carries no phase information and leaves the model
    unchanged.
    """
    if window.span < 2.0 * model.tau - 1e-9:
        raise ValueError("update window spans less than two periods")
    if model.b <= AMPLITUDE_FLOOR or float(np.ptp(window.values)) < AMPLITUDE_FLOOR:
        return model

    times, values = window.times, window.values

    def cost_at(phi: float) -> float:
        r = evaluate_model(replace(model, phi=phi), times) - values
        return float(r @ r)

    # Warm-started 1-D Gauss-Newton; phase drifts slowly so the current value
    # is almost always inside the convergence basin.
    phi = model.phi
    base_cost = cost_at(phi)
    for _ in range(12):
        m = replace(model, phi=phi)
        r = evaluate_model(m, times) - values
        dphi = model_jacobian(m, times)[:, 3]
        h = float(dphi @ dphi)
        if h <= 0:
            break
        step = -float(r @ dphi) / h
        if abs(step) < 1e-12:
            break
        phi = phi + step
    refined = normalize_phase(phi)
    if cost_at(refined) > base_cost:
        # Cold start: fall back to a coarse grid plus one refinement pass.
        grid = np.linspace(0.0, np.pi, 128, endpoint=False)
        costs = [cost_at(p) for p in grid]
        phi = float(grid[int(np.argmin(costs))])
        for _ in range(12):
            m = replace(model, phi=phi)
            r = evaluate_model(m, times) - values
            dphi = model_jacobian(m, times)[:, 3]
            h = float(dphi @ dphi)
            if h <= 0:
                break
            phi -= float(r @ dphi) / h
        refined = normalize_phase(phi)

    delta = wrap_phase_delta(refined - model.phi)
    delta = float(np.clip(delta, -cap, cap))
    return replace(model, phi=normalize_phase(model.phi + delta))


def learn_motion_model(times: np.ndarray, samples: np.ndarray, n: int = 3
                       ) -> tuple[RespiratoryModel, MotionBasis, MotionTrace, FitReport]:
    """Full learning pipeline from per-frame displacement vectors.

    Extracts the principal basis, orients its first axis so the projected
    trace dips downward (the waveform family has a top plateau, so a trace
    with its median below mid-range indicates a flipped axis), then fits the
    model to the scalar trace.
    """
    samples = np.asarray(samples, dtype=float)
    basis = extract_principal_motion(samples)
    scalar = basis.project_scalar(samples)
    if np.median(scalar) < 0.5 * (scalar.min() + scalar.max()):
        axes = basis.axes.copy()
        axes[0] = -axes[0]
        basis = MotionBasis(axes, basis.eigenvalues, basis.mean)
        scalar = -scalar
    trace = MotionTrace(np.asarray(times, dtype=float), scalar)
    model, report = fit_model(trace, n=n)
    return model, basis, trace, report
