"""Breathing waveform model, PCA basis and the in-repo least-squares fit."""

import numpy as np
import pytest

from mcscan.motion import (FitError, FitNotConverged, MotionBasis, MotionTrace,
                           RespiratoryModel, _autocorrelation_period,
                           _initial_guess, evaluate_model, exhale_displacement,
                           extract_principal_motion, fit_model,
                           learn_motion_model, model_jacobian, normalize_phase,
                           phase_distance, predict_displacement, update_phase,
                           wrap_phase_delta)


def make_trace(model, t_end, dt=1.0, noise=0.0, rng=None):
    times = np.arange(0.0, t_end, dt)
    values = evaluate_model(model, times)
    if noise:
        values = values + noise * rng.standard_normal(times.size)
    return MotionTrace(times, values)


def test_waveform_range_and_plateau():
    m = RespiratoryModel(z0=1.0, b=3.0, tau=80.0, phi=0.4)
    t = np.linspace(0, 400, 4001)
    z = evaluate_model(m, t)
    assert z.max() <= 1.0 + 1e-12
    assert z.min() >= 1.0 - 3.0 - 1e-12
    # high even exponent concentrates the dip, leaving a top plateau
    assert np.median(z) > 0.5 * (z.min() + z.max())


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    t = np.linspace(0.0, 200.0, 37)
    for _ in range(8):
        m = RespiratoryModel(z0=rng.uniform(-2, 2), b=rng.uniform(0.5, 5),
                             tau=rng.uniform(40, 160), phi=rng.uniform(0, np.pi))
        jac = model_jacobian(m, t)
        assert jac.shape == (t.size, 4)
        names = ["z0", "b", "tau", "phi"]
        for k, name in enumerate(names):
            p = [m.z0, m.b, m.tau, m.phi]
            h = 1e-6 * max(1.0, abs(p[k]))
            hi, lo = list(p), list(p)
            hi[k] += h
            lo[k] -= h
            z_hi = evaluate_model(RespiratoryModel(*hi), t)
            z_lo = evaluate_model(RespiratoryModel(*lo), t)
            fd = (z_hi - z_lo) / (2 * h)
            assert np.allclose(jac[:, k], fd, atol=1e-5, rtol=1e-5), name


def test_phase_helpers():
    assert 0.0 <= normalize_phase(7.5) < np.pi
    assert normalize_phase(7.5) == pytest.approx(7.5 % np.pi)
    assert normalize_phase(-0.2) == pytest.approx(np.pi - 0.2)
    assert phase_distance(0.1, 0.1 + np.pi) == pytest.approx(0.0, abs=1e-12)
    assert phase_distance(0.0, np.pi - 0.05) == pytest.approx(0.05)
    assert phase_distance(1.0, 1.3) == pytest.approx(phase_distance(1.3, 1.0),
                                                     abs=1e-12)
    for d in (-2.0, -0.3, 0.0, 0.3, 2.0):
        w = wrap_phase_delta(d)
        assert -np.pi / 2 < w <= np.pi / 2
        assert (d - w) % np.pi == pytest.approx(0.0, abs=1e-9) or \
            (d - w) % np.pi == pytest.approx(np.pi, abs=1e-9)


def test_trace_validation():
    with pytest.raises(ValueError):
        MotionTrace(np.array([0.0, 1.0, 1.0]), np.zeros(3))
    tr = MotionTrace(np.array([2.0, 3.5, 7.0]), np.zeros(3))
    assert tr.span == pytest.approx(5.0)


def test_autocorrelation_period_estimate():
    m = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=0.8)
    tr = make_trace(m, 320.0)
    tau_hat = _autocorrelation_period(tr.times, tr.values)
    assert tau_hat == pytest.approx(75.0, rel=0.05)


def test_initial_guess_brackets_truth():
    m = RespiratoryModel(z0=0.5, b=4.0, tau=110.0, phi=2.1)
    tr = make_trace(m, 440.0)
    g = _initial_guess(tr, 3)
    assert g.tau == pytest.approx(110.0, rel=0.1)
    assert g.b == pytest.approx(4.0, rel=0.15)
    assert g.z0 == pytest.approx(0.5, abs=0.1)
    assert phase_distance(g.phi, 2.1) < 0.2


def test_noiseless_recovery():
    rng = np.random.default_rng(12)
    for _ in range(10):
        true = RespiratoryModel(z0=rng.uniform(-2, 2), b=rng.uniform(1, 6),
                                tau=rng.uniform(50, 150),
                                phi=rng.uniform(0, np.pi))
        tr = make_trace(true, 4.0 * true.tau)
        model, report = fit_model(tr)
        assert report.converged
        assert model.z0 == pytest.approx(true.z0, abs=1e-6)
        assert model.b == pytest.approx(true.b, rel=1e-6)
        assert model.tau == pytest.approx(true.tau, rel=1e-6)
        assert phase_distance(model.phi, true.phi) < 1e-6
        assert report.residual_rms < 1e-9


def test_noisy_recovery_stays_close():
    rng = np.random.default_rng(4)
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.1)
    tr = make_trace(true, 320.0, noise=0.05, rng=rng)
    model, report = fit_model(tr)
    assert report.converged
    assert model.tau == pytest.approx(75.0, abs=0.5)
    assert model.b == pytest.approx(3.0, abs=0.15)
    assert phase_distance(model.phi, 1.1) < 0.05


def test_fit_rejects_degenerate_input():
    m = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=0.3)
    with pytest.raises(FitError, match="at least 8"):
        fit_model(MotionTrace(np.arange(5.0), np.sin(np.arange(5.0))))
    flat = MotionTrace(np.arange(300.0), np.full(300, 2.0))
    with pytest.raises(FitError, match="amplitude"):
        fit_model(flat)
    short = make_trace(m, 100.0)  # 1.33 periods
    with pytest.raises(FitError, match="repeating structure|two periods"):
        fit_model(short)
    # an explicit (correct) period hits the span check instead
    with pytest.raises(FitError, match="two periods"):
        fit_model(short, init=m)


def test_fit_not_converged_carries_last_model():
    rng = np.random.default_rng(9)
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.1)
    tr = make_trace(true, 320.0, noise=0.3, rng=rng)
    init = RespiratoryModel(z0=0.5, b=2.0, tau=70.0, phi=0.6)
    with pytest.raises(FitNotConverged) as exc:
        fit_model(tr, init=init, max_iterations=1)
    err = exc.value
    assert isinstance(err.last_model, RespiratoryModel)
    assert err.report.converged is False
    assert err.report.iterations == 1
    assert err.last_model.b > 0


def test_update_phase_recovers_small_offset():
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.0)
    window = make_trace(true, 2.5 * 75.0)
    drifted = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.1)
    for _ in range(4):
        drifted = update_phase(drifted, window, cap=0.05)
    assert phase_distance(drifted.phi, 1.0) < 0.02


def test_update_phase_respects_cap():
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.0)
    window = make_trace(true, 2.5 * 75.0)
    drifted = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=1.3)
    updated = update_phase(drifted, window, cap=0.05)
    moved = phase_distance(updated.phi, drifted.phi)
    assert moved <= 0.05 + 1e-9
    assert phase_distance(updated.phi, 1.0) < phase_distance(drifted.phi, 1.0)


def test_update_phase_static_guards():
    window = make_trace(RespiratoryModel(0.0, 3.0, 75.0, 1.0), 200.0)
    static = RespiratoryModel(z0=0.0, b=0.0, tau=75.0, phi=0.4)
    assert update_phase(static, window) == static
    flat = MotionTrace(np.arange(200.0), np.zeros(200))
    live = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=0.4)
    assert update_phase(live, flat) == live
    with pytest.raises(ValueError, match="two periods"):
        update_phase(live, make_trace(live, 100.0))


def test_pca_orthonormal_descending():
    rng = np.random.default_rng(2)
    t = np.arange(400.0)
    d = np.stack([3.0 * np.sin(0.1 * t), 0.5 * np.cos(0.13 * t),
                  0.1 * rng.standard_normal(t.size)], axis=1)
    basis = extract_principal_motion(d)
    assert np.allclose(basis.axes @ basis.axes.T, np.eye(3), atol=1e-9)
    assert basis.eigenvalues[0] >= basis.eigenvalues[1] >= basis.eigenvalues[2]
    # dominant direction is x, with the first nonzero component positive
    assert abs(basis.axes[0] @ np.array([1.0, 0, 0])) > 0.99
    assert basis.axes[0][np.nonzero(np.abs(basis.axes[0]) > 1e-12)[0][0]] > 0


def test_pca_rejects_degenerate():
    with pytest.raises(ValueError, match="at least three"):
        extract_principal_motion(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="no variance"):
        extract_principal_motion(np.ones((10, 3)))


def test_displacement_helpers_match_formulas():
    m = RespiratoryModel(z0=0.7, b=3.0, tau=75.0, phi=1.0)
    basis = MotionBasis.identity()
    t = np.array([0.0, 10.0, 33.0])
    z = evaluate_model(m, t)
    pred = predict_displacement(m, basis, t)
    exh = exhale_displacement(m, basis, t)
    assert np.allclose(pred[:, 0], z)
    assert np.allclose(pred[:, 1:], 0.0)
    assert np.allclose(exh[:, 0], z - 0.7)
    # scalar time gives a bare 3-vector
    assert exhale_displacement(m, basis, 10.0).shape == (3,)


@pytest.mark.parametrize("orientation", [1.0, -1.0])
def test_learn_motion_model_reproduces_displacement(orientation):
    """The learned model and basis reproduce the input displacement samples
    regardless of the sign with which the motion is observed."""
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=0.9)
    axis = np.array([0.0, 1.0, 0.0])
    times = np.arange(320.0)
    z = evaluate_model(true, times)
    samples = orientation * np.multiply.outer(z, axis)
    model, basis, trace, report = learn_motion_model(times, samples)
    assert report.converged
    assert model.b == pytest.approx(3.0, rel=1e-6)
    assert model.tau == pytest.approx(75.0, rel=1e-6)
    # the oriented first axis projects the trace with its plateau on top
    assert np.median(trace.values) > 0.5 * (trace.values.min()
                                            + trace.values.max())
    recon = exhale_displacement(model, basis, times)
    assert np.allclose(recon, samples, atol=1e-6)


def test_learn_motion_model_oriented_axis():
    true = RespiratoryModel(z0=0.0, b=3.0, tau=75.0, phi=0.9)
    axis = np.array([0.0, 1.0, 0.0])
    times = np.arange(320.0)
    z = evaluate_model(true, times)
    samples = np.multiply.outer(z, axis)  # dips towards -y
    model, basis, _, _ = learn_motion_model(times, samples)
    assert basis.axes[0] @ axis > 0.999
    assert model.z0 == pytest.approx(0.0, abs=1e-9)
    recon = exhale_displacement(model, basis, times)
    assert np.allclose(recon, samples, atol=1e-6)
