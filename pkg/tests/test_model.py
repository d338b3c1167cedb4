import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgvasl.model import (CBF_TO_INTERNAL, AcquisitionProtocol, ParameterMaps, asl_signal,
                          asl_signal_series, cbf_to_external, cbf_to_internal, jacobian, t1_app)

# frozen from tests/oracles/derive_constants.py (40-digit mpmath)
T1APP_GM = 1.3090431882182468404
SIGNAL_BRANCH3 = 0.0090796844867636882407
PARTIALS = [
    # (f ml/100g/min, delta, t, tau, dA/df, dA/ddelta)
    (65.0, 0.8, 3.0, 1.8, 0.827027704894142606, 0.00143328385674040613),
    (20.0, 1.5, 2.3, 1.3, 0.456286217519004741, -0.00230899595261745089),
    (130.0, 0.5, 1.05, 1.05, 0.620730558067312597, -0.0279278738967724904),
]


def proto1(t, tau, m0=1.0, **kw):
    return AcquisitionProtocol(np.atleast_1d(t), np.atleast_1d(tau), np.full(1, m0), **kw)


def maps1(f_ext, delta):
    return ParameterMaps.from_external(np.full(1, f_ext), np.full(1, delta))


def test_unit_factors_roundtrip():
    assert cbf_to_internal(6000.0) == 1.0
    assert cbf_to_external(cbf_to_internal(65.0)) == pytest.approx(65.0, rel=1e-15)


class TestProtocol:
    def test_valid(self):
        p = AcquisitionProtocol([1.0, 2.0], [1.0, 1.0], np.ones((2, 2, 2)))
        assert p.n_frames == 2 and p.grid == (2, 2, 2)
        assert p.m0_alpha[0, 0, 0] == pytest.approx(0.85 / 0.9)

    @pytest.mark.parametrize("kw", [
        dict(t=[0.5], tau=[1.0]),            # negative PLD
        dict(t=[1.0], tau=[0.0]),
        dict(t=[1.0, 2.0], tau=[1.0]),
        dict(t=[np.nan], tau=[1.0]),
        dict(t=[1.0], tau=[1.0], alpha=0.0),
        dict(t=[1.0], tau=[1.0], alpha=1.2),
        dict(t=[1.0], tau=[1.0], lam=-0.9),
        dict(t=[1.0], tau=[1.0], m0=-np.ones(1)),
    ])
    def test_rejects(self, kw):
        kw = dict(kw)
        m0 = kw.pop("m0", np.ones(1))
        with pytest.raises(ValueError):
            AcquisitionProtocol(m0=m0, **kw)

    def test_repeated(self):
        p = AcquisitionProtocol([1.0, 2.0], [1.0, 1.5], np.ones(1)).repeated(2)
        np.testing.assert_array_equal(p.t, [1.0, 2.0, 1.0, 2.0])
        np.testing.assert_array_equal(p.tau, [1.0, 1.5, 1.0, 1.5])


class TestT1App:
    def test_zero_flow(self):
        assert t1_app(0.0, 1.33, 0.9) == 1.33

    def test_gm_value(self):
        assert t1_app(65 / 6000, 1.33, 0.9) == pytest.approx(T1APP_GM, rel=1e-15)

    def test_monotone_to_zero(self):
        f = np.logspace(-6, 6, 50)
        v = t1_app(f, 1.33, 0.9)
        assert np.all(np.diff(v) < 0) and v[-1] < 1e-5 and np.all(v > 0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            t1_app(np.inf, 1.33, 0.9)
        with pytest.raises(ValueError):
            t1_app(0.01, np.nan, 0.9)


class TestSignal:
    def test_before_arrival(self):
        p = proto1(0.5, 0.5)
        assert asl_signal(65 * CBF_TO_INTERNAL, 0.8, p, 0) == 0.0

    def test_zero_flow_every_frame(self):
        p = proto1(np.linspace(1, 5, 9), np.full(9, 1.0))
        assert not np.any(asl_signal_series(maps1(0.0, 0.8), p))

    def test_branch3_value(self):
        p = proto1(3.0, 1.8)
        v = asl_signal(65 / 6000, 0.8, p, 0)
        assert v[0] == pytest.approx(SIGNAL_BRANCH3, rel=1e-13)

    def test_at_arrival_is_zero(self):
        p = proto1(0.8, 0.8)
        assert asl_signal(65 / 6000, 0.8, p, 0) == 0.0

    def test_frame_index_checked(self):
        with pytest.raises(IndexError):
            asl_signal(0.01, 0.8, proto1(3.0, 1.8), 1)

    def test_series_spatially_invariant(self):
        p = AcquisitionProtocol(np.linspace(1.05, 4.8, 16), np.full(16, 1.05), np.ones((2, 2, 2)))
        s = asl_signal_series(ParameterMaps.uniform((2, 2, 2), 65.0, 0.8), p)
        assert s.shape == (16, 2, 2, 2)
        assert np.all(s == s[:, :1, :1, :1])

    def test_single_voxel_matches_scalar(self):
        t = np.array([1.05, 1.3, 2.0, 3.0, 4.8])
        tau = np.array([1.05, 1.3, 1.8, 1.8, 1.8])
        p = proto1(t, tau, m0=80.0)
        series = asl_signal_series(maps1(65.0, 0.8), p)[:, 0]
        for n in range(t.size):
            assert series[n] == asl_signal(65 / 6000, 0.8, p, n)[0]

    def test_grid_mismatch(self):
        p = AcquisitionProtocol([1.0], [1.0], np.ones((2, 2)))
        with pytest.raises(ValueError):
            asl_signal_series(ParameterMaps.uniform((3, 2)), p)

    @settings(max_examples=60, deadline=None)
    @given(f=st.floats(0, 300), delta=st.floats(0, 6), t=st.floats(0.1, 8), c=st.floats(0.1, 1e3))
    def test_positive_and_homogeneous_in_m0(self, f, delta, t, c):
        tau = min(t, 1.8)
        p = proto1(t, tau, m0=1.0)
        a = float(asl_signal(f * CBF_TO_INTERNAL, delta, p, 0)[0])
        b = float(asl_signal(f * CBF_TO_INTERNAL, delta, p, 0, m0=c))
        assert a >= 0
        assert b == pytest.approx(c * a, rel=1e-14, abs=0)


def _branch_values(f, delta, t, tau, m0a=1.0, t1=1.33, t1b=1.65, lam=0.9):
    """Both neighbouring branch formulas evaluated directly at one point."""
    ta = 1.0 / (1.0 / t1 + f / lam)
    amp = 2 * m0a * f * ta * np.exp(-delta / t1b)
    inflow = amp * (1 - np.exp(-(t - delta) / ta))
    post = amp * np.exp(-(t - tau - delta) / ta) * (1 - np.exp(-tau / ta))
    return inflow, post


def test_continuity_at_boundaries():
    rng = np.random.default_rng(7)
    f = rng.uniform(0, 300, 1000) / 6000
    delta = rng.uniform(0, 6, 1000)
    tau = rng.uniform(0.2, 3, 1000)
    # at t = delta the inflow branch is 0 like the transit branch
    inflow, _ = _branch_values(f, delta, delta, tau)
    assert np.max(np.abs(inflow)) <= 1e-12
    # at t = delta + tau inflow and post-bolus agree
    t = delta + tau
    inflow, post = _branch_values(f, delta, t, tau)
    assert np.max(np.abs(inflow - post)) <= 1e-12


class TestJacobian:
    def test_matches_mpmath_partials(self):
        for f, d, t, tau, df, dd in PARTIALS:
            jac = jacobian(maps1(f, d), proto1(t, tau))
            assert jac[0, 0, 0] == pytest.approx(df, rel=1e-10)
            assert jac[0, 1, 0] == pytest.approx(dd, rel=1e-10)

    def test_zero_before_arrival(self):
        jac = jacobian(maps1(65.0, 2.0), proto1(1.5, 1.5))
        assert not np.any(jac)

    def test_f_zero_inflow_closed_form(self):
        t, delta, tau = 1.7, 0.9, 1.5
        jac = jacobian(maps1(0.0, delta), proto1(t, tau))
        m0a = 0.85 / 0.9
        expect = 2 * m0a * 1.33 * np.exp(-delta / 1.65) * (1 - np.exp((delta - t) / 1.33))
        assert jac[0, 0, 0] == pytest.approx(expect, rel=1e-14)

    def test_right_continuous_convention(self):
        # t == delta: the inflow branch (which contains t) is differentiated
        t, tau = 1.2, 1.2
        jac = jacobian(maps1(60.0, t), proto1(t, tau))
        assert jac[0, 0, 0] == 0.0           # inflow value and d/df vanish at its start
        assert jac[0, 1, 0] < 0.0            # but d/ddelta is the inflow slope

    @settings(max_examples=100, deadline=None)
    @given(f=st.floats(1.0, 300.0), delta=st.floats(0.0, 6.0), t=st.floats(0.2, 8.0),
           tau=st.floats(0.1, 3.0))
    def test_finite_differences(self, f, delta, t, tau):
        tau = min(tau, t)
        h = 1e-6
        # stay away from the kinks in delta
        if min(abs(t - delta), abs(t - delta - tau)) < 1e-3:
            return
        p = proto1(t, tau, m0=1.0)
        fi = f * CBF_TO_INTERNAL
        jac = jacobian(ParameterMaps(np.full(1, fi), np.full(1, delta)), p)[0, :, 0]

        def a(ff, dd):
            return asl_signal_series(ParameterMaps(np.full(1, ff), np.full(1, dd)), p)[0, 0]

        hf = h * max(fi, 1e-6)
        fd_f = (a(fi + hf, delta) - a(fi - hf, delta)) / (2 * hf)
        fd_d = (a(fi, delta + h) - a(fi, delta - h)) / (2 * h)
        scale_f = max(abs(fd_f), 1e-8)
        scale_d = max(abs(fd_d), 1e-8)
        assert abs(jac[0] - fd_f) <= 1e-4 * scale_f
        assert abs(jac[1] - fd_d) <= 1e-4 * scale_d
