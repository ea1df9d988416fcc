"""Local gain synthesis, stability certificates, plug-in/out admission,
virtual impedance, clock sync, and the closed-loop frequency map."""

import cmath
import math

import numpy as np
import pytest

from pnpgrid.plant import DguParams, LineParams
from pnpgrid.primary import (
    ALPHA_MIN,
    COUPLE_MARGIN,
    DEFAULT_LOCAL_POLES,
    AugmentedLocalModel,
    ControllerGain,
    PrimaryControllerState,
    SynthesisError,
    VirtualImpedance,
    build_local_model,
    certify_global,
    certify_local,
    closed_loop_singular_values,
    control_step,
    equilibrium_xi,
    estimate_clock_offset,
    filtered_difference,
    plug_in,
    plug_out,
    required_decay,
    rot2,
    single_unit_model,
    spectral_abscissa,
    synthesize_gain,
    tracking_error,
    virtual_impedance_drop,
)
from pnpgrid.topology import BusTopology, reduce_bus_to_load

W0 = 2.0 * math.pi * 50.0  # rad/s
Z_EQUAL_3 = complex(0.3, 1.696460032938488)  # ohm, 3 equal table lines
BOUND_3 = 2.0 / (25e-6 * abs(Z_EQUAL_3))  # 1/s, = 46436.5287


def table_topo(n):
    p = DguParams()
    return reduce_bus_to_load(BusTopology((p.line,) * n), W0)


def default_gain(n=3):
    p = DguParams()
    topo = table_topo(n)
    return synthesize_gain(build_local_model(p, topo, 0, W0))


def as_complex_row(gain):
    return gain.k[0, 0::2] + 1j * gain.k[1, 0::2]


def test_rot2_matches_complex_multiplication():
    rng = np.random.default_rng(5)
    for _ in range(20):
        c = complex(*rng.normal(size=2))
        x = complex(*rng.normal(size=2))
        y = rot2(c) @ [x.real, x.imag]
        assert abs(complex(y[0], y[1]) - c * x) < 1e-12


def test_local_model_open_loop_spectrum():
    # two marginal integrators; the LC quads sit at Re = -R_t/(2 L_t)
    p = DguParams()
    m = build_local_model(p, table_topo(3), 0, W0)
    ev = np.sort_complex(np.linalg.eigvals(m.a))
    zero = [e for e in ev if abs(e) < 1e-9]
    rest = [e for e in ev if abs(e) >= 1e-9]
    assert len(zero) == 2 and len(rest) == 4
    for e in rest:
        assert abs(e.real - (-p.r_t_ohm / (2 * p.l_t_henry))) < 1e-8


def test_coupling_bound_equal_lines():
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    assert abs(m.coupling_bound - BOUND_3) < 1e-6 * BOUND_3
    assert abs(BOUND_3 - 46436.5287) < 1e-3


def test_coupling_bound_grows_with_network():
    p = DguParams()
    bounds = [build_local_model(p, table_topo(n), 0, W0).coupling_bound
              for n in (1, 2, 3, 4)]
    assert bounds[0] == 0.0
    assert all(b2 > b1 for b1, b2 in zip(bounds, bounds[1:]))


def test_required_decay_rule():
    assert required_decay(0.0) == ALPHA_MIN
    assert abs(required_decay(BOUND_3) - COUPLE_MARGIN * BOUND_3) < 1e-9
    assert required_decay(1e9, alpha=7.0) == 7.0


def test_zero_gain_fails_certificate():
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    rep = certify_local(ControllerGain(np.zeros((2, 6))), m)
    assert not rep.passed
    assert rep.abscissa > -1e-9


def test_default_synthesis_certifies():
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    g = synthesize_gain(m)
    rep = certify_local(g, m)
    assert rep.passed
    assert abs(rep.abscissa - (-60.0)) < 1e-6
    assert abs(rep.required - 46.4365) < 1e-3
    k = as_complex_row(g)
    assert abs(k[0] - complex(0.9358, 0.0174)) < 5e-4
    assert abs(k[1] - complex(-1.3940, -1.4790)) < 5e-4
    assert abs(k[2] - complex(2.7648, -0.5765)) < 5e-4


def test_placement_hits_requested_poles():
    # oracle route: eigenvalues of the real 6-state closed loop must be the
    # requested complex poles plus conjugates
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    rng = np.random.default_rng(23)
    pole_sets = [DEFAULT_LOCAL_POLES]
    for _ in range(10):
        re = -(10.0 ** rng.uniform(1.0, 2.8, size=3))
        im = rng.uniform(-800.0, 800.0, size=3)
        pole_sets.append(tuple(complex(a, b) for a, b in zip(re, im)))
    for poles in pole_sets:
        try:
            g = synthesize_gain(m, poles=poles)
        except SynthesisError:
            continue  # certificate may reject slow sets; exactness is the point
        got = np.sort_complex(np.linalg.eigvals(m.a + m.b @ g.k))
        want = np.sort_complex(np.array(
            list(poles) + [p.conjugate() for p in poles]))
        scale = max(abs(p) for p in poles)
        assert np.max(np.abs(got - want)) < 1e-6 * scale


def test_synthesis_rejects_bad_poles():
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    with pytest.raises(SynthesisError):
        synthesize_gain(m, poles=(-100.0, -200.0))
    with pytest.raises(SynthesisError):
        synthesize_gain(m, poles=(complex(5, 100), -200.0, -300.0))
    with pytest.raises(SynthesisError):
        synthesize_gain(m, poles=(float("nan"), -200.0, -300.0))


def test_synthesis_rejects_non_rotation_model():
    m = build_local_model(DguParams(), table_topo(3), 0, W0)
    a = m.a.copy()
    a[0, 1] += 5.0  # breaks the dq symmetry of the V block
    with pytest.raises(SynthesisError):
        synthesize_gain(AugmentedLocalModel(a, m.b, m.coupling_bound))


def test_certificate_monotone_in_coupling():
    m3 = build_local_model(DguParams(), table_topo(3), 0, W0)
    g = synthesize_gain(m3)
    for n in (1, 2):
        m = build_local_model(DguParams(), table_topo(n), 0, W0)
        assert m.coupling_bound <= m3.coupling_bound
        assert certify_local(g, m).passed  # weaker coupling can only help


def test_retained_gain_survives_growth():
    g = synthesize_gain(single_unit_model(DguParams(), W0))
    m3 = build_local_model(DguParams(), table_topo(3), 0, W0)
    assert certify_local(g, m3).passed


def test_global_certificate_table_network():
    g = default_gain()
    topo = table_topo(3)
    rep = certify_global([g] * 3, topo, [DguParams()] * 3, W0)
    assert rep.passed and rep.n_units == 3
    assert abs(rep.abscissa - (-11.53)) < 0.05


def test_global_certificate_rejects_bad_member():
    g = default_gain()
    topo = table_topo(3)
    params = [DguParams()] * 3
    flipped = ControllerGain(-g.k)
    assert not certify_global([g, flipped, g], topo, params, W0).passed
    zero = ControllerGain(np.zeros((2, 6)))
    rep = certify_global([g, zero, g], topo, params, W0)
    # a dead member leaves its integrators undamped at the origin
    assert not rep.passed and rep.abscissa > -0.5
    with pytest.raises(ValueError):
        certify_global([g, g], topo, params, W0)


def test_global_single_unit_matches_local():
    p = DguParams()
    m = single_unit_model(p, W0)
    g = synthesize_gain(m)
    rep = certify_global([g], table_topo(1), [p], W0)
    local = spectral_abscissa(m.a + m.b @ g.k)
    assert rep.passed
    assert abs(rep.abscissa - local) < 1e-6


def test_global_certificate_asymmetric_lines():
    inductances = (1.8e-3, 2.2e-3, 1.5e-3)
    params = [DguParams(line=LineParams(r_ohm=0.1, l_henry=l))
              for l in inductances]
    topo = reduce_bus_to_load(BusTopology(tuple(p.line for p in params)), W0)
    gains = [synthesize_gain(build_local_model(p, topo, i, W0))
             for i, p in enumerate(params)]
    rep = certify_global(gains, topo, params, W0)
    assert rep.passed
    assert rep.abscissa < -10.0


def test_attenuation_dc_unity():
    # integral action makes the common-mode reference pass through at DC
    g = default_gain()
    (_, att_v, _), = closed_loop_singular_values(
        [g] * 3, table_topo(3), [DguParams()] * 3, [0.0], W0)
    assert abs(att_v) < 1e-9


def test_attenuation_meets_floor_over_band():
    g = default_gain()
    freqs = [180.0, 200.0, 250.0, 300.0, 400.0, 500.0, 520.0]
    out = closed_loop_singular_values(
        [g] * 3, table_topo(3), [DguParams()] * 3, freqs, W0)
    att = {f: a for f, a, _ in out}
    assert all(a >= 30.0 for a in att.values())
    assert abs(att[200.0] - 30.8) < 0.1
    assert abs(att[300.0] - 34.0) < 0.1
    assert abs(att[500.0] - 48.0) < 0.1


def test_plug_sequence_accepts_and_retains():
    params = {i: DguParams() for i in range(3)}
    g0 = synthesize_gain(single_unit_model(params[0], W0))
    d2 = plug_in(1, params, {0: g0}, W0)
    assert d2.accepted and d2.members == (0, 1)
    assert d2.actions == {0: "retained", 1: "new"}
    assert d2.gains[0] is g0
    d3 = plug_in(2, params, d2.gains, W0)
    assert d3.accepted and d3.members == (0, 1, 2)
    assert d3.actions == {0: "retained", 1: "retained", 2: "new"}
    back = plug_out(2, params, d3.gains, W0)
    assert back.accepted and back.members == (0, 1)
    assert back.actions == {0: "retained", 1: "retained"}
    for m in back.members:
        assert back.reports[m].passed


def test_plug_edge_cases():
    params = {0: DguParams()}
    first = plug_in(0, params, {}, W0)
    assert first.accepted and first.members == (0,)
    assert first.actions == {0: "new"}
    last = plug_out(0, params, first.gains, W0)
    assert last.accepted and last.members == () and last.gains == {}
    with pytest.raises(ValueError):
        plug_in(0, params, first.gains, W0)
    with pytest.raises(ValueError):
        plug_out(1, params, first.gains, W0)


def test_plug_denies_inflated_coupling():
    # lines 1000x stiffer push the coupling bound to ~4.6e7 1/s; no gain can
    # certify and the decision must be a deny, not a silent weaker install
    tiny = LineParams(r_ohm=0.1e-3, l_henry=1.8e-6)
    params = {i: DguParams(line=tiny) for i in range(3)}
    g0 = synthesize_gain(single_unit_model(params[0], W0))
    d = plug_in(1, params, {0: g0}, W0)
    assert not d.accepted
    assert d.gains == {}
    assert d.reason is not None


def test_plug_accepts_custom_poles():
    params = {i: DguParams() for i in range(2)}
    poles = tuple(1.2 * p for p in DEFAULT_LOCAL_POLES)
    d = plug_in(0, params, {}, W0, poles=poles)
    assert d.accepted
    d2 = plug_in(1, params, d.gains, W0, poles=poles)
    assert d2.accepted
    assert not np.allclose(d2.gains[1].k, default_gain(2).k)


def test_virtual_drop_steady_current():
    vz = VirtualImpedance()
    d = virtual_impedance_drop(1.0 + 0.0j, 1.0 + 0.0j, vz, 1e-4, W0)
    assert abs(d - complex(3.0, 9.42477796076938)) < 1e-12
    assert virtual_impedance_drop(0.0j, 0.0j, vz, 1e-4, W0) == 0.0j
    rz = VirtualImpedance(r_v_ohm=3.0, l_v_henry=0.0)
    assert abs(virtual_impedance_drop(2.0 + 1.0j, 0.0j, rz, 1e-4, W0)
               - (6.0 + 3.0j)) < 1e-12


def test_filtered_difference_values():
    # one step of the implicit one-pole filter: dt/(tau+dt) = 1/11
    assert abs(filtered_difference(2.0, 1.0, 0.0, 1e-4, 1e-3)
               - 1e4 / 11.0) < 1e-9
    assert filtered_difference(2.0, 1.0, 0.0, 1e-4, 0.0) == 1e4
    d = 0.0
    for _ in range(200):
        d = filtered_difference(5.0, 4.0, d, 1e-4, 1e-3)
    assert abs(d - 1e4) < 1e-4 * 1e4  # converges to the raw slope


def test_control_step_holds_equilibrium():
    g = default_gain()
    vz = VirtualImpedance()
    rng = np.random.default_rng(31)
    for _ in range(10):
        theta0 = rng.uniform(-math.pi, math.pi)
        i_line = complex(*rng.normal(scale=2.0, size=2))
        i_t = complex(*rng.normal(scale=2.0, size=2))
        st = PrimaryControllerState(theta0=theta0)
        z_v = complex(vz.r_v_ohm, W0 * vz.l_v_henry)
        v_loc = st.reference() - z_v * i_line
        rot = cmath.exp(-1j * theta0)
        v = v_loc / rot  # network frame
        x = np.array([v_loc.real, v_loc.imag, i_t.real, i_t.imag])
        u0_loc = complex(*(g.k[:, 0:4] @ x)) + 0.0j
        xi = equilibrium_xi(v_loc, i_t, g, u0_loc + complex(10.0, -4.0))
        st.xi = xi
        st.prev_i_line = i_line
        st.d_filt = 0.0j
        u = control_step(v, i_t / rot, i_line / rot, st, g, vz, 1e-4, W0)
        want = (u0_loc + complex(10.0, -4.0)) / rot
        assert abs(u - want) < 1e-9 * max(1.0, abs(want))
        assert abs(st.xi - xi) < 1e-12  # zero error, integrator frozen
        assert abs(tracking_error(v, i_line / rot, st, vz, W0)) < 1e-9


def test_control_step_zero_gain_zero_command():
    g = ControllerGain(np.zeros((2, 6)))
    st = PrimaryControllerState()
    u = control_step(200.0 + 3.0j, 1.0 - 2.0j, 0.5 + 0.1j, st, g,
                     VirtualImpedance(), 1e-4, W0)
    assert u == 0.0j
    assert st.xi != 0.0j  # the error still integrates


def test_equilibrium_xi_roundtrip():
    g = default_gain()
    rng = np.random.default_rng(37)
    for _ in range(20):
        v = complex(*rng.normal(scale=230.0, size=2))
        i_t = complex(*rng.normal(scale=3.0, size=2))
        xi = complex(*rng.normal(scale=50.0, size=2))
        x = np.array([v.real, v.imag, i_t.real, i_t.imag, xi.real, xi.imag])
        u = complex(*(g.k @ x))
        back = equilibrium_xi(v, i_t, g, u)
        assert abs(back - xi) < 1e-9 * max(1.0, abs(xi))


def test_clock_offset_examples():
    c, ok = estimate_clock_offset(0.1, [0.25, 0.25])
    assert ok and abs(c - 0.15) < 1e-12
    c, ok = estimate_clock_offset(0.0, [0.2, -0.2])
    assert ok and abs(c) < 1e-12
    c, ok = estimate_clock_offset(3.05, [2.9, 3.1])
    assert ok and abs(c - (-0.05)) < 1e-12
    # peers straddle the +-pi seam; the mean is the seam itself
    c, ok = estimate_clock_offset(math.pi - 0.05,
                                  [math.pi - 0.1, -math.pi + 0.1])
    assert ok and abs(c - 0.05) < 1e-9
    c, ok = estimate_clock_offset(0.5, [])
    assert not ok and c == 0.0


def test_clock_offset_shift_invariance():
    rng = np.random.default_rng(41)
    for _ in range(25):
        own = rng.uniform(-math.pi, math.pi)
        peers = rng.uniform(-math.pi, math.pi, size=rng.integers(1, 5))
        shift = rng.uniform(-math.pi, math.pi)
        c0, _ = estimate_clock_offset(own, list(peers))
        c1, _ = estimate_clock_offset(own + shift, list(peers + shift))
        assert abs(cmath.exp(1j * c0) - cmath.exp(1j * c1)) < 1e-9
        assert -math.pi <= c1 <= math.pi
