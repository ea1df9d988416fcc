"""Coordinated secondary layer: PoL voltage/phase estimation, network
averaging, anti-windup PI corrections (voltage, phase, reactive sharing),
and the simplified first-order tuning model.

Voltage and phase corrections are replicated: every unit runs the same PI
on the same network average, so with zero latency all copies emit identical
values. The reactive correction is per-unit (error is the deviation of own
Q from the live mean), which steers amplitudes apart until reactive powers
equalize.
"""

import math
from dataclasses import dataclass, field

# Table defaults for the three PI channels (dimensionless gains)
K_PV = 1e-3
K_IV = 0.6
K_PPHI = 1e-3
K_IPHI = 4.0
K_PQ = 1e-4
K_IQ = 1e-2

# correction limits: fractions of the PoL setpoint for the amplitude
# channels, absolute radians for phase
V_LIMIT_FRACTION = 0.1
PHI_LIMIT_RAD = 0.1
Q_LIMIT_FRACTION = 0.05

D_FLOOR_V = 1e-6  # V, below this |V^d| the phase estimate is held


@dataclass
class PolEstimate:
    v_pol: float  # V amplitude at the load bus
    phi_pol: float  # rad
    held: bool = False  # phase carried over from the previous estimate

    def __post_init__(self):
        if not (self.v_pol >= 0.0 and math.isfinite(self.v_pol)):
            raise ValueError("v_pol must be finite and >= 0")


def estimate_pol(v, i_line, l_henry, omega0, prev=None, ratio_phase=False):
    """Per-unit estimate of the load-bus voltage from local quantities.

    Backs out the inductive line drop only: V_PoL = V - j omega0 L I. The
    phase is atan2 by default; ratio_phase uses the small-angle form
    V^q/V^d. Near-zero V^d holds the previous phase and flags it.
    """
    v_pol = v - 1j * omega0 * l_henry * i_line
    mag = abs(v_pol)
    if abs(v_pol.real) < D_FLOOR_V:
        phi = prev.phi_pol if prev is not None else 0.0
        return PolEstimate(mag, phi, held=True)
    if ratio_phase:
        return PolEstimate(mag, v_pol.imag / v_pol.real)
    return PolEstimate(mag, math.atan2(v_pol.imag, v_pol.real))


def average_pol(snapshot, own, own_id=None):
    """Mean PoL estimate over the live units (peers in snapshot plus self).

    Magnitudes average arithmetically, phases circularly. Entries are
    summed in unit-id order so every replica produces bit-identical
    results from the same values.
    """
    entries = {(-1 if own_id is None else own_id): own}
    for sid, payload in snapshot.items():
        entries[sid] = payload
    mag = s = c = 0.0
    for sid in sorted(entries):
        e = entries[sid]
        mag += e.v_pol
        s += math.sin(e.phi_pol)
        c += math.cos(e.phi_pol)
    n = len(entries)
    return mag / n, math.atan2(s / n, c / n)


@dataclass
class PiAwState:
    k_p: float
    k_i: float
    lower: float
    upper: float
    integrator: float = 0.0  # accumulated error, unit of error * s

    def __post_init__(self):
        if not (self.lower < self.upper):
            raise ValueError("lower limit must be below upper limit")
        vals = (self.k_p, self.k_i, self.integrator)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("gains and integrator must be finite")


def pi_aw_step(state, error, dt):
    """PI with conditional integration; output always within the limits.

    The integrator advances when the unsaturated output is in band, or when
    the error drives a saturated output back toward it.
    """
    cand = state.integrator + error * dt
    u = state.k_p * error + state.k_i * cand
    if u > state.upper:
        if error < 0.0:
            state.integrator = cand
        return state.upper
    if u < state.lower:
        if error > 0.0:
            state.integrator = cand
        return state.lower
    state.integrator = cand
    return u


@dataclass
class SecondaryState:
    """Per-unit coordination state; disabled channels emit 0 and freeze."""
    v_pol_star: float = 230.0
    voltage_enabled: bool = False
    reactive_enabled: bool = False
    voltage_pi: PiAwState = field(default_factory=lambda: PiAwState(
        K_PV, K_IV, -V_LIMIT_FRACTION * 230.0, V_LIMIT_FRACTION * 230.0))
    phase_pi: PiAwState = field(default_factory=lambda: PiAwState(
        K_PPHI, K_IPHI, -PHI_LIMIT_RAD, PHI_LIMIT_RAD))
    reactive_pi: PiAwState = field(default_factory=lambda: PiAwState(
        K_PQ, K_IQ, -Q_LIMIT_FRACTION * 230.0, Q_LIMIT_FRACTION * 230.0))
    last_estimate: PolEstimate | None = None
    delta_v: float = 0.0  # V, last emitted corrections (for compose/logs)
    delta_phi: float = 0.0  # rad
    delta_v_q: float = 0.0  # V


def default_secondary_state(v_pol_star=230.0):
    return SecondaryState(
        v_pol_star=v_pol_star,
        voltage_pi=PiAwState(K_PV, K_IV, -V_LIMIT_FRACTION * v_pol_star,
                             V_LIMIT_FRACTION * v_pol_star),
        phase_pi=PiAwState(K_PPHI, K_IPHI, -PHI_LIMIT_RAD, PHI_LIMIT_RAD),
        reactive_pi=PiAwState(K_PQ, K_IQ, -Q_LIMIT_FRACTION * v_pol_star,
                              Q_LIMIT_FRACTION * v_pol_star))


def voltage_phase_loop(avg, v_pol_star, sec, dt):
    """Replicated PI corrections steering the averaged PoL to its setpoint."""
    if not sec.voltage_enabled:
        sec.delta_v = 0.0
        sec.delta_phi = 0.0
        return 0.0, 0.0
    v_pol, phi_pol = avg
    sec.delta_v = pi_aw_step(sec.voltage_pi, v_pol_star - v_pol, dt)
    sec.delta_phi = pi_aw_step(sec.phase_pi, 0.0 - phi_pol, dt)
    return sec.delta_v, sec.delta_phi


def reactive_sharing_loop(q_own, snapshot, sec, dt, own_id=None):
    """Per-unit PI on the deviation of own Q from the live mean."""
    if not sec.reactive_enabled:
        sec.delta_v_q = 0.0
        return 0.0
    qs = {(-1 if own_id is None else own_id): q_own}
    for sid, payload in snapshot.items():
        qs[sid] = payload.q
    mean_q = sum(qs[sid] for sid in sorted(qs)) / len(qs)
    sec.delta_v_q = pi_aw_step(sec.reactive_pi, mean_q - q_own, dt)
    return sec.delta_v_q


def compose_reference(v_pol_star, delta_v, delta_phi, delta_v_q):
    """Amplitude/phase reference handed to the primary controller."""
    return v_pol_star + delta_v + delta_v_q, delta_phi


@dataclass(frozen=True)
class TuningModel:
    mu: float  # DC gain of the closed primary loop (1/N for the phase path)
    tau_s: float  # s, loop delay
    t_const_s: float  # s, first-order lag
    n: int = 1  # live unit count

    def __post_init__(self):
        if not (self.t_const_s > 0.0 and math.isfinite(self.t_const_s)):
            raise ValueError("t_const_s must be positive")
        if not (self.tau_s >= 0.0 and math.isfinite(self.tau_s)):
            raise ValueError("tau_s must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mu == 0.0 or not math.isfinite(self.mu):
            raise ValueError("mu must be finite and nonzero")


def tune_pi_from_model(model, bandwidth_hz, kappa=0.0):
    """Gain rule k_i = 2 pi bw T / mu, k_p = k_i T kappa with kappa in [0,1].

    Rejects the request when the delay eats the margin: the predicted
    phase margin 90 - 360 bw tau degrees must stay at or above 45.
    """
    if not (bandwidth_hz > 0.0 and math.isfinite(bandwidth_hz)):
        raise ValueError("bandwidth_hz must be positive")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    margin_deg = 90.0 - 360.0 * bandwidth_hz * model.tau_s
    if margin_deg < 45.0:
        raise ValueError(
            f"delay {model.tau_s} s leaves {margin_deg:.1f} deg phase margin "
            f"at {bandwidth_hz} Hz; need >= 45")
    k_i = 2.0 * math.pi * bandwidth_hz * model.t_const_s / model.mu
    return k_i * model.t_const_s * kappa, k_i
