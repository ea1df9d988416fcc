"""Plant models of the microgrid in the synchronous dq frame.

Complex packing throughout: the d axis is the real part, the q axis the
imaginary part, so the frame rotation shows up as a ``-1j*omega0`` term.  The
Park transform is amplitude-invariant (peak-valued) and sine-aligned: a
balanced three-phase set of amplitude A and phase 0 maps to d = A, q = 0, and
three-phase power is P = (3/2)(Vd*Id + Vq*Iq), Q = (3/2)(Vq*Id - Vd*Iq).

Two network models are provided.  ``BusModel`` keeps the point-of-load (PoL)
bus explicit: per-unit line currents are states and the PoL voltage is an
algebraic variable solved from the bus current balance at every derivative
evaluation (the bus itself has no capacitance).  ``QslModel`` treats the
lines quasi-stationarily: the bus is eliminated through the load-connected
reduction and the load reappears as injected currents.  Both models share
one steady state exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from .topology import (
    BusTopology,
    LineParams,
    LoadConnectedTopology,
    edge_matrix,
    line_impedance,
    reduce_bus_to_load,
)

TWO_THIRDS_PI = 2.0 * math.pi / 3.0
# RK4 absolute-stability radius used for the step-size guard (conservative
# for modes near the imaginary axis; the true boundary reaches ~2.83j).
RK4_STABLE_RADIUS = 2.5


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Parameters and state


@dataclass(frozen=True)
class DguParams:
    """Electrical parameters of one DGU: output filter plus its bus line."""

    r_t_ohm: float = 0.1
    l_t_henry: float = 1.8e-3
    c_t_farad: float = 25e-6
    line: LineParams = field(default_factory=lambda: LineParams(0.1, 1.8e-3))

    def __post_init__(self):
        if self.l_t_henry <= 0.0 or self.c_t_farad <= 0.0:
            raise ValueError("filter inductance and capacitance must be positive")
        if self.r_t_ohm < 0.0:
            raise ValueError("filter resistance must be nonnegative")


@dataclass
class PlantState:
    """Stacked dq states of all units (connected or not) at time ``t``."""

    v: np.ndarray        # PCC capacitor voltages, complex (n,)
    i_t: np.ndarray      # converter filter currents, complex (n,)
    i_line: np.ndarray   # bus line currents, complex (n,); zero when off
    connected: np.ndarray  # bool (n,)
    t: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    dt_s: float = 1e-4
    duration_s: float = 1.0
    model: str = "fullbus"           # "fullbus" | "qsl"
    integrator: str = "rk4"
    log_rate_hz: float = 1000.0
    control_period_s: float = 1e-4   # converter update rate (10 kHz)
    metrics_period_s: float = 0.01
    metrics_window_periods: int = 2

    def __post_init__(self):
        if not 0.0 < self.dt_s <= 1e-3:
            raise ValueError("dt must be in (0, 1e-3] s")
        if self.duration_s <= 0.0:
            raise ValueError("duration must be positive")
        if self.model not in ("fullbus", "qsl"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.integrator != "rk4":
            raise ValueError("only the rk4 integrator is provided")
        if self.control_period_s < self.dt_s:
            raise ValueError("control period must be >= dt")


# ---------------------------------------------------------------------------
# Park transform (amplitude-invariant, sine-aligned)


def park(x_abc: np.ndarray, theta) -> complex | np.ndarray:
    """abc -> dq.  ``x_abc`` is (..., 3); returns complex d + 1j*q.

    A balanced set ``A*[sin(th), sin(th - 2pi/3), sin(th + 2pi/3)]``
    evaluated at matching ``theta`` maps to ``A + 0j``.
    """
    x = np.asarray(x_abc, dtype=float)
    th = np.asarray(theta, dtype=float)
    angles = np.stack([th, th - TWO_THIRDS_PI, th + TWO_THIRDS_PI], axis=-1)
    d = (2.0 / 3.0) * np.sum(x * np.sin(angles), axis=-1)
    q = (2.0 / 3.0) * np.sum(x * np.cos(angles), axis=-1)
    out = d + 1j * q
    return complex(out) if out.ndim == 0 else out


def inverse_park(x_dq, theta) -> np.ndarray:
    """dq -> abc.  Accepts scalars or arrays; returns shape (..., 3)."""
    v = np.asarray(x_dq, dtype=np.complex128)
    th = np.asarray(theta, dtype=float)
    angles = np.stack([th, th - TWO_THIRDS_PI, th + TWO_THIRDS_PI], axis=-1)
    return (v.real[..., None] * np.sin(angles)
            + v.imag[..., None] * np.cos(angles))


# ---------------------------------------------------------------------------
# Load models


@dataclass(frozen=True)
class BalancedResistive:
    r_ohm: float

    def __post_init__(self):
        if self.r_ohm <= 0.0:
            raise ValueError("load resistance must be positive")


@dataclass(frozen=True)
class UnbalancedResistive:
    r_a_ohm: float
    r_b_ohm: float
    r_c_ohm: float

    def __post_init__(self):
        if min(self.r_a_ohm, self.r_b_ohm, self.r_c_ohm) <= 0.0:
            raise ValueError("per-phase resistances must be positive")


@dataclass(frozen=True)
class Harmonic:
    """One injected current harmonic: abc order, magnitude relative to the
    rectifier fundamental, and phase."""

    order: int
    magnitude: float
    phase_rad: float = 0.0

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("harmonic order must be >= 2")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError("relative magnitude must be in [0, 1]")


# Six-pulse rectifier signature: 6k +/- 1 orders at 1/h of the fundamental.
RECTIFIER_SPECTRUM = (
    Harmonic(5, 1.0 / 5.0),
    Harmonic(7, 1.0 / 7.0),
    Harmonic(11, 1.0 / 11.0),
)


@dataclass(frozen=True)
class HarmonicRectifier:
    """Resistive fundamental draw plus exogenous harmonic current injections.

    ``r_base_ohm`` sets the fundamental (a parallel resistor can be folded
    into it); ``r_harmonic_ohm`` (default ``r_base_ohm``) and ``v_base``
    fix the injection base current ``v_base / r_harmonic_ohm`` so the
    rectifier spectrum stays put when the resistive part switches.
    """

    r_base_ohm: float
    spectrum: tuple[Harmonic, ...] = RECTIFIER_SPECTRUM
    r_harmonic_ohm: float | None = None
    v_base: float = 230.0

    def __post_init__(self):
        if self.r_base_ohm <= 0.0:
            raise ValueError("base resistance must be positive")
        if self.r_harmonic_ohm is not None and self.r_harmonic_ohm <= 0.0:
            raise ValueError("harmonic base resistance must be positive")


LoadModel = BalancedResistive | UnbalancedResistive | HarmonicRectifier | None


def _harmonic_dq_frequency(order: int, omega0: float) -> float | None:
    """dq-frame rotation of abc harmonic ``order``; None for zero sequence."""
    seq = order % 3
    if seq == 1:    # positive sequence
        return (order - 1) * omega0
    if seq == 2:    # negative sequence
        return -(order + 1) * omega0
    return None     # zero sequence: no path in a three-wire network


class _PreparedLoad:
    """Load model compiled for fast derivative evaluations.

    ``current = M(t) @ v_pol + i_exo(t)`` where M is either an isotropic
    conductance ``g`` (balanced cases) or the time-varying 2x2 map of an
    unbalanced resistive set.
    """

    __slots__ = ("isotropic", "g", "g0", "g2m", "gd", "phases", "amp", "w")

    def __init__(self, load: LoadModel, omega0: float):
        self.amp = np.zeros(0, dtype=np.complex128)
        self.w = np.zeros(0)
        self.isotropic = True
        self.g = 0.0
        if load is None:
            return
        if isinstance(load, BalancedResistive):
            self.g = 1.0 / load.r_ohm
        elif isinstance(load, HarmonicRectifier):
            self.g = 1.0 / load.r_base_ohm
            r_h = load.r_harmonic_ohm or load.r_base_ohm
            i_base = load.v_base / r_h
            amp, w = [], []
            for h in load.spectrum:
                wh = _harmonic_dq_frequency(h.order, omega0)
                if wh is None:
                    continue
                amp.append(h.magnitude * i_base * np.exp(1j * h.phase_rad))
                w.append(wh)
            self.amp = np.array(amp, dtype=np.complex128)
            self.w = np.array(w)
        elif isinstance(load, UnbalancedResistive):
            self.isotropic = False
            g3 = np.array([1.0 / load.r_a_ohm, 1.0 / load.r_b_ohm,
                           1.0 / load.r_c_ohm])
            self.g0 = float(g3.mean())
            # second-harmonic coefficients of M(theta); see _m_parts
            self.gd = g3 / 3.0
            self.phases = np.array([0.0, -TWO_THIRDS_PI, TWO_THIRDS_PI])
            # swing amplitude of the instantaneous conductance eigenvalues
            self.g2m = float(abs(np.sum(self.gd * np.exp(2j * self.phases))))
        else:
            raise TypeError(f"unknown load model {load!r}")

    def i_exo(self, t: float) -> complex:
        if self.amp.size == 0:
            return 0.0 + 0.0j
        return complex(np.sum(self.amp * np.exp(1j * self.w * t)))

    def _m_parts(self, theta: float) -> tuple[float, float, float]:
        # M(theta) = g0*I + [[-c2, s2], [s2, c2]] for per-phase conductances;
        # derived from P(theta) diag(g) P^{-1}(theta) with the sine-aligned
        # amplitude-invariant Park pair.
        a = 2.0 * (theta + self.phases)
        c2 = float(np.sum(self.gd * np.cos(a)))
        s2 = float(np.sum(self.gd * np.sin(a)))
        return self.g0, c2, s2

    def current(self, v_pol: complex, t: float, theta: float) -> complex:
        if self.isotropic:
            return self.g * v_pol + self.i_exo(t)
        g0, c2, s2 = self._m_parts(theta)
        d, q = v_pol.real, v_pol.imag
        return complex((g0 - c2) * d + s2 * q, s2 * d + (g0 + c2) * q)

    def solve_pol(self, rhs: complex, y_shunt: complex, t: float,
                  theta: float) -> complex:
        """Solve ``(M(t) + y_shunt) v = rhs - i_exo`` for the PoL voltage.

        ``y_shunt`` is the complex shunt admittance the network adds in the
        quasi-stationary model (zero for the explicit-bus model).
        """
        r = rhs - self.i_exo(t)
        if self.isotropic:
            return r / (self.g + y_shunt)
        g0, c2, s2 = self._m_parts(theta)
        a = g0 - c2 + y_shunt.real
        b = s2 - y_shunt.imag
        c = s2 + y_shunt.imag
        d = g0 + c2 + y_shunt.real
        det = a * d - b * c
        if abs(det) < 1e-15:
            raise SimulationError("singular PoL load map")
        return complex((d * r.real - b * r.imag) / det,
                       (-c * r.real + a * r.imag) / det)


def load_current(load: LoadModel, v_pol: complex, t: float,
                 omega0: float) -> complex:
    """dq current drawn by ``load`` at PoL voltage ``v_pol`` and time ``t``."""
    return _PreparedLoad(load, omega0).current(v_pol, t, omega0 * t)


def load_phase_currents(load: LoadModel, v_pol: complex, t: float,
                        omega0: float) -> np.ndarray:
    """Instantaneous abc currents of the load (for metrics and demos)."""
    return inverse_park(load_current(load, v_pol, t, omega0), omega0 * t)


# ---------------------------------------------------------------------------
# Network models


class _ModelBase:
    def __init__(self, params: Sequence[DguParams], connected: np.ndarray,
                 load: LoadModel, omega0: float):
        self.params = tuple(params)
        self.omega0 = omega0
        n = len(self.params)
        self.n = n
        self.conn = np.asarray(connected, dtype=float).copy()
        if self.conn.shape != (n,):
            raise ValueError("connected mask must have one entry per DGU")
        self.load = load
        self.prepared = _PreparedLoad(load, omega0)
        self.inv_ct = np.array([1.0 / p.c_t_farad for p in self.params])
        self.inv_lt = np.array([1.0 / p.l_t_henry for p in self.params])
        self.a_it = np.array(
            [-(p.r_t_ohm / p.l_t_henry) - 1j * omega0 for p in self.params]
        )
        self.z_line = np.array(
            [line_impedance(p.line, omega0) for p in self.params]
        )

    @property
    def n_live(self) -> int:
        return int(self.conn.sum())

    def spectral_radius(self) -> float:
        """Largest open-loop eigenvalue magnitude (step-size guard)."""
        a = self._open_loop_matrix()
        return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0

    def check_step(self, dt: float) -> None:
        rho = self.spectral_radius()
        if rho * dt > RK4_STABLE_RADIUS:
            raise SimulationError(
                f"dt = {dt:g} s is outside the rk4 stability region for this "
                f"model (spectral radius {rho:.3e} 1/s needs dt <= "
                f"{RK4_STABLE_RADIUS / rho:.2e} s)"
            )

    def substeps(self, dt: float) -> int:
        """Internal RK4 sub-steps per dt tick that keep the guard satisfied.

        The fastest modes (line inductance against the load resistance, or
        the quasi-stationary line against the filter capacitor) sit far above
        the control rate, so a tick at the command-hold grid must subdivide.
        """
        rho = self.spectral_radius()
        return max(1, math.ceil(rho * dt / RK4_STABLE_RADIUS))


class BusModel(_ModelBase):
    """Explicit-bus model: states (v, i_t, i_line), algebraic PoL voltage."""

    def __init__(self, params, connected, load, omega0):
        super().__init__(params, connected, load, omega0)
        self.inv_ll = np.array([1.0 / p.line.l_henry for p in self.params])
        self.conn_inv_ll = self.conn * self.inv_ll
        live = self.conn > 0.0
        self.sum_inv_ll = float(self.inv_ll[live].sum()) if live.any() else 0.0

    def pol_voltage(self, v, i_t, i_line, t: float) -> complex:
        p = self.prepared
        if not p.isotropic or p.g > 0.0:
            s = complex((i_line * self.conn).sum())
            return p.solve_pol(s, 0.0 + 0.0j, t, self.omega0 * t)
        # No conductive load: the current-level balance cannot fix the bus
        # voltage, so use the derivative-level balance d/dt sum(i_line) = 0,
        # which yields the line-inductance-weighted average.
        if self.n_live == 0:
            if abs(p.i_exo(t)) > 0.0:
                raise SimulationError("load current with no connected unit")
            return 0.0 + 0.0j
        if abs(p.i_exo(t)) > 0.0:
            raise SimulationError(
                "pure current-source load needs a conductive path"
            )
        num = complex(((v - self.z_line * i_line) * self.conn_inv_ll).sum())
        return num / self.sum_inv_ll

    def derivative(self, t: float, y: np.ndarray,
                   commands: np.ndarray) -> np.ndarray:
        v, i_t, i_line = y
        v_pol = self.pol_voltage(v, i_t, i_line, t)
        dv = self.inv_ct * (i_t - self.conn * i_line) - 1j * self.omega0 * v
        di_t = self.a_it * i_t + self.inv_lt * (commands - v)
        di_line = self.conn_inv_ll * ((v - v_pol) - self.z_line * i_line)
        return np.stack((dv, di_t, di_line))

    def _open_loop_matrix(self) -> np.ndarray:
        # Linearization for the step-size guard; an unbalanced load enters
        # through its minimum instantaneous conductance, which maximizes the
        # load-resistance-over-line-inductance modes.  States stacked
        # [v, i_t, i_line].
        n = self.n
        a = np.zeros((3 * n, 3 * n), dtype=np.complex128)
        p = self.prepared
        g_eff = p.g if p.isotropic else p.g0 - p.g2m
        for i in range(n):
            a[i, i] = -1j * self.omega0
            a[i, n + i] = self.inv_ct[i]
            a[i, 2 * n + i] = -self.conn[i] * self.inv_ct[i]
            a[n + i, i] = -self.inv_lt[i]
            a[n + i, n + i] = self.a_it[i]
            a[2 * n + i, i] = self.conn_inv_ll[i]
            a[2 * n + i, 2 * n + i] = -self.conn_inv_ll[i] * self.z_line[i]
            for j in range(n):
                if g_eff > 0.0:
                    a[2 * n + i, 2 * n + j] += (
                        -self.conn_inv_ll[i] * self.conn[j] / g_eff
                    )
                elif self.n_live:
                    # inductance-weighted bus voltage couples every unit
                    cj = self.conn[j] * self.inv_ll[j] / self.sum_inv_ll
                    a[2 * n + i, j] += -self.conn_inv_ll[i] * cj
                    a[2 * n + i, 2 * n + j] += (
                        self.conn_inv_ll[i] * cj * self.z_line[j]
                    )
        return a


class QslModel(_ModelBase):
    """Quasi-stationary-line model: states (v, i_t); lines are algebraic."""

    def __init__(self, params, connected, load, omega0):
        super().__init__(params, connected, load, omega0)
        self.y_line = self.conn / self.z_line
        self.y_sum = complex(self.y_line.sum())
        live_idx = np.flatnonzero(self.conn > 0.0)
        if live_idx.size:
            live_lines = BusTopology(tuple(
                self.params[i].line for i in live_idx
            ))
            self.reduced = reduce_bus_to_load(live_lines, omega0)
        else:
            self.reduced = None
        self.live_idx = live_idx

    def pol_voltage(self, v, t: float) -> complex:
        if self.n_live == 0:
            return 0.0 + 0.0j
        rhs = complex((self.y_line * v).sum())
        return self.prepared.solve_pol(rhs, self.y_sum, t, self.omega0 * t)

    def line_current(self, v, t: float) -> np.ndarray:
        """Quasi-stationary line currents reconstructed from the voltages."""
        return (v - self.pol_voltage(v, t)) * self.y_line

    def derivative(self, t: float, y: np.ndarray,
                   commands: np.ndarray) -> np.ndarray:
        v, i_t = y
        i_line = self.line_current(v, t)
        dv = self.inv_ct * (i_t - i_line) - 1j * self.omega0 * v
        di_t = self.a_it * i_t + self.inv_lt * (commands - v)
        return np.stack((dv, di_t))

    def _open_loop_matrix(self) -> np.ndarray:
        n = self.n
        a = np.zeros((2 * n, 2 * n), dtype=np.complex128)
        w = edge_weights(self.reduced, self.live_idx, n)
        for i in range(n):
            a[i, i] = -1j * self.omega0 - w[i].sum() * self.inv_ct[i]
            a[i, n + i] = self.inv_ct[i]
            a[n + i, i] = -self.inv_lt[i]
            a[n + i, n + i] = self.a_it[i]
            for j in range(n):
                if j != i:
                    a[i, j] = w[i, j] * self.inv_ct[i]
        return a


def edge_weights(reduced: LoadConnectedTopology | None,
                 live_idx: np.ndarray, n: int) -> np.ndarray:
    """Dense edge admittance matrix 1/Z_ij scattered to full unit indexing."""
    w = np.zeros((n, n), dtype=np.complex128)
    if reduced is None or reduced.n_dgus < 2:
        return w
    z = edge_matrix(reduced)
    for a, i in enumerate(live_idx):
        for b, j in enumerate(live_idx):
            if a != b:
                w[i, j] = 1.0 / z[a, b]
    return w


def make_model(kind: str, params, connected, load, omega0):
    cls = BusModel if kind == "fullbus" else QslModel
    return cls(params, connected, load, omega0)


# ---------------------------------------------------------------------------
# Reference-style derivative of the reduced model (explicit injections)


def qsl_derivative(v: np.ndarray, i_t: np.ndarray, commands: np.ndarray,
                   injected: np.ndarray, topo: LoadConnectedTopology,
                   params: Sequence[DguParams], omega0: float):
    """Reduced-network dynamics with explicit injected load currents.

    Literal edge-sum form: the voltage row couples unit i to every neighbor
    through 1/(C_i * Z_ij) and subtracts its injected current.  The fast
    simulator path in :class:`QslModel` uses the algebraically identical
    star form; tests pin the two against each other.

    Returns ``(dv, di_t)``.
    """
    n = len(params)
    w = edge_weights(topo, np.arange(n), n)
    inv_ct = np.array([1.0 / p.c_t_farad for p in params])
    inv_lt = np.array([1.0 / p.l_t_henry for p in params])
    a_it = np.array([-(p.r_t_ohm / p.l_t_henry) - 1j * omega0 for p in params])
    coupling = w @ v - w.sum(axis=1) * v
    dv = -1j * omega0 * v + inv_ct * (i_t - injected) + inv_ct * coupling
    di_t = a_it * i_t + inv_lt * (commands - v)
    return dv, di_t


def bus_derivative(model: BusModel, state: PlantState,
                   commands: np.ndarray):
    """Explicit-bus dynamics; returns ``(dv, di_t, di_line, v_pol)``."""
    y = np.stack((state.v, state.i_t, state.i_line))
    d = model.derivative(state.t, y, commands)
    v_pol = model.pol_voltage(state.v, state.i_t, state.i_line, state.t)
    return d[0], d[1], d[2], v_pol


# ---------------------------------------------------------------------------
# Integrator


def step_rk4(f: Callable[[float, np.ndarray], np.ndarray], t: float,
             y: np.ndarray, dt: float) -> np.ndarray:
    """One classic Runge-Kutta 4 step of ``dy/dt = f(t, y)``.

    The derivative must be smooth inside the step; the simulator aligns
    command updates and events to step boundaries for that reason.
    """
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3 = f(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Measurements


@dataclass
class Metrics:
    rms_v: tuple[float, float, float]
    thd_pct: float
    imbalance_pct: float
    p_w: float
    q_var: float
    f_hz: float


def active_reactive_power(v: complex, i: complex) -> tuple[float, float]:
    """Three-phase P, Q from peak-valued dq phasors."""
    p = 1.5 * (v.real * i.real + v.imag * i.imag)
    q = 1.5 * (v.imag * i.real - v.real * i.imag)
    return p, q


def thd_percent(wave: np.ndarray, samples_per_period: int) -> float:
    """Total harmonic distortion of an integer-period window, percent."""
    n = wave.size
    periods = n // samples_per_period
    if periods < 2:
        return float("nan")
    w = wave[n - periods * samples_per_period:]
    spec = np.abs(np.fft.rfft(w))
    fund = spec[periods]
    if fund <= 0.0:
        return float("nan")
    bins = np.arange(2 * periods, spec.size, periods)
    return 100.0 * math.sqrt(float(np.sum(spec[bins] ** 2))) / float(fund)


def phase_rms(abc: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(abc * abc, axis=0))


def imbalance_percent(rms3: np.ndarray) -> float:
    m = float(np.mean(rms3))
    if m <= 0.0:
        return 0.0
    return 100.0 * float(np.max(np.abs(rms3 - m))) / m


def filtered_frequency(v_window: np.ndarray, f0: float, dt: float,
                       tau: float = 0.01) -> float:
    """First-order-filtered derivative of the dq voltage angle, in Hz."""
    dphi = np.angle(v_window[1:] * np.conj(v_window[:-1]))
    f_raw = f0 + dphi / (2.0 * math.pi * dt)
    if f_raw.size == 0:
        return float(f0)
    alpha = dt / (tau + dt)
    # one-pole IIR f[k] = (1-alpha) f[k-1] + alpha f_raw[k], started at f0
    out = signal.lfilter([alpha], [1.0, alpha - 1.0], f_raw,
                         zi=[(1.0 - alpha) * f0])[0]
    return float(out[-1])


def measure(v_dq_window: np.ndarray, i_line, f0: float,
            sample_dt: float, t_end: float = 0.0,
            freq_tau: float = 0.01) -> Metrics:
    """Windowed metrics of one unit from its dq voltage trajectory.

    ``v_dq_window`` holds uniformly spaced samples ending at ``t_end``; the
    abc waveform is reconstructed at the matching rotating angle.  THD needs
    at least two fundamental periods, otherwise it is reported as nan.

    ``i_line`` is either one dq sample or a window matching ``v_dq_window``.
    P and Q come from the window-mean phasors (integer periods, so harmonic
    and negative-sequence ripple cancel): displacement power of the
    fundamental, which is what a synchronous meter reports.
    """
    v_dq_window = np.asarray(v_dq_window, dtype=np.complex128)
    n = v_dq_window.size
    omega0 = 2.0 * math.pi * f0
    t = t_end - sample_dt * np.arange(n - 1, -1, -1)
    abc = inverse_park(v_dq_window, omega0 * t)
    spp = round(1.0 / (f0 * sample_dt))
    periods = n // spp
    tail = slice(n - periods * spp, None) if periods >= 1 else slice(None)
    rms3 = phase_rms(abc[tail])
    i_arr = np.asarray(i_line, dtype=np.complex128)
    v_bar = complex(np.mean(v_dq_window[tail]))
    i_bar = complex(i_arr) if i_arr.ndim == 0 else complex(np.mean(i_arr[tail]))
    p, q = active_reactive_power(v_bar, i_bar)
    return Metrics(
        rms_v=tuple(float(r) for r in rms3),
        thd_pct=thd_percent(abc[:, 0], spp),
        imbalance_pct=imbalance_percent(rms3),
        p_w=p,
        q_var=q,
        f_hz=filtered_frequency(v_dq_window, f0, sample_dt, freq_tau),
    )


def stored_energy(state: PlantState, params: Sequence[DguParams]) -> float:
    """Total three-phase magnetic + electric energy of the plant [J]."""
    e = 0.0
    for k, p in enumerate(params):
        e += p.c_t_farad * abs(state.v[k]) ** 2
        e += p.l_t_henry * abs(state.i_t[k]) ** 2
        e += p.line.l_henry * abs(state.i_line[k]) ** 2
    return 0.75 * e  # (3/2) * (1/2) * sum
