"""Scenario runner: events, plug protocol, logging, checks, CSV output.

The harness drives every controller on a fixed control grid (10 kHz by
default) with zero-order-held commands and advances the plant by fixed-step
RK4 in between.  The dt grid carries the commands, the metrics ring, and the
log; when the plant's fastest modes (line inductance against the load
resistance, or the quasi-stationary line against the filter capacitor) put
that grid outside the RK4 stability region, each dt tick subdivides into the
smallest equal sub-step count that restores the guard.  Between events the
balanced-load plant is linear time-invariant in the dq state, so the RK4
update collapses to one precomputed transition matrix per dt tick (the
sub-step polynomials composed in matrix form); harmonic load injections
enter through per-harmonic forcing vectors advanced by a phase recurrence.
Unbalanced stretches fall back to literal four-stage evaluation.  A test
pins the matrix path against the literal integrator.

Clock markers travel on the same broadcast channel as the secondary
payloads, so a joining unit lines its frame up from a snapshot before the
breaker closes; controller-frame states are rotated by the correction.
Disconnected units keep regulating their own PCC and rejoin warm.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comms import Broadcast, BroadcastNetwork, NetConfig, Payload
from .plant import (
    BalancedResistive,
    DguParams,
    Harmonic,
    HarmonicRectifier,
    LoadModel,
    QslModel,
    SimConfig,
    UnbalancedResistive,
    active_reactive_power,
    make_model,
    measure,
    step_rk4,
)
from .primary import (
    PrimaryControllerState,
    VirtualImpedance,
    control_step,
    equilibrium_xi,
    estimate_clock_offset,
    plug_in,
    plug_out,
    single_unit_model,
    synthesize_gain,
    tracking_error,
)
from .secondary import (
    K_IPHI,
    K_IQ,
    K_IV,
    K_PPHI,
    K_PQ,
    K_PV,
    PHI_LIMIT_RAD,
    Q_LIMIT_FRACTION,
    V_LIMIT_FRACTION,
    PiAwState,
    SecondaryState,
    average_pol,
    compose_reference,
    estimate_pol,
    reactive_sharing_loop,
    voltage_phase_loop,
)
from .topology import LineParams

V_ABORT = 1e4     # V, a PCC voltage beyond this aborts the run
GRID_TOL = 1e-9   # s, slack when aligning event times to the control grid

EVENT_KINDS = ("set_load", "set_load_phase", "plug_in", "plug_out",
               "enable_secondary_voltage", "enable_secondary_q")

# check kind -> required keys beyond "kind" (an optional "name" labels rows)
CHECK_KINDS = {
    "plugs_accepted": (),
    "freq_excursion": ("t0", "t1", "max_hz"),
    "p_equal_share": ("t0", "t1", "tol_frac"),
    "p_ratio": ("num", "den", "max_ratio"),
    "imbalance_monotone": ("windows", "dgu"),
    "imbalance_max": ("t0", "t1", "max_pct"),
    "thd_max": ("t0", "t1", "max_pct"),
    "v_pol_track": ("windows", "tol_frac"),
    "q_share": ("t0", "t1", "tol_frac"),
    "tracking": ("windows", "max_v"),
    "delta_limits": (),
}

_UNIT_COLS = ("v_d", "v_q", "i_t_d", "i_t_q", "i_line_d", "i_line_q",
              "v_rms", "f_hz", "p_w", "q_var", "thd_pct", "imbalance_pct",
              "trk_err", "connected", "v_pol_est", "phi_pol_est",
              "delta_v_q")
_SHARED_COLS = ("v_pol", "v_pol_est", "delta_v", "delta_phi")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scenario description


@dataclass(frozen=True)
class SecondaryConfig:
    """Gains and limits handed to every unit's coordination layer."""

    v_pol_star: float = 230.0  # V, PoL amplitude setpoint and primary ref
    k_pv: float = K_PV
    k_iv: float = K_IV
    k_pphi: float = K_PPHI
    k_iphi: float = K_IPHI
    k_pq: float = K_PQ
    k_iq: float = K_IQ
    delta_v_frac: float = V_LIMIT_FRACTION
    delta_phi_rad: float = PHI_LIMIT_RAD
    delta_v_q_frac: float = Q_LIMIT_FRACTION
    ratio_phase: bool = False

    def __post_init__(self):
        if self.v_pol_star <= 0.0:
            raise ScenarioError("v_pol_star must be positive")

    def make_state(self) -> SecondaryState:
        lim_v = self.delta_v_frac * self.v_pol_star
        lim_q = self.delta_v_q_frac * self.v_pol_star
        return SecondaryState(
            v_pol_star=self.v_pol_star,
            voltage_pi=PiAwState(self.k_pv, self.k_iv, -lim_v, lim_v),
            phase_pi=PiAwState(self.k_pphi, self.k_iphi,
                               -self.delta_phi_rad, self.delta_phi_rad),
            reactive_pi=PiAwState(self.k_pq, self.k_iq, -lim_q, lim_q),
        )


@dataclass(frozen=True)
class DguSpec:
    dgu_id: int
    params: DguParams = field(default_factory=DguParams)
    clock_offset_rad: float = 0.0  # frame offset while not yet synced


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    dgu: int | None = None       # plug_in / plug_out target
    load: LoadModel = None       # set_load payload
    phase: str | None = None     # set_load_phase: "a" | "b" | "c"
    r_ohm: float | None = None   # set_load_phase new resistance

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        if self.time <= 0.0:
            raise ScenarioError("event times must be positive")
        if self.kind in ("plug_in", "plug_out") and self.dgu is None:
            raise ScenarioError(f"{self.kind} needs a dgu id")
        if self.kind == "set_load_phase":
            if self.phase not in ("a", "b", "c"):
                raise ScenarioError("set_load_phase needs phase a, b or c")
            if self.r_ohm is None or self.r_ohm <= 0.0:
                raise ScenarioError("set_load_phase needs r_ohm > 0")


def _exact_multiple(big: float, small: float, what: str) -> int:
    r = big / small
    k = round(r)
    if k < 1 or abs(r - k) > 1e-6 * max(1.0, abs(r)):
        raise ScenarioError(f"{what} must be an integer multiple (got {r})")
    return k


@dataclass(frozen=True)
class Scenario:
    name: str
    dgus: tuple[DguSpec, ...]
    sim: SimConfig
    net: NetConfig = field(default_factory=NetConfig)
    secondary: SecondaryConfig = field(default_factory=SecondaryConfig)
    initial_connected: tuple[int, ...] = ()
    initial_load: LoadModel = None
    events: tuple[Event, ...] = ()
    checks: tuple[dict, ...] = ()
    f0_hz: float = 50.0
    poles: tuple[complex, ...] | None = None
    vz: VirtualImpedance = field(default_factory=VirtualImpedance)

    def __post_init__(self):
        if not self.dgus:
            raise ScenarioError("a scenario needs at least one DGU")
        ids = [d.dgu_id for d in self.dgus]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate dgu ids")
        if self.f0_hz <= 0.0:
            raise ScenarioError("f0 must be positive")
        if self.poles is not None and len(self.poles) != 3:
            raise ScenarioError("poles must list three complex values")
        known = set(ids)
        init = tuple(self.initial_connected)
        if len(set(init)) != len(init) or not set(init) <= known:
            raise ScenarioError("initial_connected must be distinct known ids")
        sim = self.sim
        _exact_multiple(sim.control_period_s, sim.dt_s, "control period / dt")
        _exact_multiple(self.net.period_s, sim.control_period_s,
                        "secondary period / control period")
        _exact_multiple(sim.metrics_period_s, sim.control_period_s,
                        "metrics period / control period")
        _exact_multiple(1.0 / sim.log_rate_hz, sim.control_period_s,
                        "log period / control period")
        _exact_multiple(sim.duration_s, sim.control_period_s,
                        "duration / control period")
        # replay the event list so schedule mistakes fail at build time
        conn = set(init)
        load = self.initial_load
        prev_t = 0.0
        for ev in self.events:
            if ev.time < prev_t:
                raise ScenarioError("events must be ordered in time")
            prev_t = ev.time
            if ev.time >= self.sim.duration_s - GRID_TOL:
                raise ScenarioError("events must end before the run does")
            k = ev.time / sim.control_period_s
            if abs(k - round(k)) > 1e-6:
                raise ScenarioError(
                    f"event at t = {ev.time} is off the control grid")
            if ev.kind == "plug_in":
                if ev.dgu not in known or ev.dgu in conn:
                    raise ScenarioError(f"cannot plug in unit {ev.dgu}")
                conn.add(ev.dgu)
            elif ev.kind == "plug_out":
                if ev.dgu not in conn:
                    raise ScenarioError(f"cannot plug out unit {ev.dgu}")
                conn.remove(ev.dgu)
            elif ev.kind == "set_load":
                load = ev.load
            elif ev.kind == "set_load_phase":
                if not isinstance(load, (BalancedResistive,
                                         UnbalancedResistive)):
                    raise ScenarioError(
                        "set_load_phase needs a resistive load in place")
                load = UnbalancedResistive(1.0, 1.0, 1.0)  # kind tracking only
        for chk in self.checks:
            kind = chk.get("kind")
            if kind not in CHECK_KINDS:
                raise ScenarioError(f"unknown check kind {kind!r}")
            missing = [k for k in CHECK_KINDS[kind] if k not in chk]
            if missing:
                raise ScenarioError(f"check {kind!r} is missing {missing}")


# ---------------------------------------------------------------------------
# JSON codec (canonical field names)


def _load_to_dict(load: LoadModel):
    if load is None:
        return None
    if isinstance(load, BalancedResistive):
        return {"type": "balanced_resistive", "r_ohm": load.r_ohm}
    if isinstance(load, UnbalancedResistive):
        return {"type": "unbalanced_resistive", "r_a_ohm": load.r_a_ohm,
                "r_b_ohm": load.r_b_ohm, "r_c_ohm": load.r_c_ohm}
    if isinstance(load, HarmonicRectifier):
        return {"type": "harmonic_rectifier", "r_base_ohm": load.r_base_ohm,
                "r_harmonic_ohm": load.r_harmonic_ohm,
                "v_base": load.v_base,
                "spectrum": [{"order": h.order, "magnitude": h.magnitude,
                              "phase_rad": h.phase_rad}
                             for h in load.spectrum]}
    raise ScenarioError(f"cannot serialize load {load!r}")


def _load_from_dict(d) -> LoadModel:
    if d is None:
        return None
    kind = d.get("type")
    if kind == "balanced_resistive":
        return BalancedResistive(d["r_ohm"])
    if kind == "unbalanced_resistive":
        return UnbalancedResistive(d["r_a_ohm"], d["r_b_ohm"], d["r_c_ohm"])
    if kind == "harmonic_rectifier":
        kw = {}
        if "spectrum" in d:
            kw["spectrum"] = tuple(
                Harmonic(h["order"], h["magnitude"], h.get("phase_rad", 0.0))
                for h in d["spectrum"])
        if d.get("r_harmonic_ohm") is not None:
            kw["r_harmonic_ohm"] = d["r_harmonic_ohm"]
        if "v_base" in d:
            kw["v_base"] = d["v_base"]
        return HarmonicRectifier(d["r_base_ohm"], **kw)
    raise ScenarioError(f"unknown load type {kind!r}")


def scenario_from_dict(d: dict) -> Scenario:
    dgus = []
    for u in d["dgus"]:
        line = u.get("line", {})
        dgus.append(DguSpec(
            dgu_id=u["id"],
            params=DguParams(
                r_t_ohm=u.get("r_t_ohm", 0.1),
                l_t_henry=u.get("l_t_henry", 1.8e-3),
                c_t_farad=u.get("c_t_farad", 25e-6),
                line=LineParams(line.get("r_ohm", 0.1),
                                line.get("l_henry", 1.8e-3))),
            clock_offset_rad=u.get("clock_offset_rad", 0.0)))
    sim = SimConfig(**d.get("sim", {}))
    net_d = d.get("net", {})
    net = NetConfig(period_s=net_d.get("secondary_period_s", 0.01),
                    latency_s=net_d.get("latency_s", 0.0))
    secondary = SecondaryConfig(**d.get("secondary", {}))
    events = []
    for e in d.get("events", []):
        events.append(Event(
            time=e["time"], kind=e["kind"], dgu=e.get("dgu"),
            load=_load_from_dict(e.get("load")), phase=e.get("phase"),
            r_ohm=e.get("r_ohm")))
    poles = d.get("poles")
    if poles is not None:
        poles = tuple(complex(p[0], p[1]) for p in poles)
    vz_d = d.get("virtual_impedance", {})
    vz = VirtualImpedance(r_v_ohm=vz_d.get("r_v_ohm", 3.0),
                          l_v_henry=vz_d.get("l_v_henry", 0.03),
                          tau_s=vz_d.get("tau_s", 1e-3))
    return Scenario(
        name=d["name"], dgus=tuple(dgus), sim=sim, net=net,
        secondary=secondary,
        initial_connected=tuple(d.get("initial_connected", ())),
        initial_load=_load_from_dict(d.get("initial_load")),
        events=tuple(events),
        checks=tuple(d.get("checks", ())),
        f0_hz=d.get("f0_hz", 50.0), poles=poles, vz=vz)


def scenario_to_dict(sc: Scenario) -> dict:
    d = {
        "name": sc.name,
        "f0_hz": sc.f0_hz,
        "dgus": [{
            "id": u.dgu_id, "r_t_ohm": u.params.r_t_ohm,
            "l_t_henry": u.params.l_t_henry,
            "c_t_farad": u.params.c_t_farad,
            "line": {"r_ohm": u.params.line.r_ohm,
                     "l_henry": u.params.line.l_henry},
            "clock_offset_rad": u.clock_offset_rad} for u in sc.dgus],
        "sim": {"dt_s": sc.sim.dt_s, "duration_s": sc.sim.duration_s,
                "model": sc.sim.model, "integrator": sc.sim.integrator,
                "log_rate_hz": sc.sim.log_rate_hz,
                "control_period_s": sc.sim.control_period_s,
                "metrics_period_s": sc.sim.metrics_period_s,
                "metrics_window_periods": sc.sim.metrics_window_periods},
        "net": {"secondary_period_s": sc.net.period_s,
                "latency_s": sc.net.latency_s},
        "secondary": {
            "v_pol_star": sc.secondary.v_pol_star,
            "k_pv": sc.secondary.k_pv, "k_iv": sc.secondary.k_iv,
            "k_pphi": sc.secondary.k_pphi, "k_iphi": sc.secondary.k_iphi,
            "k_pq": sc.secondary.k_pq, "k_iq": sc.secondary.k_iq,
            "delta_v_frac": sc.secondary.delta_v_frac,
            "delta_phi_rad": sc.secondary.delta_phi_rad,
            "delta_v_q_frac": sc.secondary.delta_v_q_frac,
            "ratio_phase": sc.secondary.ratio_phase},
        "virtual_impedance": {"r_v_ohm": sc.vz.r_v_ohm,
                              "l_v_henry": sc.vz.l_v_henry,
                              "tau_s": sc.vz.tau_s},
        "initial_connected": list(sc.initial_connected),
        "initial_load": _load_to_dict(sc.initial_load),
        "events": [],
        "checks": [dict(c) for c in sc.checks],
    }
    for ev in sc.events:
        e = {"time": ev.time, "kind": ev.kind}
        if ev.dgu is not None:
            e["dgu"] = ev.dgu
        if ev.kind == "set_load":
            e["load"] = _load_to_dict(ev.load)
        if ev.phase is not None:
            e["phase"] = ev.phase
        if ev.r_ohm is not None:
            e["r_ohm"] = ev.r_ohm
        d["events"].append(e)
    if sc.poles is not None:
        d["poles"] = [[p.real, p.imag] for p in sc.poles]
    return d


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Run artifacts


class TimeSeriesLog:
    """Preallocated fixed-cadence log; one row per log tick."""

    def __init__(self, columns, n_rows):
        self.columns = tuple(columns)
        self._index = {c: k for k, c in enumerate(self.columns)}
        self.data = np.full((n_rows, len(self.columns)), np.nan)
        self.n = 0

    def append(self, row) -> None:
        self.data[self.n] = row
        self.n += 1

    def trim(self) -> None:
        self.data = self.data[:self.n]

    def column(self, name) -> np.ndarray:
        return self.data[:, self._index[name]]

    def window(self, t0: float, t1: float) -> np.ndarray:
        t = self.column("t")
        return (t >= t0 - GRID_TOL) & (t <= t1 + GRID_TOL)


def unit_column(dgu_id: int, name: str) -> str:
    return f"{name}_{dgu_id}"


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str
    dgu: int | None = None
    accepted: bool | None = None   # None for non-plug events
    reason: str | None = None
    actions: dict | None = None    # id -> retained | synthesized | new
    clock_correction_rad: float | None = None


@dataclass
class RunResult:
    scenario: Scenario
    log: TimeSeriesLog
    records: tuple[EventRecord, ...]
    gains: dict                     # id -> ControllerGain at end of run
    aborted: bool = False
    abort_time: float | None = None


# ---------------------------------------------------------------------------
# Steady state of the coupled closed loop


def fundamental_conductance(load: LoadModel) -> float:
    """Isotropic fundamental conductance of a load (mean over phases)."""
    if load is None:
        return 0.0
    if isinstance(load, BalancedResistive):
        return 1.0 / load.r_ohm
    if isinstance(load, HarmonicRectifier):
        return 1.0 / load.r_base_ohm
    return (1.0 / load.r_a_ohm + 1.0 / load.r_b_ohm
            + 1.0 / load.r_c_ohm) / 3.0


def closed_loop_equilibrium(params, connected, g_load, omega0, refs, vz):
    """Exact steady state with a conductance load behind the reduction.

    Integral action pins ref_i = v_i + z_v i_line_i at every connected
    unit; together with the bus balance that is linear in (v_i, v_pol).
    Disconnected units regulate their own PCC: v = ref, currents zero.
    Returns (v, i_t, i_line, v_pol); all complex dq phasors.
    """
    n = len(params)
    conn = np.asarray(connected, dtype=float)
    zv = complex(vz.r_v_ohm, omega0 * vz.l_v_henry)
    v = np.array(refs, dtype=complex)
    i_line = np.zeros(n, dtype=complex)
    live = np.flatnonzero(conn > 0.0)
    v_pol = 0.0j
    if live.size:
        w = np.array([1.0 / complex(params[i].line.r_ohm,
                                    omega0 * params[i].line.l_henry)
                      for i in live])
        r = np.array([refs[i] for i in live])
        num = np.sum(w * r / (1.0 + w * zv))
        shunt = np.sum(w * w * zv / (1.0 + w * zv))
        v_pol = num / (g_load + np.sum(w) - shunt)
        v_live = (r + w * zv * v_pol) / (1.0 + w * zv)
        il = w * (v_live - v_pol)
        v[live] = v_live
        i_line[live] = il
    c_t = np.array([p.c_t_farad for p in params])
    i_t = i_line + 1j * omega0 * c_t * v
    return v, i_t, i_line, v_pol


# ---------------------------------------------------------------------------
# Matrix-form RK4 for the LTI stretches


def model_matrix(model):
    """Complex state matrix and harmonic forcing vector of a model.

    Valid for isotropic (balanced) loads, where the dq dynamics commute
    with the frame rotation: dx/dt = A x + B u + f * i_exo(t).  Mirrors
    ``model.derivative`` entry for entry; a test pins the two together.
    """
    n = model.n
    p = model.prepared
    if not p.isotropic:
        raise ValueError("matrix form needs an isotropic load")
    if isinstance(model, QslModel):
        a = np.zeros((2 * n, 2 * n), dtype=complex)
        f = np.zeros(2 * n, dtype=complex)
        a[:n, :n] = np.diag(-1j * model.omega0
                            - model.inv_ct * model.y_line)
        a[:n, n:] = np.diag(model.inv_ct)
        a[n:, :n] = np.diag(-model.inv_lt)
        a[n:, n:] = np.diag(model.a_it)
        if model.n_live:
            denom = p.g + model.y_sum
            cv = model.inv_ct * model.y_line
            a[:n, :n] += np.outer(cv, model.y_line) / denom
            f[:n] = -cv / denom
        return a, f
    # explicit bus: the step-size-guard linearization is exact here
    a = model._open_loop_matrix()
    f = np.zeros(3 * n, dtype=complex)
    if p.g > 0.0:
        f[2 * n:] = model.conn_inv_ll / p.g
    return a, f


def rk4_matrices(a: np.ndarray, h: float):
    """E, S with x+ = E x + S c equal to one RK4 step of x' = a x + c."""
    m = h * a
    eye = np.eye(a.shape[0], dtype=complex)
    s = h * (eye + m @ (eye / 2.0 + m @ (eye / 6.0 + m / 24.0)))
    return eye + s @ a, s


def forcing_columns(a: np.ndarray, h: float, f: np.ndarray,
                    amp: np.ndarray, w: np.ndarray):
    """Stage-exact RK4 forcing vectors for e(t) = sum_h amp_h f e^(i w_h t).

    The per-substep contribution is ``gmat @ z`` with z_h = e^(i w_h t) at
    the substep start; z advances by one multiply per substep.
    """
    if amp.size == 0:
        return None
    m = h * a
    cols = []
    for ah, wh in zip(amp, w):
        fh = ah * f
        q = cmath.exp(0.5j * wh * h)
        v1 = fh
        v2 = 0.5 * (m @ v1) + q * fh
        v3 = 0.5 * (m @ v2) + q * fh
        v4 = m @ v3 + (q * q) * fh
        cols.append((h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4))
    return np.column_stack(cols)


def _qsl_rates(model, t, v, i_t, u):
    """Literal QSL stage rates; arithmetic mirror of model.derivative."""
    if model.n_live:
        rhs = complex(np.dot(model.y_line, v))
        v_pol = model.prepared.solve_pol(rhs, model.y_sum, t,
                                         model.omega0 * t)
    else:
        v_pol = 0.0j
    i_line = (v - v_pol) * model.y_line
    dv = model.inv_ct * (i_t - i_line) - 1j * model.omega0 * v
    di_t = model.a_it * i_t + model.inv_lt * (u - v)
    return dv, di_t


def _real_cols(fun, d_in: int, d_out: int) -> np.ndarray:
    """Real 2d_out x 2d_in matrix of a real-linear complex map, by probing.

    Stacking convention [Re x; Im x]; probing the real and imaginary unit
    basis separately captures any conj() the map applies.
    """
    out = np.empty((2 * d_out, 2 * d_in))
    e = np.zeros(d_in, dtype=complex)
    for k in range(d_in):
        e[k] = 1.0
        c = fun(e)
        out[:d_out, k] = c.real
        out[d_out:, k] = c.imag
        e[k] = 1j
        c = fun(e)
        out[:d_out, d_in + k] = c.real
        out[d_out:, d_in + k] = c.imag
        e[k] = 0.0
    return out


def ltp_tick_table(model, dt: float, m: int, ticks: int):
    """Per-tick real (E, S) updates of an unbalanced-load model, one period.

    An unbalanced resistive load makes the dq dynamics real-linear with
    coefficients periodic at pi/omega0 (the conductance map turns at twice
    the frame speed).  When that period is an integer number of dt ticks,
    the m-substep RK4 update per tick repeats too, so the whole stretch runs
    as one matrix-vector product per tick: x+ = E_k x + S_k u with k the
    tick index modulo ``ticks``.  Stage matrices come from probing
    ``model.derivative``, which a test pins against literal stepping.
    """
    rows = 2 if isinstance(model, QslModel) else 3
    n = model.n
    d = rows * n
    h = dt / m
    zx = np.zeros((rows, n), dtype=complex)
    zu = np.zeros(n, dtype=complex)

    def deriv(ts, x, u):
        return model.derivative(ts, x.reshape(rows, n), u).reshape(-1)

    b = _real_cols(lambda u: deriv(0.0, zx.reshape(-1), u), n, d)
    a_cache: dict[int, np.ndarray] = {}

    def a_at(ts):
        key = round(2.0 * ts / h) % (2 * m * ticks)
        got = a_cache.get(key)
        if got is None:
            got = _real_cols(lambda x: deriv(ts, x, zu), d, d)
            a_cache[key] = got
        return got

    eye = np.eye(2 * d)
    table = []
    for k in range(ticks):
        e_tick = eye
        s_tick = np.zeros_like(b)
        for q in range(m):
            ts = k * dt + q * h
            a1 = a_at(ts)
            a2 = a_at(ts + 0.5 * h)
            a3 = a_at(ts + h)
            k1 = a1
            k2 = a2 + (0.5 * h) * (a2 @ k1)
            k3 = a2 + (0.5 * h) * (a2 @ k2)
            k4 = a3 + h * (a3 @ k3)
            e_q = eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            s1 = b
            s2 = b + (0.5 * h) * (a2 @ s1)
            s3 = b + (0.5 * h) * (a2 @ s2)
            s4 = b + h * (a3 @ s3)
            s_q = (h / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
            e_tick = e_q @ e_tick
            s_tick = e_q @ s_tick + s_q
        table.append((e_tick, s_tick))
    return table


# ---------------------------------------------------------------------------
# The runner


class _Runner:
    def __init__(self, sc: Scenario):
        self.sc = sc
        sim = sc.sim
        self.omega0 = 2.0 * math.pi * sc.f0_hz
        self.ids = tuple(d.dgu_id for d in sc.dgus)
        self.pos = {d.dgu_id: k for k, d in enumerate(sc.dgus)}
        self.params = [d.params for d in sc.dgus]
        self.params_by_id = {d.dgu_id: d.params for d in sc.dgus}
        self.n = len(self.ids)
        self.rows = 2 if sim.model == "qsl" else 3
        self.vz = sc.vz
        self.cp = sim.control_period_s
        self.dt = sim.dt_s
        self.n_sub = round(self.cp / self.dt)
        self.conn = np.zeros(self.n)
        for uid in sc.initial_connected:
            self.conn[self.pos[uid]] = 1.0
        self.load = sc.initial_load
        self.records: list[EventRecord] = []

        # standalone gains first, then the initial admission sequence
        self.unit_gain = {}
        for d in sc.dgus:
            self.unit_gain[d.dgu_id] = synthesize_gain(
                single_unit_model(d.params, self.omega0), sc.poles)
        self.live_gains: dict = {}
        for uid in sorted(sc.initial_connected):
            dec = plug_in(uid, self.params_by_id, self.live_gains,
                          self.omega0, sc.poles)
            if not dec.accepted:
                raise ScenarioError(
                    f"initial admission of unit {uid} denied: {dec.reason}")
            self.live_gains = dict(dec.gains)
            self.records.append(EventRecord(0.0, "initial_plug_in", uid,
                                            True, None, dict(dec.actions)))
        for uid, g in self.live_gains.items():
            self.unit_gain[uid] = g

        # plant and controllers seeded at the exact closed-loop steady state
        theta0 = np.array([0.0 if self.conn[k] else d.clock_offset_rad
                           for k, d in enumerate(sc.dgus)])
        refs = sc.secondary.v_pol_star * np.exp(1j * theta0)
        g0 = fundamental_conductance(self.load)
        v, i_t, i_line, _ = closed_loop_equilibrium(
            self.params, self.conn, g0, self.omega0, refs, sc.vz)
        self.x = np.zeros(self.rows * self.n, dtype=complex)
        self.x[:self.n] = v
        self.x[self.n:2 * self.n] = i_t
        if self.rows == 3:
            self.x[2 * self.n:] = i_line
        self.commands = np.zeros(self.n, dtype=complex)
        self.cst: list[PrimaryControllerState] = []
        for k, d in enumerate(sc.dgus):
            zt = complex(d.params.r_t_ohm, self.omega0 * d.params.l_t_henry)
            u = v[k] + zt * i_t[k]
            self.commands[k] = u
            st = PrimaryControllerState(theta0=theta0[k],
                                        v_star=sc.secondary.v_pol_star,
                                        phi_star=0.0)
            rot = cmath.exp(-1j * st.theta0)
            st.xi = equilibrium_xi(v[k] * rot, i_t[k] * rot,
                                   self.unit_gain[d.dgu_id], u * rot)
            st.prev_i_line = i_line[k] * rot
            self.cst.append(st)

        # comms and secondary layer
        self.net = BroadcastNetwork(sc.net)
        for uid in sorted(sc.initial_connected):
            self.net.connect(uid, 0.0)
        self.sec = {uid: sc.secondary.make_state() for uid in self.ids}
        self.v_enable = False
        self.q_enable = False
        self.sec_avg = (float("nan"), float("nan"))

        # plant model and integrator stretch
        self.model = None
        self.stretch = None
        self.table = None
        self._rebuild()

        # metrics rings, prefilled with the steady history
        spp = round(1.0 / (sc.f0_hz * self.dt))
        self.win = sim.metrics_window_periods * spp
        self.ring = np.tile(v, (self.win, 1))
        self.i_ring = np.tile(i_line, (self.win, 1))
        self.ring_pos = 0
        self.met = np.zeros((self.n, 6))  # rms, f, p, q, thd, imbalance
        self.i_line_now = i_line.copy()

        cols = ["t"]
        for uid in self.ids:
            cols += [unit_column(uid, c) for c in _UNIT_COLS]
        cols += list(_SHARED_COLS)
        n_rows = round(sim.duration_s * sim.log_rate_hz) + 1
        self.log = TimeSeriesLog(cols, n_rows)
        self._rowbuf = np.empty(len(cols))

    # -- model plumbing ----------------------------------------------------

    def _rebuild(self) -> None:
        self.model = make_model(self.sc.sim.model, self.params, self.conn,
                                self.load, self.omega0)
        m = self.model.substeps(self.dt)
        self.m_sub = m
        p = self.model.prepared
        self.stretch = None
        self.table = None
        if p.isotropic:
            a, f = model_matrix(self.model)
            h = self.dt / m
            e1, s1 = rk4_matrices(a, h)
            g1 = forcing_columns(a, h, f, p.amp, p.w)
            # compose the m sub-steps into one per-tick update so the hot
            # loop stays one matrix-vector product per dt
            e4, s4, gmat = e1, s1, g1
            for j in range(1, m):
                e4 = e1 @ e4
                s4 = e1 @ s4 + s1
                if g1 is not None:
                    gmat = e1 @ gmat + g1 * np.exp(1j * p.w * j * h)
            self.stretch = (e4, s4, gmat, p.w)
        else:
            per_ticks = math.pi / (self.omega0 * self.dt)
            r = round(per_ticks)
            if r > 0 and abs(per_ticks - r) < 1e-6 * per_ticks:
                self.table = ltp_tick_table(self.model, self.dt, m, r)

    def _line_currents(self, t: float) -> np.ndarray:
        if self.rows == 2:
            return self.model.line_current(self.x[:self.n], t)
        return self.x[2 * self.n:]

    def _pol_voltage(self, t: float) -> complex:
        n = self.n
        if self.rows == 2:
            return self.model.pol_voltage(self.x[:n], t)
        return self.model.pol_voltage(self.x[:n], self.x[n:2 * n],
                                      self.x[2 * n:], t)

    # -- per-tick work -----------------------------------------------------

    def _control(self, t: float) -> None:
        n = self.n
        i_line = self._line_currents(t)
        self.i_line_now = i_line
        x = self.x
        for k in range(n):
            self.commands[k] = control_step(
                x[k], x[n + k], i_line[k], self.cst[k],
                self.unit_gain[self.ids[k]], self.vz, self.cp, self.omega0)

    def _secondary_tick(self, t: float) -> None:
        live = sorted(uid for uid in self.live_gains)
        if not live:
            self.sec_avg = (float("nan"), float("nan"))
            return
        # window-mean phasors: the ring spans whole fundamental periods, so
        # harmonic and negative-sequence ripple cancel instead of aliasing
        # into the secondary ticks
        v_bar = self.ring.mean(axis=0)
        i_bar = self.i_ring.mean(axis=0)
        period = self.sc.net.period_s
        ests, qs = {}, {}
        for uid in live:
            k = self.pos[uid]
            st = self.cst[k]
            sec = self.sec[uid]
            rot = cmath.exp(-1j * st.theta0)
            v_loc = complex(v_bar[k]) * rot
            il_loc = complex(i_bar[k]) * rot
            est = estimate_pol(v_loc, il_loc, self.params[k].line.l_henry,
                               self.omega0, sec.last_estimate,
                               self.sc.secondary.ratio_phase)
            sec.last_estimate = est
            q = active_reactive_power(v_loc, il_loc)[1]
            ests[uid], qs[uid] = est, q
            self.net.publish(Broadcast(uid, t, Payload(
                est.v_pol, est.phi_pol, q, st.theta0)))
        for uid in live:
            k = self.pos[uid]
            sec = self.sec[uid]
            sec.voltage_enabled = self.v_enable
            sec.reactive_enabled = self.q_enable
            snap = self.net.snapshot(uid, t)
            avg = average_pol(snap, ests[uid], own_id=uid)
            dv, dphi = voltage_phase_loop(avg, self.sc.secondary.v_pol_star,
                                          sec, period)
            dvq = reactive_sharing_loop(qs[uid], snap, sec, period,
                                        own_id=uid)
            amp, ph = compose_reference(self.sc.secondary.v_pol_star,
                                        dv, dphi, dvq)
            self.cst[k].v_star = amp
            self.cst[k].phi_star = ph
            if uid == live[0]:
                self.sec_avg = avg
        self.net.prune(t)

    def _metrics(self, t: float) -> None:
        ring, i_ring, posn = self.ring, self.i_ring, self.ring_pos
        for k in range(self.n):
            window = np.concatenate((ring[posn:, k], ring[:posn, k]))
            i_win = np.concatenate((i_ring[posn:, k], i_ring[:posn, k]))
            m = measure(window, i_win, self.sc.f0_hz, self.dt, t)
            self.met[k] = (float(np.mean(m.rms_v)), m.f_hz, m.p_w, m.q_var,
                           m.thd_pct, m.imbalance_pct)

    def _write_row(self, t: float) -> None:
        n = self.n
        row = self._rowbuf
        row[0] = t
        x = self.x
        il = self.i_line_now
        live = sorted(uid for uid in self.live_gains)
        for k in range(n):
            uid = self.ids[k]
            sec = self.sec[uid]
            o = 1 + len(_UNIT_COLS) * k
            row[o] = x[k].real
            row[o + 1] = x[k].imag
            row[o + 2] = x[n + k].real
            row[o + 3] = x[n + k].imag
            row[o + 4] = il[k].real
            row[o + 5] = il[k].imag
            row[o + 6:o + 12] = self.met[k]
            row[o + 12] = abs(tracking_error(x[k], il[k], self.cst[k],
                                             self.vz, self.omega0))
            row[o + 13] = self.conn[k]
            est = sec.last_estimate
            row[o + 14] = est.v_pol if est is not None else float("nan")
            row[o + 15] = est.phi_pol if est is not None else float("nan")
            row[o + 16] = sec.delta_v_q
        base = 1 + len(_UNIT_COLS) * n
        row[base] = abs(self._pol_voltage(t))
        row[base + 1] = self.sec_avg[0]
        if live:
            senior = self.sec[live[0]]
            row[base + 2] = senior.delta_v
            row[base + 3] = senior.delta_phi
        else:
            row[base + 2] = 0.0
            row[base + 3] = 0.0
        self.log.append(row)

    def _healthy(self) -> bool:
        v = self.x[:self.n]
        return bool(np.isfinite(v).all() and np.abs(v).max() < V_ABORT)

    # -- events ------------------------------------------------------------

    def _dispatch(self, ev: Event, t: float) -> None:
        if ev.kind == "set_load":
            self.load = ev.load
            self._rebuild()
            self.records.append(EventRecord(t, ev.kind))
        elif ev.kind == "set_load_phase":
            cur = self.load
            if isinstance(cur, BalancedResistive):
                r3 = {"a": cur.r_ohm, "b": cur.r_ohm, "c": cur.r_ohm}
            elif isinstance(cur, UnbalancedResistive):
                r3 = {"a": cur.r_a_ohm, "b": cur.r_b_ohm, "c": cur.r_c_ohm}
            else:
                raise ScenarioError("set_load_phase without resistive load")
            r3[ev.phase] = ev.r_ohm
            if r3["a"] == r3["b"] == r3["c"]:
                self.load = BalancedResistive(r3["a"])
            else:
                self.load = UnbalancedResistive(r3["a"], r3["b"], r3["c"])
            self._rebuild()
            self.records.append(EventRecord(t, ev.kind))
        elif ev.kind == "plug_in":
            self._plug_in(ev.dgu, t)
        elif ev.kind == "plug_out":
            self._plug_out(ev.dgu, t)
        elif ev.kind == "enable_secondary_voltage":
            self.v_enable = True
            self.records.append(EventRecord(t, ev.kind))
        elif ev.kind == "enable_secondary_q":
            self.q_enable = True
            self.records.append(EventRecord(t, ev.kind))

    def _install_gains(self, dec, t: float) -> None:
        n = self.n
        for uid, action in sorted(dec.actions.items()):
            if action == "retained":
                continue
            k = self.pos[uid]
            st = self.cst[k]
            g = dec.gains[uid]
            rot = cmath.exp(-1j * st.theta0)
            # re-seed the integrator so the command is continuous
            st.xi = equilibrium_xi(self.x[k] * rot, self.x[n + k] * rot, g,
                                   self.commands[k] * rot)
            self.unit_gain[uid] = g
        self.live_gains = dict(dec.gains)

    def _plug_in(self, uid: int, t: float) -> None:
        dec = plug_in(uid, self.params_by_id, self.live_gains, self.omega0,
                      self.sc.poles)
        if not dec.accepted:
            self.records.append(EventRecord(t, "plug_in", uid, False,
                                            dec.reason, dict(dec.actions)))
            return
        k = self.pos[uid]
        st = self.cst[k]
        # line the clock up from the broadcast markers before the breaker
        snap = self.net.snapshot(uid, t)
        corr, ok = estimate_clock_offset(
            st.theta0, [p.theta for p in snap.values()])
        if ok:
            rot = cmath.exp(-1j * corr)
            st.theta0 = (st.theta0 + corr + math.pi) % (2 * math.pi) - math.pi
            st.xi *= rot
            st.prev_i_line *= rot
            st.d_filt *= rot
        self.net.connect(uid, t)
        self.conn[k] = 1.0
        self._install_gains(dec, t)
        self._rebuild()
        peers = [m for m in sorted(self.live_gains) if m != uid]
        if peers:
            # replicated coordination state comes from the senior peer
            src, dst = self.sec[peers[0]], self.sec[uid]
            dst.voltage_pi.integrator = src.voltage_pi.integrator
            dst.phase_pi.integrator = src.phase_pi.integrator
            dst.delta_v = src.delta_v
            dst.delta_phi = src.delta_phi
        self.records.append(EventRecord(t, "plug_in", uid, True, None,
                                        dict(dec.actions),
                                        corr if ok else None))

    def _plug_out(self, uid: int, t: float) -> None:
        dec = plug_out(uid, self.params_by_id, self.live_gains, self.omega0,
                       self.sc.poles)
        if not dec.accepted:
            self.records.append(EventRecord(t, "plug_out", uid, False,
                                            dec.reason, dict(dec.actions)))
            return
        k = self.pos[uid]
        self.net.disconnect(uid, t)
        self.conn[k] = 0.0
        if self.rows == 3:
            self.x[2 * self.n + k] = 0.0  # breaker opens the line
        self._install_gains(dec, t)
        # the departed unit goes back to its standalone reference
        self.cst[k].v_star = self.sc.secondary.v_pol_star
        self.cst[k].phi_star = 0.0
        self.sec[uid] = self.sc.secondary.make_state()
        self._rebuild()
        self.records.append(EventRecord(t, "plug_out", uid, True, None,
                                        dict(dec.actions)))

    # -- integration -------------------------------------------------------

    def _advance(self, t: float) -> None:
        n = self.n
        n_sub = self.n_sub
        dt = self.dt
        ring = self.ring
        i_ring = self.i_ring
        posn = self.ring_pos
        win = self.win
        if self.stretch is not None:
            e4, s4, gmat, w = self.stretch
            c = np.zeros(self.rows * n, dtype=complex)
            c[n:2 * n] = self.model.inv_lt * self.commands
            sc_vec = s4 @ c
            x = self.x
            if gmat is None:
                for s in range(n_sub):
                    x = e4 @ x + sc_vec
                    ring[posn] = x[:n]
                    i_ring[posn] = (x[2 * n:] if self.rows == 3 else
                                    self.model.line_current(x[:n],
                                                            t + (s + 1) * dt))
                    posn += 1
                    if posn == win:
                        posn = 0
            else:
                z = np.exp(1j * w * t)
                qf = np.exp(1j * w * dt)
                for s in range(n_sub):
                    x = e4 @ x + sc_vec + gmat @ z
                    z = z * qf
                    ring[posn] = x[:n]
                    i_ring[posn] = (x[2 * n:] if self.rows == 3 else
                                    self.model.line_current(x[:n],
                                                            t + (s + 1) * dt))
                    posn += 1
                    if posn == win:
                        posn = 0
            self.x = x
        elif self.table is not None:
            tab = self.table
            r = len(tab)
            d = self.rows * n
            u = self.commands
            ur = np.concatenate((u.real, u.imag))
            xr = np.concatenate((self.x.real, self.x.imag))
            j = round(t / dt)
            for s in range(n_sub):
                e_k, s_k = tab[(j + s) % r]
                xr = e_k @ xr + s_k @ ur
                v = xr[:n] + 1j * xr[d:d + n]
                ring[posn] = v
                i_ring[posn] = (xr[2 * n:d] + 1j * xr[d + 2 * n:] if
                                self.rows == 3 else
                                self.model.line_current(v, t + (s + 1) * dt))
                posn += 1
                if posn == win:
                    posn = 0
            self.x = xr[:d] + 1j * xr[d:]
        elif self.rows == 2:
            model = self.model
            u = self.commands
            v = self.x[:n]
            it = self.x[n:]
            m = self.m_sub
            h = dt / m
            half = 0.5 * h
            sixth = h / 6.0
            for s in range(n_sub):
                for q in range(m):
                    ts = t + s * dt + q * h
                    kv1, ki1 = _qsl_rates(model, ts, v, it, u)
                    kv2, ki2 = _qsl_rates(model, ts + half, v + half * kv1,
                                          it + half * ki1, u)
                    kv3, ki3 = _qsl_rates(model, ts + half, v + half * kv2,
                                          it + half * ki2, u)
                    kv4, ki4 = _qsl_rates(model, ts + h, v + h * kv3,
                                          it + h * ki3, u)
                    v = v + sixth * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4)
                    it = it + sixth * (ki1 + 2.0 * ki2 + 2.0 * ki3 + ki4)
                ring[posn] = v
                i_ring[posn] = model.line_current(v, t + (s + 1) * dt)
                posn += 1
                if posn == win:
                    posn = 0
            self.x = np.concatenate((v, it))
        else:
            model = self.model
            u = self.commands
            y = self.x.reshape(self.rows, n)
            f = lambda tt, yy: model.derivative(tt, yy, u)  # noqa: E731
            m = self.m_sub
            h = dt / m
            for s in range(n_sub):
                for q in range(m):
                    y = step_rk4(f, t + s * dt + q * h, y, h)
                ring[posn] = y[0]
                i_ring[posn] = y[2]
                posn += 1
                if posn == win:
                    posn = 0
            self.x = y.reshape(-1)
        self.ring_pos = posn

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunResult:
        sim = self.sc.sim
        cp = self.cp
        n_ctrl = round(sim.duration_s / cp)
        log_every = round(1.0 / (sim.log_rate_hz * cp))
        met_every = round(sim.metrics_period_s / cp)
        sec_every = round(self.sc.net.period_s / cp)
        events = self.sc.events
        n_ev = len(events)
        e = 0
        aborted = False
        abort_t = None
        for k in range(n_ctrl):
            t = k * cp
            while e < n_ev and events[e].time <= t + GRID_TOL:
                self._dispatch(events[e], t)
                e += 1
            if k % sec_every == 0:
                self._secondary_tick(t)
            self._control(t)
            if k % met_every == 0:
                self._metrics(t)
            if k % log_every == 0:
                self._write_row(t)
                if not self._healthy():
                    aborted = True
                    abort_t = t
                    break
            self._advance(t)
        if not aborted:
            t = n_ctrl * cp
            self.i_line_now = self._line_currents(t)
            self._metrics(t)
            self._write_row(t)
        self.log.trim()
        gains = {uid: self.unit_gain[uid] for uid in sorted(self.unit_gain)}
        return RunResult(self.sc, self.log, tuple(self.records), gains,
                         aborted, abort_t)


def run(scenario: Scenario) -> RunResult:
    """Simulate a scenario start to finish and return its artifacts."""
    return _Runner(scenario).run()


# ---------------------------------------------------------------------------
# Post-run analysis


def settling_time(t, y, t_event, t_end, band_frac=0.02):
    """Seconds from t_event until y enters and stays in +-band of its
    final value (the tail mean).  0.0 if it never leaves, nan if it is
    still outside at t_end."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    m = (t >= t_event - GRID_TOL) & (t <= t_end + GRID_TOL)
    ts, ys = t[m], y[m]
    if ts.size < 3:
        return float("nan")
    tail_t = max(ts[-1] - min(1.0, 0.25 * (t_end - t_event)), t_event)
    final = float(np.nanmean(ys[ts >= tail_t]))
    band = band_frac * max(abs(final), 1e-12)
    out = np.flatnonzero(np.abs(ys - final) > band)
    if out.size == 0:
        return 0.0
    if out[-1] == ys.size - 1:
        return float("nan")
    return float(ts[out[-1] + 1] - t_event)


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass(frozen=True)
class RegimeStats:
    t0: float
    t1: float
    means: dict  # column name -> tail-window mean


@dataclass(frozen=True)
class SettlingRecord:
    event_time: float
    event_kind: str
    dgu_id: int
    settle_s: float


@dataclass
class Summary:
    name: str
    regimes: list
    settling: list
    checks: list
    records: tuple
    aborted: bool

    @property
    def passed(self) -> bool:
        return (not self.aborted) and all(c.passed for c in self.checks)


def _connected_max(result, col_name, mask, f0_ref=None, ids=None):
    """Max |col - ref| over rows and units, masked to connected samples."""
    worst = 0.0
    if ids is None:
        ids = [d.dgu_id for d in result.scenario.dgus]
    for uid in ids:
        on = result.log.column(unit_column(uid, "connected"))[mask] > 0.5
        vals = result.log.column(unit_column(uid, col_name))[mask][on]
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            continue
        dev = np.abs(vals - f0_ref) if f0_ref is not None else vals
        worst = max(worst, float(dev.max()))
    return worst


def _connected_window_means(result, col_name, mask):
    """Tail means of a per-unit column for units connected throughout."""
    means = {}
    for uid in (d.dgu_id for d in result.scenario.dgus):
        on = result.log.column(unit_column(uid, "connected"))[mask] > 0.5
        if on.size == 0 or not on.all():
            continue
        vals = result.log.column(unit_column(uid, col_name))[mask]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            means[uid] = float(vals.mean())
    return means


def _eval_check(chk: dict, result: RunResult) -> CheckResult:
    kind = chk["kind"]
    name = chk.get("name", kind)
    log = result.log
    if kind == "plugs_accepted":
        plugs = [r for r in result.records
                 if r.kind in ("plug_in", "plug_out", "initial_plug_in")]
        n_ok = sum(1 for r in plugs if r.accepted)
        return CheckResult(name, kind, n_ok == len(plugs), float(n_ok),
                           float(len(plugs)),
                           f"{n_ok}/{len(plugs)} plug decisions accepted")
    if kind == "freq_excursion":
        # optional "dgus" restricts to the listed units (e.g. incumbents
        # during a plug-in, where the joining unit reads its own sync slew)
        mask = log.window(chk["t0"], chk["t1"])
        ids = chk.get("dgus")
        dev = _connected_max(result, "f_hz", mask,
                             f0_ref=result.scenario.f0_hz, ids=ids)
        return CheckResult(name, kind, dev <= chk["max_hz"], dev,
                           chk["max_hz"], "max |f - f0| on connected units")
    if kind in ("p_equal_share", "q_share"):
        col = "p_w" if kind == "p_equal_share" else "q_var"
        mask = log.window(chk["t0"], chk["t1"])
        means = _connected_window_means(result, col, mask)
        if len(means) < 2:
            return CheckResult(name, kind, False, float("nan"),
                               chk["tol_frac"], "fewer than two units")
        vals = np.array(sorted(means.values()))
        center = float(vals.mean())
        scale = max(abs(center), 1e-9)
        dev = float(np.abs(vals - center).max()) / scale
        return CheckResult(name, kind, dev <= chk["tol_frac"], dev,
                           chk["tol_frac"],
                           f"unit means {np.round(vals, 3).tolist()}")
    if kind == "p_ratio":
        m_num = log.window(*chk["num"])
        m_den = log.window(*chk["den"])
        p_num = sum(_connected_window_means(result, "p_w", m_num).values())
        p_den = sum(_connected_window_means(result, "p_w", m_den).values())
        ratio = p_num / p_den if p_den else float("inf")
        return CheckResult(name, kind, ratio <= chk["max_ratio"], ratio,
                           chk["max_ratio"],
                           f"P {p_num:.1f} W vs {p_den:.1f} W")
    if kind == "imbalance_monotone":
        col = log.column(unit_column(chk["dgu"], "imbalance_pct"))
        vals = []
        for t0, t1 in chk["windows"]:
            v = col[log.window(t0, t1)]
            v = v[np.isfinite(v)]
            vals.append(float(v.mean()) if v.size else float("nan"))
        ok = all(b > a for a, b in zip(vals, vals[1:]))
        margin = min((b - a for a, b in zip(vals, vals[1:])),
                     default=float("nan"))
        return CheckResult(name, kind, ok, margin, 0.0,
                           f"window means {np.round(vals, 3).tolist()} %")
    if kind in ("imbalance_max", "thd_max"):
        col = "imbalance_pct" if kind == "imbalance_max" else "thd_pct"
        mask = log.window(chk["t0"], chk["t1"])
        if "dgu" in chk:
            vals = log.column(unit_column(chk["dgu"], col))[mask]
            vals = vals[np.isfinite(vals)]
            worst = float(vals.max()) if vals.size else 0.0
        else:
            worst = _connected_max(result, col, mask)
        return CheckResult(name, kind, worst <= chk["max_pct"], worst,
                           chk["max_pct"], f"max {col} in window")
    if kind == "v_pol_track":
        ref = chk.get("ref_v", result.scenario.secondary.v_pol_star)
        worst = 0.0
        parts = []
        for t0, t1 in chk["windows"]:
            vals = log.column("v_pol")[log.window(t0, t1)]
            vals = vals[np.isfinite(vals)]
            mean = float(vals.mean()) if vals.size else float("nan")
            parts.append(round(mean, 3))
            worst = max(worst, abs(mean - ref) / ref)
        return CheckResult(name, kind, worst <= chk["tol_frac"], worst,
                           chk["tol_frac"], f"window means {parts} V")
    if kind == "tracking":
        worst = 0.0
        for t0, t1 in chk["windows"]:
            mask = log.window(t0, t1)
            worst = max(worst, _connected_max(result, "trk_err", mask))
        return CheckResult(name, kind, worst <= chk["max_v"], worst,
                           chk["max_v"], "max steady tracking error")
    if kind == "delta_limits":
        sec = result.scenario.secondary
        lim_v = sec.delta_v_frac * sec.v_pol_star + 1e-9
        lim_phi = sec.delta_phi_rad + 1e-9
        lim_q = sec.delta_v_q_frac * sec.v_pol_star + 1e-9
        dv = np.nanmax(np.abs(log.column("delta_v")))
        dphi = np.nanmax(np.abs(log.column("delta_phi")))
        dq = max(np.nanmax(np.abs(log.column(unit_column(d.dgu_id,
                                                         "delta_v_q"))))
                 for d in result.scenario.dgus)
        ok = dv <= lim_v and dphi <= lim_phi and dq <= lim_q
        worst = max(dv / lim_v, dphi / lim_phi, dq / lim_q)
        return CheckResult(name, kind, bool(ok), float(worst), 1.0,
                           f"|dV| {dv:.3f} V, |dphi| {dphi:.4f} rad, "
                           f"|dVq| {dq:.3f} V")
    raise ScenarioError(f"unknown check kind {kind!r}")


_METRIC_COLS = ("v_rms", "f_hz", "p_w", "q_var", "thd_pct", "imbalance_pct",
                "trk_err", "connected")


def report(result: RunResult) -> Summary:
    """Regime statistics, settling times and check verdicts of one run."""
    sc = result.scenario
    log = result.log
    t_end = float(log.column("t")[-1]) if log.n else 0.0
    change = [r for r in result.records
              if r.kind in ("set_load", "set_load_phase") or
              (r.kind in ("plug_in", "plug_out") and r.accepted)]
    bounds = sorted({0.0, t_end} | {r.time for r in change if r.time < t_end})
    # events dispatch before the log write on the same tick, so a row at an
    # interior boundary already reflects the next regime
    half_row = 0.5 / sc.sim.log_rate_hz
    regimes = []
    for t0, t1 in zip(bounds[:-1], bounds[1:]):
        t1_eff = t1 if t1 >= t_end else t1 - half_row
        tail0 = max(t0, t1 - max(min(2.0, 0.5 * (t1 - t0)), 0.0))
        mask = log.window(tail0, t1_eff)
        means = {}
        for uid in (d.dgu_id for d in sc.dgus):
            for c in _METRIC_COLS:
                col = unit_column(uid, c)
                vals = log.column(col)[mask]
                vals = vals[np.isfinite(vals)]
                means[col] = float(vals.mean()) if vals.size else float("nan")
        vp = log.column("v_pol")[mask]
        vp = vp[np.isfinite(vp)]
        means["v_pol"] = float(vp.mean()) if vp.size else float("nan")
        regimes.append(RegimeStats(t0, t1, means))
    settling = []
    t = log.column("t")
    for t0, t1 in zip(bounds[1:-1], bounds[2:]):
        t1_eff = t1 if t1 >= t_end else t1 - half_row
        for uid in (d.dgu_id for d in sc.dgus):
            mask = log.window(t0, t1_eff)
            on = log.column(unit_column(uid, "connected"))[mask]
            if on.size == 0 or not (on > 0.5).all():
                continue
            ev_kind = next(r.kind for r in change if r.time == t0)
            s = settling_time(t, log.column(unit_column(uid, "v_rms")),
                              t0, t1_eff)
            settling.append(SettlingRecord(t0, ev_kind, uid, s))
    checks = [_eval_check(chk, result) for chk in sc.checks]
    return Summary(sc.name, regimes, settling, checks, result.records,
                   result.aborted)


# ---------------------------------------------------------------------------
# CSV emitters (all floats at full precision)


def emit_timeseries_csv(log: TimeSeriesLog, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(log.columns) + "\n")
        for row in log.data[:log.n]:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def emit_gains_csv(gains: dict, path) -> None:
    header = ["dgu_id"] + [f"k_{r}{c}" for r in (1, 2) for c in range(1, 7)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for uid in sorted(gains):
            flat = np.asarray(gains[uid].k).reshape(-1)
            fh.write(",".join([str(uid)] + ["%.17g" % v for v in flat])
                     + "\n")


def emit_summary_csv(summary: Summary, path) -> None:
    """Long-format summary: section,name,dgu,t0,t1,value,threshold,passed."""
    rows = []
    for rg in summary.regimes:
        for col, val in sorted(rg.means.items()):
            rows.append(("regime_mean", col, "", rg.t0, rg.t1, val, "", ""))
    for s in summary.settling:
        rows.append(("settling", s.event_kind, str(s.dgu_id), s.event_time,
                     "", s.settle_s, "", ""))
    for c in summary.checks:
        rows.append(("check", c.name, "", "", "", c.value, c.threshold,
                     "pass" if c.passed else "fail"))
    for r in summary.records:
        ok = "" if r.accepted is None else ("pass" if r.accepted else "fail")
        rows.append(("event", r.kind, "" if r.dgu is None else str(r.dgu),
                     r.time, "", "", "", ok))
    with open(path, "w") as fh:
        fh.write("section,name,dgu,t0,t1,value,threshold,passed\n")
        for row in rows:
            items = []
            for v in row:
                if isinstance(v, float):
                    items.append("%.17g" % v)
                else:
                    items.append(str(v))
            fh.write(",".join(items) + "\n")
