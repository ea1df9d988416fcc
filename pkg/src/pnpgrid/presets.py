"""Bundled benchmark scenarios.

Five ready-to-run studies on the three-unit single-bus testbed, shipped
as JSON files next to this module. Each one plugs units in and out,
steps the load, and carries its own pass/fail checks:

- ``scenario_a_resistive``: balanced resistive load steps with plug-in,
  plug-out, equal active sharing, and reference tracking checks.
- ``scenario_b_unbalanced``: per-phase load steps; the bus imbalance
  factor must grow with the applied asymmetry and stay bounded.
- ``scenario_c_nonlinear``: a diode-rectifier style harmonic load; bus
  THD must stay within the distortion limit.
- ``scenario_c_secondary``: same load, plus the voltage restoration
  layer switched on mid-run; the point-of-load amplitude must return
  to its setpoint between events.
- ``scenario_d_reactive``: heterogeneous line inductances, both
  secondary layers on, reactive consensus must even out Q. Ships with
  a faster reactive gain pair than the defaults; the consensus time
  constant scales as 1/k_iq and the default would not settle between
  the scheduled load steps.

All presets use the switching-bus model at dt 1e-4 s and log at 1 kHz.
"""

import json
from importlib import resources

from .harness import Scenario, scenario_from_dict

PRESET_NAMES = (
    "scenario_a_resistive",
    "scenario_b_unbalanced",
    "scenario_c_nonlinear",
    "scenario_c_secondary",
    "scenario_d_reactive",
)


def preset(name: str) -> Scenario:
    """Load a bundled scenario by name."""
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}, have {PRESET_NAMES}")
    ref = resources.files("pnpgrid.scenarios").joinpath(name + ".json")
    return scenario_from_dict(json.loads(ref.read_text()))
