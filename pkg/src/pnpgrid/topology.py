"""Electrical topology of a bus-connected microgrid and its reduction.

Each distributed generation unit (DGU) reaches a single point of load (PoL)
bus through its own series RL line.  That star network is electrically
equivalent to a load-connected network in which every pair of units is joined
by an edge impedance and the load current reappears as per-unit injected
currents.  Both directions of that equivalence live here: the closed-form
reduction used by the controllers and an independent Kron reduction of the
assembled admittance matrix used as a cross-check.

All impedances are complex phasors at the network frequency with the d axis
on the real part and the q axis on the imaginary part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Treat a line as degenerate (short) below this impedance magnitude [ohm].
DEGENERATE_Z_OHM = 1e-12


class DegenerateLineError(ValueError):
    """Raised when a line impedance magnitude is effectively zero."""

    def __init__(self, index: int, z: complex):
        self.index = index
        super().__init__(
            f"line {index} has |Z| = {abs(z):.3e} ohm; reduction is singular"
        )


@dataclass(frozen=True)
class LineParams:
    """Series RL parameters of one DGU-to-bus line.

    Parameters
    ----------
    r_ohm : float
        Series resistance, >= 0.
    l_henry : float
        Series inductance, >= 0.  Resistance and inductance must not both
        be zero.
    """

    r_ohm: float
    l_henry: float

    def __post_init__(self):
        if self.r_ohm < 0.0 or self.l_henry < 0.0:
            raise ValueError(f"negative line parameters: {self}")
        if self.r_ohm == 0.0 and self.l_henry == 0.0:
            raise ValueError("line needs nonzero resistance or inductance")


@dataclass(frozen=True)
class BusTopology:
    """Star ("bus-connected") network: one line per DGU into the PoL bus."""

    lines: tuple[LineParams, ...]

    def __post_init__(self):
        if len(self.lines) < 1:
            raise ValueError("topology needs at least one DGU")

    @property
    def n_dgus(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class LoadConnectedTopology:
    """Complete graph equivalent of a :class:`BusTopology`.

    ``edge_z[(i, j)]`` with ``i < j`` holds the equivalent impedance between
    units i and j; ``divider[i]`` is the (complex) fraction of the total load
    current injected at unit i, so injected currents are ``divider * i_load``.
    """

    n_dgus: int
    edge_z: dict[tuple[int, int], complex] = field(repr=False)
    divider: tuple[complex, ...]

    def z(self, i: int, j: int) -> complex:
        if i == j:
            raise KeyError("no self edge")
        return self.edge_z[(min(i, j), max(i, j))]

    def neighbors(self, i: int) -> list[int]:
        return [j for j in range(self.n_dgus) if j != i]


def line_impedance(line: LineParams, omega0: float) -> complex:
    """Phasor impedance R + j*omega0*L of one line at frequency omega0 > 0."""
    if omega0 <= 0.0:
        raise ValueError("omega0 must be positive")
    return complex(line.r_ohm, omega0 * line.l_henry)


def _line_impedances(bus: BusTopology, omega0: float) -> np.ndarray:
    z = np.array([line_impedance(ln, omega0) for ln in bus.lines])
    for i, zi in enumerate(z):
        if abs(zi) < DEGENERATE_Z_OHM:
            raise DegenerateLineError(i, zi)
    return z


def reduce_bus_to_load(bus: BusTopology, omega0: float) -> LoadConnectedTopology:
    """Eliminate the PoL bus node, returning the load-connected equivalent.

    The equivalent edge impedance is ``Z_ij = Z_i * Z_j * sum_k(1/Z_k)`` and
    the load-current divider is ``1 / (Z_i * sum_k(1/Z_k))``.  The result is
    always a complete graph over the units, with ``Z_ij == Z_ji`` exactly
    (each edge is computed once).

    Parameters
    ----------
    bus : BusTopology
    omega0 : float
        Network angular frequency [rad/s], > 0.

    Returns
    -------
    LoadConnectedTopology
    """
    z = _line_impedances(bus, omega0)
    y_sum = np.sum(1.0 / z)
    n = bus.n_dgus
    edges: dict[tuple[int, int], complex] = {}
    for i in range(n):
        for j in range(i + 1, n):
            edges[(i, j)] = complex(z[i] * z[j] * y_sum)
    divider = tuple(complex(1.0 / (zi * y_sum)) for zi in z)
    return LoadConnectedTopology(n_dgus=n, edge_z=edges, divider=divider)


def split_load_current(
    topo: LoadConnectedTopology, i_load: complex
) -> np.ndarray:
    """Injected per-unit currents equivalent to the PoL load current.

    Satisfies ``sum == i_load`` up to floating round-off regardless of the
    line impedances.
    """
    return np.array(topo.divider) * i_load


def kron_reduce_star(bus: BusTopology, omega0: float) -> np.ndarray:
    """Oracle reduction: Schur complement of the star admittance matrix.

    Assembles the (N+1)-node nodal admittance matrix of the star network
    (unit nodes 0..N-1, PoL node last) and eliminates the PoL node.  Returns
    the dense N x N complete-graph edge impedance matrix with ``inf`` on the
    diagonal.  Kept deliberately independent of :func:`reduce_bus_to_load`
    so the two routes validate each other.
    """
    z = _line_impedances(bus, omega0)
    n = bus.n_dgus
    y = np.zeros((n + 1, n + 1), dtype=np.complex128)
    for i, zi in enumerate(z):
        yi = 1.0 / zi
        y[i, i] += yi
        y[n, n] += yi
        y[i, n] -= yi
        y[n, i] -= yi
    # Schur complement onto the unit nodes.
    y_red = y[:n, :n] - np.outer(y[:n, n], y[n, :n]) / y[n, n]
    z_red = np.full((n, n), np.inf, dtype=np.complex128)
    for i in range(n):
        for j in range(n):
            if i != j:
                z_red[i, j] = -1.0 / y_red[i, j]
    return z_red


def edge_matrix(topo: LoadConnectedTopology) -> np.ndarray:
    """Dense edge impedance matrix of a reduced topology (inf diagonal)."""
    n = topo.n_dgus
    z = np.full((n, n), np.inf, dtype=np.complex128)
    for (i, j), zij in topo.edge_z.items():
        z[i, j] = zij
        z[j, i] = zij
    return z
