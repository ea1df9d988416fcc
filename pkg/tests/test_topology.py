"""Reduction closed form vs the Kron oracle, plus the divider identities."""

import numpy as np
import pytest

from pnpgrid.topology import (
    BusTopology,
    DegenerateLineError,
    LineParams,
    edge_matrix,
    kron_reduce_star,
    line_impedance,
    reduce_bus_to_load,
    split_load_current,
)

OMEGA0 = 2.0 * np.pi * 50.0  # rad/s
TABLE_LINE = LineParams(r_ohm=0.1, l_henry=1.8e-3)


def random_bus(rng, n):
    lines = tuple(
        LineParams(r_ohm=float(rng.uniform(0.01, 5.0)),
                   l_henry=float(rng.uniform(1e-4, 2e-2)))
        for _ in range(n)
    )
    return BusTopology(lines)


def test_line_impedance_reference_value():
    z = line_impedance(TABLE_LINE, OMEGA0)
    assert abs(z.real - 0.1) < 1e-15
    assert abs(z.imag - 0.565486677646163) < 1e-12


def test_line_impedance_rejects_nonpositive_frequency():
    with pytest.raises(ValueError):
        line_impedance(TABLE_LINE, 0.0)


def test_two_unit_reduction_is_series_sum():
    l1 = LineParams(0.3, 2.5e-3)
    l2 = LineParams(0.07, 1.1e-3)
    topo = reduce_bus_to_load(BusTopology((l1, l2)), OMEGA0)
    z12 = topo.z(0, 1)
    expect = line_impedance(l1, OMEGA0) + line_impedance(l2, OMEGA0)
    assert abs(z12 - expect) <= 1e-13 * abs(expect)


def test_equal_lines_give_n_times_z():
    for n in (2, 3, 5):
        topo = reduce_bus_to_load(BusTopology((TABLE_LINE,) * n), OMEGA0)
        zi = line_impedance(TABLE_LINE, OMEGA0)
        for i in range(n):
            for j in range(i + 1, n):
                assert abs(topo.z(i, j) - n * zi) <= 1e-13 * abs(n * zi)


def test_three_equal_table_lines_reference_edge():
    topo = reduce_bus_to_load(BusTopology((TABLE_LINE,) * 3), OMEGA0)
    z = topo.z(0, 2)
    assert abs(z.real - 0.3) < 1e-12
    assert abs(z.imag - 1.696460032938488) < 1e-9


def test_reduced_graph_is_complete_and_symmetric():
    rng = np.random.default_rng(7)
    topo = reduce_bus_to_load(random_bus(rng, 6), OMEGA0)
    for i in range(6):
        for j in range(6):
            if i != j:
                # same dict entry both ways -> exact symmetry
                assert topo.z(i, j) == topo.z(j, i)
    assert len(topo.edge_z) == 6 * 5 // 2


def test_split_reference_example():
    # Z_1 = 2 Z_2 puts one third of the load current on unit 1.
    l2 = LineParams(0.2, 1e-3)
    l1 = LineParams(0.4, 2e-3)
    topo = reduce_bus_to_load(BusTopology((l1, l2)), OMEGA0)
    inj = split_load_current(topo, 3.0 + 0.0j)
    assert abs(inj[0] - 1.0) < 1e-12
    assert abs(inj[1] - 2.0) < 1e-12


def test_split_conserves_current():
    rng = np.random.default_rng(21)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        topo = reduce_bus_to_load(random_bus(rng, n), OMEGA0)
        i_load = complex(rng.normal(), rng.normal()) * 10.0
        inj = split_load_current(topo, i_load)
        assert abs(inj.sum() - i_load) <= 1e-12 * max(1.0, abs(i_load))


def test_equal_lines_split_equally():
    topo = reduce_bus_to_load(BusTopology((TABLE_LINE,) * 4), OMEGA0)
    inj = split_load_current(topo, 2.0 - 1.0j)
    for k in range(4):
        assert abs(inj[k] - (2.0 - 1.0j) / 4.0) < 1e-12


def test_closed_form_matches_kron_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        bus = random_bus(rng, n)
        topo = reduce_bus_to_load(bus, OMEGA0)
        z_closed = edge_matrix(topo)
        z_oracle = kron_reduce_star(bus, OMEGA0)
        for i in range(n):
            for j in range(n):
                if i != j:
                    rel = abs(z_closed[i, j] - z_oracle[i, j]) / abs(z_oracle[i, j])
                    assert rel < 1e-9


def test_scaling_covariance():
    # Z -> c*Z scales every edge by c and leaves the divider unchanged.
    rng = np.random.default_rng(5)
    bus = random_bus(rng, 4)
    c = 3.7
    scaled = BusTopology(tuple(
        LineParams(ln.r_ohm * c, ln.l_henry * c) for ln in bus.lines
    ))
    t1 = reduce_bus_to_load(bus, OMEGA0)
    t2 = reduce_bus_to_load(scaled, OMEGA0)
    for (i, j), zij in t1.edge_z.items():
        assert abs(t2.edge_z[(i, j)] - c * zij) <= 1e-12 * abs(c * zij)
    for d1, d2 in zip(t1.divider, t2.divider):
        assert abs(d1 - d2) < 1e-13


def test_degenerate_line_reports_index():
    lines = (TABLE_LINE, LineParams(1e-15, 1e-16), TABLE_LINE)
    with pytest.raises(DegenerateLineError) as err:
        reduce_bus_to_load(BusTopology(lines), OMEGA0)
    assert err.value.index == 1


def test_line_params_validation():
    with pytest.raises(ValueError):
        LineParams(-0.1, 1e-3)
    with pytest.raises(ValueError):
        LineParams(0.0, 0.0)
