"""Broadcast network: delivery timing, lifecycle, determinism."""

import numpy as np
import pytest

from pnpgrid.comms import Broadcast, BroadcastNetwork, NetConfig, Payload

PERIOD = 0.01  # s


def payload(v=230.0, phi=0.0, q=0.0, theta=0.0):
    return Payload(v_pol=v, phi_pol=phi, q=q, theta=theta)


def fresh_net(n=3, latency=0.0):
    net = BroadcastNetwork(NetConfig(period_s=PERIOD, latency_s=latency))
    for i in range(n):
        net.connect(i, 0.0)
    return net


def test_config_and_payload_validation():
    with pytest.raises(ValueError):
        NetConfig(period_s=0.0)
    with pytest.raises(ValueError):
        NetConfig(latency_s=-1e-3)
    with pytest.raises(ValueError):
        Payload(v_pol=float("nan"), phi_pol=0.0, q=0.0, theta=0.0)
    NetConfig(latency_s=0.05)  # latency above one period is allowed


def test_zero_latency_same_tick_visibility():
    net = fresh_net(3)
    for i in range(3):
        net.publish(Broadcast(i, 0.0, payload(v=100.0 + i)))
    snap = net.snapshot(0, 0.0)
    assert sorted(snap) == [1, 2]
    assert snap[1].v_pol == 101.0 and snap[2].v_pol == 102.0


def test_latency_defers_to_older_tick():
    # latency 1.5 periods: at tick k the freshest delivered is tick k-2
    net = fresh_net(2, latency=1.5 * PERIOD)
    for k in range(6):
        net.publish(Broadcast(1, k * PERIOD, payload(v=float(k))))
    for k in range(2, 6):
        snap = net.snapshot(0, k * PERIOD)
        assert snap[1].v_pol == float(k - 2)
    assert net.snapshot(0, PERIOD) == {}


def test_disconnected_sender_suppressed():
    net = fresh_net(2)
    net.disconnect(1, 0.0)
    net.publish(Broadcast(1, 0.01, payload()))
    assert net.snapshot(0, 1.0) == {}


def test_departed_peer_ages_out():
    net = fresh_net(2, latency=PERIOD)
    net.publish(Broadcast(1, 0.04, payload(v=111.0)))
    net.disconnect(1, 0.05)
    assert net.snapshot(0, 0.05)[1].v_pol == 111.0
    assert net.snapshot(0, 0.06)[1].v_pol == 111.0  # within one latency
    assert net.snapshot(0, 0.0601) == {}


def test_reconnect_starts_clean():
    net = fresh_net(2)
    net.publish(Broadcast(1, 0.0, payload(v=5.0)))
    net.disconnect(1, 0.01)
    net.connect(1, 0.02)
    assert net.snapshot(0, 0.03) == {}
    net.publish(Broadcast(1, 0.03, payload(v=6.0)))
    assert net.snapshot(0, 0.03)[1].v_pol == 6.0


def test_disconnected_receiver_still_listens():
    net = fresh_net(2)
    net.publish(Broadcast(1, 0.0, payload(v=9.0)))
    net.disconnect(0, 0.0)
    assert net.snapshot(0, 0.01)[1].v_pol == 9.0


def test_snapshot_matches_bruteforce_history():
    rng = np.random.default_rng(7)
    latency = 0.013
    net = fresh_net(3, latency=latency)
    history = []
    t = 0.0
    for _ in range(200):
        t += float(rng.uniform(0.001, 0.02))
        sender = int(rng.integers(0, 3))
        b = Broadcast(sender, t, payload(v=float(rng.uniform(220, 240))))
        net.publish(b)
        history.append(b)
        if rng.uniform() < 0.3:
            query = t + float(rng.uniform(0.0, 0.03))
            receiver = int(rng.integers(0, 3))
            snap = net.snapshot(receiver, query)
            for peer in (i for i in range(3) if i != receiver):
                delivered = [h for h in history if h.sender == peer
                             and h.timestamp + latency <= query]
                if delivered:
                    assert snap[peer] == delivered[-1].payload
                else:
                    assert peer not in snap


def test_determinism_replay():
    def run():
        net = fresh_net(3, latency=0.005)
        for k in range(10):
            for i in range(3):
                net.publish(Broadcast(i, k * PERIOD, payload(v=200.0 + k + i)))
        return [net.snapshot(r, 0.095) for r in range(3)]

    assert run() == run()


def test_out_of_order_publish_rejected():
    net = fresh_net(2)
    net.publish(Broadcast(1, 0.02, payload()))
    with pytest.raises(ValueError):
        net.publish(Broadcast(1, 0.01, payload()))


def test_prune_preserves_current_view():
    net = fresh_net(2, latency=PERIOD)
    for k in range(50):
        net.publish(Broadcast(1, k * PERIOD, payload(v=float(k))))
    before = net.snapshot(0, 0.3)
    net.prune(0.3)
    assert net.snapshot(0, 0.3) == before
    assert net.snapshot(0, 0.5)[1].v_pol == 49.0  # in-flight kept
    net.disconnect(1, 0.5)
    net.prune(0.52)
    assert net.snapshot(0, 0.52) == {}
