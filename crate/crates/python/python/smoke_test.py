"""Smoke test for the passnet extension module."""

import json
import math
import tempfile

import passnet


def main():
    g = passnet.Graph.cycle(3)
    assert (g.num_vertices, g.num_edges) == (3, 3)
    assert all(abs(sum(row)) < 1e-12 for row in zip(*g.incidence()))

    # Two unit LTI agents on an edge: zeta_ss = 2 a zeta* / (1 + 2 a).
    pair = passnet.Graph.path(2)
    agents = [passnet.Agent.lti(), passnet.Agent.lti()]
    net = passnet.Network(pair, agents, zeta_star=[1.0])
    y = net.steady_state([10.0])
    assert abs((y[0] - y[1]) - 20.0 / 21.0) < 1e-9, y
    dist, grad, direction = net.gradient([10.0])
    assert grad[0] < 0 and sum(d * g for d, g in zip(direction, grad)) < 0

    times, outputs = net.simulate([10.0], dt=1e-3, t_max=20.0)
    assert abs(times[-1] - 20.0) < 1e-9
    assert abs((outputs[-1][0] - outputs[-1][1]) - 20.0 / 21.0) < 1e-6

    gains, distances, halted = net.iterate(0.1)
    assert halted and distances[-1] <= 0.1
    assert all(b < a for a, b in zip(distances, distances[1:]))

    bound = passnet.three_experiment_bound([(0.9947, 0.5203), (-0.9687, -3.1294), (3.4268, 3.5732)], 1.5)
    assert abs(bound - 15.864) < 1e-3, bound
    assert abs(passnet.chain_bound([(k, k) for k in range(5)], 4.0) - 10.0) < 1e-12
    m = passnet.big_m(passnet.Graph.cycle(30), [0.0] * 30, 0.2, mode="per-edge", gain=2.0)
    assert abs(m - 1.2) < 1e-12

    u_ss, y_ss, converged = passnet.Agent.vehicle(1.0, 0.5).experiment(1.0, 2.0)
    assert converged and abs(y_ss * abs(y_ss) - 0.5 - u_ss) < 1e-4

    try:
        passnet.Network(g, [passnet.Agent.integrator()] * 3, zeta_star=[1.0, 1.0, 1.0])
    except passnet.PassnetError as err:
        assert "not_in_edge_space" in str(err), err
    else:
        raise AssertionError("cycle target accepted")

    with tempfile.TemporaryDirectory() as out:
        passed, summary = passnet.run_scenario("iterate", out, seed=7)
        summary = json.loads(summary)
        assert passed and summary["final_distance"] <= 0.2
        assert math.isfinite(summary["final_a_norm"])

    print("smoke test passed")


if __name__ == "__main__":
    main()
