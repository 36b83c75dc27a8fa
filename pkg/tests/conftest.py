import math

import numpy as np
import pytest

from proxsim import core, simulator
from proxsim.core import SEC


def build_mesh(n, seed, duration_s=600, preset="2s", spacing=3.0,
               converged=True, record_rssi=True):
    """All-in-range static grid of n tags; converged=True pre-assigns
    distinct indexes."""
    nodes = []
    for i in range(n):
        nodes.append(
            simulator.NodeSpec(
                address=1 + i,
                waypoints=[(0, spacing * (i % 4), spacing * (i // 4))],
                init_index=i if converged else 0,
            )
        )
    return simulator.Scenario(
        duration=duration_s * SEC,
        seed=seed,
        protocol=core.preset(preset),
        phy=simulator.PhyConfig(),
        nodes=nodes,
        record_rssi=record_rssi,
    )


def random_connected_topology(rng, n, radio_range=25.0):
    """Random node placement whose radio-range graph is connected."""
    while True:
        side = float(rng.uniform(15.0, 60.0))
        pts = [(float(rng.uniform(0, side)), float(rng.uniform(0, side)))
               for _ in range(n)]
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                if math.dist(pts[i], pts[j]) <= radio_range:
                    parent[find(i)] = find(j)
        if len({find(i) for i in range(n)}) == 1:
            return pts


def exchange_outcome(stats):
    """(success_rate, scheduled_count) with busy skips and cancellations
    counted against the rate."""
    fails = (stats["fail_collision"] + stats["fail_no_responder"]
             + stats["fail_out_of_range"])
    scheduled = (stats["successes"] + fails + stats["skipped_busy"]
                 + stats["cancelled"])
    if scheduled == 0:
        return 1.0, 0
    return stats["successes"] / scheduled, scheduled


@pytest.fixture
def mesh_scenario():
    return build_mesh
