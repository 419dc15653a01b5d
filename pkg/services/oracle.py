"""Offline optimum: max-flow matching of drop-offs to next-snapshot pickups."""

import logging

import networkx as nx
import numpy as np

from services.grid import GridSpec, PlacementMatrix, neighborhood_bounds
from services.placement import AlgoParams
from utils.exceptions import InputError

logger = logging.getLogger(__name__)

SOURCE = "source"
SINK = "sink"


def _as_counts(matrix, grid: GridSpec, name: str) -> np.ndarray:
    values = np.asarray(matrix)
    if values.shape != grid.shape:
        raise InputError(f"{name} matrix must be {grid.shape}, got {values.shape}")
    if (values < 0).any():
        raise InputError(f"{name} counts must be non-negative")
    return values.astype(np.int64)


def build_flow_network(dropoffs: np.ndarray, pickups: np.ndarray, bounds: np.ndarray) -> nx.DiGraph:
    """source -> drop-off cell (cap D) -> reachable pickup cell -> sink (cap P)."""
    graph = nx.DiGraph()
    graph.add_node(SOURCE)
    graph.add_node(SINK)
    for i, j in np.argwhere(dropoffs > 0):
        i, j = int(i), int(j)
        graph.add_edge(SOURCE, ("d", i, j), capacity=int(dropoffs[i, j]))
        r0, r1, c0, c1 = bounds[i, j]
        for di, dj in np.argwhere(pickups[r0:r1, c0:c1] > 0):
            target = (int(r0 + di), int(c0 + dj))
            # No capacity attribute: unbounded edge
            graph.add_edge(("d", i, j), ("p",) + target)
            if not graph.has_edge(("p",) + target, SINK):
                graph.add_edge(("p",) + target, SINK, capacity=int(pickups[target]))
    return graph


def opt_oracle(dropoffs, future_pickups, params: AlgoParams, grid: GridSpec) -> PlacementMatrix:
    """Placement maximizing Σ min(P_{t+1}, Γ) subject to the radius constraint.

    Vehicles the flow leaves unmatched stay in their own drop-off cell.
    """
    demand = _as_counts(dropoffs, grid, "drop-off")
    supply = _as_counts(future_pickups, grid, "pickup")
    bounds = neighborhood_bounds(grid, params.epsilon_prime)

    graph = build_flow_network(demand, supply, bounds)
    sent = np.zeros(grid.shape, dtype=np.int64)
    moves = []
    if graph.number_of_edges():
        value, flow = nx.maximum_flow(graph, SOURCE, SINK)
        logger.debug(f"Max flow {value} over {graph.number_of_nodes()} nodes")
        for node, out in flow.items():
            if not (isinstance(node, tuple) and node[0] == "d"):
                continue
            _, i, j = node
            for target, units in out.items():
                units = int(round(units))
                if units <= 0:
                    continue
                moves.extend([(i, j, target[1], target[2])] * units)
                sent[i, j] += units

    for i, j in np.argwhere(demand > sent):
        i, j = int(i), int(j)
        moves.extend([(i, j, i, j)] * int(demand[i, j] - sent[i, j]))
    return PlacementMatrix.from_moves(grid.shape, np.asarray(moves, dtype=np.int64).reshape(-1, 4))
