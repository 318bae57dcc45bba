"""Generator tours: nearest-neighbour start, 3-opt improvement, path extraction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .geodesic import GeneratorGraph, polyline_length

logger = logging.getLogger(__name__)

MAX_PASSES = 1000
RESTARTS = 8  # nearest-neighbour starts; a single 3-opt optimum can sit >10% above optimal


class TourError(Exception):
    pass


class IncompleteGraph(TourError):
    pass


class MissingEdgePath(TourError):
    pass


@dataclass
class CoveragePath:
    order: np.ndarray
    total_cost: float
    polyline: np.ndarray
    closed: bool = True

    @property
    def m(self) -> int:
        return len(self.order)

    def open_path(self, graph: GeneratorGraph) -> "CoveragePath":
        """The closed tour with its longest edge removed."""
        return open_path(self.order, graph)

    def to_dict(self) -> dict:
        return {
            "order": [int(i) for i in self.order],
            "totalCost": float(self.total_cost),
            "closed": bool(self.closed),
            "polyline": [[float(x) for x in p] for p in self.polyline],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoveragePath":
        return cls(
            order=np.asarray(d["order"], dtype=np.int64),
            total_cost=float(d["totalCost"]),
            polyline=np.asarray(d["polyline"], dtype=float).reshape(-1, 3),
            closed=bool(d.get("closed", True)),
        )

    def save_json(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh)
            fh.write("\n")

    def save_obj(self, path) -> None:
        """Polyline as OBJ line elements, for viewing next to the mesh."""
        with open(path, "w") as fh:
            for p in self.polyline:
                fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            for a in range(1, len(self.polyline)):
                fh.write(f"l {a} {a + 1}\n")


def tour_cost(order, cost: np.ndarray, closed: bool = True) -> float:
    order = np.asarray(order)
    if len(order) < 2:
        return 0.0
    total = float(cost[order[:-1], order[1:]].sum())
    if closed:
        total += float(cost[order[-1], order[0]])
    return total


def nearest_neighbor_tour(cost: np.ndarray, start: int = 0) -> np.ndarray:
    n = len(cost)
    seen = np.zeros(n, dtype=bool)
    order = [start]
    seen[start] = True
    for _ in range(n - 1):
        row = np.where(seen, np.inf, cost[order[-1]])
        nxt = int(np.argmin(row))
        order.append(nxt)
        seen[nxt] = True
    return np.array(order, dtype=np.int64)


def _reconnect(tour, i, j, k, case):
    s1 = tour[i + 1:j + 1]
    s2 = tour[j + 1:k + 1]
    mid = {
        0: (s1[::-1], s2),
        1: (s1, s2[::-1]),
        2: (s2[::-1], s1[::-1]),
        3: (s1[::-1], s2[::-1]),
        4: (s2[::-1], s1),
        5: (s2, s1[::-1]),
        6: (s2, s1),
    }[case]
    return np.concatenate([tour[:i + 1], *mid, tour[k + 1:]])


def _first_improvement(tour, cost, eps):
    """First improving 3-opt move in (i, j, k, case) scan order, or None."""
    n = len(tour)
    nxt = np.roll(tour, -1)
    for i in range(n - 2):
        a, b = tour[i], tour[i + 1]
        dab = cost[a, b]
        for j in range(i + 1, n - 1):
            c, d = tour[j], tour[j + 1]
            dcd = cost[c, d]
            ks = np.arange(j + 1, n)
            e, f = tour[ks], nxt[ks]
            def_ = cost[e, f]
            old2a = dab + dcd
            old3 = dab + dcd + def_
            gains = np.stack([
                old2a - (cost[a, c] + cost[b, d]) + np.zeros_like(def_),
                dcd + def_ - (cost[c, e] + cost[d, f]),
                dab + def_ - (cost[a, e] + cost[b, f]),
                old3 - (cost[a, c] + cost[b, e] + cost[d, f]),
                old3 - (cost[a, e] + cost[d, b] + cost[c, f]),
                old3 - (cost[a, d] + cost[e, c] + cost[b, f]),
                old3 - (cost[a, d] + cost[e, b] + cost[c, f]),
            ], axis=1)
            hit = np.argwhere(gains > eps)
            if len(hit):
                kk, case = hit[0]
                return int(i), int(j), int(ks[kk]), int(case), float(gains[kk, case])
    return None


def three_opt(cost: np.ndarray, tour, max_passes: int = MAX_PASSES):
    """Improve ``tour`` with 3-opt moves until none helps (first improvement).

    Returns ``(tour, cost, moves)``.
    """
    cost = np.asarray(cost, dtype=float)
    tour = np.asarray(tour, dtype=np.int64).copy()
    n = len(tour)
    current = tour_cost(tour, cost)
    if n < 4:
        return tour, current, 0
    finite = cost[np.isfinite(cost)]
    eps = 1e-12 * max(float(finite.max()) if len(finite) else 1.0, 1.0)
    moves = 0
    for _ in range(max_passes):
        move = _first_improvement(tour, cost, eps)
        if move is None:
            break
        i, j, k, case, gain = move
        cand = _reconnect(tour, i, j, k, case)
        new = tour_cost(cand, cost)
        if not new < current:
            break  # rounding made the move worthless; treat as converged
        tour, current = cand, new
        moves += 1
    else:
        logger.warning("3-opt stopped at the pass cap (%d)", max_passes)
    return tour, current, moves


def _check_complete(graph: GeneratorGraph) -> np.ndarray:
    if not graph.is_complete():
        raise IncompleteGraph(f"{len(graph.edges)} of {graph.m * (graph.m - 1) // 2} generator pairs present")
    return graph.cost_matrix()


def three_opt_tour(graph: GeneratorGraph, seed: int = 0) -> CoveragePath:
    """Closed tour through every generator: 3-opt from up to ``RESTARTS``
    nearest-neighbour starts (the first at generator ``seed % m``), best kept."""
    m = graph.m
    if m == 0:
        raise IncompleteGraph("graph has no nodes")
    cost = _check_complete(graph)
    order, total = _multi_start(cost, seed)
    return extract_coverage_path(order, graph)


def solve_cost_matrix(cost: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Same heuristic on a bare symmetric cost matrix."""
    return _multi_start(np.asarray(cost, dtype=float), seed)


def _multi_start(cost: np.ndarray, seed: int, restarts: int = RESTARTS):
    """Best 3-opt local optimum over nearest-neighbour starts.

    The first start is node ``seed % n``; further starts are the next nodes of
    that first tour, so the result does not depend on node labels.
    """
    first = nearest_neighbor_tour(cost, int(seed) % len(cost))
    best = None
    for s in first[:restarts]:
        start = first if s == first[0] else nearest_neighbor_tour(cost, int(s))
        order, total, moves = three_opt(cost, start)
        logger.info("3-opt from %d: %d moves, %.6g -> %.6g", s, moves, tour_cost(start, cost), total)
        if best is None or total < best[1]:
            best = (order, total)
    return best


def extract_coverage_path(order, graph: GeneratorGraph, closed: bool = True) -> CoveragePath:
    """Concatenate the stored edge polylines along ``order``.

    Joints are kept as they are stored (each edge contributes all its
    points), so consecutive pieces share a duplicated endpoint.
    """
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(graph.m)):
        raise TourError("order is not a permutation of the generators")
    hops = list(zip(order[:-1], order[1:]))
    if closed and len(order) > 1:
        hops.append((order[-1], order[0]))
    pieces, total = [], 0.0
    for a, b in hops:
        if not graph.has(int(a), int(b)):
            raise MissingEdgePath(f"no stored path between generators {a} and {b}")
        p = graph.path(int(a), int(b))
        if pieces and np.linalg.norm(pieces[-1][-1] - p[0]) > 1e-9:
            raise MissingEdgePath(f"path {a}->{b} does not start where the previous one ended")
        pieces.append(p)
        total += graph.cost(int(a), int(b))
    poly = np.concatenate(pieces) if pieces else graph.nodes[order].copy()
    return CoveragePath(order=order, total_cost=total, polyline=poly, closed=closed)


def open_path(order, graph: GeneratorGraph) -> CoveragePath:
    """Best open path from a closed tour: drop its most expensive edge."""
    order = np.asarray(order, dtype=np.int64)
    n = len(order)
    if n < 2:
        return extract_coverage_path(order, graph, closed=False)
    costs = [graph.cost(int(order[k]), int(order[(k + 1) % n])) for k in range(n)]
    cut = int(np.argmax(costs))
    rotated = np.roll(order, -(cut + 1))
    return extract_coverage_path(rotated, graph, closed=False)


def polyline_matches_cost(path: CoveragePath, rtol: float = 1e-6) -> bool:
    length = polyline_length(path.polyline)
    return abs(length - path.total_cost) <= rtol * max(path.total_cost, 1e-300)
