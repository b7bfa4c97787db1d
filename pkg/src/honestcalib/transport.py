"""Exact Word Mover's Distance on small token bags.

Two independent exact solvers for the balanced transportation problem live
here: a transportation simplex (u-v / MODI method on a spanning-tree basis)
used in production, and a successive-shortest-paths min-cost-flow solver
kept as a cross-check.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

MAX_BAG_TOKENS = 64
WEIGHT_TOLERANCE = 1e-9
_REDUCED_COST_EPS = 1e-12
_FLOW_EPS = 1e-15


class TransportError(ValueError):
    pass


@dataclass(frozen=True)
class TokenBag:
    tokens: tuple[str, ...]
    weights: np.ndarray
    embeddings: np.ndarray  # (n_tokens, d_tok)

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise TransportError("empty token bag")
        if len(set(self.tokens)) != len(self.tokens):
            raise TransportError("token bag has unmerged duplicates")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.tokens):
            raise TransportError("one embedding row per token required")
        if np.any(self.weights <= 0):
            raise TransportError("token weights must be positive")
        if abs(float(self.weights.sum()) - 1.0) > WEIGHT_TOLERANCE:
            raise TransportError("token weights must sum to 1")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], embeddings: Mapping[str, Sequence[float]]) -> "TokenBag":
        """Uniform 1/n weight per occurrence; repeated tokens are merged."""
        if len(tokens) == 0:
            raise TransportError("empty token sequence")
        order: list[str] = []
        counts: dict[str, int] = {}
        for tok in tokens:
            if tok not in embeddings:
                raise TransportError(f"missing embedding for token {tok!r}")
            if tok not in counts:
                order.append(tok)
                counts[tok] = 0
            counts[tok] += 1
        n = len(tokens)
        weights = np.array([counts[t] / n for t in order])
        emb = np.array([np.asarray(embeddings[t], dtype=np.float64) for t in order])
        return cls(tuple(order), weights, emb)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TransportPlan:
    flows: np.ndarray
    cost: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "flow"])
            for i, j in zip(*np.nonzero(self.flows)):
                writer.writerow([int(i), int(j), repr(float(self.flows[i, j]))])


def ground_distances(a: TokenBag, b: TokenBag) -> np.ndarray:
    if a.embeddings.shape[1] != b.embeddings.shape[1]:
        raise TransportError(
            f"embedding dimension mismatch: {a.embeddings.shape[1]} vs {b.embeddings.shape[1]}"
        )
    diff = a.embeddings[:, None, :] - b.embeddings[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_sizes(a: TokenBag, b: TokenBag) -> None:
    if len(a) > MAX_BAG_TOKENS or len(b) > MAX_BAG_TOKENS:
        raise TransportError(f"instance too large (more than {MAX_BAG_TOKENS} merged tokens)")


def solve_emd(a: TokenBag, b: TokenBag) -> TransportPlan:
    _check_sizes(a, b)
    cost = ground_distances(a, b)
    flows = transportation_simplex(a.weights, b.weights, cost)
    return TransportPlan(flows, float(np.sum(flows * cost)))


def wmd(pred_tokens: Sequence[str], gold_tokens: Sequence[str], token_embeddings) -> float:
    a = TokenBag.from_tokens(pred_tokens, token_embeddings)
    b = TokenBag.from_tokens(gold_tokens, token_embeddings)
    return solve_emd(a, b).cost


# -- transportation simplex ---------------------------------------------


def _northwest_corner(supply: np.ndarray, demand: np.ndarray):
    """Initial basic feasible solution with exactly m + n - 1 basic cells."""
    m, n = len(supply), len(demand)
    s, d = supply.copy(), demand.copy()
    flows = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(s[i], d[j])
        if i == m - 1 and j == n - 1:
            q = max(s[i], d[j], 0.0)  # absorbs float residue of unequal totals
        flows[i, j] = max(q, 0.0)
        basis.append((i, j))
        s[i] -= q
        d[j] -= q
        if i == m - 1 and j == n - 1:
            break
        # on a tie move down only, so the next cell is a degenerate zero
        if j == n - 1 or (i < m - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1
    return flows, basis


def _duals(m: int, n: int, basis, cost: np.ndarray):
    """Solve u_i + v_j = c_ij over the basis tree, rooted at u_0 = 0."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append((m + j, cost[i, j]))
        adj[m + j].append((i, cost[i, j]))
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other, c in adj[node]:
            if np.isnan(pot[other]):
                pot[other] = c - pot[node]
                queue.append(other)
    if np.isnan(pot).any():
        raise TransportError("basis is not a spanning tree")
    return pot[:m], pot[m:]


def _tree_path(m: int, basis, src: int, dst: int) -> list[int]:
    """Node path from src to dst in the basis tree (rows 0..m-1, cols m..)."""
    adj: dict[int, list[int]] = {}
    for i, j in basis:
        adj.setdefault(i, []).append(m + j)
        adj.setdefault(m + j, []).append(i)
    parent = {src: src}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        if node == dst:
            break
        for nxt in sorted(adj.get(node, ())):
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    return path[::-1]


def transportation_simplex(supply, demand, cost, max_iter: int = 100_000) -> np.ndarray:
    """Optimal flow matrix for a balanced transportation problem.

    Pricing is Dantzig (most negative reduced cost); ties on entering and
    leaving cells go to the lexicographically smallest (row, col). After a
    run of degenerate pivots the entering rule switches to Bland's, which
    rules out cycling.
    """
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = len(supply), len(demand)
    if cost.shape != (m, n):
        raise TransportError("cost matrix shape does not match supply/demand")
    flows, basis = _northwest_corner(supply, demand)
    in_basis = np.zeros((m, n), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    degenerate_run = 0
    for _ in range(max_iter):
        u, v = _duals(m, n, basis, cost)
        reduced = cost - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        if degenerate_run > m * n:
            candidates = np.argwhere(reduced < -_REDUCED_COST_EPS)
            if len(candidates) == 0:
                return flows
            ei, ej = (int(x) for x in candidates[0])
        else:
            best = reduced.min()
            if best >= -_REDUCED_COST_EPS:
                return flows
            # argwhere is row-major, so [0] is the lexicographic minimum
            ei, ej = (int(x) for x in np.argwhere(reduced == best)[0])

        # cycle: entering cell (+), then alternate along the tree path col ej -> row ei
        path = _tree_path(m, basis, m + ej, ei)
        cycle = [(ei, ej)]
        for k in range(len(path) - 1):
            a, b = path[k], path[k + 1]
            cycle.append((b, a - m) if a >= m else (a, b - m))
        minus = cycle[1::2]
        theta = min(flows[c] for c in minus)
        leaving = min(c for c in minus if flows[c] == theta)
        degenerate_run = degenerate_run + 1 if theta <= _FLOW_EPS else 0

        for k, c in enumerate(cycle):
            flows[c] += theta if k % 2 == 0 else -theta
        for c in minus:
            if flows[c] < 0.0:
                flows[c] = 0.0
        flows[leaving] = 0.0
        basis.remove(leaving)
        in_basis[leaving] = False
        basis.append((ei, ej))
        in_basis[ei, ej] = True
    raise TransportError("transportation simplex did not converge")


# -- successive shortest paths ------------------------------------------


def min_cost_flow_emd(supply, demand, cost) -> tuple[np.ndarray, float]:
    """Exact transport cost by successive shortest augmenting paths.

    Network: source -> row i (cap supply_i), row i -> col j (uncapacitated,
    cost c_ij), col j -> sink (cap demand_j). Shortest paths come from
    Bellman-Ford on the residual graph, so reverse arcs with negative cost
    are handled without potentials.
    """
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = len(supply), len(demand)
    src, sink = m + n, m + n + 1
    n_nodes = m + n + 2
    total = min(supply.sum(), demand.sum())

    # arc arrays: to, cap, cost, rev index
    to: list[int] = []
    cap: list[float] = []
    arc_cost: list[float] = []
    out: list[list[int]] = [[] for _ in range(n_nodes)]

    def add_arc(u: int, w: int, c: float, w_cost: float) -> int:
        idx = len(to)
        to.extend((w, u))
        cap.extend((c, 0.0))
        arc_cost.extend((w_cost, -w_cost))
        out[u].append(idx)
        out[w].append(idx + 1)
        return idx

    for i in range(m):
        add_arc(src, i, supply[i], 0.0)
    middle = {}
    for i in range(m):
        for j in range(n):
            middle[i, j] = add_arc(i, m + j, np.inf, cost[i, j])
    for j in range(n):
        add_arc(m + j, sink, demand[j], 0.0)

    sent = 0.0
    while total - sent > 1e-13:
        dist = np.full(n_nodes, np.inf)
        via = np.full(n_nodes, -1)
        dist[src] = 0.0
        for _ in range(n_nodes - 1):
            changed = False
            for u in range(n_nodes):
                if dist[u] == np.inf:
                    continue
                for a in out[u]:
                    if cap[a] > _FLOW_EPS and dist[u] + arc_cost[a] < dist[to[a]] - 1e-15:
                        dist[to[a]] = dist[u] + arc_cost[a]
                        via[to[a]] = a
                        changed = True
            if not changed:
                break
        if dist[sink] == np.inf:
            break
        push = total - sent
        node = sink
        while node != src:
            a = via[node]
            push = min(push, cap[a])
            node = to[a ^ 1]
        node = sink
        while node != src:
            a = via[node]
            cap[a] -= push
            cap[a ^ 1] += push
            node = to[a ^ 1]
        sent += push

    flows = np.zeros((m, n))
    for (i, j), a in middle.items():
        flows[i, j] = cap[a ^ 1]
    return flows, float(np.sum(flows * cost))
