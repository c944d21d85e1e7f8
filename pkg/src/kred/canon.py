"""Canonical ordering of node-colored, port-labeled graphs.

Iterative partition refinement, followed by individualization/backtracking
over ambiguous color cells.  Among all explored leaf orderings, the one with
the lexicographically least serialization wins, which makes the result a true
canonical form: two graphs receive the same serialization iff they are
isomorphic (respecting node colors and edge port labels).

Nodes are 0..n-1.  An edge is ((i, port_i), (j, port_j), tag); it is reported
to both endpoints.  Colors, ports and tags can be any totally ordered
hashable values (strings in practice).
"""

from __future__ import annotations

Edge = tuple[tuple[int, str], tuple[int, str], str]


def canonical_order(colors: list, edges: list[Edge]) -> list[int]:
    """Return a canonical permutation of the nodes (position -> node index)."""
    n = len(colors)
    adj: list[list[tuple[str, str, str, int]]] = [[] for _ in range(n)]
    for (i, pi), (j, pj), tag in edges:
        adj[i].append((tag, pi, pj, j))
        adj[j].append((tag, pj, pi, i))

    init = _rank([(c,) for c in colors])
    best: list[tuple] | None = None
    best_order: list[int] | None = None

    def serialize(order: list[int]) -> list[tuple]:
        pos = [0] * n
        for p, node in enumerate(order):
            pos[node] = p
        out = []
        for node in order:
            nbrs = sorted((tag, pi, pj, pos[j]) for tag, pi, pj, j in adj[node])
            out.append((colors[node], tuple(nbrs)))
        return out

    def descend(cols: list[int]) -> None:
        nonlocal best, best_order
        cols = _refine(cols, adj)
        cells: dict[int, list[int]] = {}
        for node, c in enumerate(cols):
            cells.setdefault(c, []).append(node)
        target = None
        for c in sorted(cells):
            members = cells[c]
            # isolated same-color nodes are interchangeable: any relative
            # order yields the same serialization, so never branch on them
            if len(members) > 1 and any(adj[v] for v in members):
                target = members
                break
        if target is None:
            order = sorted(range(n), key=lambda v: (cols[v], v))
            ser = serialize(order)
            if best is None or ser < best:
                best, best_order = ser, order
            return
        for node in target:
            branched = [(c, 1) for c in cols]
            branched[node] = (cols[node], 0)
            descend(_rank(branched))

    descend(init)
    assert best_order is not None
    return best_order


def _rank(keys: list) -> list[int]:
    """Map arbitrary sortable keys to dense integers preserving order."""
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


def _refine(cols: list[int], adj) -> list[int]:
    n = len(cols)
    while True:
        sigs = [
            (cols[i], tuple(sorted((tag, pi, pj, cols[j]) for tag, pi, pj, j in adj[i])))
            for i in range(n)
        ]
        new = _rank(sigs)
        if len(set(new)) == len(set(cols)):
            return new
        cols = new
