"""Exact s-t minimum cut on sparse graphs (Boykov-Kolmogorov augmenting trees).

The graph is stored as paired arcs: arc ``2e`` and ``2e + 1`` are the two
directions of undirected edge ``e`` and each is the other's sister. Terminal
links are folded into a single signed residual per node: positive values are
residual capacity from the source, negative values residual capacity to the
sink.

The solver is deterministic: node activation is FIFO in node order and arcs
are scanned in insertion order, so identical inputs always produce the same
trees and the same cut.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NONE = -1
TERMINAL = -2
ORPHAN = -3


@njit(cache=True)
def _find_origin_dist(j, parent, head, ts, dist, time):
    # distance from j to a terminal through parent links, or -1 if the chain
    # ends in an orphan / free node
    d = 0
    k = j
    while True:
        if ts[k] == time:
            d += dist[k]
            break
        a = parent[k]
        d += 1
        if a == TERMINAL:
            ts[k] = time
            dist[k] = 1
            break
        if a < 0:
            return -1
        k = head[a]
    # stamp the chain so later searches stop early
    k = j
    while ts[k] != time:
        ts[k] = time
        dist[k] = d
        d -= 1
        k = head[parent[k]]
    return 0


@njit(cache=True)
def _bk_maxflow(first, nxt, head, rcap, tr):
    n = first.shape[0]
    parent = np.full(n, NONE, dtype=np.int64)
    is_sink = np.zeros(n, dtype=np.bool_)
    ts = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n, dtype=np.int64)

    # FIFO of active nodes as a ring buffer; in_queue guards duplicates
    qcap = n + 1
    queue = np.empty(qcap, dtype=np.int64)
    in_queue = np.zeros(n, dtype=np.bool_)
    qhead = 0
    qtail = 0

    orphans = np.empty(n + 1, dtype=np.int64)
    ohead = 0
    otail = 0

    for i in range(n):
        if tr[i] > 0.0:
            parent[i] = TERMINAL
            dist[i] = 1
            queue[qtail] = i
            qtail = (qtail + 1) % qcap
            in_queue[i] = True
        elif tr[i] < 0.0:
            parent[i] = TERMINAL
            is_sink[i] = True
            dist[i] = 1
            queue[qtail] = i
            qtail = (qtail + 1) % qcap
            in_queue[i] = True

    flow = 0.0
    time = 0
    current = -1

    while True:
        i = current
        current = -1
        if i < 0:
            while qhead != qtail:
                cand = queue[qhead]
                qhead = (qhead + 1) % qcap
                in_queue[cand] = False
                if parent[cand] != NONE:
                    i = cand
                    break
            if i < 0:
                break
        elif parent[i] == NONE:
            continue

        # growth
        mid = -1
        if not is_sink[i]:
            a = first[i]
            while a >= 0:
                if rcap[a] > 0.0:
                    j = head[a]
                    if parent[j] == NONE:
                        is_sink[j] = False
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_queue[j]:
                            queue[qtail] = j
                            qtail = (qtail + 1) % qcap
                            in_queue[j] = True
                    elif is_sink[j]:
                        mid = a
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                a = nxt[a]
        else:
            a = first[i]
            while a >= 0:
                if rcap[a ^ 1] > 0.0:
                    j = head[a]
                    if parent[j] == NONE:
                        is_sink[j] = True
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_queue[j]:
                            queue[qtail] = j
                            qtail = (qtail + 1) % qcap
                            in_queue[j] = True
                    elif not is_sink[j]:
                        mid = a ^ 1
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                a = nxt[a]

        time += 1

        if mid < 0:
            continue

        # keep processing the same node next round
        current = i

        # bottleneck along source half, middle arc, sink half
        u = head[mid ^ 1]
        v = head[mid]
        bott = rcap[mid]
        k = u
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            if rcap[a ^ 1] < bott:
                bott = rcap[a ^ 1]
            k = head[a]
        if tr[k] < bott:
            bott = tr[k]
        k = v
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            if rcap[a] < bott:
                bott = rcap[a]
            k = head[a]
        if -tr[k] < bott:
            bott = -tr[k]

        # augment
        rcap[mid] -= bott
        rcap[mid ^ 1] += bott
        k = u
        while True:
            a = parent[k]
            if a == TERMINAL:
                tr[k] -= bott
                if tr[k] <= 0.0:
                    tr[k] = 0.0
                    parent[k] = ORPHAN
                    orphans[otail] = k
                    otail = (otail + 1) % (n + 1)
                break
            rcap[a] += bott
            rcap[a ^ 1] -= bott
            nk = head[a]
            if rcap[a ^ 1] <= 0.0:
                rcap[a ^ 1] = 0.0
                parent[k] = ORPHAN
                orphans[otail] = k
                otail = (otail + 1) % (n + 1)
            k = nk
        k = v
        while True:
            a = parent[k]
            if a == TERMINAL:
                tr[k] += bott
                if tr[k] >= 0.0:
                    tr[k] = 0.0
                    parent[k] = ORPHAN
                    orphans[otail] = k
                    otail = (otail + 1) % (n + 1)
                break
            rcap[a ^ 1] += bott
            rcap[a] -= bott
            nk = head[a]
            if rcap[a] <= 0.0:
                rcap[a] = 0.0
                parent[k] = ORPHAN
                orphans[otail] = k
                otail = (otail + 1) % (n + 1)
            k = nk
        flow += bott

        # adoption
        while ohead != otail:
            o = orphans[ohead]
            ohead = (ohead + 1) % (n + 1)
            sink_side = is_sink[o]
            best = -1
            best_d = 1 << 60
            a = first[o]
            while a >= 0:
                if sink_side:
                    ok = rcap[a] > 0.0
                else:
                    ok = rcap[a ^ 1] > 0.0
                if ok:
                    j = head[a]
                    if is_sink[j] == sink_side and parent[j] != NONE:
                        if _find_origin_dist(j, parent, head, ts, dist, time) == 0:
                            if dist[j] < best_d:
                                best_d = dist[j]
                                best = a
                a = nxt[a]
            if best >= 0:
                parent[o] = best
                ts[o] = time
                dist[o] = best_d + 1
                continue
            # no valid parent: o becomes free
            a = first[o]
            while a >= 0:
                j = head[a]
                if is_sink[j] == sink_side and parent[j] != NONE:
                    if sink_side:
                        ok = rcap[a] > 0.0
                    else:
                        ok = rcap[a ^ 1] > 0.0
                    if ok and not in_queue[j]:
                        queue[qtail] = j
                        qtail = (qtail + 1) % qcap
                        in_queue[j] = True
                    pa = parent[j]
                    if pa >= 0 and head[pa] == o:
                        parent[j] = ORPHAN
                        orphans[otail] = j
                        otail = (otail + 1) % (n + 1)
                a = nxt[a]
            parent[o] = NONE

    labels = np.zeros(n, dtype=np.int8)
    for i in range(n):
        if parent[i] != NONE:
            labels[i] = -1 if is_sink[i] else 1
    return flow, labels


class GridGraph:
    """Fixed topology with per-edge capacities; terminal costs vary per solve.

    Parameters
    ----------
    n_nodes : int
    edges_u, edges_v : int arrays
        Endpoints of undirected edges.
    weights : float array
        Symmetric capacities, must be non-negative.
    """

    def __init__(self, n_nodes: int, edges_u, edges_v, weights):
        edges_u = np.asarray(edges_u, dtype=np.int64)
        edges_v = np.asarray(edges_v, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0):
            raise ValueError("edge capacities must be non-negative")
        m = edges_u.shape[0]
        self.n_nodes = int(n_nodes)
        head = np.empty(2 * m, dtype=np.int64)
        head[0::2] = edges_v
        head[1::2] = edges_u
        tail = np.empty(2 * m, dtype=np.int64)
        tail[0::2] = edges_u
        tail[1::2] = edges_v
        cap = np.repeat(weights, 2)
        # adjacency lists in arc order: first[i] is the lowest-numbered arc
        order = np.lexsort((np.arange(2 * m), tail))
        first = np.full(self.n_nodes, -1, dtype=np.int64)
        nxt = np.full(2 * m, -1, dtype=np.int64)
        if m:
            nxt[order[:-1]] = np.where(tail[order[1:]] == tail[order[:-1]], order[1:], -1)
            starts = np.ones(2 * m, dtype=bool)
            starts[1:] = tail[order[1:]] != tail[order[:-1]]
            first[tail[order[starts]]] = order[starts]
        self.head = head
        self.first = first
        self.nxt = nxt
        self.cap = cap

    def min_cut(self, unary: np.ndarray):
        """Minimise ``sum_{i in S} unary[i] + cut(S)`` over node subsets ``S``.

        Returns ``(flow, labels)`` where ``labels`` is +1 on the source tree
        (the smallest minimiser), -1 on the sink tree and 0 on free nodes.
        Infinite unary values pin nodes in (``-inf``) or out (``+inf``).
        """
        unary = np.asarray(unary, dtype=np.float64)
        if unary.shape != (self.n_nodes,):
            raise ValueError("unary cost has wrong length")
        if np.any(np.isnan(unary)):
            raise ValueError("unary cost contains NaN")
        tr = -unary.copy()
        rcap = self.cap.copy()
        return _bk_maxflow(self.first, self.nxt, self.head, rcap, tr)

    def minimal_minimizer(self, unary: np.ndarray) -> np.ndarray:
        _, labels = self.min_cut(unary)
        return labels == 1

    def extreme_minimizers(self, unary: np.ndarray):
        """Smallest and largest minimisers from one max-flow."""
        _, labels = self.min_cut(unary)
        return labels == 1, labels != -1


class CutSession:
    """Repeated minimum cuts on one graph, reusing the residual network.

    Changing a node's unary cost is done by adding capacity to one of its
    terminal links, which keeps the previous flow feasible; each solve then
    only pushes the extra flow. Nodes pinned with an infinite cost stay
    pinned for the life of the session.
    """

    def __init__(self, graph: GridGraph):
        self.graph = graph
        self.rcap = graph.cap.copy()
        self.tr = np.zeros(graph.n_nodes)
        self.unary = np.zeros(graph.n_nodes)

    def copy(self) -> "CutSession":
        other = CutSession.__new__(CutSession)
        other.graph = self.graph
        other.rcap = self.rcap.copy()
        other.tr = self.tr.copy()
        other.unary = self.unary.copy()
        return other

    def min_cut(self, unary: np.ndarray) -> np.ndarray:
        """Labels as in :meth:`GridGraph.min_cut` (flow value is not tracked)."""
        unary = np.asarray(unary, dtype=np.float64)
        if unary.shape != self.unary.shape:
            raise ValueError("unary cost has wrong length")
        if np.any(np.isnan(unary)):
            raise ValueError("unary cost contains NaN")
        old_inf = np.isinf(self.unary)
        new_inf = np.isinf(unary)
        if np.any(old_inf & (unary != self.unary)):
            raise ValueError("a pinned node cannot be released within a session")
        fin = ~old_inf & ~new_inf
        self.tr[fin] += self.unary[fin] - unary[fin]
        pin = ~old_inf & new_inf
        self.tr[pin] = -unary[pin]
        self.unary = unary.copy()
        _, labels = _bk_maxflow(self.graph.first, self.graph.nxt, self.graph.head, self.rcap, self.tr)
        return labels

    def extreme_minimizers(self, unary: np.ndarray):
        labels = self.min_cut(unary)
        return labels == 1, labels != -1
