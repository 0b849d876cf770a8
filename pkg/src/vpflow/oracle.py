"""Exhaustive reference solver for tiny volume-constrained step problems.

Enumerates every set of exactly ``m`` free cells (the interior of the grid,
as for the cut solver) and evaluates the energy with a batched perimeter
written directly from the stencil, independent of the cut graph.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .grid import DistanceField, GridSet, stencil
from .step import TIE_RTOL, linear_energy

MAX_FREE_CELLS = 20
_BATCH = 4096


class OracleTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    set: GridSet
    energy: float
    n_candidates: int
    n_ties: int


def _batch_perimeter(masks: np.ndarray, spacing: float) -> np.ndarray:
    """Perimeter of each mask in a batch ``(B, *dims)``."""
    nd = masks.ndim - 1
    offsets, weights = stencil(nd)
    pad = int(np.abs(offsets).max())
    m = np.pad(masks, [(0, 0)] + [(pad, pad)] * nd)
    inner = tuple(slice(pad, -pad) for _ in range(nd))
    total = np.zeros(masks.shape[0])
    for off, w in zip(offsets, weights):
        # count each stencil pair once from each end: set->outside both ways
        for sgn in (1, -1):
            sl = tuple(slice(pad + sgn * o, m.shape[k + 1] - pad + sgn * o) for k, o in enumerate(off))
            a = m[(slice(None),) + inner]
            b = m[(slice(None),) + sl]
            total += w * np.count_nonzero((a & ~b).reshape(masks.shape[0], -1), axis=1)
    return total * spacing ** (nd - 1)


def free_cells(geometry) -> np.ndarray:
    interior = np.zeros(geometry.dims, dtype=bool)
    interior[tuple(slice(1, -1) for _ in geometry.dims)] = True
    return np.flatnonzero(interior)


def exhaustive_minimize(d: DistanceField, h: float, m_cells: int) -> OracleResult:
    """Exact minimiser of ``P(F) + sum_F d s**N / h`` over ``|F| = m_cells`` free cells.

    Among sets within the solver's relative tie tolerance of the optimum the
    lexicographically smallest sorted index tuple wins.
    """
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    geom = d.geometry
    free = free_cells(geom)
    n = free.size
    if n > MAX_FREE_CELLS:
        raise OracleTooLargeError(f"{n} free cells exceed the oracle limit of {MAX_FREE_CELLS}")
    if not 0 <= m_cells <= n:
        raise ValueError(f"m_cells must lie in [0, {n}]")
    if m_cells == 0:
        empty = GridSet(geom, np.zeros(geom.dims, dtype=bool))
        return OracleResult(empty, 0.0, 1, 1)
    dv = d.values.reshape(-1)[free] * geom.cell_volume / h
    size = int(np.prod(geom.dims))
    combos = itertools.combinations(range(n), m_cells)
    energies = []
    chunks = []
    while True:
        block = np.array(list(itertools.islice(combos, _BATCH)), dtype=np.int64)
        if block.size == 0:
            break
        flat = np.zeros((block.shape[0], size), dtype=bool)
        flat[np.arange(block.shape[0])[:, None], free[block]] = True
        per = _batch_perimeter(flat.reshape((-1,) + geom.dims), geom.spacing)
        energies.append(per + dv[block].sum(axis=1))
        chunks.append(block)
    energy = np.concatenate(energies)
    blocks = np.concatenate(chunks)
    # batch sums round differently from linear_energy; re-score near-optimal sets
    e_min = float(energy.min())
    slack = 1e-9 * max(1.0, abs(e_min))
    near = np.flatnonzero(energy <= e_min + slack)
    exact = []
    for k in near:
        mask = np.zeros(size, dtype=bool)
        mask[free[blocks[k]]] = True
        F = GridSet(geom, mask.reshape(geom.dims))
        exact.append((linear_energy(F, d, h), k, F))
    best_e = min(e for e, _, _ in exact)
    tol = TIE_RTOL * max(1.0, abs(best_e))
    ties = [(k, e, F) for e, k, F in exact if e <= best_e + tol]
    # combinations() enumerates in lexicographic order, so the first tie wins
    k, e, F = min(ties, key=lambda t: t[0])
    return OracleResult(F, e, math.comb(n, m_cells), len(ties))
