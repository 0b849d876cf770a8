"""One implicit step of volume-preserving curvature flow on a grid.

The step minimises ``P(F) + D(F, E) / h`` over sets ``F`` with ``|F| = m``.
Because the signed distance is negative inside ``E``, this equals the linear
energy ``P(F) + (1/h) * sum_F d_E * s**N`` up to a constant, which is what the
graph solver minimises.

Solution strategy:

1. Lagrangian relaxation: for a multiplier ``lam`` the unconstrained problem
   with cell cost ``(d/h - lam) * s**N`` is an exact minimum cut. Its minimal
   solutions are nested and grow with ``lam``.
2. Multiplier search: the bracket ``[lo, hi]`` is narrowed by trying the
   multiplier at which the two bracketing solutions have equal energy, which
   is exactly where the next breakpoint sits. The bracket midpoint is used
   whenever that point is not strictly inside.
3. If the search stops with ``|F_lo| < m < |F_hi|`` at a single multiplier,
   greedy cell additions/removals give feasible candidates and a small
   branch-and-bound over the undecided cells closes the remaining gap.

Free cells are the grid interior; the outer 1-cell rim is always empty.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import (
    DistanceField,
    GeometryMismatchError,
    GridGeometry,
    GridSet,
    NoBoundaryError,
    dissipation,
    perimeter,
    signed_distance,
    stencil,
)
from .maxflow import CutSession, GridGraph

RIM_ABORT_CELLS = 2
# energies closer than this (relative) are treated as ties
TIE_RTOL = 1e-12


class BracketError(RuntimeError):
    """The multiplier bracket does not straddle the target volume."""


class MaxIterationsError(RuntimeError):
    """Multiplier search did not terminate; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class RimContactError(RuntimeError):
    """The set came too close to the edge of the working box."""


class StepWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StepConfig:
    """Parameters of one step.

    ``volume_tolerance`` is in cells. ``refine_work`` caps the effort spent
    by branch-and-bound closing a duality gap, counted as max-flow solves
    times free cells (0 disables it); ``refine_max_cells`` skips refinement
    when more cells than that are undecided at the final multiplier.
    """

    h: float
    target_volume: float
    lambda_bracket: tuple | None = None
    volume_tolerance: int = 0
    max_bisection_iters: int = 200
    tie_break: str = "lexicographic"
    refine_work: int = 500_000
    refine_max_cells: int = 24

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive and finite, got {self.h}")
        if not self.target_volume >= 0:
            raise ValueError(f"target_volume must be non-negative, got {self.target_volume}")
        if self.lambda_bracket is not None:
            lo, hi = self.lambda_bracket
            if not lo < hi:
                raise ValueError("lambda_bracket needs lo < hi")
        if self.volume_tolerance < 0:
            raise ValueError("volume_tolerance must be >= 0")
        if self.max_bisection_iters < 1:
            raise ValueError("max_bisection_iters must be >= 1")
        if self.tie_break != "lexicographic":
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")
        if self.refine_work < 0 or self.refine_max_cells < 0:
            raise ValueError("refine_work and refine_max_cells must be >= 0")


@dataclass(frozen=True)
class StepResult:
    next: GridSet = field(repr=False)
    lam: float
    perimeter: float
    dissipation: float
    h: float
    volume: float
    bisection_iters: int
    adjustment_cells: int = 0
    epsilon_adj: float = 0.0
    duality_gap: float = 0.0
    exact: bool = True
    residual: float = float("nan")

    @property
    def energy(self) -> float:
        return self.perimeter + self.dissipation / self.h

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "perimeter": self.perimeter,
            "dissipation": self.dissipation,
            "energy": self.energy,
            "volume": self.volume,
            "bisection_iters": self.bisection_iters,
            "adjustment_cells": self.adjustment_cells,
            "epsilon_adj": self.epsilon_adj,
            "duality_gap": self.duality_gap,
            "exact": self.exact,
            "residual": self.residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# energies


def step_energy(F: GridSet, E: GridSet, h: float, d: DistanceField | None = None) -> float:
    """``P(F) + D(F, E) / h``."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if F.geometry != E.geometry:
        raise GeometryMismatchError("sets live on different grids")
    if not E.has_boundary():
        raise NoBoundaryError("E has no boundary")
    return perimeter(F) + dissipation(F, E, d) / h


def linear_energy(F: GridSet, d: DistanceField, h: float) -> float:
    """``P(F) + (1/h) * sum over F of d * s**N``: the energy the cut solver sees."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if F.geometry != d.geometry:
        raise GeometryMismatchError("set and distance field live on different grids")
    return perimeter(F) + float(d.values[F.mask].sum()) * F.geometry.cell_volume / h


# ---------------------------------------------------------------------------
# graph over the free cells of a geometry


class _Problem:
    """Stencil graph on the interior cells plus per-node neighbour tables."""

    def __init__(self, geometry: GridGeometry):
        self.geometry = geometry
        dims = geometry.dims
        nd = geometry.ndim
        offsets, weights = stencil(nd)
        w_phys = weights * geometry.spacing ** (nd - 1)

        interior = np.zeros(dims, dtype=bool)
        interior[tuple(slice(1, -1) for _ in dims)] = True
        self.free_flat = np.flatnonzero(interior)
        self.n = self.free_flat.size
        node_of = np.full(int(np.prod(dims)), -1, dtype=np.int64)
        node_of[self.free_flat] = np.arange(self.n)
        coords = np.stack(np.unravel_index(self.free_flat, dims), axis=1)

        # neighbour table over both directions of every stencil pair
        all_off = np.concatenate([offsets, -offsets])
        self.nbr_w = np.concatenate([w_phys, w_phys])
        nbr = np.full((self.n, all_off.shape[0]), -1, dtype=np.int64)
        for k, off in enumerate(all_off):
            c = coords + off
            ok = np.all((c >= 0) & (c < np.asarray(dims)), axis=1)
            flat = np.full(self.n, -1, dtype=np.int64)
            flat[ok] = np.ravel_multi_index(tuple(c[ok].T), dims)
            nbr[ok, k] = node_of[flat[ok]]
        self.nbr = nbr
        # edges to the rim or beyond the grid are always cut when the node is in
        self.rim_cost = ((nbr < 0) * self.nbr_w).sum(axis=1)
        self.face_cols = np.flatnonzero(np.abs(all_off).sum(axis=1) == 1)
        self.total_weight = float(self.nbr_w.sum())

        us, vs, ws = [], [], []
        for k in range(offsets.shape[0]):
            has = nbr[:, k] >= 0
            us.append(np.flatnonzero(has))
            vs.append(nbr[has, k])
            ws.append(np.full(int(has.sum()), w_phys[k]))
        self.graph = GridGraph(self.n, np.concatenate(us), np.concatenate(vs), np.concatenate(ws))

    # -- node-level helpers -------------------------------------------------

    def to_nodes(self, mask: np.ndarray) -> np.ndarray:
        return mask.reshape(-1)[self.free_flat]

    def to_mask(self, x: np.ndarray) -> np.ndarray:
        flat = np.zeros(int(np.prod(self.geometry.dims)), dtype=bool)
        flat[self.free_flat[x]] = True
        return flat.reshape(self.geometry.dims)

    def cut(self, x: np.ndarray) -> float:
        """Perimeter of a node set (each cut edge seen from its inside end)."""
        idx = np.flatnonzero(x)
        nb = self.nbr[idx]
        outside = np.where(nb >= 0, ~x[np.maximum(nb, 0)], True)
        return float((outside * self.nbr_w).sum())


@lru_cache(maxsize=8)
def _problem(geometry: GridGeometry) -> _Problem:
    return _Problem(geometry)


# ---------------------------------------------------------------------------
# constrained minimisation on nodes


@dataclass
class _Candidate:
    x: np.ndarray
    energy: float

    def key(self):
        return tuple(np.flatnonzero(self.x))


def _better(a: _Candidate, b: _Candidate | None) -> bool:
    """Lower energy wins; near-ties go to the lexicographically smaller set."""
    if b is None:
        return True
    tol = TIE_RTOL * max(1.0, abs(a.energy), abs(b.energy))
    if a.energy < b.energy - tol:
        return True
    if a.energy > b.energy + tol:
        return False
    return a.key() < b.key()


@dataclass
class _Search:
    """Outcome of the multiplier search for one (possibly restricted) problem."""

    lam: float
    lower_bound: float
    iters: int
    exact: _Candidate | None = None
    below: np.ndarray | None = None
    above: np.ndarray | None = None
    session: CutSession | None = None


class _Solver:
    def __init__(self, prob: _Problem, c: np.ndarray, m: int, tol: int, max_iters: int, bracket):
        self.prob = prob
        self.c = c  # per-node cost without the multiplier, rim cost excluded
        self.m = m
        self.tol = tol
        self.max_iters = max_iters
        self.bracket = bracket
        self.vol = prob.geometry.cell_volume
        self.flows = 0

    def energy(self, x: np.ndarray) -> float:
        return self.prob.cut(x) + float(self.c[x].sum())

    def _solve(self, session, lam, fixed_in, fixed_out):
        u = self.c + self.prob.rim_cost - lam * self.vol
        u = np.where(fixed_in, -np.inf, np.where(fixed_out, np.inf, u))
        self.flows += 1
        return session.extreme_minimizers(u)

    def _default_bracket(self):
        if self.bracket is not None:
            return tuple(float(v) for v in self.bracket)
        per_cell = (self.c + self.prob.rim_cost) / self.vol
        # beyond this margin no cut cost can outweigh a cell's linear cost
        margin = 2.0 * self.prob.total_weight / self.vol + 1.0
        return float(per_cell.min()) - margin, float(per_cell.max()) + margin

    def search(self, fixed_in, fixed_out, session: CutSession) -> _Search:
        """Multiplier search; ``session`` is updated in place and returned."""
        m, tol = self.m, self.tol
        solve = lambda lam: self._solve(session, lam, fixed_in, fixed_out)  # noqa: E731
        lo_lam, hi_lam = self._default_bracket()
        lo = hi = None
        best_lb = -math.inf
        iters = 0

        def dual(x, lam):
            return self.energy(x) - lam * self.vol * (int(x.sum()) - m)

        for widen in range(3):
            if self.bracket is None:
                # the default bracket is wide enough that both ends are known:
                # only pinned cells at the bottom, every allowed cell at the top
                xmin_lo = xmax_lo = fixed_in.copy()
                xmin_hi = xmax_hi = ~fixed_out
            else:
                xmin_lo, xmax_lo = solve(lo_lam)
                xmin_hi, xmax_hi = solve(hi_lam)
                iters += 2
            if int(xmin_lo.sum()) <= m + tol and int(xmax_hi.sum()) >= m - tol:
                break
            if widen == 2:
                raise BracketError(
                    f"multiplier bracket [{lo_lam}, {hi_lam}] never straddles {m} cells"
                )
            width = hi_lam - lo_lam
            lo_lam -= width
            hi_lam += width

        best_lb = max(dual(xmin_lo, lo_lam), dual(xmin_hi, hi_lam))
        for lam, xmin, xmax in ((lo_lam, xmin_lo, xmax_lo), (hi_lam, xmin_hi, xmax_hi)):
            for x in (xmin, xmax):
                if abs(int(x.sum()) - m) <= tol:
                    return _Search(lam, best_lb, iters, exact=_Candidate(x, self.energy(x)), session=session)
        lo = (lo_lam, xmax_lo, self.energy(xmax_lo))
        hi = (hi_lam, xmin_hi, self.energy(xmin_hi))

        while True:
            if iters >= self.max_iters:
                raise MaxIterationsError(
                    f"multiplier search exceeded {self.max_iters} solves",
                    best=(lo[0], self.prob.to_mask(lo[1])),
                )
            n_lo, n_hi = int(lo[1].sum()), int(hi[1].sum())
            lam = (hi[2] - lo[2]) / (self.vol * (n_hi - n_lo))
            breakpoint_trial = lo[0] < lam < hi[0]
            if not breakpoint_trial:
                lam = 0.5 * (lo[0] + hi[0])
                if not lo[0] < lam < hi[0]:
                    return _Search(lam, best_lb, iters, below=lo[1], above=hi[1], session=session)
            xmin, xmax = solve(lam)
            iters += 1
            best_lb = max(best_lb, dual(xmin, lam))
            nmin, nmax = int(xmin.sum()), int(xmax.sum())
            for x, nx in ((xmin, nmin), (xmax, nmax)):
                if abs(nx - m) <= tol:
                    return _Search(lam, best_lb, iters, exact=_Candidate(x, self.energy(x)), session=session)
            if nmin < m < nmax:
                return _Search(lam, best_lb, iters, below=xmin, above=xmax, session=session)
            if breakpoint_trial and (nmax == n_lo or nmin == n_hi):
                # rounding placed the trial on one side of the breakpoint
                # without producing a new set: both ends are optimal there
                return _Search(lam, best_lb, iters, below=lo[1], above=hi[1], session=session)
            if nmax < m:
                lo = (lam, xmax, self.energy(xmax))
            else:
                hi = (lam, xmin, self.energy(xmin))

    def greedy(self, x: np.ndarray, lam: float, fixed_in, fixed_out) -> _Candidate | None:
        """Move from ``x`` to volume ``m`` one cheapest frontier cell at a time.

        The frontier is the set of cells face-adjacent to the current
        boundary; the cost of a cell is the full change of the Lagrangian
        energy at ``lam``. Ties go to the lowest cell index.
        """
        prob = self.prob
        x = x.copy()
        n = int(x.sum())
        if n == self.m:
            return _Candidate(x, self.energy(x))
        adding = n < self.m
        nb, w = prob.nbr, prob.nbr_w
        valid = nb >= 0
        nbx = np.where(valid, x[np.maximum(nb, 0)], False)
        # toggle cost of a node that is currently out; negated when in
        gain = self.c + prob.rim_cost - lam * self.vol + (valid * (1.0 - 2.0 * nbx)) @ w
        face = prob.face_cols
        face_in = nbx[:, face].sum(axis=1)
        n_face = face.size
        allowed = ~fixed_out if adding else ~fixed_in
        while n != self.m:
            if adding:
                front = ~x & allowed & (face_in > 0)
                if not front.any():
                    front = ~x & allowed
                cost = np.where(front, gain, np.inf)
            else:
                front = x & allowed & (face_in < n_face)
                if not front.any():
                    front = x & allowed
                cost = np.where(front, -gain, np.inf)
            i = int(np.argmin(cost))
            if not np.isfinite(cost[i]):
                return None
            x[i] = adding
            n += 1 if adding else -1
            row = nb[i]
            ok = row >= 0
            sign = -2.0 if adding else 2.0
            np.add.at(gain, row[ok], sign * w[ok])
            frow = nb[i, face]
            fok = frow >= 0
            np.add.at(face_in, frow[fok], 1 if adding else -1)
        return _Candidate(x, self.energy(x))


def _constrained_min(prob: _Problem, c: np.ndarray, m: int, cfg: StepConfig, start=None):
    """Minimise ``cut(x) + c.x`` subject to ``sum(x) == m`` (within tolerance)."""
    solver = _Solver(prob, c, m, cfg.volume_tolerance, cfg.max_bisection_iters, cfg.lambda_bracket)
    none = np.zeros(prob.n, dtype=bool)
    root = solver.search(none, none, CutSession(prob.graph))
    if root.exact is not None:
        return root.exact, root, 0, True, solver

    best = None
    if start is not None and abs(int(start.sum()) - m) <= cfg.volume_tolerance:
        best = _Candidate(start.copy(), solver.energy(start))
    for x in (root.below, root.above):
        cand = solver.greedy(x, root.lam, none, none)
        if cand is not None and _better(cand, best):
            best = cand

    # depth-first branch-and-bound on undecided cells; every node is bounded
    # by its own Lagrangian dual
    if best.energy <= root.lower_bound + TIE_RTOL * max(1.0, abs(best.energy)):
        return best, root, 0, True, solver
    exact = True
    stack = [(none, none, root, None)]
    too_wide = int(np.count_nonzero(root.above ^ root.below)) > cfg.refine_max_cells
    max_flows = solver.flows + cfg.refine_work // max(prob.n, 1)
    if too_wide or cfg.refine_work == 0:
        stack = []
        exact = False
    nodes = 0
    while stack:
        fin, fout, res, parent = stack.pop()
        if res is None:
            n_in = int(fin.sum())
            if n_in > m or prob.n - int(fout.sum()) < m:
                continue
            try:
                res = solver.search(fin, fout, parent.copy())
            except BracketError:
                continue
            nodes += 1
            if res.exact is not None:
                if _better(res.exact, best):
                    best = res.exact
                continue
            for x in (res.below, res.above):
                cand = solver.greedy(x, res.lam, fin, fout)
                if cand is not None and _better(cand, best):
                    best = cand
        tol = TIE_RTOL * max(1.0, abs(best.energy))
        if res.lower_bound > best.energy + tol:
            continue
        if solver.flows >= max_flows:
            exact = False
            break
        undecided = np.flatnonzero(res.above & ~res.below & ~fin & ~fout)
        if undecided.size == 0:
            undecided = np.flatnonzero(res.above ^ res.below)
        if undecided.size == 0:
            continue
        i = undecided[0]
        f_in, f_out = fin.copy(), fout.copy()
        f_in[i] = True
        f_out[i] = True
        # explore "in" first: pushed last
        stack.append((fin, f_out, None, res.session))
        stack.append((f_in, fout, None, res.session))
    return best, root, nodes, exact, solver


# ---------------------------------------------------------------------------
# public operations


def _free_check(E: GridSet):
    if E.rim_distance() < 1:
        raise RimContactError("the set touches the outer rim of the grid")


def solve_at_lambda(d: DistanceField, h: float, lam: float, geometry: GridGeometry | None = None) -> GridSet:
    """Minimal global minimiser of ``cut + sum_F (d/h - lam) s**N`` over free cells."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if not math.isfinite(lam):
        raise ValueError("lambda must be finite")
    if geometry is not None and geometry != d.geometry:
        raise GeometryMismatchError("distance field belongs to another grid")
    if not np.all(np.isfinite(d.values)):
        raise ValueError("distance field has non-finite values")
    prob = _problem(d.geometry)
    c = prob.to_nodes(d.values) / h * d.geometry.cell_volume + prob.rim_cost
    x = prob.graph.minimal_minimizer(c - lam * d.geometry.cell_volume)
    return GridSet(d.geometry, prob.to_mask(x))


@dataclass(frozen=True)
class ConstrainedSolution:
    """Exact-volume minimiser of the linear energy for a given distance field."""

    set: GridSet
    lam: float
    linear_energy: float
    lower_bound: float
    iters: int
    adjustment_cells: int
    exact: bool


def minimize_linear(d: DistanceField, cfg: StepConfig, start: GridSet | None = None) -> ConstrainedSolution:
    """Minimise ``linear_energy(F, d, h)`` over free-cell sets with ``|F| = m``.

    ``d`` may be any finite field; ``start`` is an optional feasible set used
    as the first incumbent.
    """
    if not np.all(np.isfinite(d.values)):
        raise ValueError("distance field has non-finite values")
    geom = d.geometry
    m_cells = cfg.target_volume / geom.cell_volume
    m = int(round(m_cells))
    if abs(m - m_cells) > 1e-6:
        raise ValueError(f"target volume is not a whole number of cells ({m_cells})")
    prob = _problem(geom)
    if m > prob.n:
        raise ValueError(f"target of {m} cells exceeds the {prob.n} free cells")
    c = prob.to_nodes(d.values) / cfg.h * geom.cell_volume
    x0 = None if start is None else prob.to_nodes(start.mask)
    best, root, nodes, exact, solver = _constrained_min(prob, c, m, cfg, x0)
    F = GridSet(geom, prob.to_mask(best.x))
    adj = 0
    if root.exact is None:
        adj = min(
            int(np.count_nonzero(best.x ^ root.below)),
            int(np.count_nonzero(best.x ^ root.above)),
        )
    return ConstrainedSolution(
        set=F,
        lam=root.lam,
        linear_energy=linear_energy(F, d, cfg.h),
        lower_bound=root.lower_bound,
        iters=solver.flows,
        adjustment_cells=adj,
        exact=exact,
    )


def find_lambda(E: GridSet, cfg: StepConfig, d: DistanceField | None = None) -> StepResult:
    """Volume-constrained step from ``E`` via the multiplier search."""
    if not E.has_boundary():
        raise NoBoundaryError("E has no boundary")
    geom = E.geometry
    tol_vol = cfg.volume_tolerance * geom.cell_volume
    if abs(E.volume - cfg.target_volume) > tol_vol + 1e-9 * geom.cell_volume:
        raise ValueError(
            f"|E| = {E.volume} differs from target volume {cfg.target_volume}"
        )
    _free_check(E)
    if d is None:
        d = signed_distance(E)
    sol = minimize_linear(d, cfg, start=E)
    F = sol.set
    per = perimeter(F)
    dis = dissipation(F, E, d)
    residual = per + dis / cfg.h - perimeter(E)
    landed = sol.adjustment_cells == 0 and sol.exact
    # slack needed in the step inequality; E itself is always a candidate, so
    # only rounding can make this positive
    eps = 0.0 if landed else max(0.0, residual)
    gap = 0.0 if landed else max(0.0, sol.linear_energy - sol.lower_bound)
    return StepResult(
        next=F,
        lam=sol.lam,
        perimeter=per,
        dissipation=dis,
        h=cfg.h,
        volume=F.volume,
        bisection_iters=sol.iters,
        adjustment_cells=sol.adjustment_cells,
        epsilon_adj=eps,
        duality_gap=gap,
        exact=sol.exact,
        residual=residual,
    )


def fixed_ball_threshold(radius: float, ndim: int) -> float:
    """Largest h for which a ball of this radius is kept fixed."""
    return radius**2 / (ndim - 1)


def step(E: GridSet, cfg: StepConfig) -> StepResult:
    """Signed distance of ``E`` followed by the constrained minimisation."""
    if E.rim_distance() < RIM_ABORT_CELLS:
        raise RimContactError(
            f"set is within {E.rim_distance()} cells of the grid rim; enlarge the grid"
        )
    nd = E.geometry.ndim
    r = (E.volume / (math.pi ** (nd / 2) / math.gamma(nd / 2 + 1))) ** (1 / nd)
    if cfg.h >= fixed_ball_threshold(r, nd):
        warnings.warn(
            f"h = {cfg.h} is at or above r**2/(N-1) = {fixed_ball_threshold(r, nd):.4g} "
            "for the equal-volume ball; balls need not be fixed points",
            StepWarning,
            stacklevel=2,
        )
    res = find_lambda(E, cfg)
    if res.next.rim_distance() < RIM_ABORT_CELLS:
        raise RimContactError("step result reached the grid rim; enlarge the grid")
    return res
