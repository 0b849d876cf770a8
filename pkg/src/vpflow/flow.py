"""Iterating the step map: traces, decay fits and limit classification."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import ComponentStats, GridSet, components, hausdorff, perimeter
from .io import atomic_write, csv_text, json_text, write_mask
from .shapes import radius_for_volume, unit_ball_volume
from .step import StepConfig, StepResult, step


class InsufficientDataError(ValueError):
    """Not enough strictly positive dissipations to fit a decay rate."""


@dataclass(frozen=True)
class StepRecord:
    n: int
    perimeter: float
    volume: float
    dissipation: float
    lam: float
    eps_adj: float
    duality_gap: float
    exact: bool
    n_components: int
    min_gap: float
    components: tuple = field(repr=False)
    track_ids: tuple = ()


@dataclass
class FlowTrace:
    """Per-step diagnostics of a run; record ``n = 0`` is the initial set."""

    h: float
    m: float
    geometry: object
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final: GridSet | None = None
    converged: bool = False

    @property
    def dissipations(self) -> np.ndarray:
        return np.array([r.dissipation for r in self.records[1:]])

    @property
    def perimeters(self) -> np.ndarray:
        return np.array([r.perimeter for r in self.records])

    def trace_csv(self) -> str:
        header = ["n", "perimeter", "volume", "dissipation", "lambda", "eps_adj", "n_components", "min_gap"]
        rows = (
            [r.n, r.perimeter, r.volume, r.dissipation, r.lam, r.eps_adj, r.n_components, r.min_gap]
            for r in self.records
        )
        return csv_text(header, rows)

    def components_csv(self) -> str:
        nd = self.geometry.ndim
        header = ["n", "label", "volume"] + ["bx", "by", "bz"][:nd] + ["diameter"]
        rows = []
        for r in self.records:
            for tid, c in zip(r.track_ids, r.components):
                rows.append([r.n, tid, c.volume, *c.barycenter, c.diameter])
        return csv_text(header, rows)


def _min_gap(stats) -> float:
    gaps = [g for c in stats for g in c.distances]
    return min(gaps) if gaps else float("nan")


def _match(prev, prev_ids, cur, next_id):
    """Greedy nearest-barycentre matching with a volume-ratio sanity check."""
    pairs = []
    for i, p in enumerate(prev):
        for j, c in enumerate(cur):
            ratio = c.volume / p.volume
            if 0.5 <= ratio <= 2.0:
                dist = float(np.linalg.norm(np.subtract(p.barycenter, c.barycenter)))
                pairs.append((dist, i, j))
    pairs.sort()
    ids = [None] * len(cur)
    used = set()
    for _, i, j in pairs:
        if i in used or ids[j] is not None:
            continue
        used.add(i)
        ids[j] = prev_ids[i]
    for j in range(len(cur)):
        if ids[j] is None:
            ids[j] = next_id
            next_id += 1
    lost = [prev_ids[i] for i in range(len(prev)) if i not in used]
    return tuple(ids), lost, next_id


def _record(n, E, res: StepResult | None, stats, ids):
    return StepRecord(
        n=n,
        perimeter=perimeter(E) if res is None else res.perimeter,
        volume=E.volume,
        dissipation=0.0 if res is None else res.dissipation,
        lam=float("nan") if res is None else res.lam,
        eps_adj=0.0 if res is None else res.epsilon_adj,
        duality_gap=0.0 if res is None else res.duality_gap,
        exact=True if res is None else res.exact,
        n_components=len(stats),
        min_gap=_min_gap(stats),
        components=tuple(stats),
        track_ids=ids,
    )


def run(
    E0: GridSet,
    cfg: StepConfig,
    n_max: int,
    stop_threshold: float | None = None,
    snapshot_every: int = 0,
    snapshot_dir=None,
    progress=None,
) -> FlowTrace:
    """Iterate the step map from ``E0``.

    Stops after ``n_max`` steps or once three consecutive dissipations fall
    below ``stop_threshold`` (default ``1e-10 * m * spacing``); pass a
    negative threshold to always run ``n_max`` steps. Snapshots of every
    ``snapshot_every``-th set go to ``snapshot_dir``.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    geo = E0.geometry
    if stop_threshold is None:
        stop_threshold = 1e-10 * cfg.target_volume * geo.spacing
    trace = FlowTrace(h=cfg.h, m=cfg.target_volume, geometry=geo)
    stats = components(E0)
    ids = tuple(range(len(stats)))
    next_id = len(stats)
    trace.records.append(_record(0, E0, None, stats, ids))
    _snapshot(E0, 0, snapshot_every, snapshot_dir)

    E = E0
    quiet_steps = 0
    last: tuple | None = None
    for n in range(1, n_max + 1):
        if last is not None and last[0] == E:
            # the step map is deterministic: a fixed point maps to itself
            res = last[1]
        else:
            res = step(E, cfg)
        last = (E, res)
        F = res.next
        if F == E:
            cur, new_ids = stats, ids
        else:
            cur = components(F)
            new_ids, lost, next_id = _match(stats, ids, cur, next_id)
            if len(cur) != len(stats) or lost:
                kind = "merge" if len(cur) < len(stats) else "split" if len(cur) > len(stats) else "relabel"
                trace.events.append({"n": n, "kind": kind, "before": list(ids), "after": list(new_ids)})
        stats, ids = cur, new_ids
        trace.records.append(_record(n, F, res, stats, ids))
        _snapshot(F, n, snapshot_every, snapshot_dir)
        if progress is not None:
            progress(trace.records[-1])
        E = F
        quiet_steps = quiet_steps + 1 if res.dissipation < stop_threshold else 0
        if quiet_steps >= 3:
            trace.converged = True
            break
    trace.final = E
    return trace


def _snapshot(E, n, every, directory):
    if not every or directory is None or n % every:
        return
    ext = "pgm" if E.geometry.ndim == 2 else "raw"
    write_mask(Path(directory) / f"step_{n:05d}.{ext}", E)


# ---------------------------------------------------------------------------
# exponential decay of dissipations


@dataclass(frozen=True)
class DecayFit:
    rate: float
    amplitude: float
    r_squared: float
    tail_start: int
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_log_linear(n, values, tail_start: int = 0) -> DecayFit:
    """Least squares of ``log D_n`` on ``n`` over positive values with ``n >= tail_start``.

    ``rate = exp(slope)`` is the per-step factor and ``amplitude = exp(intercept)``.
    """
    n = np.asarray(n, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (n >= tail_start) & (values > 0) & np.isfinite(values)
    if keep.sum() < 5:
        raise InsufficientDataError(
            f"need at least 5 positive dissipations from n = {tail_start}, got {int(keep.sum())}"
        )
    x, y = n[keep], np.log(values[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return DecayFit(
        rate=float(np.exp(slope)),
        amplitude=float(np.exp(intercept)),
        r_squared=r2,
        tail_start=int(tail_start),
        n_points=int(keep.sum()),
    )


def default_tail_start(trace: FlowTrace) -> int:
    """First step after the last change in the number of components."""
    start = 1
    counts = [r.n_components for r in trace.records]
    for i in range(1, len(counts)):
        if counts[i] != counts[i - 1]:
            start = trace.records[i].n + 1
    return start


def fit_decay(trace: FlowTrace, tail_start: int | None = None) -> DecayFit:
    if tail_start is None:
        tail_start = default_tail_start(trace)
    n = [r.n for r in trace.records[1:]]
    return fit_log_linear(n, trace.dissipations, tail_start)


# ---------------------------------------------------------------------------
# limit configuration


def formula_L(P: float, m: float, ndim: int) -> float:
    """Number of equal balls of total volume ``m`` whose perimeters sum to ``P``."""
    w = unit_ball_volume(ndim)
    return P**ndim / (ndim**ndim * w * m ** (ndim - 1))


def formula_L_printed(P: float, m: float, ndim: int) -> float:
    """``N**-N * w_N * m**(1-N) * P**N``; off by a factor ``w_N**2``."""
    w = unit_ball_volume(ndim)
    return ndim ** (-ndim) * w * m ** (1 - ndim) * P**ndim


@dataclass(frozen=True)
class LimitReport:
    L: int
    radius: float
    centers: list
    hausdorff_residual: float
    perimeter_residual: float
    formula_L: float
    formula_L_printed: float
    P_final: float
    separated: bool

    def to_dict(self) -> dict:
        return asdict(self)


def classify_limit(final: GridSet, trace: FlowTrace | None = None) -> LimitReport:
    """Compare the final set with ``L`` equal balls at its component barycentres."""
    if final.is_empty():
        raise ValueError("final set is empty")
    geo = final.geometry
    nd = geo.ndim
    stats = components(final)
    L = len(stats)
    m = trace.m if trace is not None else final.volume
    radius = radius_for_volume(m / L, nd)
    centers = [list(c.barycenter) for c in stats]
    x = geo.centers()
    balls = np.zeros(geo.dims, dtype=bool)
    for c in centers:
        balls |= ((x - np.asarray(c)) ** 2).sum(axis=-1) <= radius**2
    if balls.any():
        h_res = hausdorff(final, GridSet(geo, balls))
    else:
        h_res = float("inf")
    P = trace.records[-1].perimeter if trace is not None else perimeter(final)
    ball_P = nd * unit_ball_volume(nd) * radius ** (nd - 1)
    sep = all(
        np.linalg.norm(np.subtract(a, b)) > 2 * radius
        for i, a in enumerate(centers)
        for b in centers[i + 1 :]
    )
    return LimitReport(
        L=L,
        radius=radius,
        centers=centers,
        hausdorff_residual=h_res,
        perimeter_residual=abs(P - L * ball_P),
        formula_L=formula_L(P, m, nd),
        formula_L_printed=formula_L_printed(P, m, nd),
        P_final=P,
        separated=bool(sep),
    )


# ---------------------------------------------------------------------------
# trace invariants


def monotonicity_violations(trace: FlowTrace) -> list:
    """Steps where the perimeter rises by more than that step's slack."""
    bad = []
    recs = trace.records
    for prev, cur in zip(recs, recs[1:]):
        if cur.perimeter > prev.perimeter + cur.eps_adj:
            bad.append(cur.n)
    return bad


def summability_gap(trace: FlowTrace) -> float:
    """``h * (P0 - P_final + sum eps) - sum D``; non-negative when the bound holds."""
    recs = trace.records
    total_d = math.fsum(r.dissipation for r in recs[1:])
    total_eps = math.fsum(r.eps_adj for r in recs[1:])
    return trace.h * (recs[0].perimeter - recs[-1].perimeter + total_eps) - total_d


# ---------------------------------------------------------------------------
# sequence lemma


@dataclass(frozen=True)
class TailLemmaReport:
    hypothesis_holds: bool
    conclusion_holds: bool
    block_conclusion_holds: bool
    first_hypothesis_failure: int | None
    first_violation: tuple | None
    first_block_violation: tuple | None
    total: float


def check_tail_lemma(a, c: float, l: int) -> TailLemmaReport:
    """Check the tail-sum lemma on a finite sequence (zero beyond its end).

    Indices start at 0 and ``S`` is the sum of the whole sequence.
    Hypothesis: ``sum_{n>=k} a_n <= c * sum_{j=k}^{k+l-1} a_j`` for every k.
    Conclusion as stated: ``a_k <= (1 - 1/c)**(k/l) * S``. The bound that
    the block argument actually yields, ``(1 - 1/c)**floor(k/l) * S``, is
    checked as well; the two coincide for ``l = 1``.
    """
    if not c > 1:
        raise ValueError("c must exceed 1")
    if int(l) != l or l < 1:
        raise ValueError("l must be an integer >= 1")
    l = int(l)
    a = np.asarray(a, dtype=float)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("sequence must be finite and non-negative")
    n = a.size
    # tails[k] = sum_{j>=k} a_j, tails[n] = 0
    tails = np.concatenate([np.cumsum(a[::-1])[::-1], [0.0]])
    S = float(tails[0]) if n else 0.0
    window = tails[:n] - tails[np.minimum(np.arange(n) + l, n)]
    # relative slack absorbs the rounding of the cumulative sums
    slack = 1e-12 * max(S, 1e-300)
    hyp = tails[:n] <= c * window + slack
    first_hyp = None if hyp.all() else int(np.argmin(hyp))
    k = np.arange(n)
    q = 1.0 - 1.0 / c
    printed = q ** (k / l) * S
    block = q ** (k // l) * S
    ok = a <= printed + slack
    ok_block = a <= block + slack
    first = None if ok.all() else int(np.argmin(ok))
    first_b = None if ok_block.all() else int(np.argmin(ok_block))
    return TailLemmaReport(
        hypothesis_holds=bool(hyp.all()),
        conclusion_holds=bool(ok.all()),
        block_conclusion_holds=bool(ok_block.all()),
        first_hypothesis_failure=first_hyp,
        first_violation=None if first is None else (first, float(a[first]), float(printed[first])),
        first_block_violation=None if first_b is None else (first_b, float(a[first_b]), float(block[first_b])),
        total=S,
    )


# ---------------------------------------------------------------------------
# exports


def write_outputs(trace: FlowTrace, out_dir, limit: LimitReport | None, fit: DecayFit | None, fit_error=None):
    out = Path(out_dir)
    atomic_write(out / "trace.csv", trace.trace_csv())
    atomic_write(out / "components.csv", trace.components_csv())
    atomic_write(out / "events.json", json_text(trace.events))
    if limit is not None:
        atomic_write(out / "limit.json", json_text(limit.to_dict()))
    decay = fit.to_dict() if fit is not None else {"error": str(fit_error)}
    atomic_write(out / "decay.json", json_text(decay))


__all__ = [
    "ComponentStats",
    "DecayFit",
    "FlowTrace",
    "InsufficientDataError",
    "LimitReport",
    "StepRecord",
    "TailLemmaReport",
    "check_tail_lemma",
    "classify_limit",
    "default_tail_start",
    "fit_decay",
    "fit_log_linear",
    "formula_L",
    "formula_L_printed",
    "monotonicity_violations",
    "run",
    "summability_gap",
    "write_outputs",
]
