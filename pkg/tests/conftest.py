"""Independent brute-force oracles shared by the test modules."""

import itertools
import time
from collections import deque

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def interface_faces(mask):
    """Faces between a set cell and a non-set cell, padding counted as outside.

    Each face is ``(axis, plane, lower_corner)`` in cell units with the grid
    spanning ``[0, dims]``.
    """
    m = np.pad(mask, 1)
    faces = []
    for axis in range(mask.ndim):
        a = np.take(m, range(m.shape[axis] - 1), axis=axis)
        b = np.take(m, range(1, m.shape[axis]), axis=axis)
        for idx in np.argwhere(a != b):
            corner = idx.astype(float) - 1.0
            plane = corner[axis] + 1.0
            faces.append((axis, plane, corner))
    return faces


def brute_signed_distance(mask, spacing=1.0):
    """Distance from each cell centre to the nearest interface face, by enumeration."""
    faces = interface_faces(mask)
    out = np.zeros(mask.shape)
    for idx in itertools.product(*[range(n) for n in mask.shape]):
        c = np.asarray(idx, dtype=float) + 0.5
        best = np.inf
        for axis, plane, corner in faces:
            d2 = (c[axis] - plane) ** 2
            for k in range(mask.ndim):
                if k != axis:
                    lo, hi = corner[k], corner[k] + 1.0
                    gap = max(lo - c[k], 0.0, c[k] - hi)
                    d2 += gap * gap
            best = min(best, d2)
        d = np.sqrt(best) * spacing
        out[idx] = -d if mask[idx] else d
    return out


def flood_fill_labels(mask):
    """Face-connected labels numbered in raster order of first cells."""
    labels = np.zeros(mask.shape, dtype=int)
    nxt = 0
    for start in itertools.product(*[range(n) for n in mask.shape]):
        if not mask[start] or labels[start]:
            continue
        nxt += 1
        labels[start] = nxt
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for axis in range(mask.ndim):
                for step in (-1, 1):
                    nb = list(cur)
                    nb[axis] += step
                    nb = tuple(nb)
                    if all(0 <= nb[k] < mask.shape[k] for k in range(mask.ndim)):
                        if mask[nb] and not labels[nb]:
                            labels[nb] = nxt
                            queue.append(nb)
    return labels, nxt


def brute_hausdorff(a, b, spacing=1.0):
    pa = np.argwhere(a).astype(float)
    pb = np.argwhere(b).astype(float)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max()) * spacing


def brute_min_cut(n, edges, weights, unary):
    """Minimum of ``sum_S unary + cut(S)`` over all subsets, with all minimisers."""
    best, argmins = np.inf, []
    for bits in range(1 << n):
        x = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        e = unary[x].sum() + sum(w for (u, v), w in zip(edges, weights) if x[u] != x[v])
        if e < best - 1e-9:
            best, argmins = e, [x]
        elif abs(e - best) <= 1e-9:
            argmins.append(x)
    return best, argmins


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_PRESET_CACHE = {}
PRESET_SECONDS = {}
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def run_preset(name, n_max=None, stop_threshold=None):
    """Run a shipped ``vpflow run`` preset through the library (cached per session)."""
    from vpflow import flow
    from vpflow.cli import RUN_KEYS, RUN_PRESETS, _initial_set, resolve_config
    from vpflow.step import StepConfig

    key = (name, n_max, stop_threshold)
    if key not in _PRESET_CACHE:
        cfg = resolve_config({"preset": name}, RUN_KEYS, RUN_PRESETS)
        E0 = _initial_set(cfg)
        step_cfg = StepConfig(cfg["h"], E0.volume)
        t0 = time.perf_counter()
        trace = flow.run(E0, step_cfg, n_max or cfg["n_max"], stop_threshold=stop_threshold)
        PRESET_SECONDS[key] = time.perf_counter() - t0
        _PRESET_CACHE[key] = (E0, trace)
    return _PRESET_CACHE[key]
