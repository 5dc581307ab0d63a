"""Cycle-consistent correspondence sampling and triangulation-angle scoring.

A source pixel yields an n-cycle when chaining n directed warps (rounding
every intermediate landing to the nearest integer pixel) returns exactly to
the start, and, for n > 2, every (n-1)-subcycle obtained by deleting one
view from the cycle also closes recursively. Closed cycles become candidate
tracks; a two-stage grid subsampler then keeps a spatially balanced subset,
preferring higher cycle orders, optionally weighted by a triangulation-angle
score kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .geometry import DegenerateGeometry, GeometryError, triangulate_dlt, triangulation_angle
from .warpio import WarpField

FINE_CELL = 5  # pixels; first-stage grid is fixed by the method

FOUR_CYCLE_SEQUENCE_CAP = 20000  # enumeration bound per view set


class MissingWarp(KeyError):
    """A cycle chain needs a directed warp that the set does not contain."""


class DomainError(ValueError):
    """Angle outside [0, pi]."""


@dataclass(eq=False)
class CycleTrack:
    """A multi-view correspondence produced by n-cycle closure."""

    order: int
    views: tuple                 # view sequence, source first
    observations: list           # [(view_id, pixel 2-vector float)], source first
    score: float = 0.0
    source_cell: int = -1

    @property
    def source_view(self) -> str:
        return self.views[0]

    @property
    def source_pixel(self) -> np.ndarray:
        return self.observations[0][1]


@dataclass(frozen=True)
class ScoreParams:
    """Triangulation-angle kernel: peaked Gaussian with hard boundary decay."""

    alpha: float = math.pi / 6   # peak angle, 30 deg
    sigma: float = math.pi / 9   # width, 20 deg
    p: float = 1.0               # peak value
    top_k: int = 3               # pair scores summed per track; 0 = uniform

    def __post_init__(self):
        if not (0.0 < self.alpha < math.pi):
            raise ValueError("alpha must be in (0, pi)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.p > 0:
            raise ValueError("p must be positive")
        if self.top_k not in (0, 1, 2, 3):
            raise ValueError("top_k must be in {0, 1, 2, 3}")


@dataclass(frozen=True)
class SamplingConfig:
    cell_size: int = 80          # coarse grid cell in warp pixels
    c_min: float = 0.3           # required fill fraction of the initial grid
    max_iter: int = 3            # grid halvings per cycle order
    max_cycle: int = 4
    budget_four: int = 6000      # per view set
    budget_three: int = 3000
    budget_two: int = 1000
    selection: str = "argmax"    # or "probabilistic"
    seed: int = 0
    min_confidence: float = 0.0  # extra confidence gate on top of validity

    def __post_init__(self):
        if self.cell_size < FINE_CELL:
            raise ValueError(f"cell_size must be >= {FINE_CELL}")
        if self.max_cycle not in (2, 3, 4):
            raise ValueError("max_cycle must be 2, 3 or 4")
        if min(self.budget_four, self.budget_three, self.budget_two) < 0:
            raise ValueError("budgets must be non-negative")
        if self.selection not in ("argmax", "probabilistic"):
            raise ValueError("selection must be 'argmax' or 'probabilistic'")

    def budget(self, order: int) -> int:
        return {4: self.budget_four, 3: self.budget_three, 2: self.budget_two}[order]


# ---------------------------------------------------------------------------
# cycle closure
# ---------------------------------------------------------------------------


def _round_half_up(a: np.ndarray) -> np.ndarray:
    """Deterministic nearest-integer rounding; .5 always rounds up."""
    return np.floor(a + 0.5).astype(np.int64)


class _CycleCloser:
    """Vectorized full-grid chain checks with memoized subcycle masks."""

    def __init__(self, warps: dict, min_confidence: float = 0.0):
        self.warps = warps
        self.min_conf = min_confidence
        self._memo: dict = {}
        self._grids: dict = {}

    def _warp(self, a: str, b: str) -> WarpField:
        try:
            return self.warps[(a, b)]
        except KeyError:
            raise MissingWarp(f"no warp for directed edge ({a!r}, {b!r})") from None

    def _grid(self, view: str):
        if view not in self._grids:
            for (src, _), f in self.warps.items():
                if src == view:
                    h, w = f.height, f.width
                    ys, xs = np.mgrid[0:h, 0:w]
                    self._grids[view] = (xs.astype(np.int64), ys.astype(np.int64))
                    break
            else:
                raise MissingWarp(f"view {view!r} has no outgoing warps")
        return self._grids[view]

    def _hop(self, a: str, b: str, cur_x, cur_y, valid):
        """One chain step a -> b; returns (next_x, next_y, valid, float target)."""
        f = self._warp(a, b)
        ok = valid & (f.confidence[cur_y, cur_x] > max(0.0, self.min_conf))
        t = f.target[cur_y, cur_x]
        rx = _round_half_up(t[..., 0])
        ry = _round_half_up(t[..., 1])
        ok &= (rx >= 0) & (rx < f.dst_width) & (ry >= 0) & (ry < f.dst_height)
        rx = np.clip(rx, 0, f.dst_width - 1)
        ry = np.clip(ry, 0, f.dst_height - 1)
        return rx, ry, ok, t

    def chain(self, seq: tuple):
        """Chase every source pixel of seq[0] through the full cycle.

        Returns (closed mask over the source grid, list of per-hop float
        targets for the n-1 intermediate landings).
        """
        xs, ys = self._grid(seq[0])
        cur_x, cur_y = xs, ys
        valid = np.ones(xs.shape, dtype=bool)
        targets = []
        edges = list(zip(seq, seq[1:] + (seq[0],)))
        for i, (a, b) in enumerate(edges):
            cur_x, cur_y, valid, t = self._hop(a, b, cur_x, cur_y, valid)
            if i < len(edges) - 1:
                targets.append(t)
        closed = valid & (cur_x == xs) & (cur_y == ys)
        return closed, targets

    def chase_pixels(self, seq: tuple, xs: np.ndarray, ys: np.ndarray):
        """Per-hop sub-pixel targets for specific (already closed) pixels."""
        cur_x, cur_y = xs.astype(np.int64), ys.astype(np.int64)
        valid = np.ones(cur_x.shape, dtype=bool)
        targets = []
        for a, b in zip(seq[:-1], seq[1:]):
            cur_x, cur_y, valid, t = self._hop(a, b, cur_x, cur_y, valid)
            targets.append(t)
        return targets

    def closed_mask(self, seq: tuple) -> np.ndarray:
        """Recursive closure: the cycle and all its (n-1)-subcycles close."""
        seq = tuple(seq)
        if seq in self._memo:
            return self._memo[seq]
        mask, _ = self.chain(seq)
        n = len(seq)
        if n > 2:
            for drop in range(n):
                sub = seq[:drop] + seq[drop + 1:]
                if drop == 0:
                    # subcycle starts at the landing of the first hop
                    x1, y1, ok1, _ = self._hop(seq[0], seq[1], *self._grid(seq[0]),
                                               np.ones(mask.shape, dtype=bool))
                    sub_mask = self.closed_mask(sub)
                    mask = mask & ok1 & sub_mask[y1, x1]
                else:
                    mask = mask & self.closed_mask(sub)
        self._memo[seq] = mask
        return mask


def _enumerate_sequences(views: Sequence[str], edges: set, order: int, cap: int | None):
    """Simple directed cycles [v, a, b, ...] over existing edges, all sources."""
    out = []
    for v in views:
        others = [u for u in views if u != v]
        if order == 2:
            seqs = [(v, a) for a in others if (v, a) in edges and (a, v) in edges]
        elif order == 3:
            seqs = [(v, a, b) for a in others for b in others
                    if a != b and (v, a) in edges and (a, b) in edges and (b, v) in edges]
        else:
            seqs = [(v, a, b, c) for a in others for b in others for c in others
                    if len({a, b, c}) == 3 and (v, a) in edges and (a, b) in edges
                    and (b, c) in edges and (c, v) in edges]
        out.extend(seqs)
        if cap is not None and len(out) >= cap:
            return out[:cap]
    return out


def close_cycles(warps: dict, max_order: int = 4, views: Sequence[str] | None = None,
                 min_confidence: float = 0.0) -> dict:
    """Find all closed cycle tracks up to ``max_order``.

    ``warps`` maps directed (src, dst) view pairs to WarpField. Returns
    {order: [CycleTrack, ...]} with tracks ordered by view sequence and
    row-major source pixel; the result is independent of pixel enumeration
    order by construction.
    """
    if max_order not in (2, 3, 4):
        raise ValueError("max_order must be 2, 3 or 4")
    if views is None:
        seen = []
        for s, d in warps:
            for v in (s, d):
                if v not in seen:
                    seen.append(v)
        views = seen
    closer = _CycleCloser(warps, min_confidence)
    edges = set(warps.keys())
    result = {}
    for order in range(2, max_order + 1):
        cap = FOUR_CYCLE_SEQUENCE_CAP if order == 4 else None
        tracks = []
        for seq in _enumerate_sequences(views, edges, order, cap):
            mask = closer.closed_mask(seq)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            tracks.extend(_materialize(closer, seq, xs, ys))
        result[order] = tracks
    return result


def _materialize(closer: "_CycleCloser", seq: tuple, xs: np.ndarray, ys: np.ndarray) -> list:
    """CycleTrack objects for closed source pixels of one view sequence."""
    targets = closer.chase_pixels(seq, xs, ys)
    src = np.stack([xs, ys], axis=1).astype(float)
    tracks = []
    for n in range(len(xs)):
        obs = [(seq[0], src[n])]
        for hop, view in enumerate(seq[1:]):
            obs.append((view, targets[hop][n]))
        tracks.append(CycleTrack(order=len(seq), views=seq, observations=obs))
    return tracks


# ---------------------------------------------------------------------------
# score kernel
# ---------------------------------------------------------------------------


def _log_kernel(theta: float, alpha: float, sigma: float) -> float:
    x = theta / math.pi
    return -1.0 / (x * (1.0 - x)) - 0.5 * ((theta - alpha) / sigma) ** 2


@lru_cache(maxsize=32)
def _kernel_max(alpha: float, sigma: float) -> tuple:
    """Locate max of B*G on (0, pi) by coarse scan + golden-section refine."""
    n = 4096
    ts = np.linspace(0.0, math.pi, n + 2)[1:-1]
    x = ts / math.pi
    vals = -1.0 / (x * (1.0 - x)) - 0.5 * ((ts - alpha) / sigma) ** 2
    i = int(np.argmax(vals))
    lo = ts[max(i - 1, 0)]
    hi = ts[min(i + 1, n - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = _log_kernel(c, alpha, sigma)
    fd = _log_kernel(d, alpha, sigma)
    while b - a > 1e-12:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = _log_kernel(c, alpha, sigma)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = _log_kernel(d, alpha, sigma)
    t_star = 0.5 * (a + b)
    return t_star, _log_kernel(t_star, alpha, sigma)


def score_angle(theta, params: ScoreParams):
    """Triangulation-angle score in [0, p]; exactly p at the kernel peak.

    Accepts a scalar or an array. The boundary factor drives the score to 0
    as theta approaches 0 or pi; values outside [0, pi] raise DomainError.
    """
    arr = np.asarray(theta, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > math.pi):
        raise DomainError("triangulation angle outside [0, pi]")
    _, log_max = _kernel_max(params.alpha, params.sigma)
    interior = (arr > 0.0) & (arr < math.pi)
    out = np.zeros_like(arr)
    if np.any(interior):
        t = arr[interior]
        x = t / math.pi
        logv = -1.0 / (x * (1.0 - x)) - 0.5 * ((t - params.alpha) / params.sigma) ** 2
        out[interior] = params.p * np.exp(logv - log_max)
    if arr.ndim == 0:
        return float(out)
    return out


def score_track(track: CycleTrack, poses: dict, cameras: dict, params: ScoreParams) -> float:
    """Top-k sum of pairwise triangulation-angle scores for one track.

    Triangulates the track from the given poses; pairs are all view pairs
    with available poses. Degenerate or failed triangulation scores 0;
    ``top_k == 0`` scores every track 1 (uniform sampling).
    """
    if params.top_k == 0:
        return 1.0
    posed = [(v, pix) for v, pix in track.observations if v in poses]
    if len(posed) < 2:
        return 0.0
    try:
        point = triangulate_dlt([(cameras[v], poses[v], pix) for v, pix in posed])
    except GeometryError:
        return 0.0
    pair_scores = []
    for i in range(len(posed)):
        for j in range(i + 1, len(posed)):
            try:
                ang = triangulation_angle(poses[posed[i][0]], poses[posed[j][0]], point)
            except DegenerateGeometry:
                continue
            pair_scores.append(score_angle(ang, params))
    if not pair_scores:
        return 0.0
    pair_scores.sort(reverse=True)
    k = min(params.top_k, len(pair_scores))
    return float(sum(pair_scores[:k]))


# ---------------------------------------------------------------------------
# hierarchical two-stage subsampling
# ---------------------------------------------------------------------------


def _cell_index(px: np.ndarray, py: np.ndarray, cell: int, width: int):
    nx = (width + cell - 1) // cell
    return (px // cell) + nx * (py // cell)


def _rng(seed: int, view_index: int, order: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, view_index, order, stage)))


def _stage1(tracks: list, resolution: tuple, rng: np.random.Generator) -> list:
    """One uniformly random candidate per 5x5 fine cell.

    Tracks must arrive ordered by (source pixel, view sequence); draws happen
    in ascending cell order so selections are reproducible.
    """
    if not tracks:
        return []
    w, _ = resolution
    by_cell = {}
    for t in tracks:
        px, py = int(t.source_pixel[0]), int(t.source_pixel[1])
        by_cell.setdefault(int(_cell_index(px, py, FINE_CELL, w)), []).append(t)
    survivors = []
    for cell in sorted(by_cell):
        cand = by_cell[cell]
        survivors.append(cand[int(rng.integers(len(cand)))] if len(cand) > 1 else cand[0])
    survivors.sort(key=lambda t: _pixel_key(t, w))
    return survivors


def _pixel_key(t: CycleTrack, width: int) -> tuple:
    px, py = int(t.source_pixel[0]), int(t.source_pixel[1])
    return (py * width + px, t.views)


def _score_survivors(survivors: dict, score_fn: Callable | None,
                     collect_survivors: dict | None) -> None:
    for (view, order), kept in survivors.items():
        if score_fn is not None and kept:
            scores = np.asarray(score_fn(kept), dtype=float)
            for t, s in zip(kept, scores):
                t.score = float(s)
        else:
            for t in kept:
                t.score = 1.0
    if collect_survivors is not None:
        collect_survivors.update(survivors)


def _stage2(survivors: dict, config: SamplingConfig, resolutions: dict,
            views: Sequence[str]) -> list:
    """Coarse-grid selection with order priority, halving and budgets."""
    view_index = {v: i for i, v in enumerate(views)}
    orders = sorted({o for (_, o) in survivors}, reverse=True)
    selected = []
    for view in views:
        w, h = resolutions.get(view, (None, None))
        if w is None:
            continue
        chosen: list = []
        n_cells_initial = math.ceil(w / config.cell_size) * math.ceil(h / config.cell_size)
        n_min = config.c_min * n_cells_initial
        for order in orders:
            pool = list(survivors.get((view, order), []))
            d = config.cell_size
            rng = _rng(config.seed, view_index[view], order, 2)
            for _ in range(config.max_iter):
                occupied = {
                    int(_cell_index(int(t.source_pixel[0]), int(t.source_pixel[1]), d, w))
                    for t in chosen
                }
                by_cell: dict = {}
                for t in pool:
                    c = int(_cell_index(int(t.source_pixel[0]), int(t.source_pixel[1]), d, w))
                    if c not in occupied:
                        by_cell.setdefault(c, []).append(t)
                for c in sorted(by_cell):
                    cand = by_cell[c]
                    if config.selection == "argmax":
                        pick = min(cand, key=lambda t: (-t.score, _pixel_key(t, w)))
                    else:
                        weights = np.array([t.score for t in cand], dtype=float)
                        total = weights.sum()
                        prob = weights / total if total > 0 else np.full(len(cand), 1.0 / len(cand))
                        pick = cand[int(rng.choice(len(cand), p=prob))]
                    pick.source_cell = c
                    chosen.append(pick)
                    pool.remove(pick)
                filled = {
                    int(_cell_index(int(t.source_pixel[0]), int(t.source_pixel[1]), d, w))
                    for t in chosen
                }
                if len(filled) >= n_min or d <= 1:
                    break
                d = max(1, d // 2)
        selected.extend(chosen)

    # score-ranked per-order budget truncation across the view set
    out = []
    for order in orders:
        of_order = [t for t in selected if t.order == order]
        of_order.sort(key=lambda t: (-t.score, t.source_view, _pixel_key(t, resolutions[t.source_view][0])))
        out.extend(of_order[: config.budget(order)])
    return out


def hierarchical_sample(cycles_by_order: dict, config: SamplingConfig, resolutions: dict,
                        views: Sequence[str], score_fn: Callable | None = None,
                        collect_survivors: dict | None = None) -> list:
    """Two-stage grid subsampling of closed cycles (coarse stage per view).

    Stage 1 keeps one random candidate per 5x5 fine cell per (view, order).
    Stage 2 walks cycle orders from highest to lowest over a coarse grid of
    ``cell_size`` pixels, keeping at most one track per cell; cells taken by
    a higher order stay taken. When fewer than ``c_min`` times the initial
    cell count are filled, the grid is halved and the remainder re-sampled,
    up to ``max_iter`` levels. Per-order budgets are enforced afterwards by
    score-ranked truncation over the whole view set.

    ``score_fn(tracks) -> array of floats`` is evaluated lazily on stage-1
    survivors only; None scores every candidate 1. When a dict is passed as
    ``collect_survivors`` it receives the scored stage-1 survivors keyed by
    (view, order).
    """
    view_index = {v: i for i, v in enumerate(views)}
    orders = sorted((o for o in cycles_by_order if 2 <= o <= config.max_cycle), reverse=True)

    by_view_order: dict = {}
    for order in orders:
        for t in cycles_by_order[order]:
            by_view_order.setdefault((t.source_view, order), []).append(t)

    survivors: dict = {}
    for (view, order), tracks in by_view_order.items():
        tracks = sorted(tracks, key=lambda t: _pixel_key(t, resolutions[view][0]))
        rng = _rng(config.seed, view_index[view], order, 1)
        survivors[(view, order)] = _stage1(tracks, resolutions[view], rng)
    _score_survivors(survivors, score_fn, collect_survivors)
    return _stage2(survivors, config, resolutions, views)


def sample_cycles(warps: dict, config: SamplingConfig, resolutions: dict,
                  views: Sequence[str], score_fn: Callable | None = None,
                  collect_survivors: dict | None = None) -> list:
    """Cycle closure and hierarchical sampling without materializing every
    closed cycle: stage-1 fine-cell selection runs on the closure masks and
    only the survivors become CycleTrack objects. Selection-equivalent to
    ``hierarchical_sample(close_cycles(...), ...)``.
    """
    closer = _CycleCloser(warps, config.min_confidence)
    edges = set(warps.keys())
    view_index = {v: i for i, v in enumerate(views)}
    seqs_by_order: dict = {}
    for order in range(2, config.max_cycle + 1):
        cap = FOUR_CYCLE_SEQUENCE_CAP if order == 4 else None
        seqs_by_order[order] = _enumerate_sequences(views, edges, order, cap)

    survivors: dict = {}
    for order in sorted(seqs_by_order, reverse=True):
        by_view: dict = {}
        for seq in seqs_by_order[order]:
            by_view.setdefault(seq[0], []).append(seq)
        for view in views:
            seqs = sorted(by_view.get(view, []))
            if not seqs:
                continue
            w, h = resolutions[view]
            # candidate arrays: flat source pixel + sequence index, sorted
            # by (pixel, sequence) exactly like the track-based stage 1
            pix_parts, seq_parts = [], []
            for si, seq in enumerate(seqs):
                mask = closer.closed_mask(seq)
                if not mask.any():
                    continue
                flat = np.flatnonzero(mask.reshape(-1))
                pix_parts.append(flat)
                seq_parts.append(np.full(len(flat), si, dtype=np.int64))
            if not pix_parts:
                continue
            pix = np.concatenate(pix_parts)
            sidx = np.concatenate(seq_parts)
            xs = pix % w
            ys = pix // w
            nx = (w + FINE_CELL - 1) // FINE_CELL
            cells = (xs // FINE_CELL) + nx * (ys // FINE_CELL)
            # group contiguously by cell; within a cell order by (pixel, seq)
            key_order = np.lexsort((sidx, pix, cells))
            pix, sidx, cells = pix[key_order], sidx[key_order], cells[key_order]
            rng = _rng(config.seed, view_index[view], order, 1)
            _, starts, counts = np.unique(cells, return_index=True, return_counts=True)
            picks = []
            for s, c in zip(starts, counts):
                picks.append(s + (int(rng.integers(c)) if c > 1 else 0))
            picks = np.asarray(picks, dtype=np.int64)
            by_seq: dict = {}
            for p in picks:
                by_seq.setdefault(int(sidx[p]), []).append(int(pix[p]))
            kept = []
            for si in sorted(by_seq):
                flat = np.asarray(sorted(by_seq[si]), dtype=np.int64)
                kept.extend(_materialize(closer, seqs[si], flat % w, flat // w))
            kept.sort(key=lambda t: _pixel_key(t, w))
            survivors[(view, order)] = kept

    _score_survivors(survivors, score_fn, collect_survivors)
    return _stage2(survivors, config, resolutions, views)


def dump_tracks(tracks: Sequence[CycleTrack]) -> str:
    """Debug text dump: `order view:px,py view:px,py ... score` per line."""
    lines = []
    for t in tracks:
        obs = " ".join(f"{v}:{pix[0]:.6g},{pix[1]:.6g}" for v, pix in t.observations)
        lines.append(f"{t.order} {obs} {t.score:.9g}")
    return "\n".join(lines) + ("\n" if lines else "")
