"""Short-term supervision from optical flow: chaining, cycle checks, filtering.

The flow estimator is pluggable: a pretrained network adapter, a global
phase-correlation mock, or analytic fields injected directly (synthetic
videos with known motion).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .errors import DependencyError, InputError
from .media import FrameSequence


@dataclass
class FlowField:
    """Dense displacement field f_{i->j}: flow[y, x] = (dx, dy) in pixels."""

    i: int
    j: int
    flow: np.ndarray  # (H, W, 2) float


@dataclass
class ChainConfig:
    cycle_tol: float = 1.5          # short-range cycle-consistency threshold (px)
    cycle_tol_long: float = 2.0     # long-range disagreement threshold (px)
    max_direct_gap: int = 12        # max frame gap verified with direct flow
    seed_stride: int = 4            # px between new tracklet seeds

    def __post_init__(self):
        if self.cycle_tol <= 0 or self.cycle_tol_long <= 0:
            raise InputError("cycle thresholds must be positive")


@dataclass
class Tracklet:
    start_frame: int
    points: np.ndarray  # (L, 2) sub-pixel (x, y)

    @property
    def length(self) -> int:
        return len(self.points)

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.length - 1


@dataclass
class FlowCorrespondenceSet:
    """Cycle-verified sub-pixel point pairs; i < j for every pair."""

    frame_i: np.ndarray  # (N,) int
    frame_j: np.ndarray  # (N,) int
    xi: np.ndarray       # (N, 2) float
    xj: np.ndarray       # (N, 2) float
    foreground: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        if self.foreground is None:
            self.foreground = np.zeros(len(self.frame_i), dtype=bool)

    def __len__(self) -> int:
        return len(self.frame_i)

    @staticmethod
    def empty() -> "FlowCorrespondenceSet":
        return FlowCorrespondenceSet(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
            np.empty((0, 2)), np.empty((0, 2)))


def sample_flow(flow: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinearly sample a (H, W, 2) flow field at sub-pixel (x, y) points.

    Callers must keep points inside [0, W-1] x [0, H-1].
    """
    pts = np.asarray(pts, dtype=np.float64)
    h, w = flow.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    f00 = flow[y0, x0]
    f01 = flow[y0, np.minimum(x0 + 1, w - 1)]
    f10 = flow[np.minimum(y0 + 1, h - 1), x0]
    f11 = flow[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    wx = fx[:, None]
    wy = fy[:, None]
    return (f00 * (1 - wx) * (1 - wy) + f01 * wx * (1 - wy)
            + f10 * (1 - wx) * wy + f11 * wx * wy)


def in_bounds(pts: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    return ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
            & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))


# --------------------------------------------------------------------------
# estimators / providers


class PhaseCorrelationFlow:
    """Global-translation mock estimator: one phase-correlation shift per pair,
    broadcast as a constant field. Exact for rigidly shifted frames."""

    def __call__(self, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
        h, w = frame_a.shape[:2]
        ga = cv2.cvtColor(frame_a.astype(np.float32), cv2.COLOR_RGB2GRAY)
        gb = cv2.cvtColor(frame_b.astype(np.float32), cv2.COLOR_RGB2GRAY)
        if np.array_equal(ga, gb):
            return np.zeros((h, w, 2), dtype=np.float64)
        (dx, dy), _resp = cv2.phaseCorrelate(np.float64(ga), np.float64(gb))
        out = np.empty((h, w, 2), dtype=np.float64)
        out[..., 0] = dx
        out[..., 1] = dy
        return out


class PretrainedFlowEstimator:
    """Adapter over a pretrained optical-flow network (torchvision RAFT)."""

    def __init__(self, device: str = "cpu"):
        try:
            import torch
            from torchvision.models.optical_flow import Raft_Large_Weights, raft_large

            self._torch = torch
            weights = Raft_Large_Weights.DEFAULT
            self.model = raft_large(weights=weights).eval().to(device)
            self.device = device
        except Exception as exc:
            raise DependencyError(
                f"flow network weights unavailable ({exc}); "
                "rerun with --mock for the phase-correlation mock"
            ) from exc

    def __call__(self, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
        torch = self._torch

        def prep(f):
            t = torch.from_numpy(f.astype(np.float32)).permute(2, 0, 1)[None]
            t = t * 2 - 1  # [0,1] -> [-1,1]
            h, w = t.shape[-2:]
            ph, pw = (8 - h % 8) % 8, (8 - w % 8) % 8
            return torch.nn.functional.pad(t, (0, pw, 0, ph)), (h, w)

        ta, (h, w) = prep(frame_a)
        tb, _ = prep(frame_b)
        with torch.no_grad():
            flow = self.model(ta.to(self.device), tb.to(self.device))[-1]
        return flow[0, :, :h, :w].permute(1, 2, 0).cpu().numpy().astype(np.float64)


class FlowProvider:
    """Caches per-pair flow fields computed by an estimator callable."""

    def __init__(self, seq: FrameSequence, estimator):
        self.seq = seq
        self.estimator = estimator
        self._cache: dict[tuple[int, int], FlowField] = {}
        self.calls = 0

    def flow(self, i: int, j: int) -> FlowField:
        t = self.seq.num_frames
        if not (0 <= i < t and 0 <= j < t) or i == j:
            raise InputError(f"bad flow pair ({i}, {j}) for {t} frames")
        key = (i, j)
        if key not in self._cache:
            self.calls += 1
            field_ij = self.estimator(self.seq.frames[i], self.seq.frames[j])
            self._cache[key] = FlowField(i, j, np.asarray(field_ij, dtype=np.float64))
        return self._cache[key]


class AnalyticFlowProvider:
    """Flow fields from a callable ``fn(i, j, h, w) -> (H, W, 2)``; used for
    synthetic videos whose true motion is known in closed form."""

    def __init__(self, fn, num_frames: int, hw: tuple[int, int]):
        self.fn = fn
        self.num_frames = num_frames
        self.hw = hw
        self._cache: dict[tuple[int, int], FlowField] = {}

    def flow(self, i: int, j: int) -> FlowField:
        key = (i, j)
        if key not in self._cache:
            h, w = self.hw
            self._cache[key] = FlowField(i, j, np.asarray(self.fn(i, j, h, w), np.float64))
        return self._cache[key]


# --------------------------------------------------------------------------
# chaining


def chain_tracklets(num_frames: int, hw: tuple[int, int], provider,
                    cfg: ChainConfig) -> list[Tracklet]:
    """Chain consecutive-frame flow into short cycle-consistent tracklets.

    New seeds appear on a ``seed_stride`` grid in every frame, skipping grid
    points within seed_stride/2 of a live tracklet. A tracklet ends at frame t
    when the next step leaves the image or fails the backward cycle check.
    """
    h, w = hw
    gx, gy = np.meshgrid(np.arange(0, w, cfg.seed_stride, dtype=np.float64),
                         np.arange(0, h, cfg.seed_stride, dtype=np.float64))
    seed_grid = np.stack([gx.ravel(), gy.ravel()], axis=1)

    done: list[Tracklet] = []
    active_pts = np.empty((0, 2))
    active_tracks: list[list[np.ndarray]] = []
    active_starts: list[int] = []

    for t in range(num_frames):
        # seed uncovered grid points
        if len(active_pts):
            dist, _ = cKDTree(active_pts).query(seed_grid)
            fresh = seed_grid[dist > cfg.seed_stride / 2.0]
        else:
            fresh = seed_grid
        for p in fresh:
            active_tracks.append([p.copy()])
            active_starts.append(t)
        active_pts = np.concatenate([active_pts, fresh]) if len(fresh) else active_pts

        if t == num_frames - 1:
            break

        fwd = provider.flow(t, t + 1).flow
        bwd = provider.flow(t + 1, t).flow
        nxt = active_pts + sample_flow(fwd, active_pts)
        ok = in_bounds(nxt, hw)
        back = np.full_like(nxt, np.inf)
        if ok.any():
            back[ok] = nxt[ok] + sample_flow(bwd, nxt[ok])
        err = np.linalg.norm(active_pts - back, axis=1)
        ok &= err < cfg.cycle_tol

        surv_tracks, surv_starts = [], []
        for k in range(len(active_tracks)):
            if ok[k]:
                active_tracks[k].append(nxt[k])
                surv_tracks.append(active_tracks[k])
                surv_starts.append(active_starts[k])
            else:
                done.append(Tracklet(active_starts[k], np.array(active_tracks[k])))
        active_tracks, active_starts = surv_tracks, surv_starts
        active_pts = nxt[ok]

    for k in range(len(active_tracks)):
        done.append(Tracklet(active_starts[k], np.array(active_tracks[k])))
    return done


def filter_long_range(tracklets: list[Tracklet], provider, hw: tuple[int, int],
                      cfg: ChainConfig) -> FlowCorrespondenceSet:
    """Emit all within-tracklet pairs, dropping drifted ones.

    For frame gaps <= max_direct_gap a pair is dropped iff the chained point
    disagrees with the direct flow prediction by >= cycle_tol_long while the
    direct flow itself is cycle-consistent (<= cycle_tol). Larger gaps pass
    unverified.
    """
    by_gap: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = {}
    for tr in tracklets:
        for a in range(tr.length):
            for b in range(a + 1, tr.length):
                key = (tr.start_frame + a, tr.start_frame + b)
                by_gap.setdefault(key, []).append((tr.points[a], tr.points[b]))

    fi, fj, xs, xt = [], [], [], []
    for (i, j), pairs in sorted(by_gap.items()):
        xi = np.array([p[0] for p in pairs])
        xj = np.array([p[1] for p in pairs])
        keep = np.ones(len(pairs), dtype=bool)
        if j - i <= cfg.max_direct_gap:
            fwd = provider.flow(i, j).flow
            bwd = provider.flow(j, i).flow
            x_ij = xi + sample_flow(fwd, xi)
            drift = np.linalg.norm(xj - x_ij, axis=1)
            inb = in_bounds(x_ij, hw)
            cyc = np.full(len(pairs), np.inf)
            if inb.any():
                cyc[inb] = np.linalg.norm(
                    xi[inb] - (x_ij[inb] + sample_flow(bwd, x_ij[inb])), axis=1)
            keep = ~((drift >= cfg.cycle_tol_long) & (cyc <= cfg.cycle_tol))
        fi.append(np.full(keep.sum(), i, dtype=np.int64))
        fj.append(np.full(keep.sum(), j, dtype=np.int64))
        xs.append(xi[keep])
        xt.append(xj[keep])

    if not fi:
        return FlowCorrespondenceSet.empty()
    return FlowCorrespondenceSet(
        np.concatenate(fi), np.concatenate(fj),
        np.concatenate(xs), np.concatenate(xt))


def mark_foreground(corr: FlowCorrespondenceSet, masks, stride: int,
                    patch_size: int) -> None:
    """Flag pairs whose endpoints both fall on foreground feature cells."""
    from .backbone import pixel_to_feature_grid

    if len(corr) == 0:
        return
    fg = np.ones(len(corr), dtype=bool)
    for pts, frames in ((corr.xi, corr.frame_i), (corr.xj, corr.frame_j)):
        rc = pixel_to_feature_grid(pts, stride, patch_size)
        for k in range(len(corr)):
            m = masks[frames[k]].mask
            r = int(np.clip(round(rc[k, 0]), 0, m.shape[0] - 1))
            c = int(np.clip(round(rc[k, 1]), 0, m.shape[1] - 1))
            fg[k] &= bool(m[r, c])
    corr.foreground = fg
