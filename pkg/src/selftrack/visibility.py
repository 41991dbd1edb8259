"""Post-hoc visibility prediction via trajectory agreement.

A tracked point is visible when re-launching the tracker from its estimated
position reproduces the query's trajectory at a set of high-confidence anchor
frames, and its feature still resembles the query feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VisibilityConfig:
    anchor_sim_min: float = 0.7
    occlusion_sim_min: float = 0.6  # gamma_occ
    max_anchors: int = 32

    def __post_init__(self):
        for v in (self.anchor_sim_min, self.occlusion_sim_min):
            if not -1 <= v <= 1:
                raise ValueError("similarity thresholds must lie in [-1, 1]")


@dataclass
class TrajectoryEstimate:
    query_frame: int
    query_xy: np.ndarray       # (2,)
    positions: np.ndarray      # (T, 2)
    similarities: np.ndarray   # (T,)
    visibility: np.ndarray | None = None  # (T,) bool, filled by predict


def lower_median(values: np.ndarray) -> float:
    """Order statistic at index ceil(n/2) - 1; deterministic for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) + 1) // 2 - 1])


def select_anchors(traj: TrajectoryEstimate, cfg: VisibilityConfig) -> list[int]:
    """Frames whose feature similarity qualifies them as anchors.

    Falls back to {query frame, top-similarity frame} when fewer than two
    qualify; an over-long anchor list is subsampled uniformly by rank.
    """
    anchors = [t for t in range(len(traj.similarities))
               if traj.similarities[t] >= cfg.anchor_sim_min]
    if len(anchors) < 2:
        best = int(np.argmax(traj.similarities))
        anchors = sorted({traj.query_frame, best})
        if len(anchors) < 2:  # query frame is also the best frame
            second = int(np.argsort(traj.similarities)[-2])
            anchors = sorted({traj.query_frame, second})
    if len(anchors) > cfg.max_anchors:
        ranked = sorted(anchors, key=lambda t: -traj.similarities[t])
        step = len(ranked) / cfg.max_anchors
        ranked = [ranked[int(k * step)] for k in range(cfg.max_anchors)]
        anchors = sorted(ranked)
    return anchors


def agreement_threshold(traj: TrajectoryEstimate, anchors: list[int],
                        track_fn) -> float:
    """Max over anchors of the median re-tracking disagreement, in pixels.

    ``track_fn(points, query_frame, target_frame) -> (N, 2)``.
    """
    if len(anchors) < 2:
        raise ValueError("need at least 2 anchors")
    errs = np.empty((len(anchors), len(anchors)))
    for a, k in enumerate(anchors):
        pred = np.stack([track_fn(traj.positions[k][None], k, ki)[0]
                         for ki in anchors])
        errs[a] = np.linalg.norm(pred - traj.positions[anchors], axis=1)
    e_k = [lower_median(np.delete(errs[a], a)) for a in range(len(anchors))]
    return float(max(e_k))


def predict_visibility(traj: TrajectoryEstimate, e_q: float, anchors: list[int],
                       track_fn, cfg: VisibilityConfig) -> np.ndarray:
    """Visible iff the re-launched trajectory agrees at the anchors (median
    displacement <= e_q) and the feature similarity clears gamma_occ."""
    t_total = len(traj.positions)
    anchor_pos = traj.positions[anchors]  # = track(query, k) for each anchor k
    visible = np.zeros(t_total, dtype=bool)
    for t in range(t_total):
        if traj.similarities[t] < cfg.occlusion_sim_min:
            continue
        re_tracked = np.stack([track_fn(traj.positions[t][None], t, k)[0]
                               for k in anchors])
        d_k = np.linalg.norm(anchor_pos - re_tracked, axis=1)
        visible[t] = lower_median(d_k) <= e_q
    return visible


def fill_visibility(traj: TrajectoryEstimate, track_fn,
                    cfg: VisibilityConfig | None = None) -> TrajectoryEstimate:
    """Convenience wrapper running the full anchor/threshold/predict chain."""
    cfg = cfg or VisibilityConfig()
    anchors = select_anchors(traj, cfg)
    e_q = agreement_threshold(traj, anchors, track_fn)
    traj.visibility = predict_visibility(traj, e_q, anchors, track_fn, cfg)
    return traj
