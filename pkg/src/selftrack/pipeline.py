"""Stage glue: preprocessing with caching, trajectory inference, ground-truth
I/O, and visualization. The CLI is a thin wrapper over these."""

from __future__ import annotations

import io
import pickle
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .backbone import (BackboneConfig, MockBackbone, PretrainedViTBackbone,
                       compute_foreground_masks)
from .errors import InputError
from .flow import (ChainConfig, FlowCorrespondenceSet, FlowProvider,
                   PhaseCorrelationFlow, PretrainedFlowEstimator,
                   chain_tracklets, filter_long_range, mark_foreground)
from .media import ArtifactCache, FrameSequence, TrajectoryRecord
from .mining import MinerConfig, exclude_flow_covered, mine_dino_buddies
from .tracker import Tracker
from .training import Supervision, config_hash_of
from .visibility import TrajectoryEstimate, VisibilityConfig, fill_visibility


def build_backbone(cfg: BackboneConfig, mock: bool, seed: int = 0):
    if mock:
        return MockBackbone(cfg, seed=seed)
    return PretrainedViTBackbone(cfg)


def build_flow_estimator(mock: bool):
    if mock:
        return PhaseCorrelationFlow()
    return PretrainedFlowEstimator()


def _cached_pickle(cache: ArtifactCache | None, video_id: str, stage: str,
                   chash: str, fn):
    if cache is None:
        return fn()
    blob = cache.get_or_compute(video_id, stage, chash,
                                lambda: pickle.dumps(fn(), protocol=4))
    return pickle.loads(blob)


def preprocess(seq: FrameSequence, backbone, flow_estimator,
               bb_cfg: BackboneConfig, chain_cfg: ChainConfig,
               miner_cfg: MinerConfig,
               cache: ArtifactCache | None = None, video_id: str = "video",
               user_masks: np.ndarray | None = None,
               frame_subsample: int = 1,
               flow_provider=None) -> Supervision:
    """Compute flow correspondences, feature best-buddies, and masks.

    Every stage is cached under a hash of the parameters that influence it.
    ``flow_provider`` may be passed directly (analytic synthetic flow).
    """
    allowed = list(range(0, seq.num_frames, frame_subsample))
    provider = flow_provider or FlowProvider(seq, flow_estimator)

    flow_hash = config_hash_of(chain_cfg, frame_subsample, seq.working_size)

    def compute_flow_set():
        tracklets = chain_tracklets(seq.num_frames, seq.working_size, provider,
                                    chain_cfg)
        corr = filter_long_range(tracklets, provider, seq.working_size, chain_cfg)
        if frame_subsample > 1:
            sel = (np.isin(corr.frame_i, allowed) & np.isin(corr.frame_j, allowed))
            corr = FlowCorrespondenceSet(corr.frame_i[sel], corr.frame_j[sel],
                                         corr.xi[sel], corr.xj[sel])
        return corr

    flow_set = _cached_pickle(cache, video_id, "flow_corr", flow_hash,
                              compute_flow_set)

    mask_hash = config_hash_of(bb_cfg, user_masks is not None)
    masks = _cached_pickle(cache, video_id, "masks", mask_hash,
                           lambda: compute_foreground_masks(seq, backbone, bb_cfg,
                                                            user_masks))
    mark_foreground(flow_set, masks, bb_cfg.stride, bb_cfg.patch_size)

    bb_hash = config_hash_of(bb_cfg, miner_cfg, chain_cfg, frame_subsample)

    def compute_dino_bb():
        feats = {t: backbone.extract(seq.frames[t], t) for t in allowed}
        out = {}
        for a in range(len(allowed)):
            for b in range(a + 1, len(allowed)):
                i, j = allowed[a], allowed[b]
                pairs = mine_dino_buddies(feats[i], feats[j], miner_cfg)
                pairs = exclude_flow_covered(pairs, flow_set, bb_cfg.stride,
                                             bb_cfg.patch_size)
                if pairs:
                    out[(i, j)] = pairs
        return out

    dino_bb = _cached_pickle(cache, video_id, "dino_bb", bb_hash, compute_dino_bb)
    return Supervision(flow_set, dino_bb, masks)


# --------------------------------------------------------------------------
# inference


def parse_queries(spec: str) -> list[tuple[float, float, int]]:
    """Parse ``x,y,frame;x,y,frame;...`` query strings."""
    out = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(",")
        if len(bits) != 3:
            raise InputError(f"bad query '{part}'; expected x,y,frame")
        try:
            out.append((float(bits[0]), float(bits[1]), int(bits[2])))
        except ValueError as exc:
            raise InputError(f"bad query '{part}': {exc}") from None
    return out


def track_queries(tracker: Tracker, queries: list[tuple[float, float, int]],
                  with_visibility: bool = False,
                  vis_cfg: VisibilityConfig | None = None
                  ) -> tuple[list[TrajectoryRecord], list[TrajectoryEstimate]]:
    """Run inference for queries given in original-resolution coordinates.

    Returns trajectory records (original resolution) plus the raw estimates
    (working resolution) for reuse by the visibility stage.
    """
    seq = tracker.seq
    records: list[TrajectoryRecord] = []
    estimates: list[TrajectoryEstimate] = []
    for qid, (x, y, qframe) in enumerate(queries):
        if not 0 <= qframe < seq.num_frames:
            raise InputError(f"query frame {qframe} outside video")
        wxy = seq.to_working(np.array([x, y]))
        positions, sims = tracker.track_trajectory(wxy, qframe)
        est = TrajectoryEstimate(qframe, wxy, positions, sims)
        if with_visibility:
            fill_visibility(est, tracker.track_points_np, vis_cfg)
        vis = est.visibility if est.visibility is not None \
            else np.ones(seq.num_frames, dtype=bool)
        orig = seq.to_original(positions)
        h0, w0 = seq.original_size
        orig[:, 0] = np.clip(orig[:, 0], 0, np.nextafter(w0, 0))
        orig[:, 1] = np.clip(orig[:, 1], 0, np.nextafter(h0, 0))
        for t in range(seq.num_frames):
            records.append(TrajectoryRecord(qid, qframe, t, float(orig[t, 0]),
                                            float(orig[t, 1]), bool(vis[t]),
                                            float(np.clip(sims[t], -1, 1))))
        estimates.append(est)
    return records, estimates


# --------------------------------------------------------------------------
# ground-truth I/O (benchmark-style per-video records)


def save_ground_truth(path: str, positions: np.ndarray, occluded: np.ndarray,
                      original_hw: tuple[int, int],
                      areas: np.ndarray | None = None) -> None:
    """positions: (N, T, 2) original-resolution; occluded: (N, T) bool."""
    payload = dict(positions=positions, occluded=occluded,
                   original_hw=np.array(original_hw))
    if areas is not None:
        payload["areas"] = areas
    np.savez(path, **payload)


def load_ground_truth(path: str):
    data = np.load(path)
    areas = data["areas"] if "areas" in data else None
    return (data["positions"], data["occluded"].astype(bool),
            tuple(int(v) for v in data["original_hw"]), areas)


# --------------------------------------------------------------------------
# visualization


_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 190], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


def render_overlays(seq: FrameSequence, records: list[TrajectoryRecord],
                    out_dir: str, foreground_masks=None) -> list[str]:
    """Per-frame overlay PNGs: one color per query, hollow markers when the
    point is predicted occluded."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_frame: dict[int, list[TrajectoryRecord]] = {}
    for r in records:
        by_frame.setdefault(r.frame, []).append(r)
    if max(by_frame) >= seq.num_frames:
        raise InputError("trajectory frames exceed video length")
    paths = []
    import warnings as _w

    for t in range(seq.num_frames):
        img = (seq.frames[t] * 255).astype(np.uint8).copy()
        drawn = 0
        for r in by_frame.get(t, []):
            xy = seq.to_working(np.array([r.x, r.y]))
            if foreground_masks is not None:
                m = foreground_masks[t]
                if not m.any():
                    continue
                my = int(np.clip(round(xy[1] * m.shape[0] / seq.working_size[0]),
                                 0, m.shape[0] - 1))
                mx = int(np.clip(round(xy[0] * m.shape[1] / seq.working_size[1]),
                                 0, m.shape[1] - 1))
                if not m[my, mx]:
                    continue
            color = tuple(int(c) for c in _PALETTE[r.query_id % len(_PALETTE)])
            center = (int(round(xy[0])), int(round(xy[1])))
            thickness = -1 if r.visible else 1
            cv2.circle(img, center, 3, color, thickness)
            drawn += 1
        if foreground_masks is not None and drawn == 0:
            _w.warn(f"frame {t}: no markers after foreground filtering")
        p = out / f"frame_{t:05d}.png"
        cv2.imwrite(str(p), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        paths.append(str(p))
    return paths
