"""Benchmark harness: query-strided protocol, position/occlusion metrics in
the 256x256 metric space, average Jaccard, keypoint metrics, and
occlusion-rate grouping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = (1, 2, 4, 8, 16)
QUERY_STRIDE = 5
METRIC_SPACE = 256.0


@dataclass
class GroundTruthTrack:
    """One annotated track at original resolution."""

    positions: np.ndarray   # (T, 2) pixels, defined where visible
    visible: np.ndarray     # (T,) bool
    areas: np.ndarray | None = None  # (T,) foreground area px^2 (keypoint sets)


@dataclass
class Query:
    track_id: int
    frame: int
    xy: np.ndarray


@dataclass
class MetricReport:
    delta: dict[int, float] = field(default_factory=dict)
    delta_avg: float | None = None
    occlusion_accuracy: float | None = None
    average_jaccard: float | None = None
    delta_seg: float | None = None
    delta_3px: float | None = None
    occlusion_bucket: str | None = None

    def as_dict(self) -> dict:
        out = {f"delta_{x}": v for x, v in self.delta.items()}
        out.update(delta_avg=self.delta_avg, occlusion_accuracy=self.occlusion_accuracy,
                   average_jaccard=self.average_jaccard, delta_seg=self.delta_seg,
                   delta_3px=self.delta_3px)
        if self.occlusion_bucket:
            out["occlusion_bucket"] = self.occlusion_bucket
        return {k: v for k, v in out.items() if v is not None}


def sample_queries_strided(tracks: list[GroundTruthTrack],
                           stride: int = QUERY_STRIDE,
                           first_visible_only: bool = False) -> list[Query]:
    """Every ``stride``-th visible frame of each track becomes a query.

    ``first_visible_only`` switches to the keypoint protocol: one query per
    track at its first visible frame.
    """
    queries = []
    for tid, tr in enumerate(tracks):
        vis = np.flatnonzero(tr.visible)
        if len(vis) == 0:
            warnings.warn(f"track {tid} never visible; skipped")
            continue
        if first_visible_only:
            frames = vis[:1]
        else:
            frames = [t for t in vis if t % stride == 0]
            if not list(frames):
                frames = vis[:1]
        for t in frames:
            queries.append(Query(tid, int(t), tr.positions[int(t)].copy()))
    return queries


def to_metric_space(xy: np.ndarray, original_hw: tuple[int, int]) -> np.ndarray:
    """Scale original-resolution (x, y) into the 256x256 metric space."""
    h0, w0 = original_hw
    return np.asarray(xy, np.float64) * np.array([METRIC_SPACE / w0, METRIC_SPACE / h0])


def position_accuracy(pred_pos: np.ndarray, gt_pos: np.ndarray,
                      gt_vis: np.ndarray,
                      thresholds=THRESHOLDS) -> tuple[dict[int, float], float]:
    """Fraction of gt-visible points within each threshold (256-space inputs)."""
    gt_vis = np.asarray(gt_vis, bool)
    if not gt_vis.any():
        raise ValueError("no visible ground-truth points")
    d = np.linalg.norm(np.asarray(pred_pos, float) - np.asarray(gt_pos, float),
                       axis=-1)[gt_vis]
    delta = {x: float((d <= x).mean()) for x in thresholds}
    return delta, float(np.mean(list(delta.values())))


def occlusion_accuracy(pred_vis: np.ndarray, gt_vis: np.ndarray) -> float:
    """Fraction of (query, frame) cells with a correct visibility flag."""
    pred_vis = np.asarray(pred_vis, bool)
    gt_vis = np.asarray(gt_vis, bool)
    return float((pred_vis == gt_vis).mean())


def average_jaccard(pred_pos, pred_vis, gt_pos, gt_vis,
                    thresholds=THRESHOLDS) -> float:
    """Joint position/visibility score (256-space inputs).

    Per threshold x: TP = gt-visible, predicted visible, within x;
    FP = predicted-visible points that are gt-occluded or farther than x;
    FN = gt-visible points predicted occluded or farther than x.
    A visible-but-far point counts as both FP and FN.
    """
    pred_vis = np.asarray(pred_vis, bool)
    gt_vis = np.asarray(gt_vis, bool)
    d = np.linalg.norm(np.asarray(pred_pos, float) - np.asarray(gt_pos, float), axis=-1)
    scores = []
    for x in thresholds:
        close = d <= x
        tp = (gt_vis & pred_vis & close).sum()
        fp = (pred_vis & (~gt_vis | ~close)).sum()
        fn = (gt_vis & (~pred_vis | ~close)).sum()
        denom = tp + fp + fn
        scores.append(tp / denom if denom else 1.0)
    return float(np.mean(scores))


def keypoint_metrics(pred_pos: np.ndarray, gt_pos: np.ndarray,
                     gt_vis: np.ndarray, areas: np.ndarray) -> tuple[float, float]:
    """(delta_seg, delta_3px) at the benchmark's native resolution.

    delta_seg counts errors within 0.2*sqrt(A) of the annotation; frames with
    missing area are skipped for delta_seg only.
    """
    gt_vis = np.asarray(gt_vis, bool)
    d = np.linalg.norm(np.asarray(pred_pos, float) - np.asarray(gt_pos, float),
                       axis=-1)[gt_vis]
    areas = np.asarray(areas, float)[gt_vis]
    has_area = np.isfinite(areas) & (areas > 0)
    if not has_area.all():
        warnings.warn("frames without foreground area skipped for delta_seg")
    seg = float((d[has_area] <= 0.2 * np.sqrt(areas[has_area])).mean()) \
        if has_area.any() else float("nan")
    px3 = float((d <= 3.0).mean())
    return seg, px3


def occlusion_rate(tracks: list[GroundTruthTrack]) -> float:
    """Per-video mean over trajectories of occluded-frame fraction."""
    rates = [1.0 - tr.visible.mean() for tr in tracks]
    return float(np.mean(rates))


def group_by_occlusion_rate(video_ids: list[str],
                            video_tracks: dict[str, list[GroundTruthTrack]]
                            ) -> dict[str, list[str]]:
    """Split videos into three equal-size buckets by sorted occlusion rate."""
    rates = {v: occlusion_rate(video_tracks[v]) for v in video_ids}
    ordered = sorted(video_ids, key=lambda v: (rates[v], v))
    parts = np.array_split(np.array(ordered, dtype=object), 3)
    return {name: [str(v) for v in part]
            for name, part in zip(("low", "mid", "high"), parts)}


def evaluate_video(pred_pos: np.ndarray, pred_vis: np.ndarray,
                   gt_pos: np.ndarray, gt_vis: np.ndarray,
                   original_hw: tuple[int, int],
                   areas: np.ndarray | None = None) -> MetricReport:
    """Full report for one video; inputs at original resolution, any shape
    broadcastable to (num_queries, T, 2) / (num_queries, T)."""
    rep = MetricReport()
    pp = to_metric_space(pred_pos, original_hw)
    gp = to_metric_space(gt_pos, original_hw)
    rep.delta, rep.delta_avg = position_accuracy(pp, gp, gt_vis)
    rep.occlusion_accuracy = occlusion_accuracy(pred_vis, gt_vis)
    rep.average_jaccard = average_jaccard(pp, pred_vis, gp, gt_vis)
    if areas is not None:
        # keypoint metrics stay at the benchmark's native resolution
        rep.delta_seg, rep.delta_3px = keypoint_metrics(
            np.asarray(pred_pos, float).reshape(-1, 2),
            np.asarray(gt_pos, float).reshape(-1, 2),
            np.asarray(gt_vis, bool).reshape(-1),
            np.asarray(areas, float).reshape(-1))
    return rep
