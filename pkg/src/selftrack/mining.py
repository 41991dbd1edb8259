"""Long-range semantic supervision: mutual-nearest-neighbor feature pairs with
confidence weights, plus cycle-consistent point pairs mined from the tracker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .backbone import FeatureMap, feature_grid_to_pixel
from .errors import InputError
from .flow import FlowCorrespondenceSet


@dataclass
class MinerConfig:
    unimodality_scale: float = 27.0    # a
    unimodality_bias: float = -5.7     # b, stored as published
    literal_bias_sign: bool = False    # sigma(a(1-r) - b) instead of sigma(a(1-r) + b)
    nms_box: float = 60.0              # px
    nms_iou: float = 0.2
    cycle_tol: float = 4.0             # px, gamma for cycle pairs
    cycle_decay: float = 0.8           # w = decay ** e_cyc

    def __post_init__(self):
        if self.nms_box <= 0 or not 0 < self.nms_iou < 1:
            raise InputError("bad NMS parameters")


@dataclass
class BuddyPair:
    i: int
    j: int
    cell_i: tuple[int, int]  # (row, col) on frame i's feature grid
    cell_j: tuple[int, int]
    s: float                 # cosine similarity at mining time
    w: float = 0.0


@dataclass
class CyclePair:
    i: int
    j: int
    xi: np.ndarray  # (2,) sub-pixel (x, y)
    xj: np.ndarray
    e_cyc: float
    w: float


def _unit_rows(data: np.ndarray) -> np.ndarray:
    flat = data.reshape(-1, data.shape[-1]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.maximum(norms, 1e-12)


def cosine_matrix(feat_a: FeatureMap, feat_b: FeatureMap) -> np.ndarray:
    if feat_a.channels != feat_b.channels:
        raise InputError("feature maps must share channel count")
    return _unit_rows(feat_a.data) @ _unit_rows(feat_b.data).T


def _mutual_indices(sim: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nn_ab = sim.argmax(axis=1)  # first occurrence = lowest row-major index
    nn_ba = sim.argmax(axis=0)
    ids = np.arange(sim.shape[0])
    mask = nn_ba[nn_ab] == ids
    return ids[mask], nn_ab[mask]


def mine_best_buddies(feat_a: FeatureMap, feat_b: FeatureMap) -> list[BuddyPair]:
    """Mutual cosine nearest neighbors between two feature grids."""
    sim = cosine_matrix(feat_a, feat_b)
    ia, ib = _mutual_indices(sim)
    gw_a = feat_a.grid_shape[1]
    gw_b = feat_b.grid_shape[1]
    return [
        BuddyPair(feat_a.frame_index, feat_b.frame_index,
                  (int(a) // gw_a, int(a) % gw_a),
                  (int(b) // gw_b, int(b) % gw_b),
                  float(sim[a, b]))
        for a, b in zip(ia, ib)
    ]


def nms_top2(sim_map: np.ndarray, stride: int,
             cfg: MinerConfig) -> tuple[float, float | None]:
    """Top-2 peak similarities under box NMS on the pixel-scaled grid.

    Boxes of ``nms_box`` px sit at each cell's patch center; greedy NMS at the
    IoU threshold. Returns (s1, s2); s2 is None when a single peak survives.
    """
    if sim_map.size == 0:
        raise InputError("empty similarity map")
    gh, gw = sim_map.shape
    rr, cc = np.unravel_index(int(np.argmax(sim_map)), sim_map.shape)
    s1 = float(sim_map[rr, cc])
    if sim_map.size == 1:
        return s1, None
    # suppress boxes overlapping the winner above the IoU threshold
    rows = np.arange(gh)[:, None]
    cols = np.arange(gw)[None, :]
    dx = np.abs(cols - cc) * stride
    dy = np.abs(rows - rr) * stride
    box = cfg.nms_box
    inter = np.maximum(box - dx, 0.0) * np.maximum(box - dy, 0.0)
    iou = inter / (2 * box * box - inter)
    alive = iou <= cfg.nms_iou
    if not alive.any():
        return s1, None
    s2 = float(sim_map[alive].max())
    return s1, s2


def _peak_ratio(sim_map: np.ndarray, stride: int, cfg: MinerConfig) -> float:
    s1, s2 = nms_top2(sim_map, stride, cfg)
    if s2 is None or s1 <= 0:
        return 0.0
    return s2 / s1


def buddy_confidence(sim_row: np.ndarray, s_ij: float, sim_row_rev: np.ndarray,
                     stride: int, cfg: MinerConfig) -> float:
    """Confidence weight combining correlation unimodality and strength.

    w = sigmoid(a * (1 - max(r_ij, r_ji)) + b) * 2 * s^3, where r is the
    ratio of the top-2 NMS peaks of each direction's similarity map. The
    published bias enters additively (gating form); ``literal_bias_sign``
    switches to the subtracted form.
    """
    r_ij = _peak_ratio(sim_row, stride, cfg)
    r_ji = _peak_ratio(sim_row_rev, stride, cfg)
    r = max(r_ij, r_ji)
    a, b = cfg.unimodality_scale, cfg.unimodality_bias
    arg = a * (1.0 - r) + (-b if cfg.literal_bias_sign else b)
    gate = float(expit(arg))
    return gate * 2.0 * max(s_ij, 0.0) ** 3


def mine_dino_buddies(feat_i: FeatureMap, feat_j: FeatureMap,
                      cfg: MinerConfig) -> list[BuddyPair]:
    """Best buddies on frozen backbone features with confidence weights."""
    sim = cosine_matrix(feat_i, feat_j)
    pairs = mine_best_buddies(feat_i, feat_j)
    gh_i, gw_i = feat_i.grid_shape
    gh_j, gw_j = feat_j.grid_shape
    for p in pairs:
        a = p.cell_i[0] * gw_i + p.cell_i[1]
        b = p.cell_j[0] * gw_j + p.cell_j[1]
        p.w = buddy_confidence(sim[a].reshape(gh_j, gw_j), p.s,
                               sim[:, b].reshape(gh_i, gw_i),
                               feat_i.stride, cfg)
    return pairs


def mine_refined_buddies(feat_a: FeatureMap, feat_b: FeatureMap) -> list[BuddyPair]:
    """Best buddies on the current refined features; w = 2 * s^3 (clamped at 0)."""
    pairs = mine_best_buddies(feat_a, feat_b)
    for p in pairs:
        p.w = 2.0 * max(p.s, 0.0) ** 3
    return pairs


def mine_cycle_pairs(track_fn, frame_pairs: list[tuple[int, int]],
                     seeds: dict[int, np.ndarray], cfg: MinerConfig) -> list[CyclePair]:
    """Cycle-consistent point pairs distilled from the tracker itself.

    ``track_fn(points, query_frame, target_frame) -> (M, 2)`` runs inference.
    For seed x on frame i: x_j = track(x, i, j); kept when the backward
    re-track lands within ``cycle_tol`` of x, weighted by decay ** error.
    """
    out: list[CyclePair] = []
    for i, j in frame_pairs:
        pts = seeds.get(i)
        if pts is None or len(pts) == 0:
            continue
        fwd = track_fn(pts, i, j)
        back = track_fn(fwd, j, i)
        err = np.linalg.norm(back - pts, axis=1)
        for k in np.flatnonzero(err <= cfg.cycle_tol):
            out.append(CyclePair(i, j, pts[k].copy(), fwd[k].copy(),
                                 float(err[k]), float(cfg.cycle_decay ** err[k])))
    return out


def exclude_flow_covered(buddies: list[BuddyPair], flow_set: FlowCorrespondenceSet,
                         stride: int, patch_size: int) -> list[BuddyPair]:
    """Drop buddies that duplicate flow supervision: a buddy goes iff one flow
    pair between the same frames sits within stride/2 px of both endpoints."""
    if len(flow_set) == 0 or not buddies:
        return list(buddies)
    tol = stride / 2.0
    trees: dict[tuple[int, int], tuple[cKDTree, np.ndarray]] = {}
    frames = np.stack([flow_set.frame_i, flow_set.frame_j], axis=1)
    for key in {tuple(f) for f in frames}:
        sel = (flow_set.frame_i == key[0]) & (flow_set.frame_j == key[1])
        trees[key] = (cKDTree(flow_set.xi[sel]), flow_set.xj[sel])

    kept = []
    for p in buddies:
        entry = trees.get((p.i, p.j))
        if entry is None:
            kept.append(p)
            continue
        tree, xj = entry
        px_i = feature_grid_to_pixel(np.array([p.cell_i], float), stride, patch_size)[0]
        px_j = feature_grid_to_pixel(np.array([p.cell_j], float), stride, patch_size)[0]
        near = tree.query_ball_point(px_i, tol)
        covered = any(np.linalg.norm(xj[k] - px_j) <= tol for k in near)
        if not covered:
            kept.append(p)
    return kept
