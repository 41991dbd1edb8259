"""Command-line surface: preprocess, train, track, visibility, eval, viz.

One key-value config file drives every stage; any key can be overridden on
the command line as ``--key value``. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .backbone import BackboneConfig
from .errors import DependencyError, InputError, NumericalError, SelfTrackError
from .flow import ChainConfig
from .losses import LossWeights
from .media import (ArtifactCache, export_trajectories, load_video,
                    read_trajectories)
from .mining import MinerConfig
from .pipeline import (build_backbone, build_flow_estimator, load_ground_truth,
                       parse_queries, preprocess, render_overlays, track_queries)
from .tracker import AdapterConfig, Tracker, TrackerConfig, load_checkpoint
from .training import TrainConfig, config_hash_of, train
from .visibility import TrajectoryEstimate, VisibilityConfig, fill_visibility

_TOP_LEVEL_DEFAULTS = {
    "video": "",
    "output_dir": "out",
    "working_height": 480,
    "seed": 0,
    "mock": False,
    "cache_root": "",
    "queries": "",
    "query_file": "",
    "queries_from_gt": "",
    "ground_truth": "",
    "predictions": "",
    "trajectories": "",
    "checkpoint": "",
    "badja": False,
    "group_by_occlusion": False,
    "manifest": "",
    "with_visibility": True,
    "adapter_channels": "64,128,256",
}

_PREFIXED = {
    "flow": ChainConfig,
    "miner": MinerConfig,
    "backbone": BackboneConfig,
    "loss": LossWeights,
    "vis": VisibilityConfig,
    "tracker": TrackerConfig,
}


def _known_keys() -> dict[str, object]:
    keys = dict(_TOP_LEVEL_DEFAULTS)
    for f in dataclasses.fields(TrainConfig):
        keys[f.name] = getattr(TrainConfig(), f.name)
    for prefix, cls in _PREFIXED.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            keys[f"{prefix}_{f.name}"] = getattr(inst, f.name)
    return keys


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"bad boolean value '{raw}'")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


class RunConfig:
    """Union of all stage configs, from file plus --key overrides."""

    def __init__(self, config_path: str | None, overrides: list[str]):
        self.values = _known_keys()
        if config_path:
            for lineno, line in enumerate(Path(config_path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{config_path}:{lineno}: expected key = value")
                key, raw = (s.strip() for s in line.split("=", 1))
                self._set(key, raw)
        it = iter(overrides)
        for tok in it:
            if not tok.startswith("--"):
                raise InputError(f"unexpected argument '{tok}'")
            key = tok[2:].replace("-", "_")
            try:
                raw = next(it)
            except StopIteration:
                raise InputError(f"missing value for --{key}") from None
            self._set(key, raw)

    def _set(self, key: str, raw: str):
        if key not in self.values:
            raise InputError(f"unknown config key '{key}'")
        self.values[key] = _parse_value(raw, self.values[key])

    def __getitem__(self, key: str):
        return self.values[key]

    def sub(self, cls, prefix: str | None = None):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f.name if prefix is None else f"{prefix}_{f.name}"
            if key in self.values:
                kwargs[f.name] = self.values[key]
        return cls(**kwargs)

    def train_config(self) -> TrainConfig:
        cfg = self.sub(TrainConfig)
        cfg.seed = self.values["seed"]
        return cfg

    def adapter_config(self) -> AdapterConfig:
        chans = tuple(int(c) for c in str(self.values["adapter_channels"]).split(","))
        return AdapterConfig(hidden_channels=chans,
                             out_channels=self.values["backbone_channels"])

    def cache(self) -> ArtifactCache | None:
        root = os.environ.get("SELFTRACK_CACHE_ROOT") or self.values["cache_root"]
        return ArtifactCache(root) if root else None


def _load_sequence(cfg: RunConfig):
    if not cfg["video"]:
        raise InputError("no video given (--video)")
    return load_video(cfg["video"], cfg["working_height"])


def _video_id(cfg: RunConfig) -> str:
    return Path(cfg["video"]).stem or "video"


def _build_tracker(cfg: RunConfig, seq) -> Tracker:
    bb_cfg = cfg.sub(BackboneConfig, "backbone")
    backbone = build_backbone(bb_cfg, cfg["mock"], seed=cfg["seed"])
    tracker_cfg = cfg.sub(TrackerConfig, "tracker")
    tracker_cfg.seed = cfg["seed"]
    return Tracker(seq, backbone, bb_cfg, cfg.adapter_config(), tracker_cfg)


def _preprocess(cfg: RunConfig, seq):
    bb_cfg = cfg.sub(BackboneConfig, "backbone")
    backbone = build_backbone(bb_cfg, cfg["mock"], seed=cfg["seed"])
    estimator = build_flow_estimator(cfg["mock"])
    return preprocess(seq, backbone, estimator, bb_cfg,
                      cfg.sub(ChainConfig, "flow"), cfg.sub(MinerConfig, "miner"),
                      cache=cfg.cache(), video_id=_video_id(cfg),
                      frame_subsample=cfg["frame_subsample"])


def cmd_preprocess(cfg: RunConfig) -> int:
    seq = _load_sequence(cfg)
    sup = _preprocess(cfg, seq)
    n_bb = sum(len(v) for v in sup.dino_bb.values())
    print(f"flow correspondences: {len(sup.flow_set)}")
    print(f"feature best-buddy pairs: {n_bb} over {len(sup.dino_bb)} frame pairs")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    seq = _load_sequence(cfg)
    sup = _preprocess(cfg, seq)
    tracker = _build_tracker(cfg, seq)
    tcfg = cfg.train_config()
    chash = config_hash_of(tcfg, cfg.sub(BackboneConfig, "backbone"))
    train(tracker, sup, tcfg, out_dir=cfg["output_dir"],
          weights=cfg.sub(LossWeights, "loss"),
          miner_cfg=cfg.sub(MinerConfig, "miner"), config_hash=chash)
    print(f"trained {tcfg.iterations} iterations; checkpoints in {cfg['output_dir']}")
    return 0


def _gather_queries(cfg: RunConfig, seq) -> list[tuple[float, float, int]]:
    if cfg["queries"]:
        return parse_queries(cfg["queries"])
    if cfg["query_file"]:
        return parse_queries(";".join(
            ln for ln in Path(cfg["query_file"]).read_text().splitlines() if ln.strip()))
    if cfg["queries_from_gt"]:
        positions, occluded, _hw, areas = load_ground_truth(cfg["queries_from_gt"])
        tracks = [M.GroundTruthTrack(positions[k], ~occluded[k],
                                     None if areas is None else areas[k])
                  for k in range(len(positions))]
        qs = M.sample_queries_strided(tracks, first_visible_only=cfg["badja"])
        return [(float(q.xy[0]), float(q.xy[1]), q.frame) for q in qs]
    raise InputError("no queries given (--queries, --query-file, or --queries-from-gt)")


def cmd_track(cfg: RunConfig) -> int:
    seq = _load_sequence(cfg)
    tracker = _build_tracker(cfg, seq)
    if cfg["checkpoint"]:
        load_checkpoint(cfg["checkpoint"], tracker)
    tracker.eval_mode()
    queries = _gather_queries(cfg, seq)
    records, _ = track_queries(tracker, queries,
                               with_visibility=cfg["with_visibility"],
                               vis_cfg=cfg.sub(VisibilityConfig, "vis"))
    out = Path(cfg["output_dir"]) / "trajectories.csv"
    export_trajectories(records, str(out))
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_visibility(cfg: RunConfig) -> int:
    if not cfg["trajectories"]:
        raise InputError("no trajectory file given (--trajectories)")
    seq = _load_sequence(cfg)
    tracker = _build_tracker(cfg, seq)
    if cfg["checkpoint"]:
        load_checkpoint(cfg["checkpoint"], tracker)
    tracker.eval_mode()
    records = read_trajectories(cfg["trajectories"])
    by_query: dict[int, list] = {}
    for r in records:
        by_query.setdefault(r.query_id, []).append(r)
    vcfg = cfg.sub(VisibilityConfig, "vis")
    out_records = []
    for qid, rows in sorted(by_query.items()):
        rows.sort(key=lambda r: r.frame)
        positions = seq.to_working(np.array([[r.x, r.y] for r in rows]))
        sims = np.array([r.similarity for r in rows])
        qframe = rows[0].query_frame
        est = TrajectoryEstimate(qframe, positions[qframe], positions, sims)
        fill_visibility(est, tracker.track_points_np, vcfg)
        for t, r in enumerate(rows):
            r.visible = bool(est.visibility[t])
            out_records.append(r)
    out = Path(cfg["output_dir"]) / "trajectories.csv"
    export_trajectories(out_records, str(out))
    print(f"wrote visibility for {len(by_query)} queries to {out}")
    return 0


def _eval_one(gt_path: str, pred_path: str, badja: bool) -> M.MetricReport:
    positions, occluded, hw, areas = load_ground_truth(gt_path)
    tracks = [M.GroundTruthTrack(positions[k], ~occluded[k],
                                 None if areas is None else areas[k])
              for k in range(len(positions))]
    queries = M.sample_queries_strided(tracks, first_visible_only=badja)
    records = read_trajectories(pred_path)
    by_query: dict[int, dict[int, object]] = {}
    for r in records:
        by_query.setdefault(r.query_id, {})[r.frame] = r
    if len(by_query) != len(queries):
        raise InputError(
            f"{pred_path}: {len(by_query)} predicted queries, protocol expects "
            f"{len(queries)}")
    t_total = positions.shape[1]
    pp = np.zeros((len(queries), t_total, 2))
    pv = np.zeros((len(queries), t_total), dtype=bool)
    gp = np.zeros_like(pp)
    gv = np.zeros_like(pv)
    area_arr = np.full((len(queries), t_total), np.nan) if areas is not None else None
    for k, q in enumerate(queries):
        rows = by_query[k]
        for t in range(t_total):
            r = rows.get(t)
            if r is None:
                raise InputError(f"{pred_path}: query {k} missing frame {t}")
            pp[k, t] = (r.x, r.y)
            pv[k, t] = r.visible
        gp[k] = positions[q.track_id]
        gv[k] = ~occluded[q.track_id]
        if area_arr is not None:
            area_arr[k] = areas[q.track_id]
    return M.evaluate_video(pp, pv, gp, gv, hw, areas=area_arr)


def cmd_eval(cfg: RunConfig) -> int:
    if cfg["group_by_occlusion"]:
        if not cfg["manifest"]:
            raise InputError("--group-by-occlusion needs --manifest "
                             "(lines: video_id gt.npz pred.csv)")
        entries = []
        for line in Path(cfg["manifest"]).read_text().splitlines():
            if line.strip():
                vid, gt, pred = line.split()
                entries.append((vid, gt, pred))
        video_tracks = {}
        for vid, gt, _pred in entries:
            positions, occluded, _hw, _a = load_ground_truth(gt)
            video_tracks[vid] = [M.GroundTruthTrack(positions[k], ~occluded[k])
                                 for k in range(len(positions))]
        buckets = M.group_by_occlusion_rate([e[0] for e in entries], video_tracks)
        by_id = {e[0]: e for e in entries}
        for bucket, vids in buckets.items():
            print(f"[bucket {bucket}]")
            for vid in vids:
                _, gt, pred = by_id[vid]
                rep = _eval_one(gt, pred, cfg["badja"])
                rep.occlusion_bucket = bucket
                print(f"video = {vid}")
                for k, v in rep.as_dict().items():
                    print(f"{k} = {v}")
        return 0
    if not cfg["ground_truth"] or not cfg["predictions"]:
        raise InputError("eval needs --ground-truth and --predictions")
    rep = _eval_one(cfg["ground_truth"], cfg["predictions"], cfg["badja"])
    for k, v in rep.as_dict().items():
        print(f"{k} = {v}")
    return 0


def cmd_viz(cfg: RunConfig) -> int:
    if not cfg["trajectories"]:
        raise InputError("no trajectory file given (--trajectories)")
    seq = _load_sequence(cfg)
    records = read_trajectories(cfg["trajectories"])
    paths = render_overlays(seq, records, str(Path(cfg["output_dir"]) / "viz"))
    print(f"wrote {len(paths)} overlay frames")
    return 0


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "track": cmd_track,
    "visibility": cmd_visibility,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="selftrack",
        description="Self-supervised test-time-trained point tracker")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="key = value config file")
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = RunConfig(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except SelfTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
