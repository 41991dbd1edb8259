"""Video ingestion, trajectory export, and the on-disk artifact cache."""

from __future__ import annotations

import csv
import io
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from filelock import FileLock

from .errors import CacheError, InputError

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class FrameSequence:
    """Decoded video frames plus the resolution bookkeeping for coordinate mapping.

    frames: (T, H, W, 3) float32 RGB in [0, 1], all frames at working_size.
    """

    frames: np.ndarray
    source_path: str
    original_size: tuple[int, int]  # (H0, W0)
    working_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise InputError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise InputError("a video needs at least 2 frames")
        h, w = self.working_size
        if self.frames.shape[1] != h or self.frames.shape[2] != w:
            raise InputError("frames do not match working_size")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def to_original(self, xy: np.ndarray) -> np.ndarray:
        """Map working-resolution (x, y) points to the original resolution."""
        xy = np.asarray(xy, dtype=np.float64)
        h0, w0 = self.original_size
        h, w = self.working_size
        return xy * np.array([w0 / w, h0 / h])

    def to_working(self, xy: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_original`."""
        xy = np.asarray(xy, dtype=np.float64)
        h0, w0 = self.original_size
        h, w = self.working_size
        return xy * np.array([w / w0, h / h0])


def _decode_frames(path: str) -> list[np.ndarray]:
    p = Path(path)
    frames: list[np.ndarray] = []
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in _IMAGE_EXTS)
        for f in files:
            img = cv2.imread(str(f), cv2.IMREAD_COLOR)
            if img is None:
                raise InputError(f"could not decode image {f}")
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    else:
        if not p.exists():
            raise InputError(f"no such file: {path}")
        cap = cv2.VideoCapture(str(p))
        if not cap.isOpened():
            raise InputError(f"could not open video {path}")
        while True:
            ok, img = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        cap.release()
    return frames


def load_video(path: str, working_height: int = 480) -> FrameSequence:
    """Load a video file or a directory of frames, resized to ``working_height``.

    Aspect ratio is preserved; the original size is retained so trajectories
    can be mapped back.
    """
    if working_height < 32:
        raise InputError("working_height must be >= 32")
    raw = _decode_frames(path)
    if len(raw) < 2:
        raise InputError(f"video has {len(raw)} frame(s); need at least 2")
    h0, w0 = raw[0].shape[:2]
    h = int(working_height)
    w = int(round(w0 * h / h0))
    out = np.empty((len(raw), h, w, 3), dtype=np.float32)
    for t, img in enumerate(raw):
        if img.shape[:2] != (h0, w0):
            raise InputError("all frames must share one resolution")
        if (h, w) == (h0, w0):
            resized = img
        else:
            resized = cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)
        out[t] = resized.astype(np.float32) / 255.0
    np.clip(out, 0.0, 1.0, out=out)
    return FrameSequence(out, str(path), (h0, w0), (h, w))


def sequence_from_frames(frames: np.ndarray, source: str = "<memory>") -> FrameSequence:
    """Wrap an in-memory (T, H, W, 3) float array as a FrameSequence."""
    frames = np.clip(np.asarray(frames, dtype=np.float32), 0.0, 1.0)
    h, w = frames.shape[1:3]
    return FrameSequence(frames, source, (h, w), (h, w))


# --------------------------------------------------------------------------
# trajectory records


@dataclass
class TrajectoryRecord:
    query_id: int
    query_frame: int
    frame: int
    x: float
    y: float
    visible: bool
    similarity: float


_TRAJ_HEADER = "query_id,query_frame,frame,x,y,visible,similarity"
_TRAJ_DTYPE = np.dtype(
    [
        ("query_id", np.int64),
        ("query_frame", np.int64),
        ("frame", np.int64),
        ("x", np.float64),
        ("y", np.float64),
        ("visible", np.bool_),
        ("similarity", np.float64),
    ]
)


def records_to_array(records: list[TrajectoryRecord]) -> np.ndarray:
    arr = np.empty(len(records), dtype=_TRAJ_DTYPE)
    for k, r in enumerate(records):
        arr[k] = (r.query_id, r.query_frame, r.frame, r.x, r.y, r.visible, r.similarity)
    return arr


def array_to_records(arr: np.ndarray) -> list[TrajectoryRecord]:
    return [
        TrajectoryRecord(int(r["query_id"]), int(r["query_frame"]), int(r["frame"]),
                         float(r["x"]), float(r["y"]), bool(r["visible"]),
                         float(r["similarity"]))
        for r in arr
    ]


def export_trajectories(records: list[TrajectoryRecord], path: str) -> None:
    """Write records both as a CSV table at ``path`` and a lossless ``.npz``.

    Rows are sorted by (query_id, frame); floats carry 4 decimals in the text
    table; the binary container preserves full precision.
    """
    if not records:
        raise InputError("export_trajectories: empty record list")
    arr = records_to_array(records)
    arr = arr[np.lexsort((arr["frame"], arr["query_id"]))]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(_TRAJ_HEADER + "\n")
        for r in arr:
            fh.write(
                f"{r['query_id']},{r['query_frame']},{r['frame']},"
                f"{r['x']:.4f},{r['y']:.4f},{1 if r['visible'] else 0},"
                f"{r['similarity']:.4f}\n"
            )
    np.savez(trajectory_binary_path(path), records=arr)


def trajectory_binary_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".npz")


def read_trajectories(path: str) -> list[TrajectoryRecord]:
    """Read trajectories from the binary container (or the CSV as fallback)."""
    binp = trajectory_binary_path(path)
    if binp.exists():
        return array_to_records(np.load(binp)["records"])
    with open(path) as fh:
        reader = csv.DictReader(fh)
        return [
            TrajectoryRecord(int(row["query_id"]), int(row["query_frame"]),
                             int(row["frame"]), float(row["x"]), float(row["y"]),
                             row["visible"] == "1", float(row["similarity"]))
            for row in reader
        ]


# --------------------------------------------------------------------------
# artifact cache


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a checksum."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class ArtifactCache:
    """Content-checksummed byte store at ``<root>/<video_id>/<stage>/<hash>.bin``.

    Writes to the same key serialize through a file lock; a checksum mismatch
    on read raises :class:`CacheError` (callers treat it as a miss).
    """

    def __init__(self, root_dir: str):
        self.root = Path(root_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, video_id: str, stage: str, config_hash: str) -> Path:
        for part in (video_id, stage, config_hash):
            if not part:
                raise InputError("cache key components must be nonempty")
        return self.root / video_id / stage / f"{config_hash}.bin"

    def put(self, video_id: str, stage: str, config_hash: str, data: bytes) -> None:
        p = self._path(video_id, stage, config_hash)
        p.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(p) + ".lock"):
            tmp = p.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                fh.write(struct.pack(">Q", fnv1a64(data)))
                fh.write(data)
            os.replace(tmp, p)

    def get(self, video_id: str, stage: str, config_hash: str) -> bytes | None:
        """Return stored bytes, None on a miss; raise CacheError on corruption."""
        p = self._path(video_id, stage, config_hash)
        if not p.exists():
            return None
        with open(p, "rb") as fh:
            blob = fh.read()
        if len(blob) < 8:
            raise CacheError(f"truncated cache entry {p}")
        (stored,) = struct.unpack(">Q", blob[:8])
        data = blob[8:]
        if fnv1a64(data) != stored:
            raise CacheError(f"checksum mismatch for cache entry {p}")
        return data

    def get_or_compute(self, video_id: str, stage: str, config_hash: str, fn):
        """Cache wrapper: corrupted entries are recomputed and overwritten."""
        try:
            hit = self.get(video_id, stage, config_hash)
        except CacheError as exc:
            warnings.warn(str(exc))
            hit = None
        if hit is not None:
            return hit
        data = fn()
        self.put(video_id, stage, config_hash, data)
        return data


def pack_array(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def unpack_array(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)
