"""Track ingestion, windowing, splits, and the synthetic ego-drift generator.

Tracks live in a neutral JSONL format (one track per line) instead of the
original licensed dataset layouts:

    {"track_id": "p001", "fps": 30, "frames": [100, 101, ...],
     "boxes": [[cx, cy, w, h], ...], "ego": [5.2, ...], "ego_kind": "speed"}

ego_kind is "speed" (raw km/h scalars) or "behavior" (integer labels 0-4:
stopped, moving slow, moving fast, decelerating, accelerating).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

EGO_KINDS = ("speed", "behavior")
N_BEHAVIOR_LABELS = 5


class TrackFormatError(ValueError):
    """A track record violates the JSONL schema or its invariants."""


@dataclass
class Track:
    track_id: str
    fps: float
    frames: np.ndarray   # (L,) contiguous ints
    boxes: np.ndarray    # (L, 4) center format
    ego: np.ndarray      # (L,) speeds (float) or behavior labels (int)
    ego_kind: str

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TrackSample:
    """One sliding window: m_obs observed frames plus n_pred future boxes."""

    obs_boxes: np.ndarray     # (m_obs, 4)
    obs_ego: np.ndarray       # (m_obs,)
    future_boxes: np.ndarray  # (n_pred, 4)
    track_id: str
    start_frame: int


def _validate_track(rec: dict, where: str) -> Track:
    for key in ("track_id", "fps", "frames", "boxes", "ego", "ego_kind"):
        if key not in rec:
            raise TrackFormatError(f"{where}: missing field '{key}'")
    tid = str(rec["track_id"])
    kind = rec["ego_kind"]
    if kind not in EGO_KINDS:
        raise TrackFormatError(f"{where}: track '{tid}' has unknown ego_kind '{kind}'")
    frames = np.asarray(rec["frames"], dtype=np.int64)
    boxes = np.asarray(rec["boxes"], dtype=np.float64)
    ego = np.asarray(rec["ego"], dtype=np.float64)
    if not (len(frames) == len(boxes) == len(ego)):
        raise TrackFormatError(f"{where}: track '{tid}' has mismatched lengths "
                               f"(frames {len(frames)}, boxes {len(boxes)}, ego {len(ego)})")
    if len(frames) > 1 and np.any(np.diff(frames) != 1):
        raise TrackFormatError(f"{where}: track '{tid}' frames are not contiguous")
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise TrackFormatError(f"{where}: track '{tid}' boxes are not (L, 4)")
    if np.any(boxes[:, 2:] <= 0):
        raise TrackFormatError(f"{where}: track '{tid}' has non-positive box width/height")
    if kind == "behavior":
        if np.any(ego != np.round(ego)) or np.any(ego < 0) or np.any(ego >= N_BEHAVIOR_LABELS):
            raise TrackFormatError(f"{where}: track '{tid}' behavior labels must be "
                                   f"integers in 0..{N_BEHAVIOR_LABELS - 1}")
        ego = ego.astype(np.int64)
    return Track(track_id=tid, fps=float(rec["fps"]), frames=frames,
                 boxes=boxes, ego=ego, ego_kind=kind)


def load_tracks(path) -> list[Track]:
    tracks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TrackFormatError(f"{where}: invalid JSON ({e.msg})") from e
            tracks.append(_validate_track(rec, where))
    return tracks


def save_tracks(path, tracks: list[Track]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracks:
            ego = t.ego.tolist()
            rec = {"track_id": t.track_id, "fps": t.fps,
                   "frames": t.frames.tolist(), "boxes": t.boxes.tolist(),
                   "ego": ego, "ego_kind": t.ego_kind}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def window_samples(tracks: list[Track], m_obs: int, n_pred: int,
                   stride: int = 1) -> list[TrackSample]:
    """Every contiguous window of length m_obs + n_pred, in track/frame order."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    win = m_obs + n_pred
    samples = []
    for t in tracks:
        for start in range(0, len(t) - win + 1, stride):
            samples.append(TrackSample(
                obs_boxes=t.boxes[start:start + m_obs],
                obs_ego=t.ego[start:start + m_obs],
                future_boxes=t.boxes[start + m_obs:start + win],
                track_id=t.track_id,
                start_frame=int(t.frames[start]),
            ))
    return samples


def split(tracks: list[Track], ratios: tuple[float, float, float] = (0.5, 0.1, 0.4),
          seed: int = 0) -> tuple[list[Track], list[Track], list[Track]]:
    """Whole-track split (no window leakage): floor counts, remainder to test."""
    if not tracks:
        raise ValueError("cannot split an empty track list")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(tracks))
    n_train = int(len(tracks) * ratios[0])
    n_val = int(len(tracks) * ratios[1])
    train = [tracks[i] for i in order[:n_train]]
    val = [tracks[i] for i in order[n_train:n_train + n_val]]
    test = [tracks[i] for i in order[n_train + n_val:]]
    return train, val, test


def speed_to_behavior(speeds: np.ndarray) -> np.ndarray:
    """Quantize a speed sequence into the 5 behavior labels."""
    speeds = np.asarray(speeds, dtype=np.float64)
    accel = np.zeros_like(speeds)
    accel[1:] = speeds[1:] - speeds[:-1]
    labels = np.where(speeds < 5.0, 1, 2)           # moving slow / fast
    labels = np.where(accel > 0.75, 4, labels)      # accelerating
    labels = np.where(accel < -0.75, 3, labels)     # decelerating
    labels = np.where(speeds < 0.5, 0, labels)      # stopped
    return labels.astype(np.int64)


def to_behavior_tracks(tracks: list[Track]) -> list[Track]:
    """Derive a behavior-labelled copy of speed tracks (JAAD-style mode)."""
    out = []
    for t in tracks:
        if t.ego_kind != "speed":
            raise ValueError(f"track '{t.track_id}' is not a speed track")
        out.append(Track(track_id=t.track_id, fps=t.fps, frames=t.frames.copy(),
                         boxes=t.boxes.copy(), ego=speed_to_behavior(t.ego),
                         ego_kind="behavior"))
    return out


def synth_generate(n_tracks: int, length: int, seed: int = 0,
                   ego_gain: float = 0.8, noise: float = 0.5,
                   fps: float = 30.0) -> list[Track]:
    """Synthetic pedestrian tracks with camera-drift coupling.

    The world-frame pedestrian center moves at constant velocity with optional
    Gaussian jitter of scale ``noise``. The ego speed is a non-negative bounded
    random walk, and the pixel-frame x coordinate is the world x minus
    ``ego_gain`` times the cumulative ego speed. Box scales follow a small
    constant per-track relative rate. With ego_gain=0 and noise=0 every track
    satisfies the CV-CS recurrence exactly.
    """
    if n_tracks < 1 or length < 2:
        raise ValueError(f"invalid generator sizes: n_tracks={n_tracks}, length={length}")
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n_tracks):
        t = np.arange(length, dtype=np.float64)
        x0, y0 = rng.uniform(200, 1700), rng.uniform(200, 900)
        vx, vy = rng.uniform(-3, 3), rng.uniform(-2, 2)
        w0, h0 = rng.uniform(30, 120), rng.uniform(60, 240)
        rate_w, rate_h = rng.uniform(-0.008, 0.008), rng.uniform(-0.008, 0.008)

        steps = rng.normal(0.0, 0.5, size=length)
        speed = np.empty(length)
        speed[0] = rng.uniform(0, 10)
        for j in range(1, length):
            speed[j] = min(max(speed[j - 1] + steps[j], 0.0), 15.0)

        jitter = rng.normal(0.0, 1.0, size=(length, 2)) * noise
        cx = x0 + vx * t + jitter[:, 0] - ego_gain * np.cumsum(speed)
        cy = y0 + vy * t + jitter[:, 1]
        w = w0 * (1.0 + rate_w) ** t
        h = h0 * (1.0 + rate_h) ** t
        tracks.append(Track(track_id=f"synth{i:04d}", fps=fps,
                            frames=np.arange(length, dtype=np.int64),
                            boxes=np.stack([cx, cy, w, h], axis=1),
                            ego=speed, ego_kind="speed"))
    return tracks
