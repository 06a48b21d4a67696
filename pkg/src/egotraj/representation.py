"""Box representations, motion states, and the CV-CS reference trajectory.

Boxes are center-format (x, y, w, h) rows of float64 arrays; all functions
accept arbitrary leading batch axes with the frame index on axis -2.

The constant-velocity / constant-scaling (CV-CS) prior extrapolates the last
observed box with the mean recent center velocity and the mean recent
relative scale rate; the network regresses only the residual offset from
that reference, so an untrained zero-output head already reproduces the
kinematic baseline.
"""

from __future__ import annotations

import numpy as np

# number of adjacent-frame differences averaged for the CV-CS statistics
CVCS_WINDOW = 5


class DegenerateScaleError(ValueError):
    """Scale-rate extrapolation would produce non-positive width/height."""


def validate_boxes(boxes: np.ndarray, what: str = "boxes") -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-1] != 4:
        raise ValueError(f"{what} must have 4 components (x,y,w,h), got shape {boxes.shape}")
    if np.any(boxes[..., 2:] <= 0):
        raise ValueError(f"{what} contain non-positive width/height")
    return boxes


def to_motion_states(boxes: np.ndarray) -> np.ndarray:
    """(..., m, 4) boxes -> (..., m, 8) states with adjacent-frame deltas.

    The first frame has no predecessor; its deltas are zero by convention.
    """
    boxes = validate_boxes(boxes)
    m = boxes.shape[-2]
    if m < 2:
        raise ValueError(f"need at least 2 frames for motion states, got {m}")
    deltas = np.zeros_like(boxes)
    deltas[..., 1:, :] = boxes[..., 1:, :] - boxes[..., :-1, :]
    return np.concatenate([boxes, deltas], axis=-1)


def cvcs_statistics(boxes: np.ndarray) -> np.ndarray:
    """Mean recent velocity and relative scale rates, (..., 4) = (vx, vy, rw, rh).

    Averages the last CVCS_WINDOW adjacent-frame differences (fewer when the
    window is shorter). Scale rates are relative: (w_t - w_{t-1}) / w_{t-1}.
    """
    boxes = validate_boxes(boxes)
    m = boxes.shape[-2]
    if m < 2:
        raise ValueError(f"need at least 2 frames for CV-CS statistics, got {m}")
    k = min(CVCS_WINDOW, m - 1)
    recent = boxes[..., m - k - 1:, :]
    vel = (recent[..., 1:, :2] - recent[..., :-1, :2]).mean(axis=-2)
    rate = ((recent[..., 1:, 2:] - recent[..., :-1, 2:])
            / recent[..., :-1, 2:]).mean(axis=-2)
    return np.concatenate([vel, rate], axis=-1)


def cvcs_reference(last_box: np.ndarray, stats: np.ndarray, n: int) -> np.ndarray:
    """Extrapolate the last box n steps: linear centers, geometric scales."""
    last_box = validate_boxes(np.asarray(last_box), "last box")
    stats = np.asarray(stats, dtype=np.float64)
    if n < 1:
        raise ValueError(f"horizon must be >= 1, got {n}")
    if np.any(1.0 + stats[..., 2:] <= 0):
        raise DegenerateScaleError("scale rate <= -1 would collapse the reference box")
    tau = np.arange(1, n + 1, dtype=np.float64)
    centers = last_box[..., None, :2] + stats[..., None, :2] * tau[:, None]
    scales = last_box[..., None, 2:] * (1.0 + stats[..., None, 2:]) ** tau[:, None]
    return np.concatenate([centers, scales], axis=-1)


def offsets_from_targets(ref: np.ndarray, gt: np.ndarray) -> np.ndarray:
    ref, gt = np.asarray(ref, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if ref.shape != gt.shape:
        raise ValueError(f"reference shape {ref.shape} != ground truth shape {gt.shape}")
    return gt - ref


def boxes_from_offsets(ref: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    ref, offsets = np.asarray(ref, dtype=np.float64), np.asarray(offsets, dtype=np.float64)
    if ref.shape != offsets.shape:
        raise ValueError(f"reference shape {ref.shape} != offsets shape {offsets.shape}")
    return ref + offsets


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    """(x, y, w, h) -> (x1, y1, x2, y2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corner_to_center(corners: np.ndarray) -> np.ndarray:
    """(x1, y1, x2, y2) -> (x, y, w, h)."""
    corners = np.asarray(corners, dtype=np.float64)
    wh = corners[..., 2:] - corners[..., :2]
    return np.concatenate([corners[..., :2] + wh / 2.0, wh], axis=-1)
