"""Evaluation: scene-coordinate inliers and 6D pose accuracy.

A coordinate prediction is an inlier when its Euclidean distance to ground
truth is strictly below 10 cm. A pose is correct when translation error is
strictly below 5 cm and rotation error strictly below 5 degrees; both cutoffs
are configurable but strict. Scene summaries use per-scene medians (mean of
the central pair for even counts) averaged across scenes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, EmptyScene

COORD_INLIER_M = 0.10
POSE_MAX_TRANSLATION_M = 0.05
POSE_MAX_ROTATION_DEG = 5.0


@dataclass(frozen=True)
class CoordMetrics:
    inlier_fraction: float
    mean_inlier_distance: float  # meters, over the inliers only
    n_pixels: int
    n_inliers: int


@dataclass(frozen=True)
class PoseMetrics:
    translation_error: float  # meters
    rotation_error: float  # degrees, in [0, 180]
    correct: bool


def coord_metrics(predictions, ground_truth, valid=None, threshold=COORD_INLIER_M):
    """Inlier fraction and mean inlier distance over aligned (N, 3) arrays.

    valid masks out pixels without usable ground truth. Raises EmptyInput
    when nothing is left to score."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise DimensionMismatch(
            f"prediction/ground-truth shapes differ: {pred.shape} vs {gt.shape}"
        )
    if valid is not None:
        mask = np.asarray(valid, dtype=bool).reshape(-1)
        if mask.shape[0] != pred.shape[0]:
            raise DimensionMismatch("valid mask length does not match predictions")
        pred, gt = pred[mask], gt[mask]
    finite = np.isfinite(gt).all(axis=1)
    pred, gt = pred[finite], gt[finite]
    n = pred.shape[0]
    if n == 0:
        raise EmptyInput("no valid pixels to score")
    dist = np.linalg.norm(pred - gt, axis=1)
    inlier = dist < threshold  # strictly below: 10 cm exactly does not count
    n_in = int(inlier.sum())
    mean_in = float(dist[inlier].mean()) if n_in else 0.0
    return CoordMetrics(
        inlier_fraction=n_in / n,
        mean_inlier_distance=mean_in,
        n_pixels=n,
        n_inliers=n_in,
    )


def _rotation_cos(r_a, r_b):
    c = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    return float(np.clip(c, -1.0, 1.0))


def rotation_angle_deg(r_a, r_b):
    """Geodesic angle between two rotation matrices, degrees."""
    if np.array_equal(r_a, r_b):
        return 0.0
    return float(np.degrees(np.arccos(_rotation_cos(r_a, r_b))))


def pose_metrics(
    estimate,
    gt,
    max_translation=POSE_MAX_TRANSLATION_M,
    max_rotation=POSE_MAX_ROTATION_DEG,
):
    """Errors of an estimated pose against ground truth.

    Rotation correctness is decided in cosine space (larger cosine means
    smaller angle), which keeps the strict 5-degree boundary exact where the
    arccos round trip would blur it."""
    t_err = float(np.linalg.norm(estimate.translation - gt.translation))
    r_err = rotation_angle_deg(estimate.rotation, gt.rotation)
    rot_ok = _rotation_cos(estimate.rotation, gt.rotation) > np.cos(
        np.radians(max_rotation)
    )
    return PoseMetrics(
        translation_error=t_err,
        rotation_error=r_err,
        correct=bool(t_err < max_translation and rot_ok),
    )


@dataclass(frozen=True)
class SceneSummary:
    median_translation: float
    median_rotation: float
    percent_correct: float
    n_frames: int


@dataclass(frozen=True)
class AggregateSummary:
    per_scene: dict  # name -> SceneSummary
    mean_median_translation: float  # cross-scene mean of per-scene medians
    mean_median_rotation: float
    overall_percent_correct: float  # over all frames pooled
    mean_scene_percent_correct: float
    n_frames: int


def aggregate(scenes):
    """Summarize {scene name: [PoseMetrics per frame]}.

    Per-scene medians of the error components, their cross-scene means, and
    correctness percentages both pooled over frames and averaged over
    scenes."""
    if not scenes:
        raise EmptyScene("no scenes to aggregate")
    per_scene = {}
    correct_total = 0
    n_total = 0
    for name, frames in scenes.items():
        if not frames:
            raise EmptyScene(f"scene {name!r} has no frames")
        t = np.array([f.translation_error for f in frames])
        r = np.array([f.rotation_error for f in frames])
        good = sum(1 for f in frames if f.correct)
        per_scene[name] = SceneSummary(
            median_translation=float(np.median(t)),
            median_rotation=float(np.median(r)),
            percent_correct=100.0 * good / len(frames),
            n_frames=len(frames),
        )
        correct_total += good
        n_total += len(frames)
    return AggregateSummary(
        per_scene=per_scene,
        mean_median_translation=float(
            np.mean([s.median_translation for s in per_scene.values()])
        ),
        mean_median_rotation=float(
            np.mean([s.median_rotation for s in per_scene.values()])
        ),
        overall_percent_correct=100.0 * correct_total / n_total,
        mean_scene_percent_correct=float(
            np.mean([s.percent_correct for s in per_scene.values()])
        ),
        n_frames=n_total,
    )
