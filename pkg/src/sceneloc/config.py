"""Experiment configuration shared by all pipeline stages.

One flat dataclass so a single JSON file (plus CLI overrides) pins down an
entire run: synthetic scene, feature bank, forest training, network mapping
constants, fine-tuning, robust averaging, and pose estimation. Helper methods
adapt slices of it to the per-module config types.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, IOFailure
from .forest import ForestConfig
from .pose_ransac import RansacConfig
from .robust_average import GMConfig
from .scene_data import CameraIntrinsics

MODES = ("hard", "soft")
VARIANTS = ("L", "LS", "LST")
LOSS_MODES = ("per-tree", "egm")
ROBUST_MODES = ("gm", "none")

# stable per-stage seed derivation indices; never reorder
_STAGE_IDS = {
    "synth": 0,
    "features": 1,
    "train-forest": 2,
    "finetune": 3,
    "localize": 4,
}


@dataclass(frozen=True)
class ExperimentConfig:
    # artifact locations; dataset_dir empty means <out_dir>/dataset
    out_dir: str = "runs/default"
    dataset_dir: str = ""

    # synthetic scene and camera
    scene_extent: float = 2.0
    n_train_frames: int = 12
    n_test_frames: int = 6
    frame_width: int = 96
    frame_height: int = 72
    focal_px: float = 85.0

    # pixel-difference feature bank
    n_features: int = 1000
    offset_radius: int = 16

    # regression forest
    n_trees: int = 5
    max_depth: int = 8
    n_candidates: int = 64
    min_samples_leaf: int = 10
    leaf_bandwidth: float = 0.05
    train_pixels_per_frame: int = 1000

    # forest-to-network mapping; c01/c12 of 0 means the mode default
    mode: str = "hard"
    c01: float = 0.0
    c12: float = 0.0
    subtree_depth: int = 0  # 0 skips split planning

    # fine-tuning
    variant: str = "L"
    epochs: int = 5
    batch_size: int = 20
    learning_rate: float = 0.001
    finetune_fraction: float = 0.25
    finetune_loss: str = "per-tree"

    # robust geometric-median averaging
    gm_weiszfeld_iters: int = 10
    gm_meanshift_iters: int = 10
    gm_sigma: float = 0.025

    # localization
    n_hypotheses: int = 1280
    inlier_px: float = 10.0
    samples_per_frame: int = 5000
    eval_pixels_per_frame: int = 1000
    robust: str = "gm"

    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.finetune_loss not in LOSS_MODES:
            raise ConfigInvalid(f"finetune_loss must be one of {LOSS_MODES}")
        if self.robust not in ROBUST_MODES:
            raise ConfigInvalid(f"robust must be one of {ROBUST_MODES}")
        positive = (
            "scene_extent", "n_train_frames", "n_test_frames", "frame_width",
            "frame_height", "focal_px", "n_features", "n_trees", "n_candidates",
            "min_samples_leaf", "leaf_bandwidth", "train_pixels_per_frame",
            "epochs", "batch_size", "learning_rate", "gm_sigma", "n_hypotheses",
            "inlier_px", "samples_per_frame", "eval_pixels_per_frame",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        nonnegative = (
            "offset_radius", "max_depth", "subtree_depth", "c01", "c12",
            "gm_weiszfeld_iters", "gm_meanshift_iters",
        )
        for name in nonnegative:
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be nonnegative")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ConfigInvalid("finetune_fraction must be in (0, 1]")

    # ------------------------------------------------------------------
    # derived paths and seeds

    def dataset_path(self):
        return self.dataset_dir or os.path.join(self.out_dir, "dataset")

    def stage_seed(self, stage):
        """Deterministic per-stage integer seed derived from rng_seed."""
        seq = np.random.SeedSequence([self.rng_seed, _STAGE_IDS[stage]])
        return int(seq.generate_state(1)[0])

    # ------------------------------------------------------------------
    # per-module adapters

    def intrinsics(self):
        return CameraIntrinsics(
            focal_x=self.focal_px,
            focal_y=self.focal_px,
            center_x=self.frame_width / 2.0,
            center_y=self.frame_height / 2.0,
            width=self.frame_width,
            height=self.frame_height,
        )

    def forest_config(self):
        return ForestConfig(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            n_candidates=self.n_candidates,
            min_samples_leaf=self.min_samples_leaf,
            leaf_bandwidth=self.leaf_bandwidth,
            rng_seed=self.stage_seed("train-forest"),
        )

    def gm_config(self):
        return GMConfig(
            weiszfeld_iters=self.gm_weiszfeld_iters,
            meanshift_iters=self.gm_meanshift_iters,
            sigma=self.gm_sigma,
        )

    def ransac_config(self):
        return RansacConfig(
            n_hypotheses=self.n_hypotheses,
            inlier_px=self.inlier_px,
        )

    def mapping_constants(self):
        """(c01, c12) with zeros resolved to the mode defaults."""
        c01 = self.c01 if self.c01 > 0 else None
        c12 = self.c12 if self.c12 > 0 else None
        return c01, c12


def save_config(path, config):
    payload = json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(payload + "\n")
    os.replace(tmp, path)


def load_config(path):
    if not os.path.exists(path):
        raise IOFailure(f"config file {path} not found")
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"config {path} must hold a JSON object")
    return apply_overrides(ExperimentConfig(), raw)


def apply_overrides(config, overrides):
    """New config with the given field overrides; unknown names are refused."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    clean = {}
    for name, value in overrides.items():
        if name not in fields:
            raise ConfigInvalid(f"unknown config field {name!r}")
        want = fields[name].type
        if want is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, want):
            raise ConfigInvalid(
                f"config field {name!r} expects {want.__name__}, got {type(value).__name__}"
            )
        clean[name] = value
    return dataclasses.replace(config, **clean)
