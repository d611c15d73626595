"""RGB pixel-difference features: f(p)[d] = I(p+d1, c1) - I(p+d2, c2).

Responses use raw 8-bit intensities (so they are integers in [-255, 255]) and
out-of-bounds lookups clamp to the border. A FeatureBank fixes the D specs a
forest and its mapped networks share.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigInvalid

CHANNELS = "RGB"


@dataclass(frozen=True)
class FeatureSpec:
    """One pixel-difference probe: two offsets (dx, dy) and two channels."""

    offset1: tuple
    offset2: tuple
    channel1: int
    channel2: int

    def __post_init__(self):
        for ch in (self.channel1, self.channel2):
            if ch not in (0, 1, 2):
                raise ConfigInvalid(f"channel must be 0, 1 or 2, got {ch}")


@dataclass
class FeatureBank:
    """D feature specs drawn uniformly from a square offset window, stored as
    column arrays so the routing kernels can index them directly."""

    size: int = 1000
    max_radius: int = 64
    rng_seed: int = 0
    d1x: np.ndarray = field(init=False, repr=False)
    d1y: np.ndarray = field(init=False, repr=False)
    d2x: np.ndarray = field(init=False, repr=False)
    d2y: np.ndarray = field(init=False, repr=False)
    c1: np.ndarray = field(init=False, repr=False)
    c2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size < 1:
            raise ConfigInvalid("feature bank must hold at least one spec")
        if self.max_radius < 0:
            raise ConfigInvalid("offset radius must be nonnegative")
        rng = np.random.default_rng(self.rng_seed)
        r = self.max_radius
        off = rng.integers(-r, r + 1, size=(4, self.size))
        ch = rng.integers(0, 3, size=(2, self.size))
        self.d1x, self.d1y, self.d2x, self.d2y = (o.astype(np.int64) for o in off)
        self.c1, self.c2 = (c.astype(np.int64) for c in ch)

    def __len__(self):
        return self.size

    def spec(self, d):
        return FeatureSpec(
            offset1=(int(self.d1x[d]), int(self.d1y[d])),
            offset2=(int(self.d2x[d]), int(self.d2y[d])),
            channel1=int(self.c1[d]),
            channel2=int(self.c2[d]),
        )

    def columns(self):
        return self.d1x, self.d1y, self.d2x, self.d2y, self.c1, self.c2

    def to_arrays(self):
        return {
            "d1x": self.d1x,
            "d1y": self.d1y,
            "d2x": self.d2x,
            "d2y": self.d2y,
            "c1": self.c1,
            "c2": self.c2,
        }

    @classmethod
    def from_arrays(cls, arrays, max_radius, rng_seed):
        bank = cls.__new__(cls)
        bank.size = int(arrays["d1x"].shape[0])
        bank.max_radius = int(max_radius)
        bank.rng_seed = int(rng_seed)
        for name in ("d1x", "d1y", "d2x", "d2y", "c1", "c2"):
            setattr(bank, name, np.asarray(arrays[name], dtype=np.int64))
        return bank


def feature_response(image, p, spec):
    """Scalar response of one spec at pixel p = (x, y) of an RGB image."""
    h, w = image.shape[:2]
    x, y = int(p[0]), int(p[1])
    x1 = min(max(x + spec.offset1[0], 0), w - 1)
    y1 = min(max(y + spec.offset1[1], 0), h - 1)
    x2 = min(max(x + spec.offset2[0], 0), w - 1)
    y2 = min(max(y + spec.offset2[1], 0), h - 1)
    return float(image[y1, x1, spec.channel1]) - float(image[y2, x2, spec.channel2])


def feature_vector(image, p, bank):
    """All D responses at pixel p, as float32."""
    x = np.asarray([int(p[0])], dtype=np.int64)
    y = np.asarray([int(p[1])], dtype=np.int64)
    return kernels.feature_matrix(
        np.asarray(image)[None], np.zeros(1, dtype=np.int64), x, y, *bank.columns()
    )[0]


def feature_matrix_for_pixels(images, frame_idx, px, py, bank):
    """(P, D) response matrix for pixels (px, py) of images[frame_idx]."""
    return kernels.feature_matrix(
        np.ascontiguousarray(images),
        np.ascontiguousarray(frame_idx, dtype=np.int64),
        np.ascontiguousarray(px, dtype=np.int64),
        np.ascontiguousarray(py, dtype=np.int64),
        *bank.columns(),
    )
