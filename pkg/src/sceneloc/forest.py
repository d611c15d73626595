"""Scene-coordinate regression forest: greedy training, inference, and IO.

Trees use axis-aligned splits on pixel-difference features (response >= tau
routes right, ties included). Split quality is the reduction of the summed
per-dimension variance of the scene coordinates. Each leaf keeps the single
highest-supported mean-shift mode of its training coordinates.

Feature responses are integers, so trained thresholds are snapped to the
half-integer in the same unit interval: routing is unchanged and every split
keeps a margin of at least 0.5 intensity units, which the network mapping
relies on for saturation.
"""

import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import ConfigInvalid, InsufficientSamples, IOFailure
from .features import FeatureBank

FOREST_FORMAT = "sceneloc-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 5
    max_depth: int = 8
    n_candidates: int = 64
    min_samples_leaf: int = 10
    leaf_bandwidth: float = 0.05
    leaf_dedup_tol: float = 1e-4
    leaf_seed_cap: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigInvalid("forest needs at least one tree")
        if self.max_depth < 0 or self.n_candidates < 1 or self.min_samples_leaf < 1:
            raise ConfigInvalid("forest config values out of range")
        if self.leaf_bandwidth <= 0:
            raise ConfigInvalid("leaf bandwidth must be positive")


@dataclass
class Tree:
    """Flat node arrays; feature[i] < 0 marks node i as a leaf. Leaves carry
    the fitted mode and its support, split nodes carry (feature, thresh)."""

    feature: np.ndarray
    thresh: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mode: np.ndarray
    support: np.ndarray
    node_depth: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    @property
    def depth(self):
        return int(self.node_depth.max())

    def leaf_ids(self):
        return np.nonzero(self.feature < 0)[0]

    def path_to(self, node):
        """(split_node, went_right) pairs from the root down to `node`."""
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        took_right = np.zeros(self.n_nodes, dtype=bool)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                parent[self.left[i]] = i
                parent[self.right[i]] = i
                took_right[self.right[i]] = True
        path = []
        while parent[node] >= 0:
            path.append((int(parent[node]), bool(took_right[node])))
            node = parent[node]
        return path[::-1]

    def route(self, x):
        """Leaf id per row of the (P, D) response matrix x."""
        return kernels.route_by_features(
            np.ascontiguousarray(x, dtype=np.float32),
            self.feature,
            self.thresh,
            self.left,
            self.right,
        )

    def route_image(self, image, px, py, bank):
        return kernels.route_by_image(
            np.ascontiguousarray(image),
            np.ascontiguousarray(px, dtype=np.int64),
            np.ascontiguousarray(py, dtype=np.int64),
            self.feature,
            self.thresh,
            self.left,
            self.right,
            *bank.columns(),
        )


@dataclass
class Forest:
    trees: list
    bank: FeatureBank
    config: ForestConfig

    @property
    def n_trees(self):
        return len(self.trees)

    def predict_features(self, x):
        """(P, T, 3) leaf modes for precomputed responses x (P, D)."""
        out = np.empty((x.shape[0], self.n_trees, 3))
        for t, tree in enumerate(self.trees):
            out[:, t, :] = tree.mode[tree.route(x)]
        return out

    def predict_image(self, image, px, py):
        """(P, T, 3) leaf modes for pixels of one image, computing only the
        feature responses the visited splits need."""
        out = np.empty((len(px), self.n_trees, 3))
        for t, tree in enumerate(self.trees):
            leaves = tree.route_image(image, px, py, self.bank)
            out[:, t, :] = tree.mode[leaves]
        return out

    def predict_pixel(self, image, p):
        """The T per-tree scene-coordinate predictions for pixel p = (x, y)."""
        px = np.array([p[0]], dtype=np.int64)
        py = np.array([p[1]], dtype=np.int64)
        return self.predict_image(image, px, py)[0]


def fit_leaf_mode(samples, bandwidth=0.05, dedup_tol=1e-4, seed_cap=512, rng=None):
    """Highest-support Gaussian mean-shift mode of the sample set.

    Seeds at every sample (subsampled past seed_cap), converged seeds are
    merged at dedup_tol, support counts samples within one bandwidth, and
    equal support breaks toward the lexicographically smaller mode.
    Returns (mode (3,), support int)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = samples.shape[0]
    if n == 0:
        raise InsufficientSamples("leaf mode needs at least one sample")
    if n == 1:
        return samples[0].copy(), 1
    if n > seed_cap:
        rng = rng or np.random.default_rng(0)
        seeds = samples[rng.choice(n, seed_cap, replace=False)]
    else:
        seeds = samples
    converged = kernels.meanshift_seeds(samples, seeds, bandwidth, 1e-6, 300)

    modes = []
    counts = []
    for pt in converged:
        for k, m in enumerate(modes):
            if np.linalg.norm(pt - m) < dedup_tol:
                counts[k] += 1
                break
        else:
            modes.append(pt)
            counts.append(1)
    best = None
    for m in modes:
        support = int((np.linalg.norm(samples - m, axis=1) <= bandwidth).sum())
        key = (-support, m[0], m[1], m[2])
        if best is None or key < best[0]:
            best = (key, m, support)
    return best[1].copy(), best[2]


def _snap_threshold(tau):
    # integer responses: f >= tau iff f >= ceil(tau) - 0.5
    return np.ceil(tau) - 0.5


def _train_tree(x, m, config, rng):
    n_total = x.shape[0]
    bag = rng.choice(n_total, n_total, replace=True)
    n_features = x.shape[1]

    feature, thresh, left, right, depth_arr = [], [], [], [], []
    leaf_samples = {}

    def new_node(depth):
        feature.append(-1)
        thresh.append(0.0)
        left.append(-1)
        right.append(-1)
        depth_arr.append(depth)
        return len(feature) - 1

    stack = [(new_node(0), bag, 0)]
    while stack:
        node, idx, depth = stack.pop()
        n = idx.shape[0]
        var_sum = m[idx].var(axis=0).sum()
        if (
            depth >= config.max_depth
            or n < 2 * config.min_samples_leaf
            or var_sum <= 1e-20
        ):
            leaf_samples[node] = idx
            continue
        cand_feat = rng.integers(0, n_features, config.n_candidates)
        resp = x[np.ix_(idx, cand_feat)]
        lo = resp.min(axis=0)
        hi = resp.max(axis=0)
        taus = rng.uniform(lo, hi)
        scores, _ = kernels.split_scores(resp, m[idx], taus, config.min_samples_leaf)
        scores[lo == hi] = -np.inf  # constant feature at this node: no split
        best = int(np.argmax(scores))
        # the floor keeps float noise on a zero-reduction split from growing the tree
        if not np.isfinite(scores[best]) or scores[best] <= 1e-12 * (1.0 + var_sum):
            leaf_samples[node] = idx
            continue
        tau = _snap_threshold(taus[best])
        go_right = resp[:, best] >= tau
        feature[node] = int(cand_feat[best])
        thresh[node] = float(tau)
        left[node] = new_node(depth + 1)
        right[node] = new_node(depth + 1)
        stack.append((left[node], idx[~go_right], depth + 1))
        stack.append((right[node], idx[go_right], depth + 1))

    n_nodes = len(feature)
    mode = np.full((n_nodes, 3), np.nan)
    support = np.zeros(n_nodes, dtype=np.int64)
    for node, idx in leaf_samples.items():
        mode[node], support[node] = fit_leaf_mode(
            m[idx],
            bandwidth=config.leaf_bandwidth,
            dedup_tol=config.leaf_dedup_tol,
            seed_cap=config.leaf_seed_cap,
            rng=rng,
        )
    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        thresh=np.asarray(thresh, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        mode=mode,
        support=support,
        node_depth=np.asarray(depth_arr, dtype=np.int32),
    )


def train_forest(x, m, bank, config=ForestConfig()):
    """Train T trees on (response, scene-coordinate) rows with per-tree
    bagging. x: (S, D) float32 responses for bank, m: (S, 3) meters."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    m = np.ascontiguousarray(m, dtype=np.float64)
    if x.shape[0] != m.shape[0]:
        raise ConfigInvalid("feature and target row counts differ")
    if x.shape[0] < 2:
        raise InsufficientSamples(f"{x.shape[0]} training samples, need at least 2")
    if x.shape[1] != len(bank):
        raise ConfigInvalid("feature matrix width does not match the bank")
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.n_trees)
    trees = [_train_tree(x, m, config, np.random.default_rng(s)) for s in seeds]
    return Forest(trees=trees, bank=bank, config=config)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_TREE_FIELDS = ("feature", "thresh", "left", "right", "mode", "support", "node_depth")


def save_forest(path, forest):
    meta = {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "n_trees": forest.n_trees,
        "config": asdict(forest.config),
        "bank": {"max_radius": forest.bank.max_radius, "rng_seed": forest.bank.rng_seed},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update(forest.bank.to_arrays())
    for t, tree in enumerate(forest.trees):
        for name in _TREE_FIELDS:
            arrays[f"t{t}_{name}"] = getattr(tree, name)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_forest(path):
    try:
        data = np.load(path)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise IOFailure(f"cannot read forest file {path}: {exc}") from None
    if "meta" not in data:
        raise IOFailure(f"{path} is not a forest file (no meta entry)")
    meta = json.loads(bytes(data["meta"]).decode())
    if meta.get("format") != FOREST_FORMAT:
        raise IOFailure(f"{path} is not a forest file")
    if meta.get("version") != FOREST_VERSION:
        raise IOFailure(
            f"forest file version {meta.get('version')} unsupported (want {FOREST_VERSION})"
        )
    bank = FeatureBank.from_arrays(
        {k: data[k] for k in ("d1x", "d1y", "d2x", "d2y", "c1", "c2")},
        meta["bank"]["max_radius"],
        meta["bank"]["rng_seed"],
    )
    trees = []
    for t in range(meta["n_trees"]):
        kwargs = {name: data[f"t{t}_{name}"] for name in _TREE_FIELDS}
        trees.append(Tree(**kwargs))
    return Forest(trees=trees, bank=bank, config=ForestConfig(**meta["config"]))
