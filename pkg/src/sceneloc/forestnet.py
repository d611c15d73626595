"""Trees as two-hidden-layer networks: construction, evaluation, training of
the three fine-tuning variants, and mapping back to trees.

Layer 1 holds one tanh neuron per split (z = c01*f - c01*tau, so +1 means the
right child). Layer 2 holds one neuron per leaf, wired to every split on its
root path with weight -c12 when the leaf lies in that split's left subtree
and +c12 when in the right, plus bias -c12*(|path|-1): the reached leaf's
pre-activation is +c12, every other leaf's is at most -c12 under saturation.
Layer 3 is linear with the leaf modes as rows.

Hard mode (large constants, sigmoid on layer 2) reproduces the tree; soft
mode (small constants, softmax) relaxes routing for fine-tuning. Variants:
"L" trains the output layer, "LS" adds split thresholds (layer-1 biases),
"LST" additionally trains the leaf wiring (masks lifted). The input layer's
feature selection is never trained.
"""

import json
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigInvalid,
    IOFailure,
    NonFiniteActivation,
    NonFiniteLoss,
    StaleCache,
    VariantNotMappable,
)
from .forest import Forest, ForestConfig, Tree
from .features import FeatureBank
from .robust_average import GMConfig, gm_backward, gm_forward, apply_pgm

log = logging.getLogger(__name__)

HARD_C01 = 10.0
HARD_C12 = 100.0
SOFT_C01 = 0.1
SOFT_C12 = 1.0
# split margins below this count as boundary events in equivalence sweeps
EPS_HARD = 1e-3

VARIANTS = ("L", "LS", "LST")
TRAINABLE_BLOCKS = {
    "L": ("w3", "b3"),
    "LS": ("w3", "b3", "b1"),
    "LST": ("w3", "b3", "b1", "w2"),
}

FORESTNET_FORMAT = "sceneloc-forestnet"
FORESTNET_VERSION = 1


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TreeNet:
    feature_idx: np.ndarray  # (J,) input feature per split neuron
    b1: np.ndarray  # (J,)
    w2: np.ndarray  # (K, J)
    mask2: np.ndarray  # (K, J) bool, the tree-path wiring
    b2: np.ndarray  # (K,)
    w3: np.ndarray  # (K, 3)
    b3: np.ndarray  # (3,)
    c01: float
    c12: float
    l2_activation: str  # "sigmoid" | "softmax"
    split_nodes: np.ndarray  # (J,) source-tree node ids
    leaf_nodes: np.ndarray  # (K,) source-tree node ids
    split_parent: np.ndarray  # (J,) parent split neuron index, -1 at root
    split_depth: np.ndarray  # (J,)
    version: int = 0

    @property
    def n_splits(self):
        return self.feature_idx.shape[0]

    @property
    def n_leaves(self):
        return self.w3.shape[0]

    def apply_update(self, grads, lr, variant):
        for name in TRAINABLE_BLOCKS[variant]:
            getattr(self, name)[...] -= lr * grads[name]
        self.version += 1


@dataclass
class ForestNet:
    nets: list
    bank: FeatureBank
    variant: str = "L"
    mode: str = "hard"
    forest_config: ForestConfig = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"variant must be one of {VARIANTS}")

    @property
    def n_trees(self):
        return len(self.nets)


@dataclass
class _Cache:
    a1: np.ndarray
    a2: np.ndarray
    version: int


def map_tree_to_net(tree, c01, c12, l2_activation):
    """Build the network equivalent of one tree; see the module docstring for
    the weight pattern."""
    if c01 <= 0 or c12 <= 0:
        raise ConfigInvalid("hardness constants must be positive")
    if l2_activation not in ("sigmoid", "softmax"):
        raise ConfigInvalid(f"unknown layer-2 activation {l2_activation!r}")
    split_nodes = np.nonzero(tree.feature >= 0)[0].astype(np.int32)
    leaf_nodes = tree.leaf_ids().astype(np.int32)
    j_of = {int(n): j for j, n in enumerate(split_nodes)}
    n_splits = split_nodes.shape[0]
    n_leaves = leaf_nodes.shape[0]

    feature_idx = tree.feature[split_nodes].astype(np.int64)
    b1 = -c01 * tree.thresh[split_nodes]
    w2 = np.zeros((n_leaves, n_splits))
    mask2 = np.zeros((n_leaves, n_splits), dtype=bool)
    b2 = np.empty(n_leaves)
    w3 = np.empty((n_leaves, 3))
    for k, leaf in enumerate(leaf_nodes):
        path = tree.path_to(int(leaf))
        for node, went_right in path:
            j = j_of[node]
            w2[k, j] = c12 if went_right else -c12
            mask2[k, j] = True
        b2[k] = -c12 * (len(path) - 1)
        w3[k] = tree.mode[leaf]

    split_parent = np.full(n_splits, -1, dtype=np.int32)
    for j, node in enumerate(split_nodes):
        for child in (tree.left[node], tree.right[node]):
            if child in j_of:
                split_parent[j_of[child]] = j
    return TreeNet(
        feature_idx=feature_idx,
        b1=b1,
        w2=w2,
        mask2=mask2,
        b2=b2,
        w3=w3,
        b3=np.zeros(3),
        c01=float(c01),
        c12=float(c12),
        l2_activation=l2_activation,
        split_nodes=split_nodes,
        leaf_nodes=leaf_nodes,
        split_parent=split_parent,
        split_depth=tree.node_depth[split_nodes].astype(np.int32),
    )


def map_forest_to_net(forest, mode="hard", c01=None, c12=None, variant="L"):
    """Map every tree; hard mode defaults to (10, 100) with sigmoid, soft
    mode to (0.1, 1) with softmax."""
    if mode not in ("hard", "soft"):
        raise ConfigInvalid(f"mode must be 'hard' or 'soft', got {mode!r}")
    if c01 is None:
        c01 = HARD_C01 if mode == "hard" else SOFT_C01
    if c12 is None:
        c12 = HARD_C12 if mode == "hard" else SOFT_C12
    act = "sigmoid" if mode == "hard" else "softmax"
    nets = [map_tree_to_net(t, c01, c12, act) for t in forest.trees]
    return ForestNet(
        nets=nets, bank=forest.bank, variant=variant, mode=mode,
        forest_config=forest.config,
    )


def forward(net, x, want_cache=False):
    """Evaluate one tree network on features x (B, D) or (D,).

    Returns (q (B, 3), cache) when want_cache else q; a single input vector
    comes back as shape (3,)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    z1 = net.c01 * x[:, net.feature_idx] + net.b1
    a1 = np.tanh(z1)
    z2 = a1 @ net.w2.T + net.b2
    a2 = _sigmoid(z2) if net.l2_activation == "sigmoid" else _softmax(z2)
    q = a2 @ net.w3 + net.b3
    if not np.isfinite(q).all():
        raise NonFiniteActivation("network output is not finite")
    if single:
        q = q[0]
    if want_cache:
        return q, _Cache(a1=a1, a2=a2, version=net.version)
    return q


def forward_ensemble(fnet, x):
    """(B, T, 3) predictions, tree order preserved; (T, 3) for one vector."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    out = np.empty((x.shape[0], fnet.n_trees, 3))
    for t, net in enumerate(fnet.nets):
        out[:, t, :] = forward(net, x)
    return out[0] if single else out


def backward(net, cache, dq, variant):
    """Gradients of the trainable blocks of `variant` given dL/dq (B, 3).

    Masked layer-2 entries receive gradient only under LST, where the wiring
    constraint is lifted."""
    if not isinstance(cache, _Cache) or cache.version != net.version:
        raise StaleCache("forward cache is stale; parameters changed since forward")
    dq = np.asarray(dq, dtype=np.float64)
    if dq.ndim == 1:
        dq = dq[None, :]
    a1, a2 = cache.a1, cache.a2
    grads = {"w3": a2.T @ dq, "b3": dq.sum(axis=0)}
    if variant == "L":
        return grads
    da2 = dq @ net.w3.T
    if net.l2_activation == "sigmoid":
        dz2 = da2 * a2 * (1.0 - a2)
    else:
        dz2 = a2 * (da2 - (da2 * a2).sum(axis=1, keepdims=True))
    if variant == "LST":
        grads["w2"] = dz2.T @ a1
    da1 = dz2 @ net.w2
    dz1 = da1 * (1.0 - a1 * a1)
    grads["b1"] = dz1.sum(axis=0)
    return grads


def euclidean_loss(q, m):
    """Sum of unsquared distances and its gradient: (loss, dL/dq)."""
    diff = q - m
    dist = np.linalg.norm(diff, axis=-1)
    safe = np.maximum(dist, 1e-12)
    return dist.sum(), diff / safe[..., None]


def _dataset_loss(fnet, x, m, loss_mode, gm_config):
    preds = forward_ensemble(fnet, x)
    if loss_mode == "per-tree":
        per_tree = np.array(
            [euclidean_loss(preds[:, t, :], m)[0] for t in range(fnet.n_trees)]
        )
        return per_tree.sum(), per_tree
    robust = apply_pgm(preds, gm_config)
    return euclidean_loss(robust, m)[0], None


def train_forestnet(
    fnet,
    x,
    m,
    epochs,
    loss_mode="per-tree",
    batch_size=20,
    lr=0.001,
    rng_seed=0,
    gm_config=None,
):
    """SGD fine-tuning of the variant's trainable blocks.

    per-tree mode minimizes each tree's sum of Euclidean distances
    independently; eGM mode appends the robust-average module and minimizes
    the distance of its single output, distributing gradients through the
    unrolled iterations. Returns (loss_curve (epochs+1,), per_tree_curve),
    where entry 0 is the pre-training loss; per_tree_curve is None in eGM
    mode. The network is modified in place."""
    if loss_mode not in ("per-tree", "egm"):
        raise ConfigInvalid(f"unknown loss mode {loss_mode!r}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    m = np.ascontiguousarray(m, dtype=np.float64)
    gm_config = gm_config or GMConfig()
    rng = np.random.default_rng(rng_seed)
    n = x.shape[0]
    curve = np.empty(epochs + 1)
    per_tree_curve = np.empty((epochs + 1, fnet.n_trees)) if loss_mode == "per-tree" else None

    def record(e):
        total, per_tree = _dataset_loss(fnet, x, m, loss_mode, gm_config)
        if not np.isfinite(total):
            raise NonFiniteLoss(f"training loss diverged at epoch {e}")
        curve[e] = total
        if per_tree is not None:
            per_tree_curve[e] = per_tree

    record(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            xb, mb = x[batch], m[batch]
            if loss_mode == "per-tree":
                for net in fnet.nets:
                    q, cache = forward(net, xb, want_cache=True)
                    _, dq = euclidean_loss(q, mb)
                    net.apply_update(backward(net, cache, dq, fnet.variant), lr, fnet.variant)
            else:
                caches = []
                preds = np.empty((len(batch), fnet.n_trees, 3))
                for t, net in enumerate(fnet.nets):
                    q, cache = forward(net, xb, want_cache=True)
                    preds[:, t, :] = q
                    caches.append(cache)
                dpreds = np.empty_like(preds)
                for i in range(len(batch)):
                    robust, state = gm_forward(preds[i], gm_config)
                    _, dq = euclidean_loss(robust, mb[i])
                    dpreds[i] = gm_backward(state, dq)
                for t, net in enumerate(fnet.nets):
                    net.apply_update(
                        backward(net, caches[t], dpreds[:, t, :], fnet.variant),
                        lr,
                        fnet.variant,
                    )
        record(epoch)
    return curve, per_tree_curve


# ---------------------------------------------------------------------------
# map-back and equivalence
# ---------------------------------------------------------------------------


def map_back_tree(net, source_tree, mode):
    """Rebuild a tree from a fine-tuned network. exact keeps the source
    topology and thresholds; approximate additionally recovers thresholds
    from the layer-1 biases (tau = -b1/c01). Output biases are folded into
    the leaf modes so the tree reproduces q = w3[k] + b3."""
    thresh = source_tree.thresh.copy()
    if mode == "approximate":
        thresh[net.split_nodes] = -net.b1 / net.c01
    mode_arr = np.full((source_tree.n_nodes, 3), np.nan)
    support = source_tree.support.copy()
    for k, leaf in enumerate(net.leaf_nodes):
        mode_arr[leaf] = net.w3[k] + net.b3
    return Tree(
        feature=source_tree.feature.copy(),
        thresh=thresh,
        left=source_tree.left.copy(),
        right=source_tree.right.copy(),
        mode=mode_arr,
        support=support,
        node_depth=source_tree.node_depth.copy(),
    )


def map_back(fnet, source_forest, mode=None):
    """ForestNet -> Forest. Variant L maps exactly, LS approximately
    (thresholds re-read from the trained biases), LST not at all."""
    if fnet.variant == "LST":
        raise VariantNotMappable(
            "LST lifts the leaf wiring masks; the result is no longer a tree"
        )
    if mode is None:
        mode = "exact" if fnet.variant == "L" else "approximate"
    if mode == "exact" and fnet.variant != "L":
        raise VariantNotMappable("exact map-back needs variant L (thresholds untouched)")
    if mode not in ("exact", "approximate"):
        raise ConfigInvalid(f"unknown map-back mode {mode!r}")
    if len(fnet.nets) != len(source_forest.trees):
        raise ConfigInvalid("network and source forest tree counts differ")
    trees = [
        map_back_tree(net, tree, mode)
        for net, tree in zip(fnet.nets, source_forest.trees)
    ]
    return Forest(trees=trees, bank=source_forest.bank, config=source_forest.config)


def boundary_flags(net, x, eps=EPS_HARD):
    """True per row of x when any split of the net sees |f - tau| < eps;
    such rows are excluded from exact-equivalence claims."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    margins = np.abs(x[:, net.feature_idx] + net.b1 / net.c01)
    if margins.shape[1] == 0:
        return np.zeros(x.shape[0], dtype=bool)
    return (margins < eps).any(axis=1)


def hard_equivalence_report(fnet, forest, x, eps=EPS_HARD, coord_tol=1e-6):
    """Compare hard-mode networks against their source trees on features x.

    Returns a dict with the fraction of (sample, tree) pairs whose selected
    leaf matches and coordinates agree within coord_tol, plus every exception
    and whether a boundary event (|f - tau| < eps) explains it. Exceptions
    are logged."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    t_count = fnet.n_trees
    agree = np.zeros((n, t_count), dtype=bool)
    near_boundary = np.zeros((n, t_count), dtype=bool)
    coord_err = np.zeros((n, t_count))
    for t, (net, tree) in enumerate(zip(fnet.nets, forest.trees)):
        tree_leaves = tree.route(x)
        q, cache = forward(net, x, want_cache=True)
        net_leaves = net.leaf_nodes[cache.a2.argmax(axis=1)]
        coord_err[:, t] = np.linalg.norm(q - tree.mode[tree_leaves], axis=1)
        agree[:, t] = (net_leaves == tree_leaves) & (coord_err[:, t] <= coord_tol)
        near_boundary[:, t] = boundary_flags(net, x, eps)
    exceptions = [
        {
            "sample": int(i),
            "tree": int(t),
            "boundary": bool(near_boundary[i, t]),
            "coord_err": float(coord_err[i, t]),
        }
        for i, t in zip(*np.nonzero(~agree))
    ]
    for e in exceptions:
        log.info(
            "equivalence exception: sample %d tree %d boundary=%s err=%.3g",
            e["sample"], e["tree"], e["boundary"], e["coord_err"],
        )
    return {
        "n_samples": n,
        "n_trees": t_count,
        "fraction_equivalent": float(agree.mean()),
        "exceptions": exceptions,
        "all_exceptions_at_boundary": all(e["boundary"] for e in exceptions),
    }


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    """Analytic-vs-finite-difference agreement per trainable block."""

    block_errors: dict
    max_rel_error: float = field(init=False)

    def __post_init__(self):
        self.max_rel_error = max(self.block_errors.values()) if self.block_errors else 0.0


def _loss_of(fnet, x, m, loss_mode, gm_config):
    total, _ = _dataset_loss(fnet, x, m, loss_mode, gm_config)
    return total


def analytic_gradients(fnet, x, m, loss_mode="per-tree", gm_config=None):
    """Per-net gradient dicts of the dataset loss, without updating."""
    gm_config = gm_config or GMConfig()
    x = np.ascontiguousarray(x, dtype=np.float64)
    m = np.ascontiguousarray(m, dtype=np.float64)
    grads = []
    if loss_mode == "per-tree":
        for net in fnet.nets:
            q, cache = forward(net, x, want_cache=True)
            _, dq = euclidean_loss(q, m)
            grads.append(backward(net, cache, dq, fnet.variant))
        return grads
    caches = []
    preds = np.empty((x.shape[0], fnet.n_trees, 3))
    for t, net in enumerate(fnet.nets):
        q, cache = forward(net, x, want_cache=True)
        preds[:, t, :] = q
        caches.append(cache)
    dpreds = np.empty_like(preds)
    for i in range(x.shape[0]):
        robust, state = gm_forward(preds[i], gm_config)
        _, dq = euclidean_loss(robust, m[i])
        dpreds[i] = gm_backward(state, dq)
    for t, net in enumerate(fnet.nets):
        grads.append(backward(net, caches[t], dpreds[:, t, :], fnet.variant))
    return grads


def gradient_report(fnet, x, m, loss_mode="per-tree", gm_config=None, step=1e-6):
    """Central finite differences over every entry of every trainable block,
    against the analytic gradients. Intended for small nets."""
    gm_config = gm_config or GMConfig()
    analytic = analytic_gradients(fnet, x, m, loss_mode, gm_config)
    errors = {}
    for t, net in enumerate(fnet.nets):
        for name in TRAINABLE_BLOCKS[fnet.variant]:
            arr = getattr(net, name)
            fd = np.zeros_like(arr)
            flat = arr.reshape(-1)
            fd_flat = fd.reshape(-1)
            for idx in range(flat.shape[0]):
                orig = flat[idx]
                flat[idx] = orig + step
                hi = _loss_of(fnet, x, m, loss_mode, gm_config)
                flat[idx] = orig - step
                lo = _loss_of(fnet, x, m, loss_mode, gm_config)
                flat[idx] = orig
                fd_flat[idx] = (hi - lo) / (2 * step)
            a = analytic[t][name]
            denom = np.maximum(np.abs(a), np.maximum(np.abs(fd), 1e-8))
            errors[f"net{t}.{name}"] = float((np.abs(a - fd) / denom).max())
    return GradientReport(block_errors=errors)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_NET_FIELDS = (
    "feature_idx", "b1", "w2", "mask2", "b2", "w3", "b3",
    "split_nodes", "leaf_nodes", "split_parent", "split_depth",
)


def save_forestnet(path, fnet, source_hash=None):
    meta = {
        "format": FORESTNET_FORMAT,
        "version": FORESTNET_VERSION,
        "variant": fnet.variant,
        "mode": fnet.mode,
        "n_trees": fnet.n_trees,
        "c01": fnet.nets[0].c01 if fnet.nets else None,
        "c12": fnet.nets[0].c12 if fnet.nets else None,
        "l2_activation": fnet.nets[0].l2_activation if fnet.nets else None,
        "source_forest_hash": source_hash,
        "bank": {"max_radius": fnet.bank.max_radius, "rng_seed": fnet.bank.rng_seed},
        "forest_config": None
        if fnet.forest_config is None
        else {
            k: getattr(fnet.forest_config, k)
            for k in ForestConfig.__dataclass_fields__
        },
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update(fnet.bank.to_arrays())
    for t, net in enumerate(fnet.nets):
        for name in _NET_FIELDS:
            arrays[f"t{t}_{name}"] = getattr(net, name)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_forestnet(path):
    """Returns (ForestNet, meta dict); meta carries the source forest hash."""
    try:
        data = np.load(path)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise IOFailure(f"cannot read network file {path}: {exc}") from None
    if "meta" not in data:
        raise IOFailure(f"{path} is not a network checkpoint (no meta entry)")
    meta = json.loads(bytes(data["meta"]).decode())
    if meta.get("format") != FORESTNET_FORMAT:
        raise IOFailure(f"{path} is not a network checkpoint")
    if meta.get("version") != FORESTNET_VERSION:
        raise IOFailure(
            f"checkpoint version {meta.get('version')} unsupported (want {FORESTNET_VERSION})"
        )
    bank = FeatureBank.from_arrays(
        {k: data[k] for k in ("d1x", "d1y", "d2x", "d2y", "c1", "c2")},
        meta["bank"]["max_radius"],
        meta["bank"]["rng_seed"],
    )
    nets = []
    for t in range(meta["n_trees"]):
        kwargs = {name: data[f"t{t}_{name}"].copy() for name in _NET_FIELDS}
        nets.append(
            TreeNet(
                c01=meta["c01"],
                c12=meta["c12"],
                l2_activation=meta["l2_activation"],
                **kwargs,
            )
        )
    cfg = meta.get("forest_config")
    fnet = ForestNet(
        nets=nets,
        bank=bank,
        variant=meta["variant"],
        mode=meta["mode"],
        forest_config=None if cfg is None else ForestConfig(**cfg),
    )
    return fnet, meta
