"""Decompose a tree network into sub-networks with a shared root section.

A tree of depth r is cut at depth c = r - r_tilde. Every split at depth c
roots a sub-network holding that subtree's splits and leaves plus the chain
of splits from the tree root down to it; leaves at depth <= c form degenerate
sub-networks of just their root chain. The chain entries are shared: the plan
stores indices into the original network's arrays, so sub-networks alias one
set of parameters and an update to a shared split is seen by all of them.

For a complete tree the per-sub-network split count is 2^r_tilde - 1 plus the
(r - r_tilde) chain splits, against 2^r - 1 in the monolithic net; the count
reduction is reported as an exact fraction. Evaluation reproduces the
monolithic forward: layer-2 softmax, when used, is normalized globally across
all sub-networks.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidSubtreeDepth, NonFiniteActivation
from .forestnet import _sigmoid, _softmax


def complete_tree_factor(r, r_tilde):
    """Split-neuron count of a complete depth-r tree over the per-section
    count after cutting at subtree depth r_tilde, as an exact Fraction."""
    if not 0 < r_tilde <= r:
        raise InvalidSubtreeDepth(f"need 0 < subtree depth <= {r}, got {r_tilde}")
    return Fraction(2**r - 1, 2**r_tilde - 1 + (r - r_tilde))


@dataclass
class Section:
    """One sub-network: chain of shared ancestor splits (root-down), the
    splits it owns, and the leaves it predicts. All values index into the
    source network's arrays."""

    ancestors: np.ndarray
    own_splits: np.ndarray
    leaves: np.ndarray

    @property
    def n_split_params(self):
        return self.ancestors.shape[0] + self.own_splits.shape[0]


@dataclass
class SplitPlan:
    net: object  # the TreeNet the indices refer to; storage is aliased
    original_depth: int
    subtree_depth: int
    sections: list
    shared_splits: np.ndarray  # splits referenced by more than one section

    @property
    def cut_depth(self):
        return self.original_depth - self.subtree_depth

    @property
    def n_sections(self):
        return len(self.sections)

    @property
    def section_split_counts(self):
        return [s.n_split_params for s in self.sections]

    @property
    def reduction_factor(self):
        """Monolithic split count over the largest section's, exact."""
        return Fraction(int(self.net.n_splits), max(self.section_split_counts))

    @property
    def complete_tree_reduction(self):
        return complete_tree_factor(self.original_depth, self.subtree_depth)

    def summary(self):
        lines = [
            f"depth {self.original_depth} cut to subtrees of depth {self.subtree_depth}",
            f"sections: {self.n_sections} "
            f"({sum(1 for s in self.sections if s.own_splits.size == 0)} leaf-only)",
            f"shared splits: {self.shared_splits.shape[0]}",
            f"split neurons per section: max {max(self.section_split_counts)} "
            f"of {self.net.n_splits} total",
            f"count reduction: {self.reduction_factor} "
            f"(complete-tree formula: {self.complete_tree_reduction})",
        ]
        return "\n".join(lines)

    def to_meta(self):
        return {
            "original_depth": self.original_depth,
            "subtree_depth": self.subtree_depth,
            "n_sections": self.n_sections,
            "shared_splits": int(self.shared_splits.shape[0]),
            "reduction_factor": str(self.reduction_factor),
            "complete_tree_reduction": str(self.complete_tree_reduction),
        }


def _chain_of(net, j):
    """Ancestor split indices of split j, root first, excluding j."""
    chain = []
    p = int(net.split_parent[j])
    while p >= 0:
        chain.append(p)
        p = int(net.split_parent[p])
    return chain[::-1]


def plan_split(tree_net, subtree_depth):
    """Cut tree_net into sub-networks of depth at most subtree_depth.

    The union of sections tiles the tree exactly: each owned split and each
    leaf appears in exactly one section, and only chain splits repeat."""
    if tree_net.n_splits == 0:
        raise InvalidSubtreeDepth("a single-leaf network has no depth to split")
    r = int(tree_net.split_depth.max()) + 1
    r_tilde = int(subtree_depth)
    if not 0 < r_tilde <= r:
        raise InvalidSubtreeDepth(f"need 0 < subtree depth <= {r}, got {subtree_depth}")
    c = r - r_tilde
    depths = tree_net.split_depth

    # leaf paths come from the wiring masks, which training never touches
    leaf_paths = [np.nonzero(tree_net.mask2[k])[0] for k in range(tree_net.n_leaves)]
    leaf_paths = [p[np.argsort(depths[p])] for p in leaf_paths]

    if c == 0:
        sections = [
            Section(
                ancestors=np.empty(0, dtype=np.int64),
                own_splits=np.arange(tree_net.n_splits, dtype=np.int64),
                leaves=np.arange(tree_net.n_leaves, dtype=np.int64),
            )
        ]
        return SplitPlan(
            net=tree_net,
            original_depth=r,
            subtree_depth=r_tilde,
            sections=sections,
            shared_splits=np.empty(0, dtype=np.int64),
        )

    roots = np.nonzero(depths == c)[0]
    section_of_root = {int(j): i for i, j in enumerate(roots)}
    own = [[] for _ in roots]
    for j in range(tree_net.n_splits):
        if depths[j] < c:
            continue
        anchor = j if depths[j] == c else _chain_of(tree_net, j)[c]
        own[section_of_root[int(anchor)]].append(j)

    sec_leaves = [[] for _ in roots]
    leaf_sections = []
    for k, path in enumerate(leaf_paths):
        if path.shape[0] <= c:
            leaf_sections.append(
                Section(
                    ancestors=path.astype(np.int64),
                    own_splits=np.empty(0, dtype=np.int64),
                    leaves=np.array([k], dtype=np.int64),
                )
            )
        else:
            sec_leaves[section_of_root[int(path[c])]].append(k)

    sections = [
        Section(
            ancestors=np.array(_chain_of(tree_net, int(j)), dtype=np.int64),
            own_splits=np.array(own[i], dtype=np.int64),
            leaves=np.array(sec_leaves[i], dtype=np.int64),
        )
        for i, j in enumerate(roots)
    ] + leaf_sections

    owned = np.concatenate([s.own_splits for s in sections])
    assert owned.shape[0] == np.unique(owned).shape[0]
    covered = np.concatenate([s.leaves for s in sections])
    assert np.array_equal(np.sort(covered), np.arange(tree_net.n_leaves))

    counts = np.zeros(tree_net.n_splits, dtype=np.int64)
    for s in sections:
        counts[s.ancestors] += 1
        counts[s.own_splits] += 1
    assert (counts >= 1).all()
    return SplitPlan(
        net=tree_net,
        original_depth=r,
        subtree_depth=r_tilde,
        sections=sections,
        shared_splits=np.nonzero(counts > 1)[0].astype(np.int64),
    )


def forward_split(plan, x):
    """Evaluate the sub-networks and combine them; matches the monolithic
    forward within 1e-9 (exactly, under saturated hard routing).

    The shared chain activations are computed once per sample. Leaf rows
    with off-section weight (possible once wiring masks were lifted in
    training) fall back to the full row so the output stays faithful."""
    net = plan.net
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]

    upper = plan.shared_splits
    pos = {int(j): i for i, j in enumerate(upper)}
    a1_upper = np.tanh(net.c01 * x[:, net.feature_idx[upper]] + net.b1[upper])

    def a1_at(cols):
        known = [pos.get(int(j), -1) for j in cols]
        if all(i >= 0 for i in known):
            return a1_upper[:, known]
        return np.tanh(net.c01 * x[:, net.feature_idx[cols]] + net.b1[cols])

    z2_parts = []
    for sec in plan.sections:
        cols = np.concatenate([sec.ancestors, sec.own_splits])
        a1_sec = np.hstack([a1_at(sec.ancestors), a1_at(sec.own_splits)])
        w2_rows = net.w2[sec.leaves]
        z2 = a1_sec @ w2_rows[:, cols].T + net.b2[sec.leaves]
        off = np.setdiff1d(np.arange(net.n_splits), cols, assume_unique=False)
        if off.size and np.any(w2_rows[:, off]):
            z2 = z2 + a1_at(off) @ w2_rows[:, off].T
        z2_parts.append(z2)

    if net.l2_activation == "sigmoid":
        a2_parts = [_sigmoid(z) for z in z2_parts]
    else:
        # softmax must normalize across every leaf of every sub-network
        flat = _softmax(np.hstack(z2_parts))
        a2_parts = np.split(flat, np.cumsum([z.shape[1] for z in z2_parts])[:-1], axis=1)

    q = np.zeros((x.shape[0], 3))
    for sec, a2 in zip(plan.sections, a2_parts):
        q += a2 @ net.w3[sec.leaves]
    q += net.b3
    if not np.isfinite(q).all():
        raise NonFiniteActivation("split-network output is not finite")
    return q[0] if single else q
