"""Hot numeric kernels, each with two interchangeable implementations.

Every kernel exists twice: a numba ``@njit`` loop version and a pure-numpy
vectorized version. The active backend is chosen by the ``SCENELOC_BACKEND``
environment variable ("numba" or "numpy"; default numba when importable) and
can be switched at runtime with :func:`set_backend`. Both backends compute
the same quantities; float results may differ by summation order at the
1e-10 level. ``benchmarks/bench_kernels.py`` times one against the other.

Dense network algebra (layer matmuls) is deliberately not here: BLAS via
numpy already owns those shapes.
"""

import logging
import os

import numpy as np

log = logging.getLogger(__name__)

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]


_env = os.environ.get("SCENELOC_BACKEND", "numba").lower()
if _env not in ("numba", "numpy"):
    log.warning("SCENELOC_BACKEND=%r not recognized, using numba", _env)
    _env = "numba"
if _env == "numba" and not _HAVE_NUMBA:
    log.warning("numba unavailable, falling back to numpy kernels")
    _env = "numpy"

_backend = _env


def set_backend(name):
    """Switch kernel backend at runtime ("numba" or "numpy")."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name


def get_backend():
    return _backend


def _dispatch(numba_fn, numpy_fn, *args):
    return (numba_fn if _backend == "numba" else numpy_fn)(*args)


# ---------------------------------------------------------------------------
# pixel-difference feature responses
# ---------------------------------------------------------------------------


@njit(cache=True)
def _feature_matrix_numba(images, frame_idx, px, py, d1x, d1y, d2x, d2y, c1, c2):
    n_px = px.shape[0]
    n_feat = d1x.shape[0]
    h = images.shape[1]
    w = images.shape[2]
    out = np.empty((n_px, n_feat), dtype=np.float32)
    for i in range(n_px):
        f = frame_idx[i]
        x = px[i]
        y = py[i]
        for d in range(n_feat):
            x1 = min(max(x + d1x[d], 0), w - 1)
            y1 = min(max(y + d1y[d], 0), h - 1)
            x2 = min(max(x + d2x[d], 0), w - 1)
            y2 = min(max(y + d2y[d], 0), h - 1)
            out[i, d] = np.float32(images[f, y1, x1, c1[d]]) - np.float32(
                images[f, y2, x2, c2[d]]
            )
    return out


def _feature_matrix_numpy(images, frame_idx, px, py, d1x, d1y, d2x, d2y, c1, c2):
    h, w = images.shape[1:3]
    n_px = px.shape[0]
    out = np.empty((n_px, d1x.shape[0]), dtype=np.float32)
    # chunk rows: the (chunk, D) index arrays would otherwise dwarf the output
    step = max(1, int(4e6) // max(1, d1x.shape[0]))
    for s in range(0, n_px, step):
        e = min(s + step, n_px)
        pxs = px[s:e, None]
        pys = py[s:e, None]
        fs = frame_idx[s:e, None]
        x1 = np.clip(pxs + d1x[None, :], 0, w - 1)
        y1 = np.clip(pys + d1y[None, :], 0, h - 1)
        x2 = np.clip(pxs + d2x[None, :], 0, w - 1)
        y2 = np.clip(pys + d2y[None, :], 0, h - 1)
        v1 = images[fs, y1, x1, c1[None, :]].astype(np.float32)
        v2 = images[fs, y2, x2, c2[None, :]].astype(np.float32)
        out[s:e] = v1 - v2
    return out


def feature_matrix(images, frame_idx, px, py, d1x, d1y, d2x, d2y, c1, c2):
    """Responses I(p+d1,c1)-I(p+d2,c2) for every (pixel, spec) pair, clamped
    to image bounds. images: (F,H,W,3) uint8. Returns (P,D) float32."""
    return _dispatch(
        _feature_matrix_numba,
        _feature_matrix_numpy,
        images,
        frame_idx,
        px,
        py,
        d1x,
        d1y,
        d2x,
        d2y,
        c1,
        c2,
    )


# ---------------------------------------------------------------------------
# tree routing
# ---------------------------------------------------------------------------


@njit(cache=True)
def _route_by_features_numba(x, feature, thresh, left, right):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] >= thresh[node]:
                node = right[node]
            else:
                node = left[node]
        out[i] = node
    return out


def _route_by_features_numpy(x, feature, thresh, left, right):
    n = x.shape[0]
    cur = np.zeros(n, dtype=np.int32)
    pending = np.nonzero(feature[cur] >= 0)[0]
    while pending.size:
        nodes = cur[pending]
        resp = x[pending, feature[nodes]]
        go_right = resp >= thresh[nodes]
        cur[pending] = np.where(go_right, right[nodes], left[nodes])
        pending = pending[feature[cur[pending]] >= 0]
    return cur


def route_by_features(x, feature, thresh, left, right):
    """Route feature-vector rows through one tree; returns leaf node ids.

    Boundary rule: response == threshold goes right."""
    return _dispatch(_route_by_features_numba, _route_by_features_numpy, x, feature, thresh, left, right)


@njit(cache=True)
def _route_by_image_numba(image, px, py, feature, thresh, left, right, d1x, d1y, d2x, d2y, c1, c2):
    n = px.shape[0]
    h = image.shape[0]
    w = image.shape[1]
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        x = px[i]
        y = py[i]
        node = 0
        while feature[node] >= 0:
            d = feature[node]
            x1 = min(max(x + d1x[d], 0), w - 1)
            y1 = min(max(y + d1y[d], 0), h - 1)
            x2 = min(max(x + d2x[d], 0), w - 1)
            y2 = min(max(y + d2y[d], 0), h - 1)
            resp = np.float64(image[y1, x1, c1[d]]) - np.float64(image[y2, x2, c2[d]])
            if resp >= thresh[node]:
                node = right[node]
            else:
                node = left[node]
        out[i] = node
    return out


def _route_by_image_numpy(image, px, py, feature, thresh, left, right, d1x, d1y, d2x, d2y, c1, c2):
    h, w = image.shape[:2]
    n = px.shape[0]
    cur = np.zeros(n, dtype=np.int32)
    pending = np.nonzero(feature[cur] >= 0)[0]
    while pending.size:
        nodes = cur[pending]
        d = feature[nodes]
        x1 = np.clip(px[pending] + d1x[d], 0, w - 1)
        y1 = np.clip(py[pending] + d1y[d], 0, h - 1)
        x2 = np.clip(px[pending] + d2x[d], 0, w - 1)
        y2 = np.clip(py[pending] + d2y[d], 0, h - 1)
        resp = image[y1, x1, c1[d]].astype(np.float64) - image[y2, x2, c2[d]].astype(np.float64)
        go_right = resp >= thresh[nodes]
        cur[pending] = np.where(go_right, right[nodes], left[nodes])
        pending = pending[feature[cur[pending]] >= 0]
    return cur

def route_by_image(image, px, py, feature, thresh, left, right, d1x, d1y, d2x, d2y, c1, c2):
    """Route pixels of one image through one tree, computing the single
    needed feature response at each visited split. Returns leaf node ids."""
    return _dispatch(
        _route_by_image_numba,
        _route_by_image_numpy,
        image,
        px,
        py,
        feature,
        thresh,
        left,
        right,
        d1x,
        d1y,
        d2x,
        d2y,
        c1,
        c2,
    )


# ---------------------------------------------------------------------------
# split-candidate scoring
# ---------------------------------------------------------------------------


@njit(cache=True)
def _split_scores_numba(resp, targets, thresh, min_leaf):
    n, n_cand = resp.shape
    scores = np.full(n_cand, -np.inf)
    n_left = np.zeros(n_cand, dtype=np.int64)
    tot = np.zeros(3)
    tot_sq = np.zeros(3)
    for i in range(n):
        for k in range(3):
            tot[k] += targets[i, k]
            tot_sq[k] += targets[i, k] * targets[i, k]
    sse_parent = 0.0
    for k in range(3):
        sse_parent += tot_sq[k] - tot[k] * tot[k] / n
    for c in range(n_cand):
        s_r = np.zeros(3)
        sq_r = np.zeros(3)
        nr = 0
        for i in range(n):
            if resp[i, c] >= thresh[c]:
                nr += 1
                for k in range(3):
                    s_r[k] += targets[i, k]
                    sq_r[k] += targets[i, k] * targets[i, k]
        nl = n - nr
        n_left[c] = nl
        if nl < min_leaf or nr < min_leaf:
            continue
        sse_l = 0.0
        sse_r = 0.0
        for k in range(3):
            sse_r += sq_r[k] - s_r[k] * s_r[k] / nr
            sse_l += (tot_sq[k] - sq_r[k]) - (tot[k] - s_r[k]) * (tot[k] - s_r[k]) / nl
        scores[c] = (sse_parent - sse_l - sse_r) / n
    return scores, n_left


def _split_scores_numpy(resp, targets, thresh, min_leaf):
    n = resp.shape[0]
    go_right = (resp >= thresh[None, :]).astype(np.float64)  # (S,C)
    nr = go_right.sum(axis=0)
    nl = n - nr
    tot = targets.sum(axis=0)
    tot_sq = (targets * targets).sum(axis=0)
    sse_parent = (tot_sq - tot * tot / n).sum()
    s_r = go_right.T @ targets  # (C,3)
    sq_r = go_right.T @ (targets * targets)
    with np.errstate(divide="ignore", invalid="ignore"):
        sse_r = (sq_r - s_r * s_r / nr[:, None]).sum(axis=1)
        s_l = tot[None, :] - s_r
        sse_l = ((tot_sq[None, :] - sq_r) - s_l * s_l / nl[:, None]).sum(axis=1)
        scores = (sse_parent - sse_l - sse_r) / n
    scores[(nl < min_leaf) | (nr < min_leaf)] = -np.inf
    return scores, (n - nr).astype(np.int64)


def split_scores(resp, targets, thresh, min_leaf):
    """Variance-sum reduction for each candidate column of resp split at its
    threshold. Candidates leaving a side below min_leaf score -inf.

    resp: (S,C) float responses, targets: (S,3) float64, thresh: (C,).
    Returns (scores (C,), n_left (C,))."""
    resp = np.ascontiguousarray(resp)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    return _dispatch(_split_scores_numba, _split_scores_numpy, resp, targets, thresh, np.int64(min_leaf))


# ---------------------------------------------------------------------------
# mean-shift mode seeking (leaf fitting)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _meanshift_seeds_numba(samples, seeds, bandwidth, tol, max_iter):
    q = seeds.shape[0]
    n = samples.shape[0]
    out = seeds.copy()
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for s in range(q):
        yx = out[s, 0]
        yy = out[s, 1]
        yz = out[s, 2]
        for _ in range(max_iter):
            wx = 0.0
            wy = 0.0
            wz = 0.0
            wsum = 0.0
            for i in range(n):
                dx = yx - samples[i, 0]
                dy = yy - samples[i, 1]
                dz = yz - samples[i, 2]
                w = np.exp(-(dx * dx + dy * dy + dz * dz) * inv)
                wx += w * samples[i, 0]
                wy += w * samples[i, 1]
                wz += w * samples[i, 2]
                wsum += w
            nx = wx / wsum
            ny = wy / wsum
            nz = wz / wsum
            dx = nx - yx
            dy = ny - yy
            dz = nz - yz
            yx = nx
            yy = ny
            yz = nz
            if dx * dx + dy * dy + dz * dz < tol * tol:
                break
        out[s, 0] = yx
        out[s, 1] = yy
        out[s, 2] = yz
    return out


def _meanshift_seeds_numpy(samples, seeds, bandwidth, tol, max_iter):
    out = seeds.copy()
    active = np.arange(seeds.shape[0])
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for _ in range(max_iter):
        if not active.size:
            break
        diff = out[active, None, :] - samples[None, :, :]
        w = np.exp(-(diff * diff).sum(axis=2) * inv)  # (q,S)
        nxt = (w @ samples) / w.sum(axis=1)[:, None]
        moved = ((nxt - out[active]) ** 2).sum(axis=1) >= tol * tol
        out[active] = nxt
        active = active[moved]
    return out


def meanshift_seeds(samples, seeds, bandwidth, tol, max_iter):
    """Run Gaussian-kernel mean-shift from each seed over the sample set
    until the step is below tol (or max_iter). Returns converged seeds."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    seeds = np.ascontiguousarray(seeds, dtype=np.float64)
    return _dispatch(
        _meanshift_seeds_numba,
        _meanshift_seeds_numpy,
        samples,
        seeds,
        float(bandwidth),
        float(tol),
        int(max_iter),
    )


# ---------------------------------------------------------------------------
# batched robust average (post-hoc use over many pixels)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _pgm_batch_numba(pts, n_weiszfeld, n_meanshift, sigma, eps):
    n_px, t, _ = pts.shape
    out = np.empty((n_px, 3))
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for p in range(n_px):
        qx = 0.0
        qy = 0.0
        qz = 0.0
        for i in range(t):
            qx += pts[p, i, 0]
            qy += pts[p, i, 1]
            qz += pts[p, i, 2]
        qx /= t
        qy /= t
        qz /= t
        for it in range(n_weiszfeld + n_meanshift):
            sx = 0.0
            sy = 0.0
            sz = 0.0
            sw = 0.0
            for i in range(t):
                dx = qx - pts[p, i, 0]
                dy = qy - pts[p, i, 1]
                dz = qz - pts[p, i, 2]
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                if it < n_weiszfeld:
                    w = 1.0 / max(r, eps)
                else:
                    w = np.exp(-r * r * inv2s2)
                sx += w * pts[p, i, 0]
                sy += w * pts[p, i, 1]
                sz += w * pts[p, i, 2]
                sw += w
            if sw > 0.0:  # all Gaussian weights can underflow far from the points
                qx = sx / sw
                qy = sy / sw
                qz = sz / sw
        out[p, 0] = qx
        out[p, 1] = qy
        out[p, 2] = qz
    return out


def _pgm_batch_numpy(pts, n_weiszfeld, n_meanshift, sigma, eps):
    q = pts.mean(axis=1)  # (P,3)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for it in range(n_weiszfeld + n_meanshift):
        diff = q[:, None, :] - pts
        r2 = (diff * diff).sum(axis=2)
        if it < n_weiszfeld:
            w = 1.0 / np.maximum(np.sqrt(r2), eps)
        else:
            w = np.exp(-r2 * inv2s2)
        sw = w.sum(axis=1)
        ok = sw > 0.0  # all Gaussian weights can underflow far from the points
        num = (w[:, :, None] * pts).sum(axis=1)
        q = np.where(ok[:, None], num / np.where(ok, sw, 1.0)[:, None], q)
    return q


def pgm_batch(pts, n_weiszfeld, n_meanshift, sigma, eps):
    """Robust average per row of pts (P,T,3): mean init, n_weiszfeld inverse
    -distance iterations, then n_meanshift Gaussian iterations."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    return _dispatch(
        _pgm_batch_numba,
        _pgm_batch_numpy,
        pts,
        int(n_weiszfeld),
        int(n_meanshift),
        float(sigma),
        float(eps),
    )


# ---------------------------------------------------------------------------
# pose hypothesis scoring
# ---------------------------------------------------------------------------


@njit(cache=True)
def _pose_inlier_counts_numba(rcw, tcw, pts, u, v, fx, fy, cx, cy, thresh):
    n_hyp = rcw.shape[0]
    n = pts.shape[0]
    counts = np.zeros(n_hyp, dtype=np.int64)
    t2 = thresh * thresh
    for h in range(n_hyp):
        c = 0
        for i in range(n):
            z = rcw[h, 2, 0] * pts[i, 0] + rcw[h, 2, 1] * pts[i, 1] + rcw[h, 2, 2] * pts[i, 2] + tcw[h, 2]
            if z <= 1e-9:
                continue
            x = rcw[h, 0, 0] * pts[i, 0] + rcw[h, 0, 1] * pts[i, 1] + rcw[h, 0, 2] * pts[i, 2] + tcw[h, 0]
            y = rcw[h, 1, 0] * pts[i, 0] + rcw[h, 1, 1] * pts[i, 1] + rcw[h, 1, 2] * pts[i, 2] + tcw[h, 1]
            du = fx * x / z + cx - u[i]
            dv = fy * y / z + cy - v[i]
            if du * du + dv * dv < t2:
                c += 1
        counts[h] = c
    return counts


def _pose_inlier_counts_numpy(rcw, tcw, pts, u, v, fx, fy, cx, cy, thresh):
    n_hyp = rcw.shape[0]
    counts = np.empty(n_hyp, dtype=np.int64)
    t2 = thresh * thresh
    step = max(1, int(2e6) // max(1, pts.shape[0]))
    for s in range(0, n_hyp, step):
        e = min(s + step, n_hyp)
        xc = np.einsum("hij,nj->hni", rcw[s:e], pts) + tcw[s:e, None, :]
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            du = fx * xc[..., 0] / z + cx - u[None, :]
            dv = fy * xc[..., 1] / z + cy - v[None, :]
            ok = (z > 1e-9) & (du * du + dv * dv < t2)
        counts[s:e] = ok.sum(axis=1)
    return counts


def pose_inlier_counts(rcw, tcw, pts, u, v, fx, fy, cx, cy, thresh):
    """Inlier count per world-to-camera pose (rcw (H,3,3), tcw (H,3)): scene
    points pts (N,3) reprojecting within thresh px of (u,v), in front of the
    camera."""
    return _dispatch(
        _pose_inlier_counts_numba,
        _pose_inlier_counts_numpy,
        np.ascontiguousarray(rcw, dtype=np.float64),
        np.ascontiguousarray(tcw, dtype=np.float64),
        np.ascontiguousarray(pts, dtype=np.float64),
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        float(fx),
        float(fy),
        float(cx),
        float(cy),
        float(thresh),
    )


def warmup():
    """Force-compile every numba kernel on tiny inputs (no-op on numpy)."""
    if _backend != "numba":
        return
    img = np.zeros((1, 4, 4, 3), dtype=np.uint8)
    z2 = np.zeros(2, dtype=np.int64)
    feature_matrix(img, z2, z2, z2, z2, z2, z2, z2, z2, z2)
    feat = np.array([0, -1, -1], dtype=np.int32)
    thr = np.zeros(3)
    lft = np.array([1, -1, -1], dtype=np.int32)
    rgt = np.array([2, -1, -1], dtype=np.int32)
    route_by_features(np.zeros((2, 1), dtype=np.float32), feat, thr, lft, rgt)
    route_by_image(img[0], z2, z2, feat, thr, lft, rgt, z2[:1], z2[:1], z2[:1], z2[:1], z2[:1], z2[:1])
    split_scores(np.zeros((4, 2), dtype=np.float32), np.zeros((4, 3)), np.zeros(2), 1)
    meanshift_seeds(np.zeros((2, 3)), np.zeros((1, 3)), 0.1, 1e-4, 2)
    pgm_batch(np.zeros((1, 3, 3)), 2, 2, 0.025, 1e-9)
    pose_inlier_counts(np.eye(3)[None], np.zeros((1, 3)), np.ones((2, 3)), np.zeros(2), np.zeros(2), 1.0, 1.0, 0.0, 0.0, 10.0)
