"""Camera-pose recovery from 2D-to-3D correspondences.

Hypotheses come from minimal four-point sets: a three-point algebraic solve
(Grunert's distance quartic) gives candidate camera-frame depths, absolute
orientation turns each candidate into a rigid pose, the fourth point picks
among them, and Gauss-Newton on all four polishes the winner. A preemptive
loop then scores every hypothesis against the full correspondence set,
halves the field by inlier count each round, and refines survivors on their
inlier sets until one pose remains.

All internal poses are world-to-camera (R, t); results are returned as
camera-to-world CameraPose values to match the dataset convention.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import (
    ConfigInvalid,
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NoValidHypothesis,
)
from .robust_average import GMConfig, apply_pgm
from .scene_data import CameraPose


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple  # (u, v)
    scene_point: tuple  # (x, y, z) meters


@dataclass
class PoseHypothesis:
    pose: CameraPose
    inlier_count: int
    reprojection_inliers: np.ndarray  # correspondence indices


@dataclass
class LocalizationResult:
    pose: CameraPose
    inlier_count: int
    inlier_indices: np.ndarray
    n_correspondences: int
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RansacConfig:
    n_hypotheses: int = 1280
    inlier_px: float = 10.0
    min_inlier_quorum: int = 4  # a pose must beat this to count as found
    refine_max_points: int = 256
    refine_iters: int = 5
    final_refine_iters: int = 25
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_hypotheses < 1:
            raise ConfigInvalid("need at least one hypothesis")
        if self.inlier_px <= 0:
            raise ConfigInvalid("inlier threshold must be positive")


def _rodrigues(w):
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def _project(r, t, pts, intr):
    cam = pts @ r.T + t
    z = cam[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = intr.focal_x * cam[:, 0] / safe + intr.center_x
    v = intr.focal_y * cam[:, 1] / safe + intr.center_y
    return u, v, z


def _reproj_sq(r, t, pixels, pts, intr):
    u, v, z = _project(r, t, pts, intr)
    err = (u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2
    return np.where(z > 1e-9, err, np.inf)


def _p3p_distances(world, rays):
    """Grunert's solution: camera-center distances (s1, s2, s3) to three
    world points seen along unit rays. Returns every physical candidate."""
    a2 = ((world[1] - world[2]) ** 2).sum()
    b2 = ((world[0] - world[2]) ** 2).sum()
    c2 = ((world[0] - world[1]) ** 2).sum()
    ca = rays[1] @ rays[2]
    cb = rays[0] @ rays[2]
    cg = rays[0] @ rays[1]
    acb = (a2 - c2) / b2
    a4 = (acb - 1.0) ** 2 - 4.0 * (c2 / b2) * ca * ca
    a3 = 4.0 * (
        acb * (1.0 - acb) * cb
        - (1.0 - (a2 + c2) / b2) * ca * cg
        + 2.0 * (c2 / b2) * ca * ca * cb
    )
    a2_ = 2.0 * (
        acb * acb
        - 1.0
        + 2.0 * acb * acb * cb * cb
        + 2.0 * ((b2 - c2) / b2) * ca * ca
        - 4.0 * ((a2 + c2) / b2) * ca * cb * cg
        + 2.0 * ((b2 - a2) / b2) * cg * cg
    )
    a1 = 4.0 * (
        -acb * (1.0 + acb) * cb
        + 2.0 * (a2 / b2) * cg * cg * cb
        - (1.0 - (a2 + c2) / b2) * ca * cg
    )
    a0 = (1.0 + acb) ** 2 - 4.0 * (a2 / b2) * cg * cg
    coeffs = np.array([a4, a3, a2_, a1, a0])
    if not np.isfinite(coeffs).all() or np.abs(coeffs).max() < 1e-14:
        return []
    sols = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        denom = 2.0 * (cg - v * ca)
        if abs(denom) < 1e-12:
            continue
        u = ((-1.0 + acb) * v * v - 2.0 * acb * cb * v + 1.0 + acb) / denom
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        sols.append((s1, u * s1, v * s1))
    return sols


def _kabsch(src, dst):
    """Rigid (R, t) with R @ src_i + t ~ dst_i."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def _collinear(points, tol=1e-6):
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[1] <= tol * max(s[0], tol)


def _refine(r, t, pixels, points, intr, iters):
    """Gauss-Newton on the 6-parameter pose (axis-angle increment composed
    on the left, additive translation), with step halving. Never increases
    the squared-pixel cost it optimizes."""
    cost = _reproj_sq(r, t, pixels, points, intr)
    cost = np.where(np.isinf(cost), 1e12, cost).sum()
    fx, fy = intr.focal_x, intr.focal_y
    for _ in range(iters):
        y = points @ r.T
        cam = y + t
        z = cam[:, 2]
        if (z < 1e-9).any():
            break
        u = fx * cam[:, 0] / z + intr.center_x
        v = fy * cam[:, 1] / z + intr.center_y
        res = np.column_stack([u - pixels[:, 0], v - pixels[:, 1]]).ravel()
        n = points.shape[0]
        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = fx / z
        dpi[:, 0, 2] = -fx * cam[:, 0] / z**2
        dpi[:, 1, 1] = fy / z
        dpi[:, 1, 2] = -fy * cam[:, 1] / z**2
        ycross = np.zeros((n, 3, 3))
        ycross[:, 0, 1] = -y[:, 2]
        ycross[:, 0, 2] = y[:, 1]
        ycross[:, 1, 0] = y[:, 2]
        ycross[:, 1, 2] = -y[:, 0]
        ycross[:, 2, 0] = -y[:, 1]
        ycross[:, 2, 1] = y[:, 0]
        jac = np.empty((n, 2, 6))
        jac[:, :, :3] = -dpi @ ycross
        jac[:, :, 3:] = dpi
        jac = jac.reshape(2 * n, 6)
        jtj = jac.T @ jac + 1e-12 * np.eye(6)
        try:
            delta = np.linalg.solve(jtj, -jac.T @ res)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        improved = False
        for _ in range(10):
            r_new = _rodrigues(step * delta[:3]) @ r
            t_new = t + step * delta[3:]
            c_new = _reproj_sq(r_new, t_new, pixels, points, intr)
            c_new = np.where(np.isinf(c_new), 1e12, c_new).sum()
            if c_new < cost:
                r, t, cost = r_new, t_new, c_new
                improved = True
                break
            step *= 0.5
        if not improved or cost < 1e-20:
            break
    return r, t, cost


_TRIPLES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def solve_p4p(pixels, points, intrinsics):
    """Pose from exactly four correspondences: algebraic three-point
    initialization, fourth-point disambiguation, Gauss-Newton polish.

    Raises DegenerateConfiguration when the scene points are near-collinear,
    no candidate survives, or the refined pose still misses a point by 10 px
    or more. Returns a camera-to-world CameraPose."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(4, 2)
    points = np.asarray(points, dtype=np.float64).reshape(4, 3)
    if not (np.isfinite(pixels).all() and np.isfinite(points).all()):
        raise DegenerateConfiguration("correspondences must be finite")
    if _collinear(points):
        raise DegenerateConfiguration("scene points are nearly collinear")
    rays = np.column_stack(
        [
            (pixels[:, 0] - intrinsics.center_x) / intrinsics.focal_x,
            (pixels[:, 1] - intrinsics.center_y) / intrinsics.focal_y,
            np.ones(4),
        ]
    )
    rays /= np.linalg.norm(rays, axis=1)[:, None]

    best = None
    best_err = np.inf
    for triple in _TRIPLES:
        idx = np.array(triple)
        if _collinear(points[idx]):
            continue
        for s in _p3p_distances(points[idx], rays[idx]):
            cam_pts = np.asarray(s)[:, None] * rays[idx]
            r, t = _kabsch(points[idx], cam_pts)
            err = _reproj_sq(r, t, pixels, points, intrinsics).sum()
            if err < best_err:
                best_err = err
                best = (r, t)
        if best is not None:
            break
    if best is None:
        raise DegenerateConfiguration("no physical three-point solution")
    r, t, _ = _refine(best[0], best[1], pixels, points, intrinsics, iters=25)
    final = _reproj_sq(r, t, pixels, points, intrinsics)
    if not (final < 100.0).all():  # 10 px, squared
        raise DegenerateConfiguration("pose does not fit its minimal set")
    return CameraPose(r.T, -r.T @ t)


def _coerce(correspondences):
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        pixels, points = correspondences
    else:
        pixels = [c.pixel for c in correspondences]
        points = [c.scene_point for c in correspondences]
    pixels = np.ascontiguousarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] != points.shape[0]:
        raise ConfigInvalid("pixel and scene-point counts differ")
    if not (np.isfinite(pixels).all() and np.isfinite(points).all()):
        raise ConfigInvalid("correspondences must be finite")
    return pixels, points


def _inliers_of(r, t, pixels, points, intr, thresh):
    err = _reproj_sq(r, t, pixels, points, intr)
    return np.nonzero(err < thresh * thresh)[0]


def ransac_pose(correspondences, intrinsics, config=RansacConfig()):
    """Preemptive RANSAC over minimal-set hypotheses.

    Scores every hypothesis by its inlier count (reprojection below the
    threshold, point in front of the camera), keeps the better-scoring half
    each round, and re-solves survivors by Gauss-Newton on a sample of their
    inliers. Raises NoValidHypothesis when nothing beats the quorum."""
    pixels, points = _coerce(correspondences)
    n = pixels.shape[0]
    if n < 4:
        raise InsufficientCorrespondences(f"{n} correspondences, need at least 4")
    rng = np.random.default_rng(config.rng_seed)

    rs, ts = [], []
    degenerate = 0
    attempts = 0
    max_attempts = 20 * config.n_hypotheses
    while len(rs) < config.n_hypotheses and attempts < max_attempts:
        attempts += 1
        pick = rng.choice(n, 4, replace=False)
        try:
            pose = solve_p4p(pixels[pick], points[pick], intrinsics)
        except DegenerateConfiguration:
            degenerate += 1
            continue
        rs.append(pose.rotation.T)
        ts.append(-pose.rotation.T @ pose.translation)
    if not rs:
        raise NoValidHypothesis(
            f"all {attempts} hypothesis draws were degenerate"
        )
    rs = np.asarray(rs)
    ts = np.asarray(ts)

    u_px, v_px = pixels[:, 0], pixels[:, 1]
    rounds = []
    alive = np.arange(rs.shape[0])
    while alive.shape[0] > 1:
        counts = kernels.pose_inlier_counts(
            rs[alive], ts[alive], points, u_px, v_px,
            intrinsics.focal_x, intrinsics.focal_y,
            intrinsics.center_x, intrinsics.center_y,
            config.inlier_px,
        )
        order = np.argsort(-counts, kind="stable")
        keep = order[: max(1, alive.shape[0] // 2)]
        rounds.append(
            {"alive": int(alive.shape[0]), "best_count": int(counts.max())}
        )
        alive = alive[keep]
        for h in alive:
            inl = _inliers_of(rs[h], ts[h], pixels, points, intrinsics, config.inlier_px)
            if inl.shape[0] < 4:
                continue
            if inl.shape[0] > config.refine_max_points:
                inl = rng.choice(inl, config.refine_max_points, replace=False)
            rs[h], ts[h], _ = _refine(
                rs[h], ts[h], pixels[inl], points[inl], intrinsics,
                iters=config.refine_iters,
            )

    h = int(alive[0])
    r, t = rs[h], ts[h]
    inl = _inliers_of(r, t, pixels, points, intrinsics, config.inlier_px)
    # alternate refinement with inlier re-estimation until the set settles;
    # the winning hypothesis often drags a biased consensus that one pass
    # cannot shed
    for _ in range(4):
        if inl.shape[0] < 4:
            break
        sub = inl
        if sub.shape[0] > 4 * config.refine_max_points:
            sub = rng.choice(sub, 4 * config.refine_max_points, replace=False)
        r, t, _ = _refine(
            r, t, pixels[sub], points[sub], intrinsics,
            iters=config.final_refine_iters,
        )
        new_inl = _inliers_of(r, t, pixels, points, intrinsics, config.inlier_px)
        settled = new_inl.shape[0] == inl.shape[0] and np.array_equal(new_inl, inl)
        inl = new_inl
        if settled:
            break
    if inl.shape[0] <= config.min_inlier_quorum:
        raise NoValidHypothesis(
            f"best hypothesis has {inl.shape[0]} inliers "
            f"(quorum {config.min_inlier_quorum})"
        )
    return LocalizationResult(
        pose=CameraPose(r.T, -r.T @ t),
        inlier_count=int(inl.shape[0]),
        inlier_indices=inl,
        n_correspondences=n,
        diagnostics={
            "rounds": rounds,
            "degenerate_draws": degenerate,
            "hypotheses": int(rs.shape[0]),
        },
    )


def sample_pixels(height, width, count, rng):
    """Uniform pixel draw without replacement (all, if count exceeds H*W)."""
    total = height * width
    count = min(count, total)
    flat = rng.choice(total, count, replace=False)
    return flat % width, flat // width


def localize_frame(
    frame,
    predictor,
    intrinsics,
    sample_count=5000,
    robust="gm",
    gm_config=GMConfig(),
    ransac_config=RansacConfig(),
    rng_seed=0,
):
    """Full single-frame localization from RGB only.

    predictor maps sampled pixels to per-tree scene coordinates: a Forest,
    a ForestNet, or any callable (image, px, py) -> (P, T, 3). robust="gm"
    averages the T predictions per pixel into one correspondence; "none"
    keeps every tree prediction as its own correspondence."""
    if robust not in ("gm", "none"):
        raise ConfigInvalid(f"robust must be 'gm' or 'none', got {robust!r}")
    ss = np.random.SeedSequence(rng_seed)
    pix_rng, ransac_seed = ss.spawn(2)
    h, w = frame.rgb.shape[:2]
    px, py = sample_pixels(h, w, sample_count, np.random.default_rng(pix_rng))
    preds = _predict(predictor, frame.rgb, px, py)

    if robust == "gm":
        pts = apply_pgm(preds, gm_config)
        pixels = np.column_stack([px, py]).astype(np.float64)
    else:
        t_count = preds.shape[1]
        pts = preds.reshape(-1, 3)
        pixels = np.repeat(np.column_stack([px, py]).astype(np.float64), t_count, axis=0)

    cfg_seed = int(np.random.default_rng(ransac_seed).integers(0, 2**31 - 1))
    config = replace(ransac_config, rng_seed=cfg_seed)
    return ransac_pose((pixels, pts), intrinsics, config)


def _predict(predictor, image, px, py):
    from .forest import Forest
    from .forestnet import ForestNet, forward_ensemble
    from .features import feature_matrix_for_pixels

    if isinstance(predictor, Forest):
        return predictor.predict_image(image, px, py)
    if isinstance(predictor, ForestNet):
        frame_idx = np.zeros(len(px), dtype=np.int64)
        x = feature_matrix_for_pixels(
            np.asarray(image)[None], frame_idx, px, py, predictor.bank
        )
        return forward_ensemble(predictor, x.astype(np.float64))
    preds = np.asarray(predictor(image, px, py), dtype=np.float64)
    if preds.ndim == 2:
        preds = preds[:, None, :]
    if preds.ndim != 3 or preds.shape[2] != 3:
        raise ConfigInvalid(f"predictor output must be (P, T, 3), got {preds.shape}")
    return preds
