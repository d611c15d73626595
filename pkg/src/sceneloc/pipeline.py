"""Pipeline stages, from synthetic dataset to the final method-by-averaging
report.

Each stage writes its artifact atomically (temp name, then rename) together
with a provenance sidecar: the sha256 of the artifact, the full run config,
and the hash of every input artifact. A stage verifies those hashes before
consuming anything, so regenerated or hand-edited upstream files fail fast
with stale-provenance instead of silently skewing downstream results.
"""

import dataclasses
import glob
import hashlib
import json
import math
import os

import numpy as np

from . import netsplit
from .errors import (
    ConfigInvalid,
    InsufficientSamples,
    IOFailure,
    MissingFile,
    NoValidHypothesis,
    StaleProvenance,
)
from .features import FeatureBank, feature_matrix_for_pixels
from .forest import Forest, load_forest, save_forest, train_forest
from .forestnet import (
    forward_ensemble,
    load_forestnet,
    map_back,
    map_forest_to_net,
    save_forestnet,
    train_forestnet,
)
from .metrics import PoseMetrics, aggregate, coord_metrics, pose_metrics
from .pose_ransac import localize_frame
from .robust_average import apply_pgm
from .scene_data import (
    SyntheticScene,
    load_dataset,
    render_synthetic,
    room_trajectory,
    save_dataset,
)

FOREST_FILE = "forest.npz"
SAMPLES_FILE = "train_samples.npz"
MAPPED_NET_FILE = "net_mapped.npz"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"

METHOD_ROWS = ("RF2", "fNET-L", "fNET-LS", "fNET-LST")
COLUMNS = ("noGM", "pGM", "eGM")

_PROV_SUFFIX = ".prov.json"
_DIR_PROV = "provenance.json"


def tuned_net_file(variant, loss_mode):
    tag = "egm" if loss_mode == "egm" else "ptree"
    return f"net_{variant}_{tag}.npz"


def curve_file(variant, loss_mode):
    tag = "egm" if loss_mode == "egm" else "ptree"
    return f"net_{variant}_{tag}.curve.json"


def mapback_file(variant):
    return f"forest_from_net_{variant}.npz"


def localize_file(method, column):
    return f"localize_{method}_{column}.json"


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_tree(root):
    """Hash of every file under root (relative path + bytes), sidecar excluded."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name == _DIR_PROV:
                continue
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(b"\0")
            h.update(_sha256_file(path).encode())
    return h.hexdigest()


def artifact_hash(path):
    return _sha256_tree(path) if os.path.isdir(path) else _sha256_file(path)


def _prov_path(artifact):
    if os.path.isdir(artifact):
        return os.path.join(artifact, _DIR_PROV)
    return artifact + _PROV_SUFFIX


def _write_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def write_provenance(artifact, stage, config, inputs, extra=None):
    meta = {
        "stage": stage,
        "artifact": os.path.basename(os.path.normpath(artifact)),
        "sha256": artifact_hash(artifact),
        "config": dataclasses.asdict(config),
        "inputs": {
            os.path.basename(os.path.normpath(p)): {
                "path": p,
                "sha256": artifact_hash(p),
            }
            for p in inputs
        },
    }
    if extra:
        meta["extra"] = extra
    _write_json(_prov_path(artifact), meta)
    return meta


def verify_artifact(artifact):
    """Check an artifact and its recorded inputs against the sidecar hashes.

    Returns the sidecar metadata. Raises MissingFile when the artifact does
    not exist, StaleProvenance when the sidecar is absent or any hash
    disagrees with what is on disk now."""
    if not os.path.exists(artifact):
        raise MissingFile(f"artifact {artifact} does not exist")
    prov = _prov_path(artifact)
    if not os.path.exists(prov):
        raise StaleProvenance(f"{artifact} has no provenance sidecar")
    try:
        with open(prov) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read provenance {prov}: {exc}") from None
    if meta.get("sha256") != artifact_hash(artifact):
        raise StaleProvenance(f"{artifact} was modified after it was written")
    for name, rec in meta.get("inputs", {}).items():
        path = rec["path"]
        if not os.path.exists(path):
            raise StaleProvenance(f"input {path} of {artifact} is missing")
        if artifact_hash(path) != rec["sha256"]:
            raise StaleProvenance(
                f"input {path} changed after {artifact} was written"
            )
    return meta


def _atomic(path, save_fn):
    tmp = path + ".tmp"
    save_fn(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def run_synth(config):
    """Render train/test trajectories of a synthetic room to disk."""
    root = config.dataset_path()
    intr = config.intrinsics()
    seed = config.stage_seed("synth")
    scene = SyntheticScene(extent=config.scene_extent, rng_seed=seed)
    train_poses, test_poses = room_trajectory(
        scene, config.n_train_frames, config.n_test_frames, rng_seed=seed
    )
    splits = {
        "train": [render_synthetic(scene, p, intr) for p in train_poses],
        "test": [render_synthetic(scene, p, intr) for p in test_poses],
    }
    save_dataset(root, intr, splits)
    write_provenance(root, "synth", config, [])
    return root


def _load_frames(config, split):
    intr, splits = load_dataset(config.dataset_path(), splits=(split,))
    return intr, splits[split]


def _sample_valid_pixels(frame, count, rng):
    flat = np.flatnonzero(frame.valid)
    if flat.size == 0:
        raise InsufficientSamples("frame has no valid-depth pixels")
    sel = rng.choice(flat, size=min(count, flat.size), replace=False)
    w = frame.valid.shape[1]
    return sel % w, sel // w


def run_train_forest(config):
    """Sample training pixels, compute responses, grow the forest."""
    root = config.dataset_path()
    verify_artifact(root)
    intr, frames = _load_frames(config, "train")
    bank = FeatureBank(
        size=config.n_features,
        max_radius=config.offset_radius,
        rng_seed=config.stage_seed("features"),
    )
    rng = np.random.default_rng(config.stage_seed("train-forest"))
    fi, pxs, pys, ms = [], [], [], []
    for i, fr in enumerate(frames):
        px, py = _sample_valid_pixels(fr, config.train_pixels_per_frame, rng)
        fi.append(np.full(px.size, i, dtype=np.int64))
        pxs.append(px)
        pys.append(py)
        ms.append(fr.scene_coords[py, px])
    frame_idx = np.concatenate(fi)
    px, py, m = np.concatenate(pxs), np.concatenate(pys), np.concatenate(ms)
    images = np.stack([fr.rgb for fr in frames])
    x = feature_matrix_for_pixels(images, frame_idx, px, py, bank)
    forest = train_forest(x, m, bank, config.forest_config())

    os.makedirs(config.out_dir, exist_ok=True)
    fpath = os.path.join(config.out_dir, FOREST_FILE)
    _atomic(fpath, lambda tmp: save_forest(tmp, forest))
    write_provenance(fpath, "train-forest", config, [root])

    spath = os.path.join(config.out_dir, SAMPLES_FILE)

    def save_samples(tmp):
        with open(tmp, "wb") as f:
            np.savez(f, frame_idx=frame_idx, px=px, py=py, m=m)

    _atomic(spath, save_samples)
    write_provenance(spath, "train-samples", config, [root])
    return fpath, spath


def run_map(config):
    """Map the trained forest to its network ensemble; optionally plan the
    per-tree subtree split and record the reduction factors."""
    fpath = os.path.join(config.out_dir, FOREST_FILE)
    verify_artifact(fpath)
    forest = load_forest(fpath)
    c01, c12 = config.mapping_constants()
    fnet = map_forest_to_net(forest, config.mode, c01=c01, c12=c12)
    plans = []
    extra = None
    if config.subtree_depth:
        plans = [netsplit.plan_split(net, config.subtree_depth) for net in fnet.nets]
        extra = {"split_plans": [p.to_meta() for p in plans]}
    npath = os.path.join(config.out_dir, MAPPED_NET_FILE)
    source = artifact_hash(fpath)
    _atomic(npath, lambda tmp: save_forestnet(tmp, fnet, source_hash=source))
    write_provenance(npath, "map", config, [fpath], extra=extra)
    return npath, plans


def run_finetune(config):
    """Fine-tune the mapped ensemble on a fraction of the forest's training
    pixels; writes the tuned checkpoint and its loss curves."""
    out = config.out_dir
    npath = os.path.join(out, MAPPED_NET_FILE)
    spath = os.path.join(out, SAMPLES_FILE)
    root = config.dataset_path()
    for a in (npath, spath, root):
        verify_artifact(a)
    fnet, _ = load_forestnet(npath)
    fnet = dataclasses.replace(fnet, variant=config.variant)
    data = np.load(spath)
    frame_idx, px, py, m = (data[k] for k in ("frame_idx", "px", "py", "m"))
    intr, frames = _load_frames(config, "train")
    images = np.stack([fr.rgb for fr in frames])

    rng = np.random.default_rng(config.stage_seed("finetune"))
    total = frame_idx.shape[0]
    k = max(1, int(round(config.finetune_fraction * total)))
    sel = np.sort(rng.choice(total, size=min(k, total), replace=False))
    x = feature_matrix_for_pixels(images, frame_idx[sel], px[sel], py[sel], fnet.bank)

    curve, per_tree = train_forestnet(
        fnet,
        x,
        m[sel],
        epochs=config.epochs,
        loss_mode=config.finetune_loss,
        batch_size=config.batch_size,
        lr=config.learning_rate,
        rng_seed=config.stage_seed("finetune"),
        gm_config=config.gm_config(),
    )

    tuned = os.path.join(out, tuned_net_file(config.variant, config.finetune_loss))
    source = artifact_hash(npath)
    _atomic(tuned, lambda tmp: save_forestnet(tmp, fnet, source_hash=source))
    write_provenance(tuned, "finetune", config, [npath, spath, root])

    cpath = os.path.join(out, curve_file(config.variant, config.finetune_loss))
    _write_json(
        cpath,
        {
            "variant": config.variant,
            "loss_mode": config.finetune_loss,
            "epochs": config.epochs,
            "n_samples": int(sel.size),
            "loss_curve": np.asarray(curve).tolist(),
            "per_tree_curve": None if per_tree is None else np.asarray(per_tree).tolist(),
        },
    )
    write_provenance(cpath, "finetune-curve", config, [tuned])
    return tuned, cpath


def run_mapback(config, checkpoint=None):
    """Map a tuned checkpoint back onto the source forest's tree structure."""
    out = config.out_dir
    tuned = checkpoint or os.path.join(
        out, tuned_net_file(config.variant, config.finetune_loss)
    )
    fpath = os.path.join(out, FOREST_FILE)
    verify_artifact(tuned)
    verify_artifact(fpath)
    fnet, _ = load_forestnet(tuned)
    forest = load_forest(fpath)
    back = map_back(fnet, forest)  # LST checkpoints refuse here
    bpath = os.path.join(out, mapback_file(fnet.variant))
    _atomic(bpath, lambda tmp: save_forest(tmp, back))
    write_provenance(bpath, "mapback", config, [tuned, fpath])
    return bpath


def _predict_coords(predictor, frame, px, py):
    if isinstance(predictor, Forest):
        return predictor.predict_image(frame.rgb, px, py)
    x = feature_matrix_for_pixels(
        np.asarray(frame.rgb)[None],
        np.zeros(px.shape[0], dtype=np.int64),
        px,
        py,
        predictor.bank,
    )
    return forward_ensemble(predictor, x)


def run_localize(config, predictor="net", checkpoint=None):
    """Localize every test frame with one predictor and write the scored
    result (per-frame pose errors plus coordinate-inlier stats)."""
    out = config.out_dir
    root = config.dataset_path()
    verify_artifact(root)
    intr, frames = _load_frames(config, "test")

    loss_mode = "per-tree"
    if predictor == "forest":
        path = os.path.join(out, FOREST_FILE)
        verify_artifact(path)
        model = load_forest(path)
        method = "RF2"
    elif predictor == "mapback":
        path = checkpoint or os.path.join(out, mapback_file(config.variant))
        verify_artifact(path)
        model = load_forest(path)
        method = f"RF(fNET-{config.variant})"
    elif predictor == "net":
        path = checkpoint or os.path.join(
            out, tuned_net_file(config.variant, config.finetune_loss)
        )
        meta = verify_artifact(path)
        model, _ = load_forestnet(path)
        method = f"fNET-{model.variant}"
        if meta.get("stage") == "finetune":
            loss_mode = meta["config"]["finetune_loss"]
    else:
        raise ConfigInvalid(f"unknown predictor {predictor!r}")

    if config.robust == "none":
        column = "noGM"
    else:
        column = "eGM" if loss_mode == "egm" else "pGM"

    base = config.stage_seed("localize")
    gm = config.gm_config()
    rcfg = config.ransac_config()
    h, w = frames[0].depth.shape
    sample_count = min(config.samples_per_frame, h * w)

    frame_rows = []
    pose_list = []
    pooled_n = 0
    pooled_inliers = 0
    for i, frame in enumerate(frames):
        seed = int(np.random.SeedSequence([base, i]).generate_state(1)[0])
        failed = False
        try:
            res = localize_frame(
                frame,
                model,
                intr,
                sample_count=sample_count,
                robust=config.robust,
                gm_config=gm,
                ransac_config=rcfg,
                rng_seed=seed,
            )
            pm = pose_metrics(res.pose, frame.pose)
            inlier_count, n_corr = res.inlier_count, res.n_correspondences
        except NoValidHypothesis:
            failed = True
            pm = PoseMetrics(
                translation_error=math.inf, rotation_error=180.0, correct=False
            )
            inlier_count, n_corr = 0, 0
        pose_list.append(pm)

        ev_rng = np.random.default_rng(np.random.SeedSequence([base, i, 1]))
        px, py = _sample_valid_pixels(frame, config.eval_pixels_per_frame, ev_rng)
        preds = _predict_coords(model, frame, px, py)
        gt = frame.scene_coords[py, px]
        if config.robust == "none":
            t = preds.shape[1]
            cm = coord_metrics(preds.reshape(-1, 3), np.repeat(gt, t, axis=0))
        else:
            cm = coord_metrics(apply_pgm(preds, gm), gt)
        pooled_n += cm.n_pixels
        pooled_inliers += cm.n_inliers

        frame_rows.append(
            {
                "frame": i,
                "failed": failed,
                "translation_error": pm.translation_error,
                "rotation_error": pm.rotation_error,
                "correct": pm.correct,
                "pose_inliers": inlier_count,
                "n_correspondences": n_corr,
                "coord_inlier_fraction": cm.inlier_fraction,
                "coord_mean_inlier_distance": cm.mean_inlier_distance,
                "coord_n": cm.n_pixels,
            }
        )

    agg = aggregate({"synthetic": pose_list})
    scene = agg.per_scene["synthetic"]
    payload = {
        "method": method,
        "column": column,
        "predictor": predictor,
        "checkpoint": os.path.basename(path),
        "n_frames": len(frames),
        "frames": frame_rows,
        "pose": {
            "median_translation_m": scene.median_translation,
            "median_rotation_deg": scene.median_rotation,
            "percent_correct": scene.percent_correct,
        },
        "coord": {
            "frame_mean_inlier_fraction": float(
                np.mean([r["coord_inlier_fraction"] for r in frame_rows])
            ),
            "pooled_inlier_fraction": pooled_inliers / pooled_n,
            "n_pixels": pooled_n,
        },
    }
    lpath = os.path.join(out, localize_file(method, column))
    _write_json(lpath, payload)
    write_provenance(lpath, "localize", config, [root, path])
    return lpath, payload


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _pose_cell(cell):
    if cell is None:
        return "-"
    if cell == "n/a":
        return "n/a"
    t = cell["pose"]["median_translation_m"]
    if not math.isfinite(t):
        return "no pose"
    r = cell["pose"]["median_rotation_deg"]
    pc = cell["pose"]["percent_correct"]
    return f"{100 * t:.1f}cm {r:.1f}deg {pc:.0f}%"


def _coord_cell(cell):
    if cell is None:
        return "-"
    if cell == "n/a":
        return "n/a"
    return f"{100 * cell['coord']['frame_mean_inlier_fraction']:.1f}%"


def _table(rows, columns, cells, render):
    header = ["method"] + list(columns)
    lines = [header]
    for row in rows:
        lines.append([row] + [render(cells[row][c]) for c in columns])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    text = []
    for line in lines:
        text.append("  ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip())
    return "\n".join(text)


def run_report(config):
    """Assemble every localization result in out_dir into the method-by-
    averaging matrix (JSON plus aligned text)."""
    out = config.out_dir
    files = sorted(
        p
        for p in glob.glob(os.path.join(out, "localize_*.json"))
        if not p.endswith(_PROV_SUFFIX)
    )
    if not files:
        raise MissingFile(f"no localization results under {out}")

    rows = list(METHOD_ROWS)
    cells = {}
    for path in files:
        verify_artifact(path)
        with open(path) as f:
            payload = json.load(f)
        method, column = payload["method"], payload["column"]
        if column not in COLUMNS:
            raise ConfigInvalid(f"{path} carries unknown column {column!r}")
        if method not in rows:
            rows.append(method)
        cells.setdefault(method, {})[column] = payload

    # a forest can only be averaged after the fact, so RF2-eGM stays empty
    grid = {}
    for row in rows:
        grid[row] = {}
        for col in COLUMNS:
            if row == "RF2" and col == "eGM":
                grid[row][col] = "n/a"
            else:
                grid[row][col] = cells.get(row, {}).get(col)

    text = (
        "pose: median translation / median rotation / % frames within 5cm 5deg\n"
        + _table(rows, COLUMNS, grid, _pose_cell)
        + "\n\ncoordinate inliers: frame-mean % predictions within 10cm\n"
        + _table(rows, COLUMNS, grid, _coord_cell)
        + "\n"
    )

    jpath = os.path.join(out, REPORT_JSON)
    slim = {
        row: {
            col: (
                cell
                if cell in (None, "n/a")
                else {"pose": cell["pose"], "coord": cell["coord"]}
            )
            for col, cell in grid[row].items()
        }
        for row in rows
    }
    _write_json(
        jpath,
        {
            "rows": rows,
            "columns": list(COLUMNS),
            "cells": slim,
            "sources": [os.path.basename(p) for p in files],
        },
    )
    write_provenance(jpath, "report", config, files)

    tpath = os.path.join(out, REPORT_TXT)
    tmp = tpath + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, tpath)
    return tpath, text
