"""Batch entry points: synth -> curate -> patch -> train -> eval.

Every command is deterministic under (inputs, config, seed); `--threads N`
only changes wall time, never output bytes. Exit codes: 0 ok, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import curation, evaluation, formats, patches, synth, training
from .config import RunConfig, load_config
from .errors import (ConfigError, DataError, EmptyMaskError, GeometryError,
                     TrajectoryRangeError)
from .evaluation import EvalConfig, EvalItem

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self._exit_with(message))

    def _exit_with(self, message):
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return EXIT_USAGE


def _parallel_chunks(fn, items, threads):
    """Apply fn to contiguous chunks, preserving order, so threaded and
    serial runs produce identical concatenated output."""
    if threads <= 1 or len(items) <= 1:
        return fn(items)
    n_chunks = min(threads, len(items))
    size = (len(items) + n_chunks - 1) // n_chunks
    chunks = [items[i:i + size] for i in range(0, len(items), size)]
    out = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for part in pool.map(fn, chunks):
            out.extend(part)
    return out


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.override("seed", args.seed)
    if getattr(args, "threads", None) is not None:
        cfg.override("threads", args.threads)
    return cfg


def _sequence_dirs(data_dir):
    root = os.path.join(data_dir, "sequences")
    if not os.path.isdir(root):
        raise DataError(f"no sequences/ directory under {data_dir}")
    return sorted(d for d in glob.glob(os.path.join(root, "*")) if os.path.isdir(d))


def _curate_pipeline(data_dir, cfg):
    """Shared curation: lift, cluster, fit, project. Returns
    (instances, observations, input file paths)."""
    cam, mount = formats.load_camera(os.path.join(data_dir, "camera.json"))
    inputs = [os.path.join(data_dir, "camera.json")]
    boxes, classes = [], []
    frame_jobs = []
    for seq_dir in _sequence_dirs(data_dir):
        seq_id = os.path.basename(seq_dir)
        traj_path = os.path.join(seq_dir, "trajectory.txt")
        ann_path = os.path.join(seq_dir, "annotations.jsonl")
        frames_path = os.path.join(seq_dir, "frames.jsonl")
        inputs += [traj_path, ann_path, frames_path]
        traj = formats.load_trajectory(traj_path)
        anns = formats.load_annotations(ann_path)
        for box, ann in curation.to_global(anns, traj):
            boxes.append(box)
            classes.append(ann.cls)
        for row in formats.load_frames_meta(frames_path):
            frame_jobs.append((seq_id, traj, row))

    clusters = curation.cluster_instances(boxes, classes,
                                          cfg["curation.eps"], cfg["curation.min_pts"])
    instances = curation.build_instances(boxes, classes, clusters)

    def build_frames(jobs):
        out = []
        for seq_id, traj, row in jobs:
            pose = curation.interpolate_pose(traj, row["timestamp"])
            cloud = None
            if row["cloud_path"]:
                cloud = pose.apply(formats.load_cloud(row["cloud_path"]))
            out.append(curation.FrameContext(seq_id, row["frame_id"],
                                             pose.compose(mount), row["weather"], cloud))
        return out

    frames = _parallel_chunks(build_frames, frame_jobs, cfg["threads"])

    def observe(frame_chunk):
        return curation.generate_observations(
            instances, frame_chunk, cam, cfg["curation.range_m"],
            cfg["curation.min_points"], cfg["curation.fov_margin_px"])

    observations = _parallel_chunks(observe, frames, cfg["threads"])
    return instances, observations, inputs


def _class_counts(instances, observations):
    counts = {}
    for inst in instances:
        entry = counts.setdefault(inst.cls, {"instances": 0, "observations": 0,
                                             "per_weather": {}})
        entry["instances"] += 1
    for obs in observations:
        entry = counts.setdefault(obs.cls, {"instances": 0, "observations": 0,
                                            "per_weather": {}})
        entry["observations"] += 1
        entry["per_weather"][obs.weather] = entry["per_weather"].get(obs.weather, 0) + 1
    return counts


def cmd_curate(args):
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    instances, observations, inputs = _curate_pipeline(args.data, cfg)
    if not instances:
        print("objreid: warning: no instances curated (empty or all-noise "
              "annotations)", file=sys.stderr)
    formats.save_instances(os.path.join(args.out, "instances.json"), instances)
    formats.save_observations(os.path.join(args.out, "observations.jsonl"), observations)
    formats.write_manifest(
        os.path.join(args.out, "manifest.json"), "curate", cfg.canonical_text(), inputs,
        extra={"seed": cfg["seed"], "counts": _class_counts(instances, observations)})
    print(f"curate: {len(instances)} instances, {len(observations)} observations")
    return EXIT_OK


def cmd_patch(args):
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    observations = formats.load_observations(args.observations)
    aug_cfg = patches.AugmentConfig(
        brightness=cfg["augment.brightness"], contrast=cfg["augment.contrast"],
        saturation=cfg["augment.saturation"], hue=cfg["augment.hue"],
        center_jitter=cfg["augment.center_jitter"], scale_min=cfg["augment.scale_min"],
        scale_max=cfg["augment.scale_max"], max_rotation=cfg["augment.max_rotation"],
        erase_min=cfg["augment.erase_min"], erase_max=cfg["augment.erase_max"],
        seed=cfg["seed"]) if cfg["augment.enabled"] else None
    margin = cfg["patch.margin_px"]
    target = cfg["patch.target"]
    square = cfg["patch.square"]

    def process(obs_chunk):
        rows = []
        for obs in obs_chunk:
            img_path = os.path.join(args.images, obs.sequence_id,
                                    f"{obs.frame_id:06d}.png")
            if not os.path.exists(img_path):
                raise DataError(f"missing image {img_path} for {obs.obs_id}")
            img = formats.load_image(img_path)
            seed = synth.derive_seed(cfg["seed"], "patch", obs.obs_id)
            if aug_cfg is not None:
                patch, params = patches.augment(
                    img, obs.bbox2d, aug_cfg, np.random.default_rng(seed),
                    margin=margin, target=target, square=square)
                spec = patches.PatchSpec(tuple(obs.bbox2d.center),
                                         params["crop"].get("side", target), obs.obs_id)
            elif square:
                raw, spec = patches.crop_square(img, obs.bbox2d, margin)
                patch, params = patches.resize_patch(raw, target), None
            else:
                raw = patches.crop_rect(img, obs.bbox2d)
                spec = patches.PatchSpec(tuple(obs.bbox2d.center),
                                         max(raw.shape[:2]), obs.obs_id)
                patch, params = patches.resize_patch(raw, target), None
            formats.save_image(os.path.join(args.out, f"{obs.obs_id}.png"), patch)
            rows.append(formats.dumps({
                "obs_id": obs.obs_id, "seed": seed,
                "patch_spec": {"center": [spec.center[0], spec.center[1]],
                               "side": spec.side},
                "augment": params}))
        return rows

    rows = _parallel_chunks(process, observations, cfg["threads"])
    with open(os.path.join(args.out, "patches.jsonl"), "w") as f:
        for row in rows:
            f.write(row + "\n")
    formats.write_manifest(os.path.join(args.out, "manifest.json"), "patch",
                           cfg.canonical_text(), [args.observations],
                           extra={"seed": cfg["seed"], "n_patches": len(rows)})
    print(f"patch: wrote {len(rows)} patches")
    return EXIT_OK


def _split_observations(observations, cfg):
    mode = cfg["split.mode"]
    if mode == "sequence":
        train_seqs = set(cfg["split.train_sequences"])
        val_seqs = set(cfg["split.val_sequences"])
        if not train_seqs or not val_seqs:
            raise ConfigError("sequence split requires split.train_sequences "
                              "and split.val_sequences")
        if train_seqs & val_seqs:
            raise ConfigError(f"overlapping split sequences: {sorted(train_seqs & val_seqs)}")
        train = [o for o in observations if o.sequence_id in train_seqs]
        val = [o for o in observations if o.sequence_id in val_seqs]
    elif mode == "region":
        axis = {"x": 0, "y": 1, "z": 2}.get(cfg["split.axis"])
        if axis is None:
            raise ConfigError(f"bad split.axis {cfg['split.axis']!r}")
        thr = cfg["split.threshold"]
        region = [o for o in observations if o.object_center[axis] <= thr]
        ids = sorted(set(o.instance_id for o in region))
        rng = np.random.default_rng(synth.derive_seed(cfg["seed"], "region-split"))
        order = rng.permutation(len(ids))
        n_val = max(1, int(round(cfg["split.val_fraction"] * len(ids))))
        val_ids = set(ids[i] for i in order[:n_val])
        train = [o for o in region if o.instance_id not in val_ids]
        val = [o for o in region if o.instance_id in val_ids]
    else:
        raise ConfigError(f"unknown split.mode {mode!r}")
    if not train or not val:
        raise ConfigError(f"empty split: {len(train)} train / {len(val)} val observations")
    return train, val


def _eval_items(observations, embeddings):
    return [EvalItem(obs_id=o.obs_id, embedding=embeddings[i],
                     instance_id=o.instance_id, cls=o.cls,
                     sequence_id=o.sequence_id, weather=o.weather,
                     cam_pose=o.cam_pose, object_center=o.object_center)
            for i, o in enumerate(observations)]


def _eval_config(cfg, illumination="all", viewpoint="all"):
    return EvalConfig(similarity=cfg["eval.similarity"], illumination=illumination,
                      viewpoint=viewpoint, top_k=tuple(cfg["eval.top_k"]),
                      cmc_max_k=cfg["eval.cmc_max_k"], hard_rule=cfg["eval.hard_rule"])


def cmd_train(args):
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    observations = formats.load_observations(args.observations)
    feats = training.FileFeatures.load(args.features)
    train_obs, val_obs = _split_observations(observations, cfg)

    train_h = feats.for_ids([o.obs_id for o in train_obs])
    train_labels = np.array([o.instance_id for o in train_obs], dtype=np.int64)
    val_h = feats.for_ids([o.obs_id for o in val_obs])

    tcfg = training.TrainConfig(
        lr=cfg["train.lr"], lr_min=cfg["train.lr_min"],
        temperature=cfg["train.temperature"], epochs_max=cfg["train.epochs_max"],
        patience=cfg["train.patience"],
        instances_per_batch=cfg["train.instances_per_batch"],
        views_per_instance=cfg["train.views_per_instance"],
        seed=cfg["seed"], loss=cfg["train.loss"],
        triplet_margin=cfg["train.triplet_margin"], momentum=cfg["train.momentum"],
        hidden_dim=cfg["train.hidden_dim"], embed_dim=cfg["train.embed_dim"],
        supcon_log=cfg["train.supcon_log"])

    eval_cfg = _eval_config(cfg, cfg["eval.illumination"], cfg["eval.viewpoint"])

    def evaluator(val_z):
        items = _eval_items(val_obs, val_z)
        return evaluation.evaluate(items, items, eval_cfg, keep_per_query=False).map

    val_labels = np.array([o.instance_id for o in val_obs], dtype=np.int64)
    params, history = training.train(train_h, train_labels, val_h, val_labels,
                                     tcfg, evaluator)
    best_epoch = max(history, key=lambda r: (r["val_map"], -r["epoch"]))["epoch"]
    best_map = max(r["val_map"] for r in history)
    training.write_checkpoint(
        os.path.join(args.out, "checkpoint.bin"), params,
        state={"epoch": best_epoch, "best_map": best_map,
               "epochs_run": len(history),
               "rng_state": {"seed": cfg["seed"],
                             "note": "run is fully determined by this seed"}})
    with open(os.path.join(args.out, "history.csv"), "w") as f:
        f.write("epoch,train_loss,val_map,lr\n")
        for row in history:
            f.write(f"{row['epoch']},{row['train_loss']!r},{row['val_map']!r},{row['lr']!r}\n")
    formats.write_manifest(os.path.join(args.out, "manifest.json"), "train",
                           cfg.canonical_text(), [args.features, args.observations],
                           extra={"seed": cfg["seed"], "best_map": best_map,
                                  "best_epoch": best_epoch,
                                  "epochs_run": len(history)})
    print(f"train: best val mAP {best_map:.4f} at epoch {best_epoch} "
          f"({len(history)} epochs run)")
    return EXIT_OK


_EVAL_CELLS = (("all", "all"), ("similar", "all"), ("different", "all"),
               ("all", "easy"), ("all", "medium"), ("all", "hard"))


def cmd_eval(args):
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    observations = formats.load_observations(args.observations)
    feats = training.FileFeatures.load(args.features)
    h = feats.for_ids([o.obs_id for o in observations]).astype(np.float64)
    if args.checkpoint:
        params, _ = training.read_checkpoint(args.checkpoint)
        if params.dims[0] != h.shape[1]:
            raise DataError(f"checkpoint expects dim {params.dims[0]}, "
                            f"features have dim {h.shape[1]}")
        emb = training.head_forward(h, params)
    else:
        emb = h
    items = _eval_items(observations, emb)

    cells = {}
    for illum, view in _EVAL_CELLS:
        keep = bool(cfg["eval.per_query"]) and illum == "all" and view == "all"
        report = evaluation.evaluate(items, items, _eval_config(cfg, illum, view),
                                     keep_per_query=keep)
        cells[f"{illum}|{view}"] = report.to_dict()
    with open(os.path.join(args.out, "report.json"), "w") as f:
        f.write(json.dumps({"cells": cells}, sort_keys=True, indent=1) + "\n")
    with open(os.path.join(args.out, "cmc.csv"), "w") as f:
        f.write("k,accuracy\n")
        for k, acc in enumerate(cells["all|all"]["cmc"], 1):
            f.write(f"{k},{acc!r}\n")
    inputs = [args.features, args.observations]
    if args.checkpoint:
        inputs.append(args.checkpoint)
    formats.write_manifest(os.path.join(args.out, "manifest.json"), "eval",
                           cfg.canonical_text(), inputs,
                           extra={"seed": cfg["seed"],
                                  "map_all": cells["all|all"]["map"]})
    print("eval: mAP per cell: " +
          ", ".join(f"{k}={v['map']:.4f}" for k, v in sorted(cells.items())))
    return EXIT_OK


def cmd_synth(args):
    cfg = _load_run_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    classes = list(cfg["synth.classes"])
    per_class = cfg["synth.instances_per_class"]
    if isinstance(per_class, list):
        if len(per_class) != len(classes):
            raise ConfigError("synth.instances_per_class list must match synth.classes")
        counts = {c: int(n) for c, n in zip(classes, per_class)}
    else:
        counts = {c: int(per_class) for c in classes}
    seed = cfg["seed"]

    world = synth.gen_world(synth.WorldSpec(counts, cfg["synth.area_half"],
                                            cfg["synth.spacing"], seed))
    cam = synth.DEFAULT_CAMERA
    formats.save_camera(os.path.join(out, "camera.json"), cam, synth.CAMERA_MOUNT)

    n_seq = cfg["synth.n_sequences"]
    for s in range(n_seq):
        seq_id = f"seq{s:02d}"
        weather = curation.WEATHER_LABELS[s % len(curation.WEATHER_LABELS)]
        if s % 2 == 0:
            path = synth.PathSpec(kind="circle",
                                  radius=cfg["synth.path_radius"] * (0.8 + 0.12 * (s % 3)),
                                  n_frames=cfg["synth.frames_per_sequence"],
                                  start_angle=0.9 * s, t0=1000.0 * s)
        else:
            # straight traversals cross the interior the circles never face
            ang = 0.8 * s
            reach = cfg["synth.path_radius"] * 1.4
            dx, dy = np.cos(ang) * reach, np.sin(ang) * reach
            path = synth.PathSpec(kind="line", start=(-dx, -dy), end=(dx, dy),
                                  n_frames=cfg["synth.frames_per_sequence"],
                                  t0=1000.0 * s)
        samples, anns, frames = synth.gen_sequence(
            world, cam, path, weather, seq_id, seed,
            surface_points=cfg["synth.surface_points"],
            clutter_points=cfg["synth.clutter_points"])
        seq_dir = os.path.join(out, "sequences", seq_id)
        os.makedirs(os.path.join(seq_dir, "clouds"), exist_ok=True)
        formats.save_trajectory(os.path.join(seq_dir, "trajectory.txt"), samples)
        formats.save_annotations(os.path.join(seq_dir, "annotations.jsonl"), anns)
        meta = []
        for fr in frames:
            cloud_rel = os.path.join("clouds", f"{fr['frame_id']:06d}.npy")
            formats.save_cloud(os.path.join(seq_dir, cloud_rel), fr["cloud"])
            meta.append({"frame_id": fr["frame_id"], "timestamp": fr["timestamp"],
                         "weather": fr["weather"], "cloud": cloud_rel})
        formats.save_frames_meta(os.path.join(seq_dir, "frames.jsonl"), meta)

    os.makedirs(os.path.join(out, "ground_truth"), exist_ok=True)
    formats.save_instances(os.path.join(out, "ground_truth", "instances.json"), world)

    # features must align with the ids the curation stage will assign, so run
    # the same pipeline on the files just written
    instances, observations, _ = _curate_pipeline(out, cfg)
    cond = synth.ConditionModel(cfg["synth.weather_scale"],
                                cfg["synth.viewpoint_scale"], cfg["synth.sigma"],
                                cfg["synth.feature_dim"])
    rows, obs_ids = synth.features_for_observations(observations, instances,
                                                    world, cond, seed)
    training.write_features(os.path.join(out, "features.bin"), rows, obs_ids)
    formats.write_manifest(os.path.join(out, "manifest.json"), "synth", cfg.canonical_text(), [],
                           extra={"seed": seed,
                                  "counts": _class_counts(instances, observations),
                                  "n_ground_truth": len(world)})
    print(f"synth: {len(world)} instances, {n_seq} sequences, "
          f"{len(obs_ids)} observation features")
    return EXIT_OK


def _add_common(p):
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--threads", type=int, help="worker threads (identical output)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="objreid",
                     description="static-object re-identification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset tree")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="annotations + trajectories -> instances + observations")
    p.add_argument("--data", required=True, help="dataset directory")
    _add_common(p)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("patch", help="full frames -> contextual square patches")
    p.add_argument("--images", required=True, help="image root: <seq>/<frame>.png")
    p.add_argument("--observations", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("train", help="train the projection head")
    p.add_argument("--features", required=True)
    p.add_argument("--observations", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="stratified retrieval evaluation")
    p.add_argument("--features", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--checkpoint", help="embed features through this head first")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"objreid: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrajectoryRangeError, EmptyMaskError, OSError) as exc:
        print(f"objreid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GeometryError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"objreid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
