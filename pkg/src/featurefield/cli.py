"""Command-line entry points: scene generation, training, rendering,
segmentation, evaluation, benchmarks, and the HTTP service."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, renderer, scene_io, segmentation, synthetic
from .encoding import EncodingConfig
from .field import FieldConfig, FieldModel, load_checkpoint
from .trainer import LossWeights, TrainConfig


def _parse_pose_arg(value: str) -> np.ndarray:
    path = Path(value)
    if path.exists():
        return scene_io.load_pose(path)
    values = [float(v) for v in value.replace(",", " ").split()]
    if len(values) != 16:
        raise ValueError(f"pose needs 16 values, got {len(values)}")
    pose = np.array(values).reshape(4, 4)
    scene_io.validate_pose(pose, "pose argument")
    return pose


def _add_make_synthetic(sub):
    p = sub.add_parser("make-synthetic", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--feature-noise", type=float, default=0.05)
    p.add_argument("--feature-scale", type=int, default=1)
    p.add_argument("--cloud-points", type=int, default=20000)
    p.add_argument("--correlated", action="store_true",
                   help="use correlated class embeddings (cosine 0.7)")
    p.add_argument("--all-surface", action="store_true",
                   help="keep unobserved surface points in the cloud")


def _cmd_make_synthetic(args) -> int:
    spec = synthetic.default_scene_spec(
        seed=args.seed,
        image_size=(args.width, args.height),
        feature_dim=args.feature_dim,
        feature_noise=args.feature_noise,
        feature_scale=args.feature_scale,
        cloud_points=args.cloud_points,
        cloud_visible_only=not args.all_surface,
        embedding_mode="correlated" if args.correlated else "orthonormal")
    from dataclasses import replace
    spec = replace(spec, orbit=replace(spec.orbit, count=args.frames))
    scene = synthetic.generate_scene(spec, args.out)
    print(f"wrote scene with {len(scene.frames)} frames, "
          f"D={scene.feature_dim} to {args.out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="fit a field to a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--samples-per-ray", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--frames", default=None,
                   help="comma-separated frame ids to train on (default: all)")
    p.add_argument("--lambda-d", type=float, default=0.1)
    p.add_argument("--lambda-f", type=float, default=0.5)
    p.add_argument("--hash-levels", type=int, default=16)
    p.add_argument("--table-size-log2", type=int, default=19)
    p.add_argument("--base-resolution", type=int, default=16)
    p.add_argument("--per-level-scale", type=float, default=1.3819)
    p.add_argument("--hidden-width", type=int, default=64)
    p.add_argument("--feature-lookup", choices=("nearest", "bilinear"), default="nearest")
    p.add_argument("--snapshot-interval", type=int, default=500)
    p.add_argument("--log-every", type=int, default=200)


def _cmd_train(args) -> int:
    scene = scene_io.load_scene(args.scene)
    frame_ids = None
    if args.frames:
        frame_ids = tuple(int(v) for v in args.frames.split(","))
    encoding = EncodingConfig(hash_levels=args.hash_levels,
                              table_size_log2=args.table_size_log2,
                              base_resolution=args.base_resolution,
                              per_level_scale=args.per_level_scale)
    w = args.hidden_width
    field_config = FieldConfig(feature_dim=scene.feature_dim or 8,
                               density_hidden=(w,), color_hidden=(w, w),
                               feature_hidden=(w, w))
    train_config = TrainConfig(iterations=args.iterations, batch_size=args.batch_size,
                               samples_per_ray=args.samples_per_ray,
                               learning_rate=args.learning_rate, seed=args.seed,
                               snapshot_interval=args.snapshot_interval,
                               precision=args.precision,
                               feature_lookup=args.feature_lookup,
                               frame_ids=frame_ids)
    started = time.time()
    last_printed = [0]

    def progress(records):
        if records and records[-1].iteration - last_printed[0] >= args.log_every:
            r = records[-1]
            last_printed[0] = r.iteration
            print(f"iter {r.iteration:6d}  rgb {r.loss_rgb:.5f}  d {r.loss_depth:.5f}  "
                  f"f {r.loss_feature:.5f}  total {r.loss_total:.5f}", flush=True)

    from .trainer import Trainer
    trainer = Trainer(scene.intrinsics, scene.bounds, scene.feature_dim,
                      encoding=encoding, field_config=field_config,
                      train_config=train_config,
                      loss_weights=LossWeights(args.lambda_d, args.lambda_f))
    for frame in scene.frames:
        if frame_ids is None or frame.frame_id in frame_ids:
            trainer.integrate_keyframe(frame)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1, user_api="blas"):
        for _ in range(train_config.iterations):
            trainer.step()
            progress(trainer.records)
    snapshot = trainer.publish_snapshot()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .field import save_checkpoint
    from .trainer import metrics_lines
    save_checkpoint(out / "checkpoint.ffld", snapshot)
    (out / "metrics.txt").write_text(metrics_lines(trainer.records))
    print(f"trained {train_config.iterations} iterations in "
          f"{time.time() - started:.1f}s -> {out / 'checkpoint.ffld'}")
    return 0


def _add_render(sub):
    p = sub.add_parser("render", help="render maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True, help="pose file or 16 csv values")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stem", default="render")
    p.add_argument("--which", default="color,depth,opacity")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--fov", type=float, default=70.0)


def _intrinsics_for(args) -> scene_io.CameraIntrinsics:
    fx = 0.5 * args.width / np.tan(np.radians(args.fov) / 2.0)
    return scene_io.CameraIntrinsics(fx, fx, args.width / 2.0, args.height / 2.0,
                                     args.width, args.height)


def _cmd_render(args) -> int:
    snap = load_checkpoint(args.checkpoint)
    model = FieldModel.from_snapshot(snap)
    pose = _parse_pose_arg(args.pose)
    which = tuple(w.strip() for w in args.which.split(",") if w.strip())
    maps = renderer.render_maps(model, pose, _intrinsics_for(args), which=which,
                                n_samples=args.samples)
    written = renderer.export_maps(args.out_dir, args.stem, maps)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def _add_segment(sub):
    p = sub.add_parser("segment", help="open-vocabulary segmentation render")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True,
                   help="embeddings file backing the dictionary text encoder")
    p.add_argument("--prompts", required=True, help="comma-separated labels")
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True, help="output indexed PNG path")
    p.add_argument("--scores-out", default=None, help="optional FTEN of class scores")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--fov", type=float, default=70.0)
    p.add_argument("--opacity-threshold", type=float, default=0.5)
    p.add_argument("--cosine", action="store_true")


def _cmd_segment(args) -> int:
    snap = load_checkpoint(args.checkpoint)
    model = FieldModel.from_snapshot(snap)
    encoder = segmentation.DictionaryEncoder.from_file(args.embeddings)
    prompts = [p.strip() for p in args.prompts.split(",") if p.strip()]
    emb = segmentation.encode_labels(prompts, encoder)
    pose = _parse_pose_arg(args.pose)
    seg = segmentation.segment_view(
        model, pose, _intrinsics_for(args), emb, n_samples=args.samples,
        opacity_threshold=args.opacity_threshold, cosine=args.cosine,
        keep_class_scores=args.scores_out is not None)
    labels = list(emb.labels) + ["<background>"]
    scene_io.write_index_png(args.out, seg.classes, labels)
    print(f"segmentation: {args.out} (+ {args.out}.labels.txt)")
    if args.scores_out:
        scene_io.write_feature_map(args.scores_out,
                                   np.moveaxis(seg.class_scores, 0, -1))
        print(f"scores: {args.scores_out}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="mIoU/mAcc between two segmentation map dirs")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--classes", type=int, default=None,
                   help="class count (default: from labels sidecar or max index + 1)")
    p.add_argument("--background-index", type=int, default=None,
                   help="prediction index treated as 'hit nothing' -> ignored")
    p.add_argument("--json-out", default=None)
    p.add_argument("--per-scene", action="store_true",
                   help="also print per-file mIoU (macro aggregation detail)")


def _cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        print("no .png maps in --pred-dir", file=sys.stderr)
        return 1
    labels = None
    sidecars = sorted(ref_dir.glob("*.png.labels.txt"))
    if sidecars:
        labels = [l for l in sidecars[0].read_text().splitlines() if l]

    pairs = []
    for name in names:
        ref_path = ref_dir / name
        if not ref_path.exists():
            print(f"missing reference map {ref_path}", file=sys.stderr)
            return 1
        pairs.append((scene_io.load_index_png(pred_dir / name),
                      scene_io.load_index_png(ref_path)))
    if args.classes is not None:
        k = args.classes
    else:
        k = max(int(max(p.max(), r.max())) for p, r in pairs) + 1
        if args.background_index is not None:
            k = max(k, args.background_index)
        if labels:
            k = max(k, len(labels))
    labels = labels[:k] if labels else [f"class_{i}" for i in range(k)]

    cm = evaluation.ConfusionMatrix(k)
    per_scene = []
    for name, (pred, ref) in zip(names, pairs):
        ref = ref.astype(np.int64)
        if args.background_index is not None:
            ref = evaluation.mask_background(ref, pred, args.background_index)
        scene_cm = evaluation.ConfusionMatrix(k).accumulate(pred, ref)
        cm.merge(scene_cm)
        if args.per_scene:
            per_scene.append((name, evaluation.miou_macc(scene_cm).miou))
    metrics = evaluation.miou_macc(cm)
    print(evaluation.format_metrics_table(labels, metrics))
    if args.per_scene:
        for name, miou in per_scene:
            print(f"{name}: mIoU {miou:.4f}")
        macro = float(np.mean([m for _, m in per_scene]))
        print(f"macro-over-scenes mIoU {macro:.4f}")
    if args.json_out:
        evaluation.write_metrics_json(args.json_out, labels, metrics)
    return 0


def _add_benchmark(sub):
    p = sub.add_parser("benchmark", help="query throughput/latency report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--points", type=int, default=500000)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json-out", default=None)


def _cmd_benchmark(args) -> int:
    snap = load_checkpoint(args.checkpoint)
    model = FieldModel.from_snapshot(snap)
    rng = np.random.default_rng(0)
    bounds = model.bounds
    report = {"samples_per_ray": args.samples}

    pts = bounds.minimum + rng.random((args.points, 3)) * bounds.extent
    emb = None
    if args.embeddings:
        emb = scene_io.load_embeddings(args.embeddings)

    def best_of(task):
        best = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            task()
            dt = time.perf_counter() - t0
            best = dt if best is None else min(best, dt)
        return best

    if emb is not None:
        semantic = best_of(lambda: segmentation.segment_points(model, pts, emb))
    else:
        semantic = best_of(lambda: model.features_at(pts))
    density = best_of(lambda: model.density_at(pts))
    report["point_queries"] = {
        "count": args.points,
        "seconds": semantic,
        "lookups_per_second": args.points / semantic,
        "density_seconds": density,
        "density_lookups_per_second": args.points / density,
        "latency_ms_per_100k": semantic / args.points * 1e5 * 1e3,
    }

    # 2D ray queries: render + (optionally) segment at the configured sample count.
    side = int(np.sqrt(args.rays))
    intr = _intrinsics_for(argparse.Namespace(width=side, height=side, fov=70.0))
    center = bounds.minimum + 0.5 * bounds.extent
    eye = center + np.array([0.35, 0.0, 0.2]) * bounds.extent
    pose = synthetic.look_at_pose(eye, center)
    best = None
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        if emb is not None:
            segmentation.segment_view(model, pose, intr, emb, n_samples=args.samples)
        else:
            renderer.render_maps(model, pose, intr, which=("feature",),
                                 n_samples=args.samples)
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
    n_px = side * side
    report["ray_queries"] = {
        "pixels": n_px,
        "seconds": best,
        "pixels_per_second": n_px / best,
        "latency_ms_per_frame": best * 1e3,
    }

    pq, rq = report["point_queries"], report["ray_queries"]
    print(f"3D point queries : {pq['count']:,} lookups in {pq['seconds']:.3f}s "
          f"-> {pq['lookups_per_second']:,.0f} lookups/s "
          f"(density-only {pq['density_lookups_per_second']:,.0f}/s)")
    print(f"2D ray queries   : {rq['pixels']:,} pixels at {args.samples} samples/ray "
          f"in {rq['seconds']:.3f}s -> {rq['pixels_per_second']:,.0f} px/s")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2) + "\n")
    return 0


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8711)
    p.add_argument("--ui", default=None,
                   help="directory with the built browser UI to serve at /")


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import SessionManager, create_app, mount_ui, open_checkpoint_session
    manager = SessionManager()
    app = create_app(manager)
    if args.checkpoint:
        session = open_checkpoint_session(manager, args.checkpoint, args.embeddings)
        print(f"opened session {session.session_id} for {args.checkpoint}")
    if args.ui:
        mount_ui(app, args.ui)
        print(f"serving UI from {args.ui}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featurefield",
        description="open-vocabulary neural feature fields over posed RGB-D scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_make_synthetic(sub)
    _add_train(sub)
    _add_render(sub)
    _add_segment(sub)
    _add_eval(sub)
    _add_benchmark(sub)
    _add_serve(sub)
    return parser


_COMMANDS = {
    "make-synthetic": _cmd_make_synthetic,
    "train": _cmd_train,
    "render": _cmd_render,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "benchmark": _cmd_benchmark,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (scene_io.SceneFormatError, synthetic.SceneSpecError,
            segmentation.SegmentationError, evaluation.EvaluationError,
            ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
