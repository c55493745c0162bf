"""Command line front end: corpus synthesis, training, blur preview,
attacks, session assembly, model evaluation, serving, and log analysis.

Every subcommand is a thin wrapper over the library; defaults mirror the
experiment configuration (61 cm viewing distance, 15.24 cm square image).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import load_responses, write_report
from .attack import (
    AttackConfig, default_false_retention, iterative_targeted_attack,
    make_false_stimulus,
)
from .coarse import CoarsePartition, Ensemble
from .nn.data import (
    FINE_NAMES, GROUP_PAIRS, load_dataset, synth_dataset, write_dataset,
    coarse_of_fine,
)
from .nn.model import ArchSpec, load_checkpoint, save_checkpoint
from .nn.train import TrainConfig, train_model
from .retina import RetinaParams, ViewingGeometry, blur_operator, center_crop
from .service import make_server
from .stimuli import (
    DELTA_SCALE, assemble_session, build_coarse_groups, generate_stimulus_pool,
    load_exclusions, load_pool, read_stimulus_png, rescale_to_margin,
    save_delta, write_stimulus_png,
)
from .transfer import NamedModel, evaluate_models

DEFAULT_DISTANCE_M = 0.61
DEFAULT_IMAGE_SIZE_M = 0.1524


def default_geometry(image_px: int) -> ViewingGeometry:
    return ViewingGeometry(DEFAULT_DISTANCE_M, DEFAULT_IMAGE_SIZE_M, image_px)


def _load_geometry(path, image_px: int) -> ViewingGeometry:
    if path is None:
        return default_geometry(image_px)
    geom = ViewingGeometry.from_json_dict(json.loads(Path(path).read_text()))
    if geom.image_px != image_px:
        raise SystemExit(
            f"geometry expects {geom.image_px}px but the images are {image_px}px")
    return geom


def _default_partition() -> CoarsePartition:
    return build_coarse_groups(
        FINE_NAMES, {n: coarse_of_fine(n) for n in FINE_NAMES}, GROUP_PAIRS)


def _load_partition(path) -> CoarsePartition:
    if path is None:
        return _default_partition()
    return CoarsePartition.from_json_dict(json.loads(Path(path).read_text()))


def _load_ensemble_dir(models_dir) -> list:
    paths = sorted(Path(models_dir).glob("*.ckpt"))
    if not paths:
        raise SystemExit(f"no .ckpt files in {models_dir}")
    return [load_checkpoint(p) for p in paths]


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    data = synth_dataset(args.n_per_class, size=args.size, seed=args.seed)
    manifest = write_dataset(data, args.out)
    print(f"wrote {len(data.ids)} images, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    arch = ArchSpec.from_json_dict(json.loads(Path(args.arch).read_text()))
    data = load_dataset(args.data)
    full_px = data.images.shape[1]
    geom = _load_geometry(args.geom, full_px)
    op = blur_operator(geom, RetinaParams())
    if arch.input_hw != (op.out_px, op.out_px):
        raise SystemExit(
            f"arch input {arch.input_hw} != post-crop dims ({op.out_px}, {op.out_px})")
    if arch.retina:
        x = np.stack([op.apply(img) for img in data.images])
    else:
        x = np.stack([center_crop(img) for img in data.images])
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, seed=args.seed,
        rescale_augment=args.rescale_augment,
        adversarial_augment=args.adv_augment)
    model = train_model(arch, x, data.labels, cfg)
    save_checkpoint(model, args.out)
    losses = model.meta.get("epoch_losses", [])
    tail = f", loss {losses[0]:.4f} -> {losses[-1]:.4f}" if losses else ""
    print(f"saved checkpoint {args.out}{tail}")
    return 0


def cmd_retina_demo(args) -> int:
    image = read_stimulus_png(getattr(args, "in"))
    geom = _load_geometry(args.geom, image.shape[0])
    op = blur_operator(geom, RetinaParams())
    write_stimulus_png(args.out, op.apply_precrop(image))
    print(f"wrote blurred image {args.out}")
    return 0


def cmd_attack(args) -> int:
    data = load_dataset(args.data)
    partition = _load_partition(args.partition)
    models = _load_ensemble_dir(args.ensemble)
    geom = _load_geometry(args.geom, data.images.shape[1])
    ensemble = Ensemble(models, geom)
    if args.group not in partition.groups:
        raise SystemExit(f"unknown group {args.group!r}")
    pair = partition.groups[args.group]
    eps = args.eps if args.eps is not None else (32.0 if args.condition == "adv" else 40.0)
    retention_m = None
    if args.condition == "false":
        retention_m = default_false_retention(ensemble.k)
    cfg = AttackConfig(epsilon=eps, step_size=args.step, retention_m=retention_m,
                       quantize_scale=DELTA_SCALE, eval_8bit=True)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    false_counts = {pair[0]: 0, pair[1]: 0}
    for i in range(len(data.ids)):
        if args.limit is not None and written >= args.limit:
            break
        fine = int(data.labels[i])
        coarse = partition.coarse_of_fine(fine)
        source = rescale_to_margin(data.images[i])
        if args.condition == "adv":
            if coarse not in pair:
                continue
            target = partition.other_in_group(args.group, coarse)
            rec = iterative_targeted_attack(
                source, target, args.group, ensemble, partition, cfg,
                source_id=data.ids[i])
        else:
            if coarse is not None:
                continue
            target = pair[0] if false_counts[pair[0]] <= false_counts[pair[1]] else pair[1]
            rec = make_false_stimulus(
                source, fine, args.group, target, ensemble, partition, cfg,
                source_id=data.ids[i])
        if not rec.retained and not args.keep_unretained:
            continue
        if args.condition == "false":
            false_counts[target] += 1
        stem = out / rec.source_id
        write_stimulus_png(f"{stem}.png", np.clip(source + rec.delta, 0.0, 255.0))
        save_delta(f"{stem}.npy", rec.delta)
        sidecar = {
            "source_id": rec.source_id, "group": rec.group, "target": rec.target,
            "condition": rec.condition, "epsilon": rec.epsilon,
            "success_bits": list(rec.success_bits), "retained": rec.retained,
            "iterations": rec.iterations, "loss_first": rec.loss_first,
            "loss_last": rec.loss_last, "delta_path": f"{rec.source_id}.npy",
        }
        Path(f"{stem}.json").write_text(json.dumps(sidecar, indent=1))
        written += 1
    print(f"wrote {written} {args.condition} stimuli to {out}")
    return 0


def cmd_pool(args) -> int:
    data = load_dataset(args.data)
    partition = _load_partition(args.partition)
    models = _load_ensemble_dir(args.ensemble)
    geom = _load_geometry(args.geom, data.images.shape[1])
    ensemble = Ensemble(models, geom)
    exclusions = load_exclusions(args.exclusions) if args.exclusions else frozenset()
    summary = generate_stimulus_pool(
        data, partition, ensemble, args.out,
        groups=args.groups, max_sources_per_group=args.max_sources,
        max_false_per_group=args.max_false, seed=args.seed,
        exclusions=exclusions)
    for group, per_condition in sorted(summary.counts.items()):
        for condition, n in sorted(per_condition.items()):
            print(f"{group}/{condition}: {n}")
    return 0


def cmd_assemble(args) -> int:
    records, _ = load_pool(args.pool)
    exclusions = load_exclusions(args.exclusions) if args.exclusions else frozenset()
    manifest = assemble_session(
        records, args.group, args.n, args.seed, session_id=args.session_id,
        exposure_ms=args.exposure_ms, exclusions=exclusions)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{manifest.session_id}.json"
    manifest.save(path)
    print(f"session {manifest.session_id}: {len(manifest.trials)} trials, {path}")
    return 0


def cmd_eval(args) -> int:
    models = []
    for path in sorted(Path(args.models).glob("*.ckpt")):
        parts = path.name.split(".")
        if len(parts) != 3 or parts[1] not in ("train", "test"):
            raise SystemExit(
                f"model file {path.name!r} must be named <id>.<train|test>.ckpt")
        models.append(NamedModel(parts[0], parts[1], load_checkpoint(path)))
    if not models:
        raise SystemExit(f"no .ckpt files in {args.models}")
    records, partition = load_pool(args.stimuli)
    first_png = read_stimulus_png(
        Path(args.stimuli) / "stimuli" / f"{records[0].id}.png")
    geom = _load_geometry(args.geom, first_png.shape[0])
    report = evaluate_models(models, geom, records, args.stimuli, partition)
    report.save_json(args.out)
    csv_path = Path(args.out).with_suffix(".csv")
    report.save_csv(csv_path)
    print(f"wrote {args.out} and {csv_path} ({len(report.cells)} cells)")
    return 0


def cmd_serve(args) -> int:
    data_dir = os.environ.get("ADVSTIM_DATA_DIR")
    stimuli = args.stimuli or (data_dir and os.path.join(data_dir, "pool"))
    sessions = args.sessions or (data_dir and os.path.join(data_dir, "sessions"))
    log = args.log or (data_dir and os.path.join(data_dir, "responses.jsonl"))
    missing = [name for name, val in
               (("--stimuli", stimuli), ("--sessions", sessions), ("--log", log))
               if not val]
    if missing:
        raise SystemExit(
            f"{', '.join(missing)} required (or set ADVSTIM_DATA_DIR)")
    server = make_server(stimuli, sessions, log, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_analyze(args) -> int:
    responses = load_responses(args.log)
    report = write_report(responses, args.out)
    print(f"analyzed {report['n_records']} records, report in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advstim",
        description="Adversarial stimulus pipeline for time-limited perception studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shape corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model from an arch spec")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--geom")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rescale-augment", action="store_true")
    p.add_argument("--adv-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retina-demo", help="write the blurred version of one image")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--geom")
    p.set_defaults(func=cmd_retina_demo)

    p = sub.add_parser("attack", help="run targeted attacks for one group")
    p.add_argument("--ensemble", required=True, help="directory of .ckpt files")
    p.add_argument("--partition", help="partition JSON (default: built-in classes)")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--group", required=True)
    p.add_argument("--condition", choices=("adv", "false"), default="adv")
    p.add_argument("--eps", type=float, default=None,
                   help="default 32 for adv, 40 for false")
    p.add_argument("--step", type=float, default=2.0)
    p.add_argument("--geom")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--keep-unretained", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("pool", help="generate the full stimulus pool")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--partition")
    p.add_argument("--data", required=True)
    p.add_argument("--geom")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", nargs="*", default=None)
    p.add_argument("--max-sources", type=int, default=None)
    p.add_argument("--max-false", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclusions")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("assemble", help="assemble one balanced session")
    p.add_argument("--pool", required=True)
    p.add_argument("--group", required=True)
    p.add_argument("--n", type=int, required=True, help="trials per condition")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="sessions")
    p.add_argument("--session-id", default=None)
    p.add_argument("--exposure-ms", type=float, default=63.0)
    p.add_argument("--exclusions")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", help="evaluate models on a stimulus pool")
    p.add_argument("--models", required=True,
                   help="directory of <id>.<train|test>.ckpt files")
    p.add_argument("--stimuli", required=True, help="pool directory")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--geom")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve sessions, stimuli, and the response log")
    p.add_argument("--stimuli", help="pool directory")
    p.add_argument("--sessions", help="directory of session manifests")
    p.add_argument("--log", help="JSONL response log path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("analyze", help="analyze a JSONL response log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
