"""Command-line entry point wiring the pipeline stages end to end.

Each subcommand runs one stage against a JSON config. Completed stages are
no-ops on re-run unless --force; artifacts are written atomically, each with
a sidecar that makes it reproducible from config and seed alone.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import evaluation as ev
from . import prototypes as pt
from . import sampler as sp
from .config import (MODE_BASELINE, MODE_PROTOTYPE, ConfigError, RunConfig,
                     load_run_config)
from .data import (DataError, build_manifest, denormalize_to_uint8,
                   export_annotation_manifest, load_and_normalize,
                   load_manifest, make_encoder, save_manifest,
                   extract_embeddings)
from .diffusion import make_linear_schedule
from .fileio import atomic_write_bytes, atomic_write_json, atomic_write_text, \
    read_json, sha256_file

SAMPLES_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


def _set_threads(config: RunConfig) -> None:
    import torch

    torch.set_num_threads(max(1, config.denoiser.threads))


def _manifest_path(config: RunConfig) -> Path:
    return config.run_dir / "manifest.json"


def _embeddings_path(config: RunConfig) -> Path:
    return config.run_dir / "embeddings.npz"


def _codebook_base(config: RunConfig) -> Path:
    return config.run_dir / "codebook"


def _checkpoint_dir(config: RunConfig) -> Path:
    return config.mode_dir / "checkpoints"


def _metrics_path(config: RunConfig) -> Path:
    return config.mode_dir / "metrics.jsonl"


def _samples_dir(config: RunConfig) -> Path:
    return config.mode_dir / "samples"


def _samples_manifest_path(config: RunConfig) -> Path:
    return config.mode_dir / "samples_manifest.json"


def _write_resolved_config(config: RunConfig, where: Path) -> None:
    atomic_write_json(where / "config.resolved.json", config.resolved())


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; {hint}")
    return path


def _load_split_images(config: RunConfig, split: str):
    manifest = load_manifest(_manifest_path(config))
    records = manifest.split_records(split)
    images = np.stack([load_and_normalize(r, config.data.image_size)
                       for r in records])
    labels = np.array([r.class_id for r in records], dtype=np.int64)
    paths = [r.path for r in records]
    return manifest, images, labels, paths


def cmd_prepare(config: RunConfig, force: bool) -> int:
    manifest_path = _manifest_path(config)
    emb_path = _embeddings_path(config)
    if manifest_path.exists() and emb_path.exists() and not force:
        print(f"prepare: up to date ({manifest_path})")
        return EXIT_OK
    config.run_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(config, config.run_dir)

    manifest = build_manifest(config.data.root, config.data.per_class_n,
                              config.data.holdout_per_class, config.run.seed,
                              source_tag=config.data.source_tag)
    save_manifest(manifest, manifest_path)

    encoder = make_encoder(config.data.encoder, config.data.embed_dim)
    embeddings, labels = extract_embeddings(
        manifest, encoder, config.run_dir / "embeddings", split="train")
    buf = io.BytesIO()
    np.savez(buf, embeddings=embeddings, labels=labels)
    atomic_write_bytes(emb_path, buf.getvalue())
    print(f"prepare: {len(manifest.class_names)} classes, "
          f"{len(manifest.split_records('train'))} train / "
          f"{len(manifest.split_records('holdout'))} holdout records, "
          f"embeddings {embeddings.shape}")
    return EXIT_OK


def cmd_train_prototypes(config: RunConfig, force: bool) -> int:
    if config.run.mode == MODE_BASELINE:
        raise ConfigError("mode=baseline_cfg does not use prototypes; "
                          "run with --mode prototype_guided")
    base = _codebook_base(config)
    if Path(str(base) + ".npy").exists() and not force:
        print(f"train-prototypes: up to date ({base}.npy)")
        return EXIT_OK
    emb_path = _require(_embeddings_path(config),
                        "run `protoguide prepare` first")
    with np.load(emb_path) as npz:
        embeddings, labels = npz["embeddings"], npz["labels"]
    manifest = load_manifest(_manifest_path(config))
    train_cfg = pt.PrototypeTrainConfig(
        gamma=config.prototypes.gamma,
        lam=config.prototypes.lam,
        prototypes_per_class=config.prototypes.prototypes_per_class,
        learning_rate=config.prototypes.learning_rate,
        epochs=config.prototypes.epochs,
        batch_size=config.prototypes.batch_size,
        seed=config.run.seed)
    class_names = {i: n for i, n in enumerate(manifest.class_names)}
    codebook, history = pt.train_prototypes(embeddings, labels, train_cfg,
                                            class_names=class_names)
    pt.save_codebook(codebook, base, train_config=train_cfg,
                     seed=config.run.seed)
    atomic_write_json(config.run_dir / "codebook_train_log.json",
                      {"loss": history.tolist()})
    print(f"train-prototypes: C={codebook.num_classes} K={codebook.prototypes_per_class} "
          f"D={codebook.dim}, final loss {history[-1]:.6f}")
    return EXIT_OK


def _build_table(config: RunConfig, num_classes: int):
    cond_dim = config.encoder_dim()
    if config.run.mode == MODE_PROTOTYPE:
        base = _codebook_base(config)
        _require(Path(str(base) + ".npy"),
                 "run `protoguide train-prototypes` first")
        codebook = pt.load_codebook(base)
        if codebook.dim != cond_dim:
            raise ConfigError(f"codebook D={codebook.dim} does not match "
                              f"configured condition dim {cond_dim}")
        if codebook.num_classes != num_classes:
            raise ConfigError(f"codebook has {codebook.num_classes} classes, "
                              f"manifest has {num_classes}")
        return dn.init_from_prototypes(codebook)
    return dn.init_random(num_classes, cond_dim, config.run.seed)


def _latest_checkpoint(ckpt_dir: Path):
    candidates = sorted(ckpt_dir.glob("step_*.pt"))
    return candidates[-1] if candidates else None


def cmd_train_diffusion(config: RunConfig, force: bool) -> int:
    _set_threads(config)
    manifest, images, labels, _ = _load_split_images(config, "train")
    table = _build_table(config, len(manifest.class_names))
    den_cfg = config.denoiser_config()
    schedule = make_linear_schedule(config.denoiser.timesteps,
                                    config.denoiser.beta_start,
                                    config.denoiser.beta_end)
    steps_per_epoch = math.ceil(images.shape[0] / den_cfg.batch_size)
    total_steps = den_cfg.epochs * steps_per_epoch

    ckpt_dir = _checkpoint_dir(config)
    metrics_path = _metrics_path(config)
    if force and ckpt_dir.exists():
        for p in ckpt_dir.iterdir():
            p.unlink()
        metrics_path.unlink(missing_ok=True)

    config.mode_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(config, config.mode_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    import torch

    torch.manual_seed(config.run.seed)  # weight init independent of process history
    model = dn.NoisePredictor(den_cfg, table)
    trainer = dn.DiffusionTrainer(model, schedule, images, labels,
                                  seed=config.run.seed)

    latest = _latest_checkpoint(ckpt_dir)
    if latest is not None:
        trainer.restore(latest)
        if trainer.step >= total_steps:
            print(f"train-diffusion: up to date at step {trainer.step} ({latest})")
            return EXIT_OK
        # Keep the metrics log contiguous with the restored step.
        if metrics_path.exists():
            kept = [line for line in metrics_path.read_text().splitlines()
                    if json.loads(line)["step"] <= trainer.step]
            atomic_write_text(metrics_path, "".join(l + "\n" for l in kept))
        print(f"train-diffusion: resuming from step {trainer.step}")

    sidecar_extra = {"run_id": config.run.run_id, "mode": config.run.mode,
                     "class_names": manifest.class_names}
    with open(metrics_path, "a") as log:
        while trainer.step < total_steps:
            record = trainer.train_step()
            log.write(json.dumps(record) + "\n")
            if (trainer.step % config.denoiser.checkpoint_every == 0
                    or trainer.step == total_steps):
                log.flush()
                trainer.save_checkpoint(ckpt_dir / f"step_{trainer.step:08d}.pt",
                                        sidecar_extra)
    final = _latest_checkpoint(ckpt_dir)
    print(f"train-diffusion[{config.run.mode}]: {total_steps} steps done, "
          f"last loss {record['loss']:.4f}, checkpoint {final}")
    return EXIT_OK


def _class_seed(seed: int, class_id: int) -> int:
    return int(np.random.SeedSequence((seed, class_id)).generate_state(1)[0])


def cmd_sample(config: RunConfig, force: bool) -> int:
    _set_threads(config)
    out_manifest = _samples_manifest_path(config)
    if out_manifest.exists() and not force:
        print(f"sample: up to date ({out_manifest})")
        return EXIT_OK
    ckpt = _latest_checkpoint(_checkpoint_dir(config))
    if ckpt is None:
        raise DataError(f"no checkpoint under {_checkpoint_dir(config)}; "
                        "run `protoguide train-diffusion` first")
    model, sidecar = dn.load_checkpoint(ckpt)
    schedule = make_linear_schedule(sidecar["schedule"]["T"],
                                    sidecar["schedule"]["beta_start"],
                                    sidecar["schedule"]["beta_end"])
    class_names = sidecar.get("class_names") or \
        load_manifest(_manifest_path(config)).class_names

    samples_dir = _samples_dir(config)
    entries = []
    for class_id, class_name in enumerate(class_names):
        spec = sp.SamplerSpec(
            method=config.sampler.method,
            num_steps=config.sampler.num_steps,
            eta=config.sampler.eta,
            guidance_scale=config.sampler.guidance_scale,
            seed=_class_seed(config.run.seed, class_id),
            num_images=config.sampler.per_class,
            batch_size=config.sampler.batch_size,
            class_id=class_id,
            clip_denoised=config.sampler.clip_denoised)
        images = sp.sample(model, spec, schedule)
        class_dir = samples_dir / class_name
        for i, img in enumerate(images):
            from PIL import Image

            path = class_dir / f"{i:04d}.png"
            rgb = denormalize_to_uint8(img).transpose(1, 2, 0)
            buf = io.BytesIO()
            Image.fromarray(rgb).save(buf, format="PNG")
            atomic_write_bytes(path, buf.getvalue())
            entries.append({
                "path": str(path), "class_id": class_id,
                "class_name": class_name, "index": i,
                "seed_path": [config.run.seed, spec.seed,
                              i // spec.batch_size, i % spec.batch_size],
            })
    atomic_write_json(out_manifest, {
        "schema_version": SAMPLES_SCHEMA_VERSION,
        "run_id": config.run.run_id,
        "mode": config.run.mode,
        "checkpoint": str(ckpt),
        "checkpoint_hash": sha256_file(ckpt),
        "spec": {"method": config.sampler.method,
                 "num_steps": config.sampler.num_steps,
                 "eta": config.sampler.eta,
                 "guidance_scale": config.sampler.guidance_scale,
                 "per_class": config.sampler.per_class,
                 "batch_size": config.sampler.batch_size,
                 "clip_denoised": config.sampler.clip_denoised,
                 "seed": config.run.seed},
        "images": entries,
    })
    print(f"sample[{config.run.mode}]: wrote {len(entries)} images "
          f"({config.sampler.per_class} x {len(class_names)} classes) under {samples_dir}")
    return EXIT_OK


def cmd_export_annotations(config: RunConfig, force: bool) -> int:
    tasks_path = config.mode_dir / "annotations" / "tasks.json"
    if tasks_path.exists() and not force:
        print(f"export-annotations: up to date ({tasks_path})")
        return EXIT_OK
    manifest_doc = read_json(_require(
        _samples_manifest_path(config), "run `protoguide sample` first"))
    count = export_annotation_manifest(manifest_doc,
                                       list(config.annotations.criteria),
                                       tasks_path)
    print(f"export-annotations: {count} tasks -> {tasks_path}")
    return EXIT_OK


def _load_synthetic_train_set(config: RunConfig, class_names: list):
    doc = read_json(_require(_samples_manifest_path(config),
                             "run `protoguide sample` first"))
    sample_names = sorted({e["class_name"] for e in doc["images"]})
    if sample_names != sorted(class_names):
        raise DataError("synthetic run classes do not match the holdout class map")
    images = np.stack([load_and_normalize(e["path"], config.data.image_size)
                       for e in doc["images"]])
    labels = np.array([e["class_id"] for e in doc["images"]], dtype=np.int64)
    paths = [e["path"] for e in doc["images"]]
    return images, labels, paths


def cmd_eval(config: RunConfig, train_source: str, force: bool) -> int:
    _set_threads(config)
    out_dir = (config.mode_dir / "eval" if train_source == "synthetic"
               else config.run_dir / "real_eval")
    report_path = out_dir / "report.json"
    if report_path.exists() and not force:
        print(f"eval: up to date ({report_path})")
        return EXIT_OK
    manifest, holdout_images, holdout_labels, holdout_paths = \
        _load_split_images(config, "holdout")
    if holdout_images.shape[0] == 0:
        raise DataError("holdout split is empty")
    if train_source == "synthetic":
        train_images, train_labels, train_paths = \
            _load_synthetic_train_set(config, manifest.class_names)
    else:
        _, train_images, train_labels, train_paths = \
            _load_split_images(config, "train")
    overlap = set(train_paths) & set(holdout_paths)
    if overlap:
        raise DataError(f"training images overlap the holdout set: "
                        f"{sorted(overlap)[:3]} ...")

    eval_cfg = ev.EvalConfig(preset=config.eval.preset,
                             epochs=config.eval.epochs,
                             learning_rate=config.eval.learning_rate,
                             batch_size=config.eval.batch_size,
                             image_size=config.data.image_size,
                             seed=config.run.seed)
    classifier = ev.train_classifier(train_images, train_labels,
                                     manifest.class_names, eval_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier.save(out_dir / "classifier.pt")
    report = ev.evaluate(classifier, holdout_images, holdout_labels,
                         manifest.class_names)
    ev.save_report(report, report_path)
    title = f"train_source={train_source} mode={config.run.mode}"
    atomic_write_text(out_dir / "report.txt",
                      ev.render_report_text(report, title))
    print(ev.render_report_text(report, title))
    return EXIT_OK


def cmd_compare(report_a: str, report_b: str, out: str | None) -> int:
    a = ev.load_report(report_a)
    b = ev.load_report(report_b)
    comparison = ev.compare_runs(a, b)
    text = ev.render_comparison_text(comparison, label_a=report_a,
                                     label_b=report_b)
    if out:
        atomic_write_json(Path(out) / "comparison.json", comparison)
        atomic_write_text(Path(out) / "comparison.txt", text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoguide",
        description="Prototype-guided conditional diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="run config JSON")
            p.add_argument("--seed", type=int, default=None,
                           help="override run.seed")
            p.add_argument("--mode", choices=[MODE_BASELINE, MODE_PROTOTYPE],
                           default=None, help="override run.mode")
            p.add_argument("--force", action="store_true",
                           help="redo the stage even if its outputs exist")
        return p

    add("prepare", "build the dataset manifest and embedding cache")
    add("train-prototypes", "learn the per-class prototype codebook")
    add("train-diffusion", "train the conditional denoiser (resumable)")
    add("sample", "generate images for every class from the latest checkpoint")
    add("export-annotations", "emit a labeling-task file for expert review")
    p_eval = add("eval", "train a downstream classifier and score the holdout")
    p_eval.add_argument("--train-source", choices=["synthetic", "real"],
                        default="synthetic")
    p_cmp = sub.add_parser("compare", help="diff two evaluation reports")
    p_cmp.add_argument("--report-a", required=True)
    p_cmp.add_argument("--report-b", required=True)
    p_cmp.add_argument("--out", default=None, help="directory for the comparison files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    try:
        if args.command == "compare":
            return cmd_compare(args.report_a, args.report_b, args.out)
        config = load_run_config(args.config, seed=args.seed, mode=args.mode)
        if args.command == "prepare":
            return cmd_prepare(config, args.force)
        if args.command == "train-prototypes":
            return cmd_train_prototypes(config, args.force)
        if args.command == "train-diffusion":
            return cmd_train_diffusion(config, args.force)
        if args.command == "sample":
            return cmd_sample(config, args.force)
        if args.command == "export-annotations":
            return cmd_export_annotations(config, args.force)
        if args.command == "eval":
            return cmd_eval(config, args.train_source, args.force)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
