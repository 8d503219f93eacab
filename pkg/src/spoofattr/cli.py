"""Command-line entry point: ``spoofattr <subcommand> ...``.

Every subcommand writes under one output directory, prints a one-line JSON
summary on success and a one-line JSON error on failure (exit 1). Usage
errors exit 2 before anything is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

CONFIG_ENV = "SPOOFATTR_CONFIG_DIR"
PACKAGE_CONFIGS = Path(__file__).with_name("configs")


class CliError(RuntimeError):
    pass


def config_dir() -> Path:
    return Path(os.environ.get(CONFIG_ENV) or PACKAGE_CONFIGS)


def resolve_config(name: str | None, default: str) -> Path:
    """A path as given, else ``<config dir>/<name>[.yaml]``, else the shipped file."""
    name = name or default
    path = Path(name)
    if path.exists():
        return path
    for base in (config_dir(), PACKAGE_CONFIGS):
        for candidate in (base / name, base / f"{name}.yaml"):
            if candidate.exists():
                return candidate
    raise CliError(f"config {name!r} not found (looked in {config_dir()} and {PACKAGE_CONFIGS})")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    parts = text.split(":")
    try:
        if len(parts) in (2, 3):
            lo, hi = int(parts[0]), int(parts[1])
            step = int(parts[2]) if len(parts) == 3 else 1
            return tuple(range(lo, hi + 1, step))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list like 2,4,8 or a range like 2:20:2, got {text!r}") from None


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_manifest(path, audio_root=None):
    from .corpus import read_manifest
    manifest = read_manifest(path)
    root = Path(audio_root) if audio_root else Path(path).resolve().parent
    return manifest, root


def _absolute_audio(manifest, root):
    """Anchor relative audio paths so the manifest can be written elsewhere."""
    from dataclasses import replace
    rows = tuple((replace(u, audio_path=str((root / u.audio_path).resolve())), lab) for u, lab in manifest)
    return replace(manifest, utterances=rows)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    from .synth import load_spec, synth_corpus
    spec = load_spec(resolve_config(args.spec, "synth_acceptance"))
    out = Path(args.out)
    manifest = synth_corpus(spec, out)
    return {"out": str(out), "utterances": len(manifest), "manifest": str(out / "manifest.tsv"),
            "embeddings": str(out / "speaker_emb.emb")}


def cmd_build_protocol(args) -> dict:
    from .corpus import TASKS, corpus_stats, render_stats, write_manifest
    from .plotting import plot_elbow
    from .protocol import (
        achieved_ratios, assign_voice_ids, best_of, build_protocol, emit_protocol, read_embeddings,
        select_k_elbow,
    )
    from .training import unique_run_dir

    manifest, root = _load_manifest(args.manifest)
    manifest = _absolute_audio(manifest, root)
    emb = read_embeddings(args.embeddings)
    spoof_ids = [u.id for u, _ in manifest if not u.is_bonafide]
    spoof_emb = emb.select(spoof_ids)
    grid = [k for k in args.k_grid if k <= len(spoof_ids)]
    out = unique_run_dir(args.out)
    if len(grid) == 1:
        chosen, elbow = grid[0], None
    else:
        elbow = select_k_elbow(spoof_emb, grid, seed=args.seed)
        chosen = elbow.k
        lines = ["k\tinertia\tchord_distance"]
        lines += [f"{k}\t{i:.9g}\t{d:.9g}" for k, i, d in zip(elbow.grid, elbow.inertias, elbow.distances)]
        (out / "elbow.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        plot_elbow(elbow.grid, elbow.inertias, chosen, out / "elbow.png")
    clustering = best_of(spoof_emb, chosen, seed=args.seed)
    voiced = assign_voice_ids(manifest, clustering)
    spec = build_protocol(voiced, args.ratios, args.seed, args.dominance, filter_tasks=tuple(args.filter_tasks))
    write_manifest(voiced, out / "manifest.tsv")
    emit_protocol(spec, voiced, out / "protocol.tsv")
    for task in TASKS:
        view = voiced.subset([i for s in ("train", "dev", "eval") for i in spec.task_ids(voiced, task, s)])
        (out / f"stats_{task}.tsv").write_text(render_stats(corpus_stats(view, task, spec)), encoding="utf-8")
    _write_json(out / "clustering.json", {
        "k": chosen, "inertia": clustering.inertia, "converged": clustering.converged,
        "pronounced_elbow": None if elbow is None else elbow.pronounced, "seed": args.seed,
    })
    return {"out": str(out), "k": chosen, "removed": {t: list(v) for t, v in spec.removed_classes.items()},
            "achieved_ratios": [round(r, 6) for r in achieved_ratios(spec)]}


def cmd_extract_features(args) -> dict:
    from .frontend import FeatureMatrix, write_features
    from .training import FeatureBank, load_config

    manifest, root = _load_manifest(args.manifest, args.audio_root)
    cfg = load_config(resolve_config(args.config, "train_default"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank = FeatureBank(manifest, cfg, root)
    for uid in manifest.ids:
        if "/" in uid or "\\" in uid:
            raise CliError(f"utterance id {uid!r} is not usable as a cache file name")
        write_features(out / f"{uid}.fea", FeatureMatrix(bank.full(uid).astype(np.float64), 20.0, 10.0,
                                                         cfg.n_filters, cfg.deltas))
    return {"out": str(out), "utterances": len(manifest), "coeffs": cfg.feature_width}


def cmd_train(args) -> dict:
    from .models import load_checkpoint, save_checkpoint
    from .plotting import plot_history
    from .protocol import read_protocol
    from .training import (
        FeatureBank, load_config, train_binary, train_e2e, train_two_stage, unique_run_dir, write_history,
    )

    cfg = load_config(resolve_config(args.config, "train_default"), task=args.task, strategy=args.strategy,
                      epochs=args.epochs, seed=args.seed, backbone_checkpoint=args.backbone,
                      fixture_embeddings=args.embeddings)
    manifest, root = _load_manifest(args.manifest, args.audio_root)
    protocol = read_protocol(args.protocol)
    out = unique_run_dir(args.out)
    bank = FeatureBank(manifest, cfg, root, args.features)
    if cfg.strategy == "two_stage":
        if cfg.backbone_checkpoint and cfg.fixture_embeddings:
            raise CliError("give either --backbone or --embeddings for two-stage training, not both")
        if cfg.backbone_checkpoint:
            ckpt = train_two_stage(manifest, protocol, cfg, backbone=load_checkpoint(cfg.backbone_checkpoint),
                                   bank=bank)
        elif cfg.fixture_embeddings:
            ckpt = train_two_stage(manifest, protocol, cfg, fixture=str(Path(cfg.fixture_embeddings).resolve()))
        else:
            raise CliError("two-stage training needs --backbone or --embeddings")
    elif cfg.task == "binary":
        ckpt = train_binary(manifest, protocol, cfg, bank=bank)
    else:
        ckpt = train_e2e(manifest, protocol, cfg, bank=bank)
    ckpt.provenance["manifest_path"] = str(Path(args.manifest).resolve())
    ckpt.provenance["audio_root"] = str(Path(root).resolve())
    save_checkpoint(ckpt, out / "checkpoint.npz")
    write_history(ckpt.history, out / "history.tsv", cfg.selection_metric)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    _write_json(out / "provenance.json", {**ckpt.provenance, "selection": ckpt.selection})
    plot_history(ckpt.history, out / "history.png", cfg.selection_metric)
    return {"out": str(out), "task": cfg.task, "strategy": cfg.strategy, "selection": ckpt.selection}


def cmd_evaluate(args) -> dict:
    from .evaluation import evaluate, export_embeddings, write_report
    from .models import load_checkpoint
    from .protocol import read_protocol
    from .training import TrainedModel, unique_run_dir

    ckpt = load_checkpoint(args.checkpoint)
    manifest_path = args.manifest or ckpt.provenance.get("manifest_path")
    if not manifest_path:
        raise CliError("no --manifest given and the checkpoint does not record one")
    audio_root = args.audio_root or ckpt.provenance.get("audio_root")
    manifest, root = _load_manifest(manifest_path, audio_root)
    protocol = read_protocol(args.protocol)
    task = args.task or ckpt.config["train"]["task"]
    if task != ckpt.config["train"]["task"]:
        raise CliError(f"checkpoint was trained for {ckpt.config['train']['task']!r}, not {task!r}")
    model = TrainedModel(ckpt, manifest, root, fixture=args.embeddings)
    out = unique_run_dir(args.out)
    report = evaluate(model, manifest, protocol, task, args.split)
    write_report(report, out, figures=False)
    summary = {"out": str(out), "task": task, "split": args.split, "n": int(report.confusion.counts.sum()),
               "micro_accuracy": report.micro_accuracy, "macro_accuracy": report.macro_accuracy,
               "macro_f1": report.macro_f1}
    if args.export_embeddings:
        emb_path, _ = export_embeddings(model, manifest, protocol, args.split, out / "embeddings", task)
        summary["embeddings"] = str(emb_path)
    return summary


def cmd_report(args) -> dict:
    """Render figures next to the delimited files found in a run directory."""
    from .evaluation import ConfusionMatrix, project_2d
    from .plotting import plot_confusion, plot_elbow, plot_history, plot_projection

    run = Path(args.run_dir)
    if not run.is_dir():
        raise CliError(f"run directory {run} does not exist")
    rendered = []
    if (run / "history.tsv").exists():
        rows = [line.split("\t") for line in (run / "history.tsv").read_text(encoding="utf-8").splitlines()[1:]]
        history = [{"epoch": int(e), "train_loss": float(l), "dev_metric": float(m)} for e, l, m in rows]
        rendered.append(plot_history(history, run / "history.png", "dev_metric"))
    if (run / "confusion.tsv").exists():
        lines = (run / "confusion.tsv").read_text(encoding="utf-8").splitlines()
        classes = tuple(lines[0].split("\t")[1:])
        counts = np.array([[int(v) for v in line.split("\t")[1:]] for line in lines[1:]], dtype=np.int64)
        task = ""
        if (run / "report.json").exists():
            task = json.loads((run / "report.json").read_text(encoding="utf-8")).get("task", "")
        rendered.append(plot_confusion(ConfusionMatrix(classes, counts), run / "confusion.png",
                                       title=f"{task} (row-normalized)".strip()))
    if (run / "elbow.tsv").exists():
        rows = [line.split("\t") for line in (run / "elbow.tsv").read_text(encoding="utf-8").splitlines()[1:]]
        grid, inertias = [int(r[0]) for r in rows], [float(r[1]) for r in rows]
        chosen = json.loads((run / "clustering.json").read_text(encoding="utf-8"))["k"] \
            if (run / "clustering.json").exists() else grid[0]
        rendered.append(plot_elbow(grid, inertias, chosen, run / "elbow.png"))
    if (run / "embeddings.emb").exists():
        proj = project_2d(run / "embeddings.emb", "pca", run / "projection.tsv")
        labels_path = run / "embeddings.labels.tsv"
        column = args.color_by
        labels = ["?"] * len(proj.ids)
        if labels_path.exists():
            rows = [line.split("\t") for line in labels_path.read_text(encoding="utf-8").splitlines()]
            col = rows[0].index(column)
            lookup = {r[0]: r[col] for r in rows[1:]}
            labels = [lookup.get(i, "?") for i in proj.ids]
        lines = ["id\tx\ty\tlabel"] + [f"{i}\t{x:.9g}\t{y:.9g}\t{lab}" for i, (x, y), lab
                                       in zip(proj.ids, proj.coords, labels)]
        (run / "projection_plot.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        rendered.append(plot_projection(proj.coords, labels, run / "projection.png", title=f"PCA, {column}"))
    if not rendered:
        raise CliError(f"nothing to render in {run}")
    return {"run_dir": str(run), "figures": [p.name for p in rendered]}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofattr", description="Spoofing-attribute classification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec", help=f"synth spec (default: synth_acceptance from ${CONFIG_ENV})")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-protocol", help="cluster voices and emit a speaker-disjoint protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True, help="EMB1 speaker embeddings covering the spoofed ids")
    p.add_argument("--k-grid", type=_ints, default=_ints("2:40:2"), help="e.g. 10,20,40 or 2:40:2")
    p.add_argument("--ratios", type=_floats, default=(0.7, 0.15, 0.15))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dominance", type=float, default=0.5)
    p.add_argument("--filter-tasks", nargs="*", default=["vocoder"], choices=["input_type", "acoustic_model",
                                                                             "vocoder"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_protocol)

    p = sub.add_parser("extract-features", help="cache LFCC features for every utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--audio-root")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train an E2E, binary or two-stage model")
    p.add_argument("--task", choices=["binary", "input_type", "acoustic_model", "vocoder"])
    p.add_argument("--strategy", choices=["e2e", "two_stage"])
    p.add_argument("--protocol", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", help="binary checkpoint to freeze (two-stage)")
    p.add_argument("--embeddings", help="EMB1 fixture embeddings (two-stage)")
    p.add_argument("--features", help="directory of cached .fea files")
    p.add_argument("--audio-root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a protocol split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--task", choices=["binary", "input_type", "acoustic_model", "vocoder"])
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--audio-root")
    p.add_argument("--embeddings", help="fixture embeddings for two-stage fixture checkpoints")
    p.add_argument("--split", default="eval", choices=["train", "dev", "eval"])
    p.add_argument("--export-embeddings", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render figures next to a run directory's TSV/CSV files")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--color-by", default="vocoder", choices=["input_type", "acoustic_model", "vocoder"])
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        summary = args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(json.dumps({"status": "error", "command": args.command, "type": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}, sort_keys=True))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
