"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 missing asset, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, build_run_config, read_config_file
from .data import (
    ManifestDataset,
    Preprocessor,
    SampleEntry,
    convert_flat,
    convert_mvtec,
    generate_synthetic_dataset,
    load_manifest,
    load_sample,
    save_manifest,
)
from .encoder import build_encoder
from .errors import ZsadError
from .evaluation import check_protocol, class_prompt_name, resolve_lexicon, run_evaluation
from .heatmap import export_heatmap
from .prompts import build_localization_prototypes, detection_prototypes, init_learnable_prompts
from .scoring import score_features
from .training import train_localization_prompts

log = logging.getLogger("zsad")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--backbone", help="backbone name; 'mock' selects the built-in mock encoder")
    p.add_argument("--seed", type=int)


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=["S1", "S2", "S3", "S4", "S5"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--lexicon", choices=["generic", "medical"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-dataset", help="write a synthetic textured dataset with bright-rectangle anomalies")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, default=40)
    p.add_argument("--n-anomalous", type=int, default=40)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--category", default="tile")

    p = sub.add_parser("convert-dataset", help="build a manifest from an MVTec-style or flat directory layout")
    p.add_argument("layout", choices=["mvtec", "flat"])
    p.add_argument("source")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.add_argument("--name", required=True)
    p.add_argument("--domain", choices=["industrial", "medical"], default="industrial")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--masks", help="mask directory (flat layout)")
    p.add_argument("--category", default="object", help="category name (flat layout)")
    p.add_argument("--annotation-level", choices=["image_only", "pixel_only", "both"])

    p = sub.add_parser("train", help="train the learnable localization prompts")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/prompts.ckpt)")
    p.add_argument("--loss-mode", choices=["local", "global", "both"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    _common(p)
    _eval_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--override-same-domain", action="store_true")
    p.add_argument("--heatmaps", action="store_true", help="also export per-sample heatmaps")

    p = sub.add_parser("infer", help="score individual images")
    _common(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-name", default="object")
    p.add_argument("--out", help="directory for heatmaps")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("export-heatmaps", help="write overlay heatmaps for every sample in a manifest")
    _common(p)
    _eval_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--override-same-domain", action="store_true")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {
        "backbone": {"name": getattr(args, "backbone", None)},
        "train": {
            "seed": getattr(args, "seed", None),
            "loss_mode": getattr(args, "loss_mode", None),
            "epochs": getattr(args, "epochs", None),
            "batch_size": getattr(args, "batch_size", None),
        },
        "eval": {
            "strategy": getattr(args, "strategy", None),
            "sigma": getattr(args, "sigma", None),
            "fpr_limit": getattr(args, "fpr_limit", None),
            "lexicon": getattr(args, "lexicon", None),
        },
    }
    return build_run_config(read_config_file(getattr(args, "config", None)), overrides)


def cmd_synth(args) -> int:
    m = generate_synthetic_dataset(
        args.out, args.n_normal, args.n_anomalous, args.image_size, args.seed, args.name, args.category
    )
    print(Path(args.out) / "manifest.json", f"({len(m.samples)} samples)")
    return 0


def cmd_convert(args) -> int:
    if args.layout == "mvtec":
        m = convert_mvtec(args.source, args.name, args.split, args.domain)
        if args.annotation_level:
            m.annotation_level = args.annotation_level
    else:
        m = convert_flat(args.source, args.masks, args.name, args.category, args.domain, args.annotation_level)
    save_manifest(m, args.out)
    print(f"{args.out}: {len(m.categories)} categories, {len(m.samples)} samples, {m.annotation_level}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out / "resolved_config.json")
    torch.manual_seed(cfg.train.seed)
    manifest = load_manifest(args.manifest)
    encoder = build_encoder(cfg.backbone)
    pre = Preprocessor.from_config(cfg.backbone)
    state = init_learnable_prompts(cfg.prompts.n_tokens, cfg.backbone.text_token_dim, cfg.train.seed, cfg.prompts.init_std)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "prompts.ckpt"
    meta = {
        "train_manifest": manifest.name,
        "preprocess_fingerprint": pre.fingerprint(),
        "backbone": cfg.backbone.name,
        "loss_mode": cfg.train.loss_mode,
    }
    _, logs = train_localization_prompts(ManifestDataset(manifest, pre), encoder, state, cfg.train, ckpt, meta)
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in logs:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    print(f"checkpoint: {ckpt}  steps: {len(logs)}  final loss: {logs[-1].total:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    cfg.eval.export_heatmaps = args.heatmaps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out / "resolved_config.json")
    manifest = load_manifest(args.manifest)
    encoder = build_encoder(cfg.backbone)
    report = run_evaluation(
        manifest, encoder, None, args.checkpoint, cfg.eval, out, override_same_domain=args.override_same_domain
    )
    print(report.to_table(), end="")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    encoder = build_encoder(cfg.backbone)
    pre = Preprocessor.from_config(cfg.backbone)
    state, _ = load_checkpoint(args.checkpoint, expected_D_t=cfg.backbone.text_token_dim)
    lexicon = cfg.eval.lexicon or "generic"
    with torch.no_grad():
        G_l = build_localization_prototypes(state, encoder)
    G_f = detection_prototypes(encoder, args.class_name, lexicon, cfg.eval.templates)
    for path in args.images:
        entry = SampleEntry(Path(path).stem, args.class_name, Path(path), 0)
        sample = load_sample(entry, pre)
        with torch.no_grad():
            feats = encoder.encode_image(sample.image)
        y, smap = score_features(
            feats, G_f, G_l, cfg.backbone.temperature, cfg.eval.sigma, tuple(sample.image.shape[-2:]), cfg.eval.strategy
        )
        rec = {"image": str(path), "score": y.value, "strategy": y.strategy, **y.components}
        if args.out:
            png, npy = export_heatmap(smap, args.out, Path(path).stem)
            rec.update(heatmap=str(png), raw=str(npy))
        print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.manifest)
    encoder = build_encoder(cfg.backbone)
    pre = Preprocessor.from_config(cfg.backbone)
    state, meta = load_checkpoint(args.checkpoint, expected_D_t=cfg.backbone.text_token_dim)
    check_protocol(manifest, meta, pre, args.override_same_domain)
    lexicon = resolve_lexicon(manifest, cfg.eval.lexicon)
    with torch.no_grad():
        G_l = build_localization_prototypes(state, encoder)
    prototypes = {}
    ds = ManifestDataset(manifest, pre, cache=False)
    for i, sample in enumerate(ds):
        cat = sample.category
        if cat not in prototypes:
            prototypes[cat] = detection_prototypes(encoder, class_prompt_name(cat), lexicon, cfg.eval.templates)
        with torch.no_grad():
            feats = encoder.encode_image(sample.image)
        _, smap = score_features(
            feats, prototypes[cat], G_l, cfg.backbone.temperature, cfg.eval.sigma, tuple(sample.image.shape[-2:]), cfg.eval.strategy
        )
        r = cfg.backbone.input_resolution
        rgb = np.asarray(Image.fromarray(pre.load_rgb(manifest.samples[i].image_path)).resize((r, r), Image.BILINEAR))
        export_heatmap(smap, args.out, sample.id, image=rgb, alpha=args.alpha)
    print(f"wrote {len(ds)} heatmaps to {args.out}")
    return 0


COMMANDS = {
    "synth-dataset": cmd_synth,
    "convert-dataset": cmd_convert,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "export-heatmaps": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ZsadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
