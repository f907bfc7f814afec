"""Manifest-level evaluation: per-sample inference, per-category metrics, report files."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .data import DatasetManifest, ManifestDataset, Preprocessor
from .encoder import VisionLanguageEncoder
from .errors import ParameterError, ValidationError
from .heatmap import export_heatmap
from .metrics import CategoryInputs, EvalReport, aggregate_report
from .prompts import LearnablePromptState, TextPrototypes, build_localization_prototypes, detection_prototypes
from .scoring import DEFAULT_SIGMA, STRATEGIES, score_features

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    strategy: str = "S5"
    sigma: float = DEFAULT_SIGMA
    fpr_limit: float = 0.3
    connectivity: int = 4
    lexicon: str | None = None  # None: medical manifests get the medical lexicon
    templates: list[str] | None = None
    batch_size: int = 8
    export_heatmaps: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.sigma > 0:
            raise ParameterError("sigma must be > 0")
        if not 0 < self.fpr_limit <= 1:
            raise ParameterError("fpr_limit must lie in (0, 1]")
        if self.lexicon not in (None, "generic", "medical"):
            raise ParameterError(f"lexicon must be generic or medical, got {self.lexicon!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def class_prompt_name(category: str) -> str:
    return category.replace("_", " ").replace("-", " ")


def resolve_lexicon(manifest: DatasetManifest, requested: str | None) -> str:
    if requested is not None:
        return requested
    return "medical" if manifest.domain_tag == "medical" else "generic"


def check_protocol(
    manifest: DatasetManifest,
    checkpoint_meta: dict[str, Any],
    preprocessor: Preprocessor,
    override_same_domain: bool = False,
) -> None:
    problems = []
    trained_on = checkpoint_meta.get("train_manifest")
    if trained_on is not None and trained_on == manifest.name and not override_same_domain:
        problems.append(
            f"checkpoint was trained on {trained_on!r}; evaluating on the same dataset breaks the zero-shot "
            "protocol (pass --override-same-domain to force)"
        )
    fp = checkpoint_meta.get("preprocess_fingerprint")
    if fp is not None and fp != preprocessor.fingerprint():
        problems.append(
            f"preprocessing fingerprint {preprocessor.fingerprint()} differs from the training one {fp}"
        )
    if problems:
        raise ValidationError("evaluation refused", problems)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_evaluation(
    manifest: DatasetManifest,
    encoder: VisionLanguageEncoder,
    G_f: TextPrototypes | None,
    checkpoint: str | Path | LearnablePromptState,
    config: EvalConfig | None = None,
    out_dir: str | Path | None = None,
    override_same_domain: bool = False,
) -> EvalReport:
    """Score every sample and aggregate per-category metrics.

    ``G_f=None`` builds fixed prototypes per category from its name. Image
    metrics are skipped for pixel-only manifests and pixel metrics for
    image-only ones.
    """
    config = config or EvalConfig()
    pre = Preprocessor.from_config(encoder.config)
    meta: dict[str, Any] = {}
    if isinstance(checkpoint, LearnablePromptState):
        state = checkpoint
    else:
        state, ckpt_meta = load_checkpoint(checkpoint, expected_D_t=encoder.config.text_token_dim)
        check_protocol(manifest, ckpt_meta, pre, override_same_domain)
        meta["checkpoint_sha256"] = file_digest(checkpoint)
        meta["train_manifest"] = ckpt_meta.get("train_manifest")
    lexicon = resolve_lexicon(manifest, config.lexicon)
    tau = encoder.config.temperature
    with torch.no_grad():
        G_l = build_localization_prototypes(state, encoder)

    out_dir = Path(out_dir) if out_dir is not None else None
    inputs: dict[str, CategoryInputs] = {}
    records = []
    for category, entries in manifest.by_category().items():
        if not entries:
            continue
        cat_G_f = G_f or detection_prototypes(encoder, class_prompt_name(category), lexicon, config.templates)
        sub = DatasetManifest(manifest.name, manifest.domain_tag, [category], entries, manifest.annotation_level, manifest.root)
        ds = ManifestDataset(sub, pre, cache=False)
        scores, labels, maps, masks = [], [], [], []
        for lo in range(0, len(ds), config.batch_size):
            batch = [ds[i] for i in range(lo, min(lo + config.batch_size, len(ds)))]
            with torch.no_grad():
                feats = encoder.encode_images(torch.stack([s.image for s in batch]))
            for s, f in zip(batch, feats):
                y, smap = score_features(
                    f, cat_G_f, G_l, tau, config.sigma, tuple(s.image.shape[-2:]), config.strategy
                )
                records.append({"id": s.id, "category": category, "label": s.label, "score": y.value, **y.components})
                if manifest.has_image_labels:
                    scores.append(y.value)
                    labels.append(s.label)
                if manifest.has_pixel_labels:
                    if s.mask is None:
                        log.warning("sample %s has no mask; skipped for pixel metrics", s.id)
                    else:
                        maps.append(smap.values.astype(np.float32))
                        masks.append(s.mask)
                if config.export_heatmaps and out_dir is not None:
                    export_heatmap(smap, out_dir / "heatmaps", s.id)
        inputs[category] = CategoryInputs(
            image_scores=scores if manifest.has_image_labels else None,
            image_labels=labels if manifest.has_image_labels else None,
            maps=maps if manifest.has_pixel_labels else None,
            masks=masks if manifest.has_pixel_labels else None,
        )

    meta.update(
        manifest=manifest.name,
        annotation_level=manifest.annotation_level,
        domain_tag=manifest.domain_tag,
        lexicon=lexicon,
        strategy=config.strategy,
        sigma=config.sigma,
        temperature=tau,
        backbone=encoder.config.name,
        preprocess_fingerprint=pre.fingerprint(),
    )
    report = aggregate_report(inputs, config.fpr_limit, config.connectivity, meta)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "report.txt").write_text(report.to_table())
        with open(out_dir / "scores.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return report
