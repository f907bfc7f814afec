"""Prompt-token training against a frozen encoder.

Only the learnable normal/abnormal token matrices receive gradients. The local
objective is Focal + Dice on the two-channel patch maps bilinearly upsampled to
mask resolution; a global cross-entropy on the spatial token is available for
ablations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .encoder import VisionLanguageEncoder
from .errors import DataError, NumericError, ParameterError
from .prompts import LearnablePromptState, TextPrototypes, build_localization_prototypes
from .scoring import class_likelihood, patch_probabilities, upsample_tensor

log = logging.getLogger(__name__)

LOSS_MODES = ("local", "global", "both")
PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 2
    batch_size: int = 8
    seed: int = 111
    loss_mode: str = "local"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_epsilon: float = 1.0
    focal_weight: float = 1.0
    dice_weight: float = 1.0
    shuffle: bool = True

    def __post_init__(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            problems.append("beta1 and beta2 must lie in (0, 1)")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            problems.append(f"loss_mode must be one of {LOSS_MODES}")
        if problems:
            raise ParameterError("invalid train config: " + "; ".join(problems))

    @property
    def uses_local(self) -> bool:
        return self.loss_mode in ("local", "both")

    @property
    def uses_global(self) -> bool:
        return self.loss_mode in ("global", "both")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainLogEntry:
    epoch: int
    step: int
    focal: float | None
    dice: float | None
    global_ce: float | None
    total: float
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def focal_loss(
    pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> torch.Tensor:
    """Mean focal loss; ``pred`` has the (normal, anomaly) channels on axis -3."""
    target = target.to(pred.dtype)
    p_n, p_a = pred.unbind(dim=-3)
    is_anom = target > 0.5
    p_t = torch.where(is_anom, p_a, p_n).clamp_min(PROB_CLAMP)
    alpha_t = torch.where(is_anom, torch.full_like(p_t, alpha), torch.full_like(p_t, 1 - alpha))
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred_anomaly: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice on the anomaly channel, computed per image over (H, W) and averaged."""
    if pred_anomaly.shape != target.shape:
        raise ParameterError(f"prediction shape {tuple(pred_anomaly.shape)} != mask shape {tuple(target.shape)}")
    target = target.to(pred_anomaly.dtype)
    inter = (pred_anomaly * target).sum(dim=(-2, -1))
    denom = pred_anomaly.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def global_ce_loss(
    g_s: torch.Tensor, G_l: TextPrototypes, tau: float, y: torch.Tensor | int
) -> torch.Tensor:
    p_n, p_a = class_likelihood(g_s, G_l, tau)
    y = torch.as_tensor(y, device=p_a.device)
    p_t = torch.where(y > 0, p_a, p_n).clamp_min(PROB_CLAMP)
    return -torch.log(p_t).mean()


def local_loss_terms(
    patch_features: torch.Tensor,
    prototypes: TextPrototypes,
    masks: torch.Tensor,
    tau: float,
    grid_shape: tuple[int, int],
    config: TrainConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Focal and Dice for a ``[B, N, D]`` batch against ``[B, H, W]`` masks."""
    s_n, s_a = patch_probabilities(patch_features, prototypes, tau, grid_shape)
    up = upsample_tensor(torch.stack([s_n, s_a], dim=-3), tuple(masks.shape[-2:]))
    focal = focal_loss(up, masks, config.focal_gamma, config.focal_alpha)
    dice = dice_loss(up[..., 1, :, :], masks, config.dice_epsilon)
    return focal, dice


def _mask_tensor(sample) -> torch.Tensor:
    mask = sample.mask
    if mask is None:
        raise DataError(f"sample {getattr(sample, 'id', '?')!r} has no mask but the local loss needs one")
    return torch.as_tensor(np.asarray(mask), dtype=torch.float32)


def train_localization_prompts(
    dataset: Sequence,
    encoder: VisionLanguageEncoder,
    state: LearnablePromptState,
    config: TrainConfig | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_metadata: dict[str, Any] | None = None,
) -> tuple[LearnablePromptState, list[TrainLogEntry]]:
    """Fit ``state`` on ``dataset`` (a sequence of samples with image, label, mask, id).

    Local mode never touches ``sample.label``; global mode never touches ``sample.mask``.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    tau = encoder.config.temperature
    grid = encoder.config.grid_shape
    fingerprint = encoder.parameter_fingerprint()

    T_n = state.T_n.detach().clone().to(torch.float32).requires_grad_(True)
    T_a = state.T_a.detach().clone().to(torch.float32).requires_grad_(True)
    opt = torch.optim.Adam([T_n, T_a], lr=config.learning_rate, betas=(config.beta1, config.beta2))
    gen = torch.Generator().manual_seed(config.seed)

    logs: list[TrainLogEntry] = []
    start = time.perf_counter()
    step = 0
    n = len(dataset)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen).tolist() if config.shuffle else list(range(n))
        for lo in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[lo : lo + config.batch_size]]
            images = torch.stack([torch.as_tensor(s.image) for s in batch])
            with torch.no_grad():
                feats = encoder.encode_images(images)
            prototypes = build_localization_prototypes(
                LearnablePromptState(T_n, T_a, state.seed, state.version), encoder
            )
            total = torch.zeros((), dtype=torch.float32)
            focal = dice = g_ce = None
            if config.uses_local:
                masks = torch.stack([_mask_tensor(s) for s in batch])
                z = torch.stack([f.patch_features for f in feats])
                focal, dice = local_loss_terms(z, prototypes, masks, tau, grid, config)
                total = total + config.focal_weight * focal + config.dice_weight * dice
            if config.uses_global:
                labels = torch.tensor([int(s.label) for s in batch])
                g_s = torch.stack([f.spatial_token for f in feats])
                g_ce = global_ce_loss(g_s, prototypes, tau, labels)
                total = total + g_ce

            entry = TrainLogEntry(
                epoch=epoch,
                step=step,
                focal=None if focal is None else focal.item(),
                dice=None if dice is None else dice.item(),
                global_ce=None if g_ce is None else g_ce.item(),
                total=total.item(),
                wall_time=time.perf_counter() - start,
            )
            logs.append(entry)
            if not math.isfinite(entry.total):
                log.error("non-finite loss at epoch %d step %d: %s", epoch, step, entry.to_dict())
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {entry.to_dict()}")
            log.debug("epoch %d step %d total %.6f", epoch, step, entry.total)

            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            step += 1

    if encoder.parameter_fingerprint() != fingerprint:
        raise RuntimeError("encoder parameters changed during prompt training")
    trained = LearnablePromptState(T_n.detach().clone(), T_a.detach().clone(), config.seed, state.version)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, trained, checkpoint_metadata)
    return trained, logs
