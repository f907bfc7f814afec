"""Temperature-softmax likelihoods, anomaly maps and image-level scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .encoder import VisionLanguageEncoder, VisualFeatures, l2_normalize
from .errors import InputError, ParameterError
from .prompts import TextPrototypes

PATCH_GRID = "patch_grid"
UPSAMPLED = "upsampled"
SMOOTHED = "smoothed"

STRATEGIES = ("S1", "S2", "S3", "S4", "S5")
DEFAULT_SIGMA = 4.0


@dataclass
class AnomalyMap:
    values: np.ndarray
    resolution_stage: str = PATCH_GRID

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"anomaly map must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise InputError("anomaly map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class ImageScore:
    value: float
    strategy: str
    components: dict = field(default_factory=dict)


def _check_tau(tau: float) -> None:
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise ParameterError(f"temperature must be a finite positive number, got {tau!r}")


def softmax_pair(sim_n: torch.Tensor, sim_a: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-way softmax of similarity logits scaled by ``1 / tau``."""
    _check_tau(tau)
    logits = torch.stack([sim_n, sim_a], dim=-1) / tau
    logits = logits - logits.max(dim=-1, keepdim=True).values
    w = logits.exp()
    p = w / w.sum(dim=-1, keepdim=True)
    return p[..., 0], p[..., 1]


def class_likelihood(
    e: torch.Tensor, prototypes: TextPrototypes, tau: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """(p_n, p_a) for one embedding or a stack of embeddings along the last axis.

    The embedding is L2-normalized here; prototypes are used as given.
    """
    _check_tau(tau)
    e = torch.as_tensor(e)
    if not torch.isfinite(e).all():
        raise InputError("visual embedding contains non-finite values")
    e_hat = l2_normalize(e)
    g = prototypes.stacked().to(e_hat.dtype)
    sims = e_hat @ g.T
    return softmax_pair(sims[..., 0], sims[..., 1], tau)


def patch_probabilities(
    patch_features: torch.Tensor, prototypes: TextPrototypes, tau: float, grid_shape: tuple[int, int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Tensor form of the patch maps: ``[..., N, D]`` in, two ``[..., h, w]`` maps out."""
    p_n, p_a = class_likelihood(patch_features, prototypes, tau)
    shape = p_n.shape[:-1] + tuple(grid_shape)
    return p_n.reshape(shape), p_a.reshape(shape)


def patch_anomaly_maps(
    features: VisualFeatures, prototypes: TextPrototypes, tau: float
) -> tuple[AnomalyMap, AnomalyMap]:
    with torch.no_grad():
        s_n, s_a = patch_probabilities(
            features.patch_features.to(torch.float64), prototypes, tau, features.grid_shape
        )
    return AnomalyMap(s_n.numpy(), PATCH_GRID), AnomalyMap(s_a.numpy(), PATCH_GRID)


def upsample_tensor(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of the trailing two axes."""
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def upsample_bilinear(amap: AnomalyMap, target: tuple[int, int]) -> AnomalyMap:
    h, w = amap.shape
    H, W = target
    if H < h or W < w:
        raise ParameterError(f"target {target} is smaller than source {amap.shape}; downsampling is not supported")
    src = amap.values
    out = upsample_tensor(torch.from_numpy(src), (H, W)).numpy()
    # guard against last-ulp overshoot so the output stays inside the input range
    out = np.clip(out, src.min(), src.max())
    return AnomalyMap(out, UPSAMPLED)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(4 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(amap: AnomalyMap, sigma: float = DEFAULT_SIGMA) -> AnomalyMap:
    """Separable Gaussian filter, radius ceil(4 sigma), half-sample symmetric padding."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(amap.values, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return AnomalyMap(out, SMOOTHED)


def _p_a(e: torch.Tensor, prototypes: TextPrototypes, tau: float) -> float:
    with torch.no_grad():
        _, p_a = class_likelihood(e.to(torch.float64), prototypes, tau)
    return float(p_a)


def image_score(
    features: VisualFeatures,
    G_f: TextPrototypes,
    S_a: AnomalyMap | None = None,
    strategy: str = "S5",
    tau: float = 0.0042,
) -> ImageScore:
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    s1 = _p_a(features.object_token, G_f, tau)
    s2 = _p_a(features.spatial_token, G_f, tau)
    if strategy == "S1":
        value, local = s1, None
    elif strategy == "S2":
        value, local = s2, None
    elif strategy == "S3":
        value, local = max(s1, s2), None
    elif strategy == "S4":
        value, local = (s1 + s2) / 2, None
    else:
        if S_a is None:
            raise ParameterError("strategy S5 needs the patch-grid anomaly map")
        if S_a.resolution_stage != PATCH_GRID:
            raise ParameterError(f"strategy S5 takes the patch-grid map, got stage {S_a.resolution_stage!r}")
        local = float(S_a.values.max())
        value = s2 + local
    global_term = value if local is None else s2
    return ImageScore(value, strategy, {"global_term": global_term, "local_term": local})


def score_features(
    features: VisualFeatures,
    G_f: TextPrototypes,
    G_l: TextPrototypes,
    tau: float,
    sigma: float,
    out_size: tuple[int, int],
    strategy: str = "S5",
) -> tuple[ImageScore, AnomalyMap]:
    _, s_a = patch_anomaly_maps(features, G_l, tau)
    y = image_score(features, G_f, s_a, strategy, tau)
    s = gaussian_smooth(upsample_bilinear(s_a, out_size), sigma)
    return y, s


def run_inference(
    image: torch.Tensor,
    encoder: VisionLanguageEncoder,
    G_f: TextPrototypes,
    G_l: TextPrototypes,
    tau: float | None = None,
    sigma: float = DEFAULT_SIGMA,
    strategy: str = "S5",
) -> tuple[ImageScore, AnomalyMap]:
    """Image score and smoothed full-resolution anomaly map for one preprocessed image."""
    tau = encoder.config.temperature if tau is None else tau
    features = encoder.encode_image(image)
    return score_features(features, G_f, G_l, tau, sigma, tuple(image.shape[-2:]), strategy)
