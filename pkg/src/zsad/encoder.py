"""Vision-language encoder contract, the deterministic mock backbone and the plugin adapter.

Every encoder produces, for one preprocessed image, a dense patch map plus two
global tokens (object-centric and spatial), and text embeddings either from a
string or from a raw sequence of token-embedding rows. The second entry point is
what lets learnable prompt tokens be spliced in front of literal words.
"""

from __future__ import annotations

import hashlib
import importlib
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch
import torch.nn.functional as F

from .errors import AssetError, InputError, ParameterError

LEARNED = "learned"
WORD = "word"


@dataclass(frozen=True)
class BackboneConfig:
    name: str = "tips-l14-hr"
    patch_size: int = 14
    input_resolution: int = 518
    embed_dim: int = 1024
    text_token_dim: int = 1024
    temperature: float = 0.0042
    num_layers: int = 24
    # 1-based block indices; several layers are fused by element-wise mean
    patch_layers: tuple[int, ...] = (24,)
    normalization_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalization_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    context_length: int = 77
    weights_path: str | None = None
    factory: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_layers", tuple(int(x) for x in self.patch_layers))
        object.__setattr__(self, "normalization_mean", tuple(float(x) for x in self.normalization_mean))
        object.__setattr__(self, "normalization_std", tuple(float(x) for x in self.normalization_std))
        problems = []
        if self.patch_size < 1:
            problems.append(f"patch_size must be positive, got {self.patch_size}")
        elif self.input_resolution % self.patch_size:
            problems.append(
                f"input_resolution {self.input_resolution} is not a multiple of patch_size {self.patch_size}"
            )
        if not self.temperature > 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if not self.patch_layers:
            problems.append("patch_layers must be non-empty")
        bad = [i for i in self.patch_layers if not 1 <= i <= self.num_layers]
        if bad:
            problems.append(f"patch_layers {bad} outside 1..{self.num_layers}")
        if len(self.normalization_mean) != len(self.normalization_std):
            problems.append("normalization_mean and normalization_std differ in length")
        if any(s <= 0 for s in self.normalization_std):
            problems.append("normalization_std entries must be > 0")
        if problems:
            raise ParameterError("invalid backbone config: " + "; ".join(problems))

    @property
    def grid_shape(self) -> tuple[int, int]:
        side = self.input_resolution // self.patch_size
        return side, side

    @property
    def num_patches(self) -> int:
        h, w = self.grid_shape
        return h * w

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("patch_layers", "normalization_mean", "normalization_std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParameterError(f"unknown backbone config keys: {unknown}")
        return cls(**data)


def mock_config(**overrides) -> BackboneConfig:
    """Desk-scale config used with :class:`MockBackbone`."""
    base = dict(
        name="mock",
        input_resolution=224,
        embed_dim=64,
        text_token_dim=64,
    )
    base.update(overrides)
    return BackboneConfig(**base)


@dataclass
class VisualFeatures:
    patch_features: torch.Tensor  # N x D
    object_token: torch.Tensor  # D
    spatial_token: torch.Tensor  # D
    grid_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid_shape
        if self.patch_features.shape[0] != h * w:
            raise InputError(
                f"patch_features has {self.patch_features.shape[0]} rows, grid {self.grid_shape} needs {h * w}"
            )

    def patch_grid(self) -> torch.Tensor:
        h, w = self.grid_shape
        return self.patch_features.reshape(h, w, -1)


@dataclass
class TextEmbedding:
    vector: torch.Tensor
    normalized: bool = True


@dataclass
class TokenEmbeddingSequence:
    tokens: torch.Tensor  # L x D_t
    provenance: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise InputError(f"token sequence must be a non-empty L x D_t matrix, got {tuple(self.tokens.shape)}")
        if not self.provenance:
            self.provenance = (WORD,) * self.tokens.shape[0]
        self.provenance = tuple(self.provenance)
        if len(self.provenance) != self.tokens.shape[0]:
            raise InputError(
                f"{len(self.provenance)} provenance tags for {self.tokens.shape[0]} token rows"
            )
        if any(p not in (LEARNED, WORD) for p in self.provenance):
            raise InputError(f"provenance tags must be {LEARNED!r} or {WORD!r}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def concat(cls, parts: Sequence["TokenEmbeddingSequence"]) -> "TokenEmbeddingSequence":
        return cls(
            torch.cat([p.tokens for p in parts], dim=0),
            tuple(tag for p in parts for tag in p.provenance),
        )


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def split_words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class VisionLanguageEncoder(ABC):
    """Frozen two-tower encoder. Implementations must not mutate state after construction."""

    config: BackboneConfig

    @abstractmethod
    def encode_images(self, images: torch.Tensor) -> list[VisualFeatures]:
        """Encode a B x C x H x W batch of preprocessed images."""

    def encode_image(self, image: torch.Tensor) -> VisualFeatures:
        if image.ndim != 3:
            raise InputError(f"expected C x H x W image, got shape {tuple(image.shape)}")
        return self.encode_images(image.unsqueeze(0))[0]

    @abstractmethod
    def lookup_word_embedding(self, word: str) -> torch.Tensor:
        """Rows of the token-embedding table for ``word`` (k x D_t)."""

    @abstractmethod
    def _encode_rows(self, tokens: torch.Tensor) -> torch.Tensor:
        """Unnormalized text embedding of an L x D_t row sequence."""

    @abstractmethod
    def parameter_fingerprint(self) -> str:
        """Digest of every frozen parameter, used to prove training left the encoder untouched."""

    def tokenize(self, text: str) -> TokenEmbeddingSequence:
        words = split_words(text)
        if not words:
            raise InputError(f"prompt {text!r} contains no tokens")
        return TokenEmbeddingSequence(torch.cat([self.lookup_word_embedding(w) for w in words], dim=0))

    def encode_text(self, prompt: str) -> TextEmbedding:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be a non-empty string")
        return self.encode_token_sequence(self.tokenize(prompt))

    def encode_token_sequence(self, tokens: TokenEmbeddingSequence) -> TextEmbedding:
        if len(tokens) > self.config.context_length:
            raise InputError(
                f"token sequence of length {len(tokens)} exceeds context length {self.config.context_length}"
            )
        if not torch.isfinite(tokens.tokens).all():
            raise InputError("token sequence contains non-finite values")
        return TextEmbedding(l2_normalize(self._encode_rows(tokens.tokens)), normalized=True)

    def _check_images(self, images: torch.Tensor) -> None:
        r = self.config.input_resolution
        if images.ndim != 4 or images.shape[-2:] != (r, r):
            raise InputError(
                f"expected B x C x {r} x {r} images, got shape {tuple(images.shape)}"
            )
        if images.shape[1] != len(self.config.normalization_mean):
            raise InputError(f"expected {len(self.config.normalization_mean)} channels, got {images.shape[1]}")


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


class MockBackbone(VisionLanguageEncoder):
    """Deterministic linear stand-in for a pretrained vision-language model.

    Vision: each layer is a seeded affine projection of flattened patch pixels.
    Patch features of the selected layers are averaged; the spatial token is the
    mean patch feature and the object token projects the image's mean pixel.
    Text: words index a seeded embedding table by hash; the rows are mean-pooled
    and passed through an affine projection, so the text path is affine up to
    the final normalization.
    """

    vocab_size = 4096

    def __init__(self, config: BackboneConfig | None = None, dtype: torch.dtype = torch.float32):
        self.config = config or mock_config()
        self.dtype = dtype
        c = len(self.config.normalization_mean)
        p = self.config.patch_size
        d = self.config.embed_dim
        dt = self.config.text_token_dim
        g = torch.Generator().manual_seed(self.config.seed)
        fan_in = c * p * p
        self._proj = torch.randn(self.config.num_layers, fan_in, d, generator=g, dtype=torch.float64) / fan_in**0.5
        self._bias = 0.5 * torch.randn(self.config.num_layers, d, generator=g, dtype=torch.float64)
        # token embeddings at the scale of real text towers (std ~0.02)
        self._vocab = 0.02 * torch.randn(self.vocab_size, dt, generator=g, dtype=torch.float64)
        self._text_proj = torch.randn(dt, d, generator=g, dtype=torch.float64) / dt**0.5
        # shared offset: real text towers embed all prompts in a narrow cone
        self._text_bias = l2_normalize(torch.randn(d, generator=g, dtype=torch.float64))
        self._proj = self._proj.to(dtype)
        self._bias = self._bias.to(dtype)
        self._vocab = self._vocab.to(dtype)
        self._text_proj = self._text_proj.to(dtype)
        self._text_bias = self._text_bias.to(dtype)

    def parameters(self) -> list[torch.Tensor]:
        return [self._proj, self._bias, self._vocab, self._text_proj, self._text_bias]

    def parameter_fingerprint(self) -> str:
        h = hashlib.sha256()
        for t in self.parameters():
            h.update(t.contiguous().numpy().tobytes())
        return h.hexdigest()

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_size
        cols = F.unfold(images, kernel_size=p, stride=p)  # B x (C p p) x N
        return cols.transpose(1, 2)

    def layer_patch_features(self, images: torch.Tensor, layer: int) -> torch.Tensor:
        """B x N x D patch map of one (1-based) layer."""
        self._check_images(images)
        x = self._patchify(images.to(self.dtype))
        return x @ self._proj[layer - 1] + self._bias[layer - 1]

    def encode_images(self, images: torch.Tensor) -> list[VisualFeatures]:
        self._check_images(images)
        images = images.to(self.dtype)
        layers = self.config.patch_layers
        z = torch.stack([self.layer_patch_features(images, ell) for ell in layers]).mean(0)
        last = self.config.num_layers - 1
        p = self.config.patch_size
        mean_pixel = images.mean(dim=(2, 3))  # B x C
        flat_mean = mean_pixel.repeat_interleave(p * p, dim=1)
        g_o = flat_mean @ self._proj[last] + self._bias[last]
        g_s = z.mean(dim=1)
        grid = self.config.grid_shape
        return [VisualFeatures(z[i], g_o[i], g_s[i], grid) for i in range(z.shape[0])]

    def lookup_word_embedding(self, word: str) -> torch.Tensor:
        rows = [self._vocab[_stable_hash(w) % self.vocab_size] for w in split_words(word)]
        if not rows:
            # punctuation-only strings still map to a deterministic row
            rows = [self._vocab[_stable_hash(word) % self.vocab_size]]
        return torch.stack(rows)

    def _encode_rows(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens.to(self.dtype).mean(dim=0) @ self._text_proj + self._text_bias


class PluginBackbone(VisionLanguageEncoder):
    """Adapter around an externally supplied pretrained model.

    ``config.factory`` names a ``module:callable`` that receives the config and
    returns a model object providing::

        encode_image_layers(images, layers) -> (g_o [B,D], g_s [B,D], {layer: [B,N,D]})
        tokenize(text) -> list[int]
        token_embedding(ids: LongTensor) -> [k, D_t]
        encode_token_embeddings(rows: [L, D_t]) -> [D]

    Weights are never bundled; ``config.weights_path`` must exist.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        if not config.weights_path:
            raise AssetError(f"backbone {config.name!r} needs weights_path")
        if not Path(config.weights_path).exists():
            raise AssetError(f"backbone weights not found: {config.weights_path}")
        if not config.factory:
            raise AssetError(f"backbone {config.name!r} needs a factory 'module:callable'")
        module_name, _, attr = config.factory.partition(":")
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise AssetError(f"cannot import backbone factory {config.factory!r}: {exc}") from exc
        self.model = factory(config)
        self._fingerprint = self._compute_fingerprint()

    def _compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        params = getattr(self.model, "parameters", None)
        if callable(params):
            for t in params():
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def parameter_fingerprint(self) -> str:
        return self._compute_fingerprint()

    def encode_images(self, images: torch.Tensor) -> list[VisualFeatures]:
        self._check_images(images)
        with torch.no_grad():
            g_o, g_s, per_layer = self.model.encode_image_layers(images, list(self.config.patch_layers))
        missing = [ell for ell in self.config.patch_layers if ell not in per_layer]
        if missing:
            raise InputError(f"backbone returned no patch features for layers {missing}")
        z = torch.stack([per_layer[ell] for ell in self.config.patch_layers]).mean(0)
        grid = self.config.grid_shape
        return [VisualFeatures(z[i], g_o[i], g_s[i], grid) for i in range(z.shape[0])]

    def lookup_word_embedding(self, word: str) -> torch.Tensor:
        ids = self.model.tokenize(word)
        if not ids:
            raise InputError(f"word {word!r} produced no tokens")
        return self.model.token_embedding(torch.as_tensor(ids, dtype=torch.long))

    def tokenize(self, text: str) -> TokenEmbeddingSequence:
        ids = self.model.tokenize(text)
        if not ids:
            raise InputError(f"prompt {text!r} contains no tokens")
        return TokenEmbeddingSequence(self.model.token_embedding(torch.as_tensor(ids, dtype=torch.long)))

    def _encode_rows(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.model.encode_token_embeddings(tokens)


def build_encoder(config: BackboneConfig) -> VisionLanguageEncoder:
    if config.name == "mock":
        return MockBackbone(config)
    return PluginBackbone(config)
