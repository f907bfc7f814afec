"""Fixed detection prompts and learnable localization prompts.

The two prompt families never read each other: fixed prompts feed the
image-level prototypes, learnable tokens feed the patch-level prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .encoder import LEARNED, TokenEmbeddingSequence, VisionLanguageEncoder, l2_normalize
from .errors import FormatError, ParameterError

FIXED = "fixed"
LEARNABLE = "learnable"

GENERIC_TEMPLATES = (
    "a cropped photo of a {}",
    "a close-up photo of a {}",
    "a photo of a {} for visual inspection",
    "a photo of the {}",
    "a bright photo of a {}",
    "a dark photo of a {}",
    "a blurry photo of a {}",
)

MEDICAL_TEMPLATES = (
    "a medical image of a {}",
    "a diagnostic scan of a {}",
)


def _check_slot(text: str, what: str) -> None:
    if not isinstance(text, str) or text.count("{}") != 1:
        raise FormatError(f"{what} {text!r} must contain exactly one '{{}}' slot")


@dataclass(frozen=True)
class StateLexicon:
    normal_states: tuple[str, ...]
    abnormal_states: tuple[str, ...]
    domain_tag: str = "generic"

    def __post_init__(self):
        object.__setattr__(self, "normal_states", tuple(self.normal_states))
        object.__setattr__(self, "abnormal_states", tuple(self.abnormal_states))
        if not self.normal_states or not self.abnormal_states:
            raise FormatError("state lexicon needs at least one normal and one abnormal phrase")
        for phrase in self.normal_states + self.abnormal_states:
            _check_slot(phrase, "state")


GENERIC_LEXICON = StateLexicon(
    normal_states=("flawless {}", "perfect {}", "{} without defect", "{} without damage"),
    abnormal_states=("damaged {}", "broken {}", "{} with defect", "{} with flaw"),
    domain_tag="generic",
)

MEDICAL_LEXICON = StateLexicon(
    normal_states=(
        "normal {}",
        "intact {}",
        "{} with uniform structure",
        "{} showing clear tissue",
        "{} with normal anatomy",
        "{} showing no distortion",
        "{} with symmetric appearance",
        "{} looking normal",
        "{} with even texture",
        "{} with regular shape",
    ),
    abnormal_states=(
        "abnormal {}",
        "{} with spot",
        "{} with abnormality",
        "diseased {}",
        "{} showing distortion",
        "{} with irregular area",
        "{} with irregular shape",
        "{} with uneven texture",
    ),
    domain_tag="medical",
)

LEXICONS = {"generic": GENERIC_LEXICON, "medical": MEDICAL_LEXICON}
TEMPLATES = {"generic": GENERIC_TEMPLATES, "medical": MEDICAL_TEMPLATES}


@dataclass(frozen=True)
class FixedPromptSet:
    normal_prompts: tuple[str, ...]
    abnormal_prompts: tuple[str, ...]
    class_name: str


def compose_fixed_prompts(
    class_name: str, templates: Sequence[str], lexicon: StateLexicon
) -> FixedPromptSet:
    """Instantiate every template around every state phrase for one class.

    Order is templates outer, states inner.
    """
    templates = tuple(templates)
    if not templates:
        raise FormatError("at least one template is required")
    for t in templates:
        _check_slot(t, "template")
    for s in lexicon.normal_states + lexicon.abnormal_states:
        _check_slot(s, "state")

    def fill(states):
        return tuple(t.format(s.format(class_name)) for t in templates for s in states)

    normal = fill(lexicon.normal_states)
    abnormal = fill(lexicon.abnormal_states)
    overlap = set(normal) & set(abnormal)
    if overlap:
        raise FormatError(f"normal and abnormal prompts overlap: {sorted(overlap)}")
    return FixedPromptSet(normal, abnormal, class_name)


@dataclass
class TextPrototypes:
    g_n: torch.Tensor
    g_a: torch.Tensor
    source: str = FIXED

    def swapped(self) -> "TextPrototypes":
        return TextPrototypes(self.g_a, self.g_n, self.source)

    def stacked(self) -> torch.Tensor:
        """2 x D matrix with the normal row first."""
        return torch.stack([self.g_n, self.g_a])


def _prototype(encoder: VisionLanguageEncoder, prompts: Sequence[str]) -> torch.Tensor:
    if not prompts:
        raise ParameterError("cannot build a prototype from an empty prompt subset")
    embs = torch.stack([encoder.encode_text(p).vector for p in prompts])
    return l2_normalize(embs.mean(dim=0))


def build_detection_prototypes(prompts: FixedPromptSet, encoder: VisionLanguageEncoder) -> TextPrototypes:
    with torch.no_grad():
        g_n = _prototype(encoder, prompts.normal_prompts)
        g_a = _prototype(encoder, prompts.abnormal_prompts)
    return TextPrototypes(g_n, g_a, FIXED)


def detection_prototypes(
    encoder: VisionLanguageEncoder,
    class_name: str,
    lexicon: str | StateLexicon = "generic",
    templates: Sequence[str] | None = None,
) -> TextPrototypes:
    """Shortcut: compose and encode the fixed prompts for ``class_name``."""
    if isinstance(lexicon, str):
        if templates is None:
            templates = TEMPLATES[lexicon]
        lexicon = LEXICONS[lexicon]
    elif templates is None:
        templates = TEMPLATES.get(lexicon.domain_tag, GENERIC_TEMPLATES)
    return build_detection_prototypes(compose_fixed_prompts(class_name, templates, lexicon), encoder)


CHECKPOINT_VERSION = 1
NORMAL_WORDS = ("object",)
ABNORMAL_WORDS = ("damaged", "object")


@dataclass
class LearnablePromptState:
    T_n: torch.Tensor  # E x D_t
    T_a: torch.Tensor  # E x D_t
    seed: int = 111
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.T_n.ndim != 2 or self.T_n.shape != self.T_a.shape:
            raise ParameterError(
                f"T_n and T_a must be equal-shape E x D_t matrices, got {tuple(self.T_n.shape)} and {tuple(self.T_a.shape)}"
            )
        if self.T_n.shape[0] < 1:
            raise ParameterError("E must be >= 1")
        if not (torch.isfinite(self.T_n).all() and torch.isfinite(self.T_a).all()):
            raise ParameterError("learnable prompt tokens contain non-finite values")

    @property
    def E(self) -> int:
        return self.T_n.shape[0]

    @property
    def D_t(self) -> int:
        return self.T_n.shape[1]

    def snapshot(self) -> "LearnablePromptState":
        return LearnablePromptState(
            self.T_n.detach().clone(), self.T_a.detach().clone(), self.seed, self.version
        )


def init_learnable_prompts(E: int = 8, D_t: int = 1024, seed: int = 111, std: float = 0.02) -> LearnablePromptState:
    if E < 1 or D_t < 1:
        raise ParameterError(f"E and D_t must be >= 1, got E={E}, D_t={D_t}")
    g = torch.Generator().manual_seed(seed)
    T_n = std * torch.randn(E, D_t, generator=g)
    T_a = std * torch.randn(E, D_t, generator=g)
    return LearnablePromptState(T_n, T_a, seed)


def localization_sequences(
    state: LearnablePromptState, encoder: VisionLanguageEncoder
) -> tuple[TokenEmbeddingSequence, TokenEmbeddingSequence]:
    """Token rows for ``[T_n, object]`` and ``[T_a, damaged, object]``."""

    def words(ws):
        return [TokenEmbeddingSequence(encoder.lookup_word_embedding(w)) for w in ws]

    learned_n = TokenEmbeddingSequence(state.T_n, (LEARNED,) * state.E)
    learned_a = TokenEmbeddingSequence(state.T_a, (LEARNED,) * state.E)
    seq_n = TokenEmbeddingSequence.concat([learned_n, *words(NORMAL_WORDS)])
    seq_a = TokenEmbeddingSequence.concat([learned_a, *words(ABNORMAL_WORDS)])
    return seq_n, seq_a


def build_localization_prototypes(
    state: LearnablePromptState, encoder: VisionLanguageEncoder
) -> TextPrototypes:
    """Differentiable w.r.t. ``state.T_n`` and ``state.T_a`` when they require grad."""
    seq_n, seq_a = localization_sequences(state, encoder)
    g_n = encoder.encode_token_sequence(seq_n).vector
    g_a = encoder.encode_token_sequence(seq_a).vector
    return TextPrototypes(g_n, g_a, LEARNABLE)
