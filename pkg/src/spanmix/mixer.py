"""Input-level mixing of token sequences.

The main operation replaces the least salient span of one sentence with the
most salient span (same length) of another, then sets the label-mixing ratio
from actual token counts. Ablations drop the saliency guidance (random
spans) and the span constraint (position-preserving random tokens); random
UNK replacement is the no-label-mixing control. The Beta ratio sampler
serves the interpolation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PAD_ID, UNK_ID, LabeledExample, TokenSequence
from .model import SoftLabel
from .saliency import SaliencyMap


@dataclass(frozen=True)
class Span:
    """Contiguous run of non-special positions: [start, start + length)."""

    start: int
    length: int

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("span length must be at least 1")

    def positions(self) -> tuple[int, ...]:
        return tuple(range(self.start, self.start + self.length))


@dataclass(frozen=True)
class SentenceProvenance:
    """Which positions of the base sentence were overwritten, and by what."""

    replaced: tuple[int, ...]  # positions in the base (and mixed) sentence
    source: tuple[int, ...]    # positions in the donor sentence; empty for UNK


@dataclass(frozen=True)
class MixResult:
    """A mixed example: sequences, soft label, and span provenance."""

    mixed: tuple[TokenSequence, ...]
    soft_label: SoftLabel
    provenance: tuple[SentenceProvenance, ...]
    lam: float

    @property
    def is_paired(self) -> bool:
        return len(self.mixed) == 2


@dataclass(frozen=True)
class MixConfig:
    """Mixing hyperparameters shared across variants."""

    lambda0: float = 0.1
    variant: str = "ssmix"
    alpha: float = 0.2
    mix_layer: str = "hidden"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.lambda0 < 1.0:
            raise ValueError("lambda0 must lie strictly between 0 and 1")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


VARIANTS = (
    "none",
    "ssmix",
    "random_span",
    "random_token",
    "unk_replace",
    "embedmix",
    "hiddenmix",
)
INPUT_VARIANTS = ("ssmix", "random_span", "random_token", "unk_replace")
INTERP_VARIANTS = ("embedmix", "hiddenmix")


def span_length(lambda0: float, len_a: int, len_b: int) -> int:
    """Span length: floor of lambda0 * len_a, capped by len_b, at least 1."""
    if len_a < 1 or len_b < 1:
        raise ValueError("content lengths must be at least 1")
    return max(min(int(np.floor(lambda0 * len_a)), len_b), 1)


def _content_block(special_mask: tuple[bool, ...]) -> tuple[int, int]:
    # content positions must form one contiguous block ([CLS] ... [SEP] layout)
    positions = [i for i, m in enumerate(special_mask) if not m]
    if not positions:
        raise ValueError("sequence has no content positions")
    lo, hi = positions[0], positions[-1]
    if hi - lo + 1 != len(positions):
        raise ValueError("content positions are not contiguous")
    return lo, len(positions)


def select_span(sal: SaliencyMap, special_mask: tuple[bool, ...], length: int, mode: str) -> Span:
    """Window of `length` content positions with extreme saliency sum.

    mode "least" minimizes, "most" maximizes; ties go to the smallest start.
    """
    if mode not in ("least", "most"):
        raise ValueError(f"unknown mode {mode!r}; expected least or most")
    if len(sal) != len(special_mask):
        raise ValueError("saliency map does not align with the sequence")
    lo, content = _content_block(special_mask)
    if length > content:
        raise ValueError(f"span length {length} exceeds content length {content}")
    # fresh sum per window: bit-identical to exhaustive enumeration, so the
    # leftmost tie-break is exact even for equal scores
    best_start = lo
    best_sum = sum(sal.scores[lo : lo + length])
    for start in range(lo + 1, lo + content - length + 1):
        window = sum(sal.scores[start : start + length])
        if (mode == "least" and window < best_sum) or (mode == "most" and window > best_sum):
            best_sum = window
            best_start = start
    return Span(start=best_start, length=length)


def _splice(base: TokenSequence, donor: TokenSequence, span_a: Span, span_b: Span) -> TokenSequence:
    ids = list(base.ids)
    for offset in range(span_a.length):
        ids[span_a.start + offset] = donor.ids[span_b.start + offset]
    return TokenSequence(ids=tuple(ids), special_mask=base.special_mask)


def _mix_sentence_spans(
    x_a: TokenSequence, x_b: TokenSequence, span_a: Span, span_b: Span
) -> tuple[TokenSequence, SentenceProvenance]:
    mixed = _splice(x_a, x_b, span_a, span_b)
    prov = SentenceProvenance(replaced=span_a.positions(), source=span_b.positions())
    return mixed, prov


def ssmix(
    x_a: TokenSequence,
    x_b: TokenSequence,
    sal_a: SaliencyMap,
    sal_b: SaliencyMap,
    y_a: int,
    y_b: int,
    lambda0: float,
) -> MixResult:
    """Replace the least salient span of x_a with the most salient span of
    x_b (same length); lambda counts replaced tokens. Not symmetric in
    (a, b).
    """
    l = span_length(lambda0, x_a.content_length, x_b.content_length)
    span_a = select_span(sal_a, x_a.special_mask, l, "least")
    span_b = select_span(sal_b, x_b.special_mask, l, "most")
    mixed, prov = _mix_sentence_spans(x_a, x_b, span_a, span_b)
    lam = l / mixed.content_length
    return MixResult(
        mixed=(mixed,),
        soft_label=SoftLabel(y_a, y_b, lam),
        provenance=(prov,),
        lam=lam,
    )


def ssmix_paired(
    x_a: tuple[TokenSequence, TokenSequence],
    x_b: tuple[TokenSequence, TokenSequence],
    sal_a: tuple[SaliencyMap, SaliencyMap],
    sal_b: tuple[SaliencyMap, SaliencyMap],
    y_a: int,
    y_b: int,
    lambda0: float,
) -> MixResult:
    """Mix sentence pairs pairwise; lambda aggregates both replacements."""
    mixed_sents: list[TokenSequence] = []
    provs: list[SentenceProvenance] = []
    replaced = 0
    for s_a, s_b, m_a, m_b in zip(x_a, x_b, sal_a, sal_b):
        l = span_length(lambda0, s_a.content_length, s_b.content_length)
        span_a = select_span(m_a, s_a.special_mask, l, "least")
        span_b = select_span(m_b, s_b.special_mask, l, "most")
        mixed, prov = _mix_sentence_spans(s_a, s_b, span_a, span_b)
        mixed_sents.append(mixed)
        provs.append(prov)
        replaced += l
    lam = replaced / sum(s.content_length for s in mixed_sents)
    return MixResult(
        mixed=tuple(mixed_sents),
        soft_label=SoftLabel(y_a, y_b, lam),
        provenance=tuple(provs),
        lam=lam,
    )


def _random_span(rng: np.random.Generator, seq: TokenSequence, length: int) -> Span:
    lo, content = _content_block(seq.special_mask)
    if length > content:
        raise ValueError(f"span length {length} exceeds content length {content}")
    start = lo + int(rng.integers(content - length + 1))
    return Span(start=start, length=length)


def random_span_mix(
    x_a: TokenSequence,
    x_b: TokenSequence,
    y_a: int,
    y_b: int,
    lambda0: float,
    rng: np.random.Generator,
) -> MixResult:
    """Span mix with both spans drawn uniformly (saliency ablation)."""
    l = span_length(lambda0, x_a.content_length, x_b.content_length)
    span_a = _random_span(rng, x_a, l)
    span_b = _random_span(rng, x_b, l)
    mixed, prov = _mix_sentence_spans(x_a, x_b, span_a, span_b)
    lam = l / mixed.content_length
    return MixResult(
        mixed=(mixed,),
        soft_label=SoftLabel(y_a, y_b, lam),
        provenance=(prov,),
        lam=lam,
    )


def random_token_mix(
    x_a: TokenSequence,
    x_b: TokenSequence,
    y_a: int,
    y_b: int,
    lambda0: float,
    rng: np.random.Generator,
) -> MixResult:
    """Position-preserving token replacement (saliency and span ablation).

    Replacement positions are drawn uniformly without replacement from the
    content positions x_a shares index-wise with x_b; token i of the mix is
    token i of x_b at the chosen positions.
    """
    l = span_length(lambda0, x_a.content_length, x_b.content_length)
    shared = [
        i
        for i in x_a.content_positions()
        if i < len(x_b.ids) and not x_b.special_mask[i]
    ]
    if not shared:
        raise ValueError("no shared content positions to replace")
    if l > len(shared):
        raise ValueError(f"replacement count {l} exceeds {len(shared)} shared positions")
    picks = sorted(int(i) for i in rng.choice(len(shared), size=l, replace=False))
    positions = tuple(shared[i] for i in picks)
    ids = list(x_a.ids)
    for i in positions:
        ids[i] = x_b.ids[i]
    mixed = TokenSequence(ids=tuple(ids), special_mask=x_a.special_mask)
    lam = l / mixed.content_length
    return MixResult(
        mixed=(mixed,),
        soft_label=SoftLabel(y_a, y_b, lam),
        provenance=(SentenceProvenance(replaced=positions, source=positions),),
        lam=lam,
    )


def unk_replace(
    x_a: TokenSequence, y_a: int, lambda0: float, rng: np.random.Generator
) -> MixResult:
    """Word dropout: replace random content tokens with UNK, keep the label.

    The replacement count reuses the span-length clamp with the donor side
    absent; the label is purely y_a (lambda 0).
    """
    content = x_a.content_positions()
    k = max(min(int(np.floor(lambda0 * len(content))), len(content)), 1)
    picks = sorted(int(i) for i in rng.choice(len(content), size=k, replace=False))
    positions = tuple(content[i] for i in picks)
    ids = list(x_a.ids)
    for i in positions:
        ids[i] = UNK_ID
    mixed = TokenSequence(ids=tuple(ids), special_mask=x_a.special_mask)
    return MixResult(
        mixed=(mixed,),
        soft_label=SoftLabel(y_a, y_a, 0.0),
        provenance=(SentenceProvenance(replaced=positions, source=()),),
        lam=0.0,
    )


def sample_interp_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Interpolation ratio: lam' ~ Beta(alpha, alpha), folded to [0.5, 1)."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    lam = float(rng.beta(alpha, alpha))
    return max(lam, 1.0 - lam)


def mix_examples(
    ex_a: LabeledExample,
    ex_b: LabeledExample,
    cfg: MixConfig,
    rng: np.random.Generator,
    sal_a: tuple[SaliencyMap, ...] | None = None,
    sal_b: tuple[SaliencyMap, ...] | None = None,
) -> MixResult:
    """Apply an input-level variant to a (single or paired) example pair.

    Paired inputs are mixed sentence by sentence with the aggregate lambda
    over both replacements; every variant keeps x_a's frame (length and
    special tokens).
    """
    if cfg.variant not in INPUT_VARIANTS:
        raise ValueError(f"{cfg.variant!r} is not an input-level variant")
    if ex_a.is_paired != ex_b.is_paired:
        raise ValueError("cannot mix a single example with a paired one")
    if cfg.variant == "ssmix":
        if sal_a is None or sal_b is None:
            raise ValueError("ssmix requires saliency maps for both examples")
        if ex_a.is_paired:
            return ssmix_paired(
                ex_a.sentences(), ex_b.sentences(), sal_a, sal_b,
                ex_a.label, ex_b.label, cfg.lambda0,
            )
        return ssmix(
            ex_a.first, ex_b.first, sal_a[0], sal_b[0],
            ex_a.label, ex_b.label, cfg.lambda0,
        )

    mixed_sents: list[TokenSequence] = []
    provs: list[SentenceProvenance] = []
    replaced = 0
    for s_a, s_b in zip(ex_a.sentences(), ex_b.sentences()):
        if cfg.variant == "random_span":
            part = random_span_mix(s_a, s_b, ex_a.label, ex_b.label, cfg.lambda0, rng)
        elif cfg.variant == "random_token":
            part = random_token_mix(s_a, s_b, ex_a.label, ex_b.label, cfg.lambda0, rng)
        else:
            part = unk_replace(s_a, ex_a.label, cfg.lambda0, rng)
        mixed_sents.append(part.mixed[0])
        provs.append(part.provenance[0])
        replaced += len(part.provenance[0].replaced)
    if cfg.variant == "unk_replace":
        lam = 0.0
    else:
        lam = replaced / sum(s.content_length for s in mixed_sents)
    return MixResult(
        mixed=tuple(mixed_sents),
        soft_label=SoftLabel(ex_a.label, ex_b.label, lam),
        provenance=tuple(provs),
        lam=lam,
    )
