"""Gradient-based per-token saliency.

A token's saliency is the L2 norm of the gradient of the classification
loss (cross-entropy against the gold label) with respect to that token's
input embedding, taken per position rather than per embedding-table row.
An independent central finite-difference oracle cross-checks the analytic
path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PAD_ID, LabeledExample
from .model import SoftLabel, ToyTextClassifier, backward, forward, loss_with_embeddings


@dataclass(frozen=True)
class SaliencyMap:
    """Non-negative scores aligned 1:1 with the positions of one sentence."""

    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores)
        if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr < 0)):
            raise ValueError("saliency scores must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.scores)


def compute_saliency(
    model: ToyTextClassifier, example: LabeledExample, label: int | None = None
) -> tuple[SaliencyMap, ...]:
    """Analytic saliency, one map per sentence.

    Runs forward with the hard gold label, backward, and takes the L2 norm of
    each position's embedding gradient. Special-token and PAD positions keep
    their true gradient norms (PAD positions are exactly zero since they are
    excluded from pooling); span selection masks them out downstream. The
    model is read-only here: the gradient is used only for scoring.
    """
    if label is not None and label != example.label:
        example = LabeledExample(example.first, example.second, label)
    trace = forward(model, example)
    _, emb_grads = backward(model, trace)
    return tuple(
        SaliencyMap(scores=tuple(float(v) for v in np.linalg.norm(de, axis=1)))
        for de in emb_grads
    )


def saliency_fd_oracle(
    model: ToyTextClassifier,
    example: LabeledExample,
    label: int | None = None,
    step: float = 1e-3,
) -> tuple[SaliencyMap, ...]:
    """Central finite-difference saliency, perturbing one embedding
    coordinate of one position at a time (O(L*d) loss evaluations).
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    y = example.label if label is None else label
    soft = SoftLabel(y, y, 0.0)
    sents = example.sentences()
    embs = [model.emb[s.ids_array()] for s in sents]
    masks = [s.ids_array() != PAD_ID for s in sents]
    maps = []
    for k, base in enumerate(embs):
        grad = np.zeros_like(base)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                orig = base[i, j]
                base[i, j] = orig + step
                up = loss_with_embeddings(model, embs, masks, soft)
                base[i, j] = orig - step
                down = loss_with_embeddings(model, embs, masks, soft)
                base[i, j] = orig
                grad[i, j] = (up - down) / (2.0 * step)
        maps.append(SaliencyMap(scores=tuple(float(v) for v in np.linalg.norm(grad, axis=1))))
    return tuple(maps)
