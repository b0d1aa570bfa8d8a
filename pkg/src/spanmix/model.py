"""A small hand-differentiated text classifier.

Architecture: embedding lookup, a per-token dense layer with tanh, mean
pooling over non-PAD positions (CLS/SEP carry embeddings like any token and
are pooled too), and a linear output head. Paired inputs pool each sentence
separately and concatenate the two pooled vectors.

Everything runs in float64. backward() returns exact gradients both for the
parameters and for each input position's embedding vector; the latter feeds
the saliency computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD_ID, DataError, LabeledExample, TokenSequence

CHECKPOINT_FORMAT_VERSION = 1
PARAM_NAMES = ("emb", "w1", "b1", "w2", "b2")


class NumericError(Exception):
    """Non-finite values where finite numbers are required."""


@dataclass(frozen=True)
class SoftLabel:
    """Convex label pair: weight `lam` on y_b, (1 - lam) on y_a."""

    y_a: int
    y_b: int
    lam: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _label_weights(soft: SoftLabel, weighting: str) -> tuple[float, float]:
    # "label" puts (1 - lam) on y_a; "algorithm1" transposes the weights.
    if weighting == "label":
        return 1.0 - soft.lam, soft.lam
    if weighting == "algorithm1":
        return soft.lam, 1.0 - soft.lam
    raise ValueError(f"unknown loss weighting {weighting!r}")


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy, computed via a stable log-sum-exp."""
    m = float(np.max(logits))
    lse = m + float(np.log(np.sum(np.exp(logits - m))))
    return lse - float(logits[label])


def mixup_loss(logits: np.ndarray, soft: SoftLabel, weighting: str = "label") -> float:
    """Weighted cross-entropy against the two source labels.

    Equals CE against the soft target (1-lam)*onehot(y_a) + lam*onehot(y_b)
    under the default weighting, and is linear in lam for fixed logits.
    """
    wa, wb = _label_weights(soft, weighting)
    return wa * cross_entropy(logits, soft.y_a) + wb * cross_entropy(logits, soft.y_b)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - np.max(logits))
    return z / z.sum()


class ToyTextClassifier:
    """Embedding -> per-token dense+tanh -> mean pool -> linear head.

    The PAD embedding row is all-zero and PAD positions are excluded from
    pooling. `paired` models concatenate two pooled sentence vectors, so the
    output head takes 2h inputs.
    """

    def __init__(
        self,
        emb: np.ndarray,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: np.ndarray,
        paired: bool = False,
        nonlinearity: str = "tanh",
    ) -> None:
        if nonlinearity != "tanh":
            raise ValueError(f"unsupported nonlinearity {nonlinearity!r}")
        # always copy: the constructor zeroes the PAD row and optimizer steps
        # mutate parameters in place
        self.emb = np.array(emb, dtype=np.float64)
        self.w1 = np.array(w1, dtype=np.float64)
        self.b1 = np.array(b1, dtype=np.float64)
        self.w2 = np.array(w2, dtype=np.float64)
        self.b2 = np.array(b2, dtype=np.float64)
        self.paired = paired
        self.nonlinearity = nonlinearity
        pooled_dim = 2 * self.hidden_dim if paired else self.hidden_dim
        if self.w1.shape != (self.embed_dim, self.hidden_dim):
            raise ValueError("w1 shape inconsistent with embedding dim")
        if self.w2.shape[0] != pooled_dim or self.b2.shape != (self.num_classes,):
            raise ValueError("output head shape inconsistent with pooling")
        for arr in self.params().values():
            if not np.all(np.isfinite(arr)):
                raise NumericError("model parameters must be finite")
        self.emb[PAD_ID, :] = 0.0

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "ToyTextClassifier":
        return ToyTextClassifier(
            self.emb.copy(),
            self.w1.copy(),
            self.b1.copy(),
            self.w2.copy(),
            self.b2.copy(),
            paired=self.paired,
            nonlinearity=self.nonlinearity,
        )

    @classmethod
    def init(
        cls,
        vocab_size: int,
        embed_dim: int = 32,
        hidden_dim: int = 64,
        num_classes: int = 2,
        paired: bool = False,
        seed: int = 0,
    ) -> "ToyTextClassifier":
        rng = np.random.default_rng(seed)
        pooled_dim = 2 * hidden_dim if paired else hidden_dim
        emb = rng.normal(0.0, 0.1, size=(vocab_size, embed_dim))
        emb[PAD_ID, :] = 0.0
        w1 = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, hidden_dim))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(pooled_dim), size=(pooled_dim, num_classes))
        return cls(emb, w1, np.zeros(hidden_dim), w2, np.zeros(num_classes), paired=paired)


@dataclass
class SentenceTrace:
    """Per-sentence intermediates retained for the exact backward pass."""

    ids: np.ndarray                 # (L,) primary (A-side) token ids
    pool_mask: np.ndarray           # (L,) bool, True = position enters the mean pool
    emb: np.ndarray                 # (L,d) embeddings feeding the dense layer
    hid: np.ndarray                 # (L,h) activations (A branch under hidden mixing)
    pooled: np.ndarray              # (h,)
    ids_b: np.ndarray | None = None
    emb_b: np.ndarray | None = None
    hid_b: np.ndarray | None = None
    lam: float | None = None        # interpolation weight of the A side


@dataclass
class ForwardTrace:
    """Result of one forward pass, sufficient for exact backward."""

    mode: str                       # plain | embedmix | hiddenmix
    sentences: list[SentenceTrace]
    pooled: np.ndarray
    logits: np.ndarray
    loss: float
    soft_label: SoftLabel
    weighting: str


@dataclass
class ParamGrads:
    """Gradients of the scalar loss for every model parameter."""

    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros(cls, model: ToyTextClassifier) -> "ParamGrads":
        return cls(*(np.zeros_like(arr) for arr in model.params().values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> None:
        for name, arr in self.arrays().items():
            arr += scale * other.arrays()[name]


def _check_ids(model: ToyTextClassifier, seq: TokenSequence) -> np.ndarray:
    ids = seq.ids_array()
    if ids.size and int(ids.max()) >= model.vocab_size:
        raise DataError(
            f"token id {int(ids.max())} out of range for vocab size {model.vocab_size}"
        )
    return ids


def _sentence_forward(model: ToyTextClassifier, ids: np.ndarray) -> SentenceTrace:
    mask = ids != PAD_ID
    e = model.emb[ids]
    h = np.tanh(e @ model.w1 + model.b1)
    n = int(mask.sum())
    if n == 0:
        raise DataError("sentence has no non-PAD positions to pool")
    pooled = h[mask].sum(axis=0) / n
    return SentenceTrace(ids=ids, pool_mask=mask, emb=e, hid=h, pooled=pooled)


def _head(model: ToyTextClassifier, traces: list[SentenceTrace]) -> tuple[np.ndarray, np.ndarray]:
    pooled = traces[0].pooled if len(traces) == 1 else np.concatenate(
        [t.pooled for t in traces]
    )
    return pooled, pooled @ model.w2 + model.b2


def _resolve(example) -> tuple[tuple[TokenSequence, ...], SoftLabel]:
    # LabeledExample carries a hard label; mixed results carry a SoftLabel.
    if isinstance(example, LabeledExample):
        return example.sentences(), SoftLabel(example.label, example.label, 0.0)
    return tuple(example.mixed), example.soft_label


def forward(model: ToyTextClassifier, example, weighting: str = "label") -> ForwardTrace:
    """Run the classifier on a labeled or mixed example.

    The loss is the weighted cross-entropy of mixup_loss; a hard-labeled
    example is the lam = 0 special case.
    """
    sents, soft = _resolve(example)
    if (len(sents) == 2) != model.paired:
        raise DataError("example paired-ness does not match the model head")
    traces = [_sentence_forward(model, _check_ids(model, s)) for s in sents]
    pooled, logits = _head(model, traces)
    loss = mixup_loss(logits, soft, weighting)
    return ForwardTrace(
        mode="plain",
        sentences=traces,
        pooled=pooled,
        logits=logits,
        loss=loss,
        soft_label=soft,
        weighting=weighting,
    )


def _pad_pair(a: TokenSequence, b: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    ids_a, ids_b = a.ids_array(), b.ids_array()
    length = max(ids_a.size, ids_b.size)
    if ids_a.size != ids_b.size:
        pa = np.full(length, PAD_ID, dtype=np.int64)
        pa[: ids_a.size] = ids_a
        pb = np.full(length, PAD_ID, dtype=np.int64)
        pb[: ids_b.size] = ids_b
        ids_a, ids_b = pa, pb
    if ids_a.size != ids_b.size:
        raise DataError("sequences differ in length after padding")
    return ids_a, ids_b


def _interp_soft_label(ex_a: LabeledExample, ex_b: LabeledExample, lam: float) -> SoftLabel:
    # lam is the weight of the first example, so its label carries weight lam.
    return SoftLabel(ex_a.label, ex_b.label, 1.0 - lam)


def forward_embedmix(
    model: ToyTextClassifier,
    ex_a: LabeledExample,
    ex_b: LabeledExample,
    lam: float,
    weighting: str = "label",
) -> ForwardTrace:
    """Interpolate the two examples' embeddings position-wise.

    Shorter sentences are padded with PAD (zero embedding); a position is
    pooled if it is non-PAD in either source. lam is the weight of the first
    example both in the interpolation and in the soft label.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {lam}")
    if ex_a.is_paired != ex_b.is_paired or ex_a.is_paired != model.paired:
        raise DataError("both examples and the model must agree on paired-ness")
    traces = []
    for sa, sb in zip(ex_a.sentences(), ex_b.sentences()):
        _check_ids(model, sa), _check_ids(model, sb)
        ids_a, ids_b = _pad_pair(sa, sb)
        mask = (ids_a != PAD_ID) | (ids_b != PAD_ID)
        e = lam * model.emb[ids_a] + (1.0 - lam) * model.emb[ids_b]
        h = np.tanh(e @ model.w1 + model.b1)
        pooled = h[mask].sum(axis=0) / int(mask.sum())
        traces.append(
            SentenceTrace(
                ids=ids_a, pool_mask=mask, emb=e, hid=h, pooled=pooled,
                ids_b=ids_b, lam=lam,
            )
        )
    soft = _interp_soft_label(ex_a, ex_b, lam)
    pooled, logits = _head(model, traces)
    loss = mixup_loss(logits, soft, weighting)
    return ForwardTrace(
        mode="embedmix",
        sentences=traces,
        pooled=pooled,
        logits=logits,
        loss=loss,
        soft_label=soft,
        weighting=weighting,
    )


def forward_hiddenmix(
    model: ToyTextClassifier,
    ex_a: LabeledExample,
    ex_b: LabeledExample,
    lam: float,
    layer: str = "hidden",
    weighting: str = "label",
) -> ForwardTrace:
    """Interpolate per-token hidden activations (or embeddings, layer="embed")."""
    if layer == "embed":
        return forward_embedmix(model, ex_a, ex_b, lam, weighting)
    if layer != "hidden":
        raise ValueError(f"unknown interpolation layer {layer!r}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {lam}")
    if ex_a.is_paired != ex_b.is_paired or ex_a.is_paired != model.paired:
        raise DataError("both examples and the model must agree on paired-ness")
    traces = []
    for sa, sb in zip(ex_a.sentences(), ex_b.sentences()):
        _check_ids(model, sa), _check_ids(model, sb)
        ids_a, ids_b = _pad_pair(sa, sb)
        mask = (ids_a != PAD_ID) | (ids_b != PAD_ID)
        e_a, e_b = model.emb[ids_a], model.emb[ids_b]
        h_a = np.tanh(e_a @ model.w1 + model.b1)
        h_b = np.tanh(e_b @ model.w1 + model.b1)
        h_mix = lam * h_a + (1.0 - lam) * h_b
        pooled = h_mix[mask].sum(axis=0) / int(mask.sum())
        traces.append(
            SentenceTrace(
                ids=ids_a, pool_mask=mask, emb=e_a, hid=h_a, pooled=pooled,
                ids_b=ids_b, emb_b=e_b, hid_b=h_b, lam=lam,
            )
        )
    soft = _interp_soft_label(ex_a, ex_b, lam)
    pooled, logits = _head(model, traces)
    loss = mixup_loss(logits, soft, weighting)
    return ForwardTrace(
        mode="hiddenmix",
        sentences=traces,
        pooled=pooled,
        logits=logits,
        loss=loss,
        soft_label=soft,
        weighting=weighting,
    )


def backward(
    model: ToyTextClassifier,
    trace: ForwardTrace,
    soft_label: SoftLabel | None = None,
    out: ParamGrads | None = None,
    scale: float = 1.0,
) -> tuple[ParamGrads, list[np.ndarray]]:
    """Exact gradients of the traced loss.

    Returns parameter gradients (accumulated into `out` scaled by `scale`
    when given) and, per sentence, the gradient with respect to each
    position's embedding vector as fed to the dense layer. The latter is the
    per-position quantity, not the shared embedding-table row.
    """
    soft = soft_label if soft_label is not None else trace.soft_label
    grads = out if out is not None else ParamGrads.zeros(model)
    h_dim = model.hidden_dim

    wa, wb = _label_weights(soft, trace.weighting)
    target = np.zeros(model.num_classes)
    target[soft.y_a] += wa
    target[soft.y_b] += wb
    dlogits = scale * (softmax(trace.logits) - target)

    grads.w2 += np.outer(trace.pooled, dlogits)
    grads.b2 += dlogits
    dpooled = model.w2 @ dlogits

    emb_grads: list[np.ndarray] = []
    for k, st in enumerate(trace.sentences):
        dp = dpooled[k * h_dim : (k + 1) * h_dim]
        n = int(st.pool_mask.sum())
        dh = np.where(st.pool_mask[:, None], dp / n, 0.0)
        if trace.mode == "hiddenmix":
            de = _branch_backward(model, grads, st.ids, st.emb, st.hid, st.lam * dh)
            _branch_backward(
                model, grads, st.ids_b, st.emb_b, st.hid_b, (1.0 - st.lam) * dh
            )
        else:
            de = _branch_backward(model, grads, None, st.emb, st.hid, dh)
            if trace.mode == "embedmix":
                np.add.at(grads.emb, st.ids, st.lam * de)
                np.add.at(grads.emb, st.ids_b, (1.0 - st.lam) * de)
            else:
                np.add.at(grads.emb, st.ids, de)
        emb_grads.append(de)
    return grads, emb_grads


def _branch_backward(model, grads, ids, emb, hid, dh) -> np.ndarray:
    # dense layer: z = emb @ w1 + b1, hid = tanh(z)
    dz = (1.0 - hid * hid) * dh
    grads.w1 += emb.T @ dz
    grads.b1 += dz.sum(axis=0)
    de = dz @ model.w1.T
    if ids is not None:
        np.add.at(grads.emb, ids, de)
    return de


def loss_with_embeddings(
    model: ToyTextClassifier,
    embeddings: Sequence[np.ndarray],
    pool_masks: Sequence[np.ndarray],
    soft: SoftLabel,
    weighting: str = "label",
) -> float:
    """Loss evaluated from explicit per-sentence embedding matrices.

    Bypasses the embedding-table lookup so callers can perturb a single
    position's embedding independently of every other occurrence of the same
    token (used by the finite-difference saliency oracle).
    """
    pooled_parts = []
    for e, mask in zip(embeddings, pool_masks):
        h = np.tanh(e @ model.w1 + model.b1)
        pooled_parts.append(h[mask].sum(axis=0) / int(mask.sum()))
    pooled = pooled_parts[0] if len(pooled_parts) == 1 else np.concatenate(pooled_parts)
    return mixup_loss(pooled @ model.w2 + model.b2, soft, weighting)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay; the PAD embedding row stays zero."""

    def __init__(
        self,
        model: ToyTextClassifier,
        weight_decay: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}

    def step(self, model: ToyTextClassifier, grads: ParamGrads, lr: float) -> ToyTextClassifier:
        garrs = grads.arrays()
        for g in garrs.values():
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; refusing to update parameters")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in model.params().items():
            g = garrs[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * (update + self.weight_decay * p)
        model.emb[PAD_ID, :] = 0.0
        return model


def sgd_step(
    model: ToyTextClassifier, grads: ParamGrads, lr: float, weight_decay: float = 0.0
) -> ToyTextClassifier:
    """Plain SGD, kept as a debugging baseline."""
    garrs = grads.arrays()
    for g in garrs.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; refusing to update parameters")
    for name, p in model.params().items():
        p -= lr * (garrs[name] + weight_decay * p)
    model.emb[PAD_ID, :] = 0.0
    return model


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(model: ToyTextClassifier, path: str | Path) -> None:
    """Flat binary dump: one JSON header line, then raw little-endian f64.

    Deterministic byte-for-byte for identical parameters, so repeated runs
    with the same seed rewrite identical files.
    """
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "vocab_size": model.vocab_size,
        "embed_dim": model.embed_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "paired": model.paired,
        "nonlinearity": model.nonlinearity,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params()[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ToyTextClassifier:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: not a recognizable checkpoint")
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version")
        v, d = header["vocab_size"], header["embed_dim"]
        h, c = header["hidden_dim"], header["num_classes"]
        pooled_dim = 2 * h if header["paired"] else h
        shapes = {"emb": (v, d), "w1": (d, h), "b1": (h,), "w2": (pooled_dim, c), "b2": (c,)}
        arrays = {}
        for name in PARAM_NAMES:
            shape = shapes[name]
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated checkpoint payload")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return ToyTextClassifier(
        arrays["emb"], arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
        paired=header["paired"], nonlinearity=header["nonlinearity"],
    )
