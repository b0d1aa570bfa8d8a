"""Two-step training: plain cross-entropy, then mixup fine-tuning.

Step 1 trains without mixing and keeps the checkpoint with the best
validation accuracy. Step 2 restarts from that checkpoint, splits every
batch into two halves, mixes them in both directions (the mix operation is
not symmetric), and averages the four loss groups: plain losses on both
halves plus both mixed groups. The gradient of the saliency pass is used
only to score tokens, never to update parameters.

Whole runs are deterministic: the shuffle and mixer random streams are
derived separately from the run seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset
from .mixer import INPUT_VARIANTS, INTERP_VARIANTS, VARIANTS, MixConfig, mix_examples
from .model import (
    AdamW,
    ForwardTrace,
    ParamGrads,
    ToyTextClassifier,
    backward,
    forward,
    forward_embedmix,
    forward_hiddenmix,
)
from .mixer import sample_interp_lambda
from .saliency import compute_saliency


@dataclass
class TrainConfig:
    """Hyperparameters for both training phases."""

    step1_lr: float = 5e-5
    step1_epochs: int = 3
    step2_lr: float = 1e-5
    step2_epochs: int = 5
    batch_size: int = 32
    lambda0: float = 0.1
    variant: str = "ssmix"
    alpha: float = 0.2
    mix_layer: str = "hidden"
    eval_every: int | None = None  # None = validate once per epoch
    seed: int = 0
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    loss_weighting: str = "label"
    embed_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 128

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even (step 2 halves each batch)")
        if self.step1_lr <= 0 or self.step2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.step1_epochs < 0 or self.step2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.loss_weighting not in ("label", "algorithm1"):
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be at least 1 step")

    def mix_config(self) -> MixConfig:
        return MixConfig(
            lambda0=self.lambda0,
            variant=self.variant,
            alpha=self.alpha,
            mix_layer=self.mix_layer,
            seed=self.seed,
        )


@dataclass(frozen=True)
class EvalRecord:
    step: int
    phase: str
    split: str
    accuracy: float
    loss: float
    lambda_mean: float | None


@dataclass
class RunMetrics:
    """Evaluation history plus the best-checkpoint pointer."""

    records: list[EvalRecord] = field(default_factory=list)
    best_accuracy: float | None = None
    best_phase: str | None = None
    best_step: int | None = None
    wall_seconds: dict[str, float] = field(default_factory=dict)

    def record(self, rec: EvalRecord) -> bool:
        """Append one record; True if it strictly improves the best accuracy."""
        self.records.append(rec)
        if rec.split == "valid" and (
            self.best_accuracy is None or rec.accuracy > self.best_accuracy
        ):
            self.best_accuracy = rec.accuracy
            self.best_phase = rec.phase
            self.best_step = rec.step
            return True
        return False

    def merged_with(self, other: "RunMetrics") -> "RunMetrics":
        out = RunMetrics(records=self.records + other.records,
                         wall_seconds={**self.wall_seconds, **other.wall_seconds})
        for rec in out.records:
            if rec.split == "valid" and (
                out.best_accuracy is None or rec.accuracy > out.best_accuracy
            ):
                out.best_accuracy = rec.accuracy
                out.best_phase = rec.phase
                out.best_step = rec.step
        return out

    def to_csv(self, path) -> None:
        lines = ["step,phase,split,accuracy,loss,lambda_mean"]
        for r in self.records:
            lam = "" if r.lambda_mean is None else repr(r.lambda_mean)
            lines.append(f"{r.step},{r.phase},{r.split},{r.accuracy!r},{r.loss!r},{lam}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def linear_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over warmup_frac of the phase, then linear decay to 0."""
    if total_steps <= 0:
        return base_lr
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


def evaluate(model: ToyTextClassifier, dataset: Dataset) -> float:
    """Argmax-logit accuracy; logit ties resolve to the smallest class index."""
    acc, _ = evaluate_with_loss(model, dataset)
    return acc


def evaluate_with_loss(model: ToyTextClassifier, dataset: Dataset) -> tuple[float, float]:
    correct = 0
    total_loss = 0.0
    for ex in dataset.examples:
        trace = forward(model, ex)
        if int(np.argmax(trace.logits)) == ex.label:
            correct += 1
        total_loss += trace.loss
    n = len(dataset.examples)
    return correct / n, total_loss / n


def _plain_batch_grads(model, batch, grads: ParamGrads, scale: float) -> float:
    loss = 0.0
    for ex in batch:
        trace = forward(model, ex)
        backward(model, trace, out=grads, scale=scale)
        loss += trace.loss
    return loss / len(batch)


def mixup_batch_loss(
    model: ToyTextClassifier,
    b1: list,
    b2: list,
    mix_cfg: MixConfig,
    rng: np.random.Generator,
    weighting: str = "label",
    grads: ParamGrads | None = None,
) -> tuple[float, ParamGrads, list[float]]:
    """Average loss of the four groups with gradients accumulated.

    Groups: plain losses on b1 and b2, plus the two mixed groups built
    index-wise in both directions. Variant "none" degenerates to the two
    plain groups. Returns the total loss, the accumulated gradients, and the
    mixed examples' label-mixing ratios for logging.
    """
    if len(b1) != len(b2):
        raise ValueError(f"half-batches must match in size, got {len(b1)} and {len(b2)}")
    m = len(b1)
    if grads is None:
        grads = ParamGrads.zeros(model)
    variant = mix_cfg.variant

    mixed_traces: list[ForwardTrace] = []
    lams: list[float] = []
    if variant in INPUT_VARIANTS:
        sal1 = sal2 = None
        if variant == "ssmix":
            # extra forward+backward per source example, used only for scores
            sal1 = [compute_saliency(model, ex) for ex in b1]
            sal2 = [compute_saliency(model, ex) for ex in b2]
        for src, dst, sal_s, sal_d in ((b1, b2, sal1, sal2), (b2, b1, sal2, sal1)):
            for i in range(m):
                res = mix_examples(
                    src[i], dst[i], mix_cfg, rng,
                    sal_a=None if sal_s is None else sal_s[i],
                    sal_b=None if sal_d is None else sal_d[i],
                )
                mixed_traces.append(forward(model, res, weighting=weighting))
                lams.append(res.soft_label.lam)
    elif variant in INTERP_VARIANTS:
        layer = "embed" if variant == "embedmix" else mix_cfg.mix_layer
        for src, dst in ((b1, b2), (b2, b1)):
            for i in range(m):
                lam = sample_interp_lambda(mix_cfg.alpha, rng)
                if variant == "embedmix":
                    trace = forward_embedmix(model, src[i], dst[i], lam, weighting=weighting)
                else:
                    trace = forward_hiddenmix(
                        model, src[i], dst[i], lam, layer=layer, weighting=weighting
                    )
                mixed_traces.append(trace)
                lams.append(trace.soft_label.lam)
    elif variant != "none":
        raise ValueError(f"unknown variant {variant!r}")

    n_groups = 2 if variant == "none" else 4
    scale = 1.0 / (n_groups * m)
    total = _plain_batch_grads(model, b1, grads, scale) / n_groups
    total += _plain_batch_grads(model, b2, grads, scale) / n_groups
    for trace in mixed_traces:
        backward(model, trace, out=grads, scale=scale)
        total += trace.loss * scale
    return total, grads, lams


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        yield order[lo : lo + batch_size]


def train_step1(
    model: ToyTextClassifier, train: Dataset, valid: Dataset, cfg: TrainConfig
) -> tuple[ToyTextClassifier, RunMetrics]:
    """Plain cross-entropy training; returns the best-validation checkpoint.

    The passed model is trained in place; the returned model is a snapshot
    at the best recorded validation accuracy (ties keep the earlier one).
    With zero epochs the input model is returned untouched.
    """
    metrics = RunMetrics()
    if cfg.step1_epochs == 0:
        return model, metrics
    rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamW(model, weight_decay=cfg.weight_decay)
    n_batches = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.step1_epochs * n_batches
    best_model = model.copy()
    step = 0
    t0 = time.perf_counter()
    for _epoch in range(cfg.step1_epochs):
        order = rng.permutation(len(train))
        for idx in _batches(order, cfg.batch_size):
            batch = [train.examples[i] for i in idx]
            grads = ParamGrads.zeros(model)
            _plain_batch_grads(model, batch, grads, 1.0 / len(batch))
            lr = linear_warmup_lr(step, total_steps, cfg.step1_lr, cfg.warmup_frac)
            opt.step(model, grads, lr)
            step += 1
            if cfg.eval_every is not None and step % cfg.eval_every == 0:
                if _validate(model, valid, metrics, step, "step1", None):
                    best_model = model.copy()
        if cfg.eval_every is None:
            if _validate(model, valid, metrics, step, "step1", None):
                best_model = model.copy()
    if cfg.eval_every is not None and step % cfg.eval_every != 0:
        if _validate(model, valid, metrics, step, "step1", None):
            best_model = model.copy()
    metrics.wall_seconds["step1"] = time.perf_counter() - t0
    return best_model, metrics


def _validate(model, valid, metrics, step, phase, lambda_mean) -> bool:
    acc, loss = evaluate_with_loss(model, valid)
    return metrics.record(
        EvalRecord(
            step=step, phase=phase, split="valid",
            accuracy=acc, loss=loss, lambda_mean=lambda_mean,
        )
    )


def train_step2(
    model: ToyTextClassifier, train: Dataset, valid: Dataset, cfg: TrainConfig
) -> tuple[ToyTextClassifier, RunMetrics]:
    """Mixup fine-tuning from a step-1 checkpoint.

    Each batch is split into two equal halves, paired index-wise after the
    shuffle; an odd-sized final batch is trimmed by one example so the split
    stays even. Validation happens before any update (handoff check) and on
    the configured cadence.
    """
    metrics = RunMetrics()
    if cfg.step2_epochs == 0:
        return model, metrics
    rng_shuffle = np.random.default_rng([cfg.seed, 2])
    rng_mix = np.random.default_rng([cfg.seed, 3])
    mix_cfg = cfg.mix_config()
    opt = AdamW(model, weight_decay=cfg.weight_decay)
    n_batches = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.step2_epochs * n_batches
    t0 = time.perf_counter()

    # validation before any update: the handoff checkpoint is the baseline
    # best for this phase, and ties never displace it (strict improvement only)
    _validate(model, valid, metrics, 0, "step2", None)
    best_model = model.copy()

    step = 0
    lam_window: list[float] = []
    for _epoch in range(cfg.step2_epochs):
        order = rng_shuffle.permutation(len(train))
        for idx in _batches(order, cfg.batch_size):
            if idx.size % 2 != 0:
                idx = idx[:-1]  # keep the halves equal
            if idx.size < 2:
                continue
            half = idx.size // 2
            b1 = [train.examples[i] for i in idx[:half]]
            b2 = [train.examples[i] for i in idx[half:]]
            grads = ParamGrads.zeros(model)
            _, _, lams = mixup_batch_loss(
                model, b1, b2, mix_cfg, rng_mix,
                weighting=cfg.loss_weighting, grads=grads,
            )
            lam_window.extend(lams)
            lr = linear_warmup_lr(step, total_steps, cfg.step2_lr, cfg.warmup_frac)
            opt.step(model, grads, lr)
            step += 1
            if cfg.eval_every is not None and step % cfg.eval_every == 0:
                if _flush_validate(model, valid, metrics, step, lam_window):
                    best_model = model.copy()
        if cfg.eval_every is None:
            if _flush_validate(model, valid, metrics, step, lam_window):
                best_model = model.copy()
    if cfg.eval_every is not None and step % cfg.eval_every != 0:
        if _flush_validate(model, valid, metrics, step, lam_window):
            best_model = model.copy()
    metrics.wall_seconds["step2"] = time.perf_counter() - t0
    return best_model, metrics


def _flush_validate(model, valid, metrics, step, lam_window) -> bool:
    lam_mean = float(np.mean(lam_window)) if lam_window else None
    lam_window.clear()
    return _validate(model, valid, metrics, step, "step2", lam_mean)


def run_training(
    model: ToyTextClassifier, train: Dataset, valid: Dataset, cfg: TrainConfig
) -> tuple[ToyTextClassifier, RunMetrics]:
    """Both phases end to end; the reported best covers both phases."""
    best1, met1 = train_step1(model, train, valid, cfg)
    best2, met2 = train_step2(best1.copy(), train, valid, cfg)
    combined = met1.merged_with(met2)
    if (
        met2.best_accuracy is not None
        and (met1.best_accuracy is None or met2.best_accuracy > met1.best_accuracy)
    ):
        return best2, combined
    return best1, combined
