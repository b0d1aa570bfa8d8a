"""Saliency-guided span-level input mixup for text classification."""

from .corpus import (
    DataError,
    Dataset,
    LabeledExample,
    TokenSequence,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    generate_synthetic,
    load_dataset,
)
from .mixer import (
    MixConfig,
    MixResult,
    Span,
    mix_examples,
    random_span_mix,
    random_token_mix,
    sample_interp_lambda,
    select_span,
    span_length,
    ssmix,
    ssmix_paired,
    unk_replace,
)
from .model import (
    AdamW,
    ForwardTrace,
    NumericError,
    ParamGrads,
    SoftLabel,
    ToyTextClassifier,
    backward,
    forward,
    forward_embedmix,
    forward_hiddenmix,
    load_checkpoint,
    mixup_loss,
    save_checkpoint,
    sgd_step,
)
from .saliency import SaliencyMap, compute_saliency, saliency_fd_oracle
from .trainer import (
    RunMetrics,
    TrainConfig,
    evaluate,
    mixup_batch_loss,
    run_training,
    train_step1,
    train_step2,
)

__version__ = "0.1.0"
