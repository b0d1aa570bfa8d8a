"""Command-line surface: dataset generation, training, evaluation, mixing
demos, saliency dumps, and ablation sweeps.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. Config
precedence for training flags: explicit flags, then --config file entries,
then built-in defaults; the resolved configuration is written to the run
manifest, which is itself reusable as a --config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    DataError,
    LabeledExample,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    load_label_map,
    read_rows,
    rows_to_dataset,
    save_label_map,
    synthetic_rows,
)
from .mixer import INPUT_VARIANTS, VARIANTS, MixConfig, mix_examples
from .model import NumericError, ToyTextClassifier, load_checkpoint, save_checkpoint
from .saliency import compute_saliency
from .trainer import RunMetrics, TrainConfig, evaluate, run_training


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 by default, which this tool reserves for
    # data errors; route usage problems through UsageError instead
    def error(self, message):
        raise UsageError(message)


TRAIN_DEFAULTS: dict[str, object] = {
    "step1_lr": 5e-5,
    "step1_epochs": 3,
    "step2_lr": 1e-5,
    "step2_epochs": 5,
    "batch_size": 32,
    "lambda0": 0.1,
    "variant": "ssmix",
    "alpha": 0.2,
    "mix_layer": "hidden",
    "eval_every": None,
    "seed": 0,
    "weight_decay": 1e-4,
    "warmup_frac": 0.1,
    "loss_weighting": "label",
    "embed_dim": 32,
    "hidden_dim": 64,
    "max_len": 128,
    "min_count": 1,
}

_COERCE = {
    "step1_lr": float, "step2_lr": float, "lambda0": float, "alpha": float,
    "weight_decay": float, "warmup_frac": float,
    "step1_epochs": int, "step2_epochs": int, "batch_size": int, "seed": int,
    "embed_dim": int, "hidden_dim": int, "max_len": int, "min_count": int,
    "variant": str, "mix_layer": str, "loss_weighting": str,
    "eval_every": lambda s: None if s.lower() in ("", "none", "epoch") else int(s),
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration")
    sup = argparse.SUPPRESS
    g.add_argument("--config", default=None, metavar="FILE",
                   help="key=value file applied under explicit flags (default: none)")
    g.add_argument("--step1-lr", dest="step1_lr", type=float, default=sup,
                   help="phase-1 learning rate (default: 5e-05)")
    g.add_argument("--step1-epochs", dest="step1_epochs", type=int, default=sup,
                   help="phase-1 epochs (default: 3)")
    g.add_argument("--step2-lr", dest="step2_lr", type=float, default=sup,
                   help="phase-2 learning rate (default: 1e-05)")
    g.add_argument("--step2-epochs", dest="step2_epochs", type=int, default=sup,
                   help="phase-2 epochs (default: 5)")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=sup,
                   help="even batch size (default: 32)")
    g.add_argument("--lambda0", type=float, default=sup,
                   help="prior mix ratio (default: 0.1)")
    g.add_argument("--variant", choices=VARIANTS, default=sup,
                   help="mixing variant for phase 2 (default: ssmix)")
    g.add_argument("--alpha", type=float, default=sup,
                   help="Beta parameter for interpolation variants (default: 0.2)")
    g.add_argument("--mix-layer", dest="mix_layer", choices=("embed", "hidden"), default=sup,
                   help="interpolation layer for hiddenmix (default: hidden)")
    g.add_argument("--eval-every", dest="eval_every", type=int, default=sup,
                   help="validate every N steps instead of per epoch (default: per epoch)")
    g.add_argument("--seed", type=int, default=sup,
                   help="run seed (default: 0)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, default=sup,
                   help="decoupled weight decay (default: 0.0001)")
    g.add_argument("--warmup-frac", dest="warmup_frac", type=float, default=sup,
                   help="linear warmup fraction of each phase (default: 0.1)")
    g.add_argument("--loss-weighting", dest="loss_weighting",
                   choices=("label", "algorithm1"), default=sup,
                   help="mixed-loss weight convention (default: label)")
    g.add_argument("--embed-dim", dest="embed_dim", type=int, default=sup,
                   help="embedding width (default: 32)")
    g.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=sup,
                   help="hidden width (default: 64)")
    g.add_argument("--max-len", dest="max_len", type=int, default=sup,
                   help="maximum sequence length incl. specials (default: 128)")
    g.add_argument("--min-count", dest="min_count", type=int, default=sup,
                   help="vocabulary frequency cutoff (default: 1)")


def _read_config_file(path: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"config {path}, line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in _COERCE:
            out[key] = _COERCE[key](value.strip())
    return out


def _resolve_config(args: argparse.Namespace) -> dict[str, object]:
    resolved = dict(TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(_read_config_file(args.config))
    for key in TRAIN_DEFAULTS:
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
    return resolved


def _train_config(resolved: dict[str, object]) -> TrainConfig:
    kwargs = {k: v for k, v in resolved.items() if k != "min_count"}
    return TrainConfig(**kwargs)


def _write_manifest(path: Path, resolved: dict[str, object], extra: dict[str, object]) -> None:
    items = {**resolved, **extra}
    lines = [f"{k}={'' if v is None else v}" for k, v in sorted(items.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_outputs(paths: list[Path], force: bool) -> None:
    for p in paths:
        if p.exists() and not force:
            raise UsageError(f"refusing to overwrite {p}; pass --force")


def _load_split(path, fmt, schema, vocab, label_map, max_len, split):
    rows = read_rows(path, fmt, schema)
    return rows_to_dataset(rows, vocab, schema, split, label_map=label_map, max_len=max_len)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "tsv" if args.format == "tsv" else "jsonl"
    train_path = out / f"train.{suffix}"
    valid_path = out / f"valid.{suffix}"
    map_path = out / "label_map.tsv"
    _check_outputs([train_path, valid_path, map_path], args.force)

    train_rows, valid_rows = synthetic_rows(
        args.task, args.num_classes, args.n_train, args.n_valid, args.seed
    )

    def dump(rows, path):
        lines = []
        for texts, label in rows:
            if args.format == "tsv":
                lines.append("\t".join(texts) + f"\t{label}")
            elif len(texts) == 1:
                lines.append(json.dumps({"text": texts[0], "label": label}, sort_keys=True))
            else:
                lines.append(json.dumps(
                    {"text1": texts[0], "text2": texts[1], "label": label}, sort_keys=True
                ))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    dump(train_rows, train_path)
    dump(valid_rows, valid_path)
    label_map: dict[str, int] = {}
    for _, label in train_rows:
        if label not in label_map:
            label_map[label] = len(label_map)
    save_label_map(label_map, map_path)
    print(f"wrote {train_path} ({len(train_rows)} rows), {valid_path} ({len(valid_rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _run_one_training(args, resolved, out: Path, force: bool) -> tuple[float | None, RunMetrics]:
    cfg = _train_config(resolved)
    ckpt_path = out / "checkpoint_best.bin"
    paths = [ckpt_path, out / "metrics.csv", out / "manifest.txt",
             out / "vocab.tsv", out / "label_map.tsv"]
    _check_outputs(paths, force)

    rows = read_rows(args.train, args.format, args.schema)
    vocab = build_vocab([t for texts, _ in rows for t in texts],
                        min_count=int(resolved["min_count"]))
    train_ds, label_map = rows_to_dataset(
        rows, vocab, args.schema, "train", max_len=cfg.max_len
    )
    valid_ds, _ = _load_split(
        args.valid, args.format, args.schema, vocab, label_map, cfg.max_len, "valid"
    )

    _write_manifest(out / "manifest.txt", resolved, {
        "command": "train", "train": args.train, "valid": args.valid,
        "format": args.format, "schema": args.schema,
    })
    model = ToyTextClassifier.init(
        vocab.size, cfg.embed_dim, cfg.hidden_dim, train_ds.num_classes,
        paired=train_ds.is_paired, seed=cfg.seed,
    )
    best, metrics = run_training(model, train_ds, valid_ds, cfg)
    save_checkpoint(best, ckpt_path)
    vocab.save(out / "vocab.tsv")
    save_label_map(label_map, out / "label_map.tsv")
    metrics.to_csv(out / "metrics.csv")
    return metrics.best_accuracy, metrics


def _cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolve_config(args)
    best_acc, _ = _run_one_training(args, resolved, out, args.force)
    print(f"best_accuracy\t{best_acc!r}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    label_map = load_label_map(args.label_map)
    ds, _ = _load_split(args.data, args.format, args.schema, vocab, label_map,
                        args.max_len, "eval")
    acc = evaluate(model, ds)
    print(f"accuracy\t{acc!r}")
    return 0


# ---------------------------------------------------------------------------
# mix / saliency
# ---------------------------------------------------------------------------


def _parse_row(raw: str, schema: str, fallback_label: str | None) -> tuple[tuple[str, ...], str]:
    parts = raw.split("\t")
    n_texts = 1 if schema == "single" else 2
    if len(parts) == n_texts + 1:
        return tuple(parts[:-1]), parts[-1]
    if len(parts) == n_texts and fallback_label is not None:
        return tuple(parts), fallback_label
    raise UsageError(
        f"input row needs {n_texts} text field(s) plus a label "
        f"(or pass --label-a/--label-b): {raw!r}"
    )


def _label_indices(labels: list[str], map_path: str | None) -> dict[str, int]:
    if map_path:
        return load_label_map(map_path)
    mapping: dict[str, int] = {}
    for lbl in labels:
        if lbl not in mapping:
            mapping[lbl] = len(mapping)
    return mapping


def _cmd_mix(args) -> int:
    if args.variant not in INPUT_VARIANTS:
        raise UsageError(
            f"mix prints token output and supports {', '.join(INPUT_VARIANTS)} only"
        )
    model = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    texts_a, label_a = _parse_row(args.a, args.schema, args.label_a)
    texts_b, label_b = _parse_row(args.b, args.schema, args.label_b)
    mapping = _label_indices([label_a, label_b], args.label_map)
    for lbl in (label_a, label_b):
        if lbl not in mapping:
            raise DataError(f"label {lbl!r} not in the label map")

    def to_example(texts, lbl):
        seqs = [encode(vocab, t, args.max_len) for t in texts]
        return LabeledExample(
            first=seqs[0], second=seqs[1] if len(seqs) == 2 else None, label=mapping[lbl]
        )

    ex_a = to_example(texts_a, label_a)
    ex_b = to_example(texts_b, label_b)
    cfg = MixConfig(lambda0=args.lambda0, variant=args.variant, seed=args.seed)
    rng = np.random.default_rng(cfg.seed)
    sal_a = sal_b = None
    if args.variant == "ssmix":
        sal_a = compute_saliency(model, ex_a)
        sal_b = compute_saliency(model, ex_b)
    result = mix_examples(ex_a, ex_b, cfg, rng, sal_a=sal_a, sal_b=sal_b)
    for i, seq in enumerate(result.mixed, 1):
        print(f"mixed_{i}\t{decode(vocab, seq)}")
    print(f"lambda\t{result.lam!r}")
    for i, prov in enumerate(result.provenance, 1):
        print(f"replaced_{i}\t{','.join(map(str, prov.replaced))}")
        print(f"source_{i}\t{','.join(map(str, prov.source))}")
    return 0


def _cmd_saliency(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    if args.label_index is not None:
        label = args.label_index
    elif args.label is not None and args.label_map is not None:
        mapping = load_label_map(args.label_map)
        if args.label not in mapping:
            raise DataError(f"label {args.label!r} not in the label map")
        label = mapping[args.label]
    else:
        raise UsageError("pass --label-index, or --label together with --label-map")

    seqs = [encode(vocab, args.text, args.max_len)]
    if args.text2 is not None:
        seqs.append(encode(vocab, args.text2, args.max_len))
    ex = LabeledExample(first=seqs[0], second=seqs[1] if len(seqs) == 2 else None, label=label)
    maps = compute_saliency(model, ex)
    for seq, sal in zip(ex.sentences(), maps):
        for pos, (tid, score) in enumerate(zip(seq.ids, sal.scores)):
            print(f"{vocab.token(tid)}\t{pos}\t{score!r}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_seeds(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s != ""]


def _cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _parse_seeds(args.seeds)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    resolved_base = _resolve_config(args)

    summary_rows = []
    for variant in variants:
        bests = []
        for seed in seeds:
            run_out = out / variant / f"seed{seed}"
            run_out.mkdir(parents=True, exist_ok=True)
            resolved = dict(resolved_base)
            resolved["variant"] = variant
            resolved["seed"] = seed
            best_acc, _ = _run_one_training(args, resolved, run_out, args.force)
            bests.append(best_acc if best_acc is not None else float("nan"))
        results_path = out / variant / "results.csv"
        _check_outputs([results_path], args.force)
        lines = ["seed,best_accuracy"]
        lines += [f"{s},{b!r}" for s, b in zip(seeds, bests)]
        results_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        arr = np.asarray(bests)
        summary_rows.append((variant, float(arr.mean()), float(arr.std())))
        print(f"{variant}\tmean={arr.mean():.4f}\tstd={arr.std():.4f}")

    summary_path = out / "summary.csv"
    _check_outputs([summary_path], args.force)
    lines = ["variant,mean_best_accuracy,std_best_accuracy,n_seeds"]
    lines += [f"{v},{m!r},{s!r},{len(seeds)}" for v, m, s in summary_rows]
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spanmix", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--task", choices=("single", "paired"), default="single",
                   help="task shape (default: single)")
    p.add_argument("--num-classes", dest="num_classes", type=int, default=2,
                   help="keyword classes (default: 2)")
    p.add_argument("--n-train", dest="n_train", type=int, default=2000,
                   help="training rows (default: 2000)")
    p.add_argument("--n-valid", dest="n_valid", type=int, default=500,
                   help="validation rows (default: 500)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv",
                   help="output format (default: tsv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="two-step training run")
    p.add_argument("--train", required=True, help="training split file")
    p.add_argument("--valid", required=True, help="validation split file")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv",
                   help="input format (default: tsv)")
    p.add_argument("--schema", choices=("single", "paired"), default="single",
                   help="row schema (default: single)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a data file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--label-map", dest="label_map", required=True, help="label map file")
    p.add_argument("--data", required=True, help="data file to score")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv",
                   help="input format (default: tsv)")
    p.add_argument("--schema", choices=("single", "paired"), default="single",
                   help="row schema (default: single)")
    p.add_argument("--max-len", dest="max_len", type=int, default=128,
                   help="maximum sequence length (default: 128)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("mix", help="mix two inputs and print the result")
    p.add_argument("--a", required=True, help="first input: text[<TAB>text2][<TAB>label]")
    p.add_argument("--b", required=True, help="second input, same shape as --a")
    p.add_argument("--label-a", dest="label_a", default=None,
                   help="label for --a when not embedded in the row")
    p.add_argument("--label-b", dest="label_b", default=None,
                   help="label for --b when not embedded in the row")
    p.add_argument("--schema", choices=("single", "paired"), default="single",
                   help="row schema (default: single)")
    p.add_argument("--checkpoint", required=True, help="checkpoint used for saliency")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--label-map", dest="label_map", default=None,
                   help="label map file (default: first-seen order of the two labels)")
    p.add_argument("--variant", choices=INPUT_VARIANTS, default="ssmix",
                   help="input-level variant (default: ssmix)")
    p.add_argument("--lambda0", type=float, default=0.1,
                   help="prior mix ratio (default: 0.1)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the randomized variants (default: 0)")
    p.add_argument("--max-len", dest="max_len", type=int, default=128,
                   help="maximum sequence length (default: 128)")
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("saliency", help="per-token saliency scores as TSV")
    p.add_argument("--text", required=True, help="input text")
    p.add_argument("--text2", default=None, help="second sentence for paired models")
    p.add_argument("--label", default=None, help="gold label string (needs --label-map)")
    p.add_argument("--label-index", dest="label_index", type=int, default=None,
                   help="gold label as a class index")
    p.add_argument("--label-map", dest="label_map", default=None, help="label map file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--max-len", dest="max_len", type=int, default=128,
                   help="maximum sequence length (default: 128)")
    p.set_defaults(func=_cmd_saliency)

    p = sub.add_parser("sweep", help="train every variant over a seed range")
    p.add_argument("--train", required=True, help="training split file")
    p.add_argument("--valid", required=True, help="validation split file")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv",
                   help="input format (default: tsv)")
    p.add_argument("--schema", choices=("single", "paired"), default="single",
                   help="row schema (default: single)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0..4", help="seed range a..b or list (default: 0..4)")
    p.add_argument("--variants", default=None,
                   help=f"comma-separated subset (default: {','.join(VARIANTS)})")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_sweep)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
