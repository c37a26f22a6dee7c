"""Command-line entry points: train, eval, generate, inspect-bank.

Every config key is also a flag (flags win over the config file). Exit
codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate
from .checkpoint import CheckpointError, DirectoryBankStore, load_checkpoint
from .config import SCHEMA, ConfigError, build_config, parse_config_file
from .data import Vocab
from .metrics import _fmt
from .models import generate as lm_generate
from .numerics import SeededRng
from .posterior import AveragingStrategy, SampleBank, select
from .train import (
    NumericalError,
    Trainer,
    build_model_from_config,
    load_classify_data,
    load_lm_data,
)

_RNG_GENERATE = 4

STRATEGIES = ("forward", "backward", "thinned")


def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    for key, spec in SCHEMA.items():
        parser.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            default=None,
            metavar=key.upper(),
            help=f"{spec.help} (default: {spec.default!r})",
        )


def _resolve_config(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key) for key in SCHEMA if getattr(args, key, None) is not None}
    return build_config(file_values, overrides)


def _load_run_artifacts(cfg):
    """Saved vocab (and labels) from a finished or in-progress run directory."""
    out = Path(cfg.out)
    vocab_path = out / "vocab.json"
    if not vocab_path.exists():
        raise ConfigError(f"{vocab_path} not found; run training first")
    with open(vocab_path, "r", encoding="utf-8") as fh:
        vocab = Vocab.from_json(json.load(fh))
    labels = None
    if cfg.task == "classify":
        with open(out / "labels.json", "r", encoding="utf-8") as fh:
            labels = json.load(fh)
    return vocab, labels


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    summary = Trainer(cfg).run()
    if summary.get("completed"):
        parts = [f"{k}={_fmt(v)}" for k, v in summary["final_test"].items()]
        print(f"completed {summary['epochs_run']} epochs; samples collected: {summary['samples_collected']}")
        print("test: " + " ".join(parts))
    else:
        print(f"stopped after epoch {summary['stopped_after']}; resume with resume=true")
    return 0


# ---------------------------------------------------------------------------
# eval


def _lm_split_ids(cfg, vocab, split):
    data = load_lm_data(cfg, vocab=vocab)
    return {"train": data.train_ids, "valid": data.valid_ids, "test": data.test_ids}[split]


def _classify_split(cfg, vocab, split):
    data = load_classify_data(cfg, vocab=vocab)
    return {"train": data.train, "valid": data.valid, "test": data.test}[split]


def _lm_metrics_from_nll(cfg, nll, n):
    out = {"loss": nll / n}
    if cfg.task == "char-lm":
        out["cross_entropy"] = nll / n
        out["bits_per_char"] = nll / n / np.log(2.0)
    else:
        out["perplexity"] = float(np.exp(nll / n))
    return out


def _print_metrics(prefix: str, metrics: dict) -> None:
    print(prefix + " " + " ".join(f"{k}={_fmt(v)}" for k, v in metrics.items()))


def _write_per_token_csv(path, vocab, series_rows):
    """series_rows: (series_name, inputs, targets, probs (T, V)) tuples."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "position", "input", "target", "p_target"] + [f"prob_{i}" for i in range(len(vocab))])
        for name, inputs, targets, probs in series_rows:
            for t in range(len(inputs)):
                row = [
                    name,
                    t,
                    vocab.id_to_token[int(inputs[t])],
                    vocab.id_to_token[int(targets[t])],
                    _fmt(probs[t, int(targets[t])]),
                ]
                writer.writerow(row + [_fmt(p) for p in probs[t]])


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    vocab, labels = _load_run_artifacts(cfg)
    model = build_model_from_config(cfg, len(vocab), len(labels) if labels else 0)
    out = Path(cfg.out)
    split = args.split

    if cfg.task == "classify":
        examples = _classify_split(cfg, vocab, split)
        labels_arr = np.asarray([lab for lab, _ in examples])
    else:
        ids = _lm_split_ids(cfg, vocab, split)

    # single-checkpoint (point estimate) evaluation
    checkpoint = args.checkpoint or (None if args.bank else str(out / "checkpoint"))
    if checkpoint:
        tensors, _ = load_checkpoint(checkpoint)
        model.set_flat(tensors["theta"])
        if cfg.task == "classify":
            nll, n, err = evaluate.classifier_point_metrics(model, examples)
            _print_metrics(f"split={split} mode=point", {"loss": nll / n, "error_rate": err})
        else:
            nll, n = evaluate.lm_point_metrics(model, ids, cfg.minibatch_size, cfg.unroll_effective)
            _print_metrics(f"split={split} mode=point", _lm_metrics_from_nll(cfg, nll, n))
        if not args.bank:
            return 0

    bank_dir = Path(args.bank)
    bank = SampleBank.from_store(DirectoryBankStore(bank_dir))
    K = len(bank)
    if K == 0:
        raise ConfigError(f"sample bank {bank_dir} is empty")
    S = min(args.num_samples if args.num_samples > 0 else K, K)

    if cfg.task == "classify":
        all_probs = evaluate.classifier_prob_matrix(model, bank.load_all(), examples)

        def subset_metrics(idx):
            avg = all_probs[idx].mean(axis=0)
            nll, err = evaluate.classifier_metrics(avg, labels_arr)
            return {"loss": nll / len(labels_arr), "error_rate": err}

    else:
        matrix = evaluate.lm_sample_prob_matrix(model, bank.load_all(), ids, cfg.minibatch_size, cfg.unroll_effective)

        def subset_metrics(idx):
            nll = float(-np.log(matrix[idx].mean(axis=0)).sum())
            return _lm_metrics_from_nll(cfg, nll, matrix.shape[1])

    def strategy_indices(kind, s):
        chosen = select(bank, AveragingStrategy(kind, s))
        # recover indices by position: select() loads values, so recompute here
        if kind == "forward":
            return list(range(s))
        if kind == "backward":
            return list(range(K - s, K))
        return [int(np.ceil(k * K / s)) - 1 for k in range(1, s + 1)]

    metrics = subset_metrics(strategy_indices(args.strategy, S))
    _print_metrics(f"split={split} mode=ensemble strategy={args.strategy} S={S}", metrics)

    if args.sweep:
        sweep_path = out / f"eval_sweep_{split}.csv"
        with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "S", "split", "metric", "value"])
            for kind in STRATEGIES:
                for s in range(1, K + 1):
                    for metric, value in subset_metrics(strategy_indices(kind, s)).items():
                        writer.writerow([kind, s, split, metric, _fmt(value)])
        print(f"sweep written to {sweep_path}")

    if args.per_token_csv:
        if cfg.task == "classify":
            raise ConfigError("--per-token-csv applies to language-model tasks")
        limit = min(args.per_token_limit, len(ids) - 1)
        window_in, window_tgt = ids[:limit], ids[1 : limit + 1]
        sel = strategy_indices(args.strategy, S)
        shown = sel[: min(3, len(sel))]
        series = []
        saved = model.get_flat()
        try:
            per_sample = []
            for i in sel:
                model.set_flat(bank.load(i))
                probs, _ = model.predict_probs(window_in.reshape(1, -1))
                per_sample.append(probs[0])
                if i in shown:
                    series.append((f"sample_{i}", window_in, window_tgt, probs[0]))
        finally:
            model.set_flat(saved)
        series.append(("average", window_in, window_tgt, np.stack(per_sample).mean(axis=0)))
        _write_per_token_csv(args.per_token_csv, vocab, series)
        print(f"per-token table written to {args.per_token_csv}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    if cfg.task == "classify":
        raise ConfigError("generate applies to language-model tasks")
    vocab, _ = _load_run_artifacts(cfg)
    model = build_model_from_config(cfg, len(vocab))
    checkpoint = args.checkpoint or str(Path(cfg.out) / "checkpoint")
    tensors, _ = load_checkpoint(checkpoint)
    model.set_flat(tensors["theta"])

    if args.prefix:
        tokens = list(args.prefix) if cfg.task == "char-lm" else args.prefix.split()
        unknown = [t for t in tokens if t not in vocab.token_to_id]
        if unknown:
            raise ConfigError(f"unknown prefix tokens: {unknown}")
        prefix_ids = [vocab.token_to_id[t] for t in tokens]
    else:
        prefix_ids = [vocab.start_id]
    rng = SeededRng(cfg.seed).derive(_RNG_GENERATE)
    ids = lm_generate(model, prefix_ids, args.length, args.temperature, rng)
    sep = "" if cfg.task == "char-lm" else " "
    print(sep.join(vocab.decode(ids)))
    return 0


# ---------------------------------------------------------------------------
# inspect-bank


def cmd_inspect_bank(args) -> int:
    store = DirectoryBankStore(args.bank)
    if len(store) == 0:
        print("empty bank")
        return 0
    stamps = store.stamps()
    print(f"{'index':>5}  {'epoch':>8}  {'params':>9}  {'l2 norm':>12}")
    for i in range(len(store)):
        theta = store.load(i)
        print(f"{i:>5}  {stamps[i]:>8.3f}  {theta.size:>9}  {np.linalg.norm(theta):>12.5f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgrnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model per the config")
    p_train.add_argument("--config", help="key=value config file")
    _add_schema_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or a sample bank")
    p_eval.add_argument("--config", help="key=value config file")
    p_eval.add_argument("--checkpoint", help="checkpoint prefix for point evaluation")
    p_eval.add_argument("--bank", help="sample-bank directory for ensemble evaluation")
    p_eval.add_argument("--strategy", default="thinned", choices=STRATEGIES)
    p_eval.add_argument("--num-samples", type=int, default=0, help="ensemble size S; 0 uses the whole bank")
    p_eval.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_eval.add_argument("--sweep", action="store_true", help="write metrics for every strategy and S")
    p_eval.add_argument("--per-token-csv", help="write per-token predictive probabilities here")
    p_eval.add_argument("--per-token-limit", type=int, default=100)
    _add_schema_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("generate", help="sample text from a trained language model")
    p_gen.add_argument("--config", help="key=value config file")
    p_gen.add_argument("--checkpoint", help="checkpoint prefix (default: <out>/checkpoint)")
    p_gen.add_argument("--prefix", default="", help="seed text; empty starts from the START token")
    p_gen.add_argument("--length", type=int, default=200)
    p_gen.add_argument("--temperature", type=float, default=1.0)
    _add_schema_flags(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_bank = sub.add_parser("inspect-bank", help="list the snapshots in a sample bank")
    p_bank.add_argument("--bank", required=True)
    p_bank.set_defaults(func=cmd_inspect_bank)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
