"""End-to-end training: data loading, the epoch loop, snapshot collection,
metrics export, and resumable checkpoints.

A run is a pure function of (resolved config, seed, corpus bytes). Three
derived random streams keep that true: one for parameter initialization,
one for training-time noise (injected gradients, dropout, weight noise),
and one for data ordering. All three are checkpointed, so a resumed run
replays bit-for-bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate
from .checkpoint import DirectoryBankStore, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, write_config
from .metrics import MetricsWriter, write_summary
from .models import (
    DropoutSpec,
    LanguageModel,
    SentenceClassifier,
    classifier_loss_and_grad,
    cross_entropy_per_char,
    lm_loss_and_grad,
    perplexity,
)
from .numerics import SeededRng
from .posterior import CollectionPolicy, SampleBank, maybe_collect
from .samplers import (
    HyperParams,
    SamplerState,
    apply_update,
    apply_weight_noise,
    posterior_grad,
    prewarm,
)

# rng stream tags; frozen so resumed and fresh runs agree
_RNG_INIT, _RNG_NOISE, _RNG_DATA, _RNG_FOLDS = 1, 2, 3, 7


class NumericalError(RuntimeError):
    """Training hit nonfinite values; maps to exit code 2."""


@dataclass
class LmData:
    vocab: data_mod.Vocab
    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray


@dataclass
class ClassifyData:
    vocab: data_mod.Vocab
    labels: list
    train: list  # (label_id, id array) pairs
    valid: list
    test: list


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def load_lm_data(cfg: RunConfig, vocab: data_mod.Vocab = None) -> LmData:
    tokenize = data_mod.tokenize_chars if cfg.task == "char-lm" else data_mod.tokenize_words
    if cfg.train_path:
        train_toks = tokenize(_read_text(cfg.train_path))
        valid_toks = tokenize(_read_text(cfg.valid_path))
        test_toks = tokenize(_read_text(cfg.test_path))
    else:
        toks = tokenize(_read_text(cfg.data_path))
        fractions = cfg.split_fractions.split(",")
        n = len(toks)
        f0, f1 = float(fractions[0]), float(fractions[1])
        a, b = int(n * f0), int(n * (f0 + f1))
        train_toks, valid_toks, test_toks = toks[:a], toks[a:b], toks[b:]
    if vocab is None:
        vocab = data_mod.build_vocab(train_toks, max_size=cfg.max_vocab, min_count=cfg.min_count)
    return LmData(
        vocab=vocab,
        train_ids=vocab.encode(train_toks),
        valid_ids=vocab.encode(valid_toks),
        test_ids=vocab.encode(test_toks),
    )


def load_classify_data(cfg: RunConfig, out_dir: Path = None, vocab: data_mod.Vocab = None) -> ClassifyData:
    if cfg.data_path and cfg.num_folds >= 2:
        corpus = data_mod.load_classification_tsv(cfg.data_path)
        folds = data_mod.kfold_indices(len(corpus), cfg.num_folds, SeededRng(cfg.seed).derive(_RNG_FOLDS))
        if not 0 <= cfg.fold_index < cfg.num_folds:
            raise ConfigError("fold_index out of range")
        test_idx = set(folds[cfg.fold_index].tolist())
        valid_idx = set(folds[(cfg.fold_index + 1) % cfg.num_folds].tolist())
        train_rows, valid_rows, test_rows = [], [], []
        for i, ex in enumerate(corpus.examples):
            (test_rows if i in test_idx else valid_rows if i in valid_idx else train_rows).append(ex)
        labels = corpus.labels
        if out_dir is not None:
            with open(out_dir / "folds.json", "w", encoding="utf-8") as fh:
                json.dump({"num_folds": cfg.num_folds, "folds": [f.tolist() for f in folds]}, fh, sort_keys=True)
    else:
        train_c = data_mod.load_classification_tsv(cfg.train_path, "train")
        test_c = data_mod.load_classification_tsv(cfg.test_path, "test")
        labels = sorted(set(train_c.labels) | set(test_c.labels))
        remap = {name: i for i, name in enumerate(labels)}

        def relabel(corpus):
            return [(remap[corpus.labels[lab]], toks) for lab, toks in corpus.examples]

        train_rows, test_rows = relabel(train_c), relabel(test_c)
        if cfg.valid_path:
            valid_c = data_mod.load_classification_tsv(cfg.valid_path, "valid")
            valid_rows = [(remap[valid_c.labels[lab]], toks) for lab, toks in valid_c.examples]
        else:
            # carve every 10th training sentence for monitoring
            valid_rows = train_rows[9::10]
            train_rows = [ex for i, ex in enumerate(train_rows) if i % 10 != 9]
    if vocab is None:
        train_tokens = [t for _, toks in train_rows for t in toks]
        vocab = data_mod.build_vocab(train_tokens, max_size=cfg.max_vocab, min_count=cfg.min_count)

    def encode(rows):
        return [(lab, vocab.encode(toks)) for lab, toks in rows]

    return ClassifyData(vocab=vocab, labels=labels, train=encode(train_rows), valid=encode(valid_rows), test=encode(test_rows))


def build_model_from_config(cfg: RunConfig, vocab_size: int, num_classes: int = 0):
    """Seeded model construction; identical config and seed give identical weights."""
    rng_init = SeededRng(cfg.seed).derive(_RNG_INIT)
    if cfg.task == "classify":
        return SentenceClassifier.build(
            vocab_size,
            num_classes,
            cfg.cell,
            cfg.hidden,
            cfg.layers,
            rng_init,
            embed_dim=cfg.embed_dim_effective,
            bidirectional=cfg.bidirectional,
        )
    return LanguageModel.build(
        vocab_size,
        cfg.cell,
        cfg.hidden,
        cfg.layers,
        rng_init,
        embed_dim=cfg.embed_dim_effective,
        bidirectional=cfg.bidirectional,
    )


def first_nonfinite_tensor(model) -> str:
    for name, arr in model.tensors():
        if not np.all(np.isfinite(arr)):
            return name
    return "<gradients>"


class Trainer:
    """Owns one run's output directory and state."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._lock_fh = None
        master = SeededRng(cfg.seed)
        self.rng_noise = master.derive(_RNG_NOISE)
        self.rng_data = master.derive(_RNG_DATA)
        self._carry = None
        self._prewarmed = cfg.algorithm != "psgld" or not cfg.warm_start
        self._best_valid = None
        self._bad_evals = 0

    # -- setup ---------------------------------------------------------------

    def _acquire_lock(self):
        lock_path = self.out / "lock"
        try:
            self._lock_fh = open(lock_path, "x")
            self._lock_fh.write("training\n")
            self._lock_fh.flush()
        except FileExistsError:
            raise ConfigError(f"output directory {self.out} is locked by another run (remove {lock_path})")

    def _release_lock(self):
        if self._lock_fh is not None:
            self._lock_fh.close()
            (self.out / "lock").unlink(missing_ok=True)
            self._lock_fh = None

    def _load_data(self):
        cfg = self.cfg
        if cfg.task == "classify":
            self.data = load_classify_data(cfg, self.out)
            self.vocab = self.data.vocab
            self.dataset_size = len(self.data.train)
            self.nominal_batch = min(cfg.minibatch_size, self.dataset_size)
        else:
            self.data = load_lm_data(cfg)
            self.vocab = self.data.vocab
            plan = data_mod.BatchPlan(
                mode=cfg.batch_mode,
                minibatch_size=cfg.minibatch_size,
                unroll_length=cfg.unroll_effective,
            )
            stream = data_mod.StreamCorpus("train", self.data.train_ids)
            if cfg.batch_mode == "successive":
                self.plan = data_mod.plan_successive(stream, plan)
            else:
                self.plan = data_mod.plan_random(stream, plan)
            self.dataset_size = len(self.data.train_ids)
            self.nominal_batch = min(cfg.minibatch_size * cfg.unroll_effective, self.dataset_size)

    def _build(self, resume: bool):
        cfg = self.cfg
        num_classes = len(self.data.labels) if cfg.task == "classify" else 0
        self.model = build_model_from_config(cfg, len(self.vocab), num_classes)
        self.hp = HyperParams(
            step_size=cfg.step_size,
            minibatch_size=self.nominal_batch,
            dataset_size=self.dataset_size,
            beta1=cfg.beta1,
            lam=cfg.lam,
            prior_variance=cfg.prior_variance,
            dropout_keep=cfg.dropout_keep,
            burn_in_epochs=cfg.burn_in,
            thinning_interval_epochs=cfg.thinning,
            clip_norm=cfg.clip_norm,
            decay_a=cfg.decay_a,
            decay_b=cfg.decay_b,
            decay_gamma=cfg.decay_gamma,
            warm_start=cfg.warm_start,
        )
        self.sampler_state = SamplerState.zeros(self.model.index.size)
        self.policy = CollectionPolicy(cfg.burn_in, cfg.thinning)
        self.bank = SampleBank(DirectoryBankStore(self.out / "bank")) if cfg.collect else None
        self.epoch_done = 0
        if resume:
            self._restore()

    def _restore(self):
        ck = self.out / "checkpoint"
        if not ck.with_suffix(".json").exists():
            raise ConfigError(f"resume requested but {ck}.json does not exist")
        tensors, meta = load_checkpoint(ck)
        if not self.cfg.matches_for_resume(meta["config"]):
            raise ConfigError("config does not match the checkpointed run")
        self.model.set_flat(tensors["theta"])
        self.sampler_state = SamplerState(v=tensors["sampler.v"], step_counter=int(meta["step_counter"]))
        self.rng_noise = SeededRng.from_state(meta["rng_noise"])
        self.rng_data = SeededRng.from_state(meta["rng_data"])
        self.epoch_done = int(meta["epoch_done"])
        self._prewarmed = bool(meta["prewarmed"])
        self._best_valid = meta["early_stop"]["best"]
        self._bad_evals = int(meta["early_stop"]["bad_count"])
        if self.bank is not None and meta.get("bank") is not None:
            self.bank.restore_meta(meta["bank"])

    def _save_checkpoint(self):
        meta = {
            "epoch_done": self.epoch_done,
            "step_counter": self.sampler_state.step_counter,
            "prewarmed": self._prewarmed,
            "rng_noise": self.rng_noise.get_state(),
            "rng_data": self.rng_data.get_state(),
            "bank": None if self.bank is None else self.bank.meta(),
            "config": self.cfg.to_dict(),
            "algorithm": self.cfg.algorithm,
            "vocab_size": len(self.vocab),
            "early_stop": {"best": self._best_valid, "bad_count": self._bad_evals},
        }
        tensors = {"theta": self.model.get_flat().values, "sampler.v": self.sampler_state.v}
        save_checkpoint(self.out / "checkpoint", tensors, meta)

    # -- single updates --------------------------------------------------------

    def _update(self, theta, g):
        if not self._prewarmed:
            self.sampler_state = prewarm(self.sampler_state, g, self.hp)
            self._prewarmed = True
            return theta
        noise_rng = self.rng_noise if self.cfg.algorithm in ("sgld", "psgld") else None
        theta_new, self.sampler_state = apply_update(
            self.cfg.algorithm, theta, g, self.sampler_state, self.hp, noise_rng
        )
        return theta_new

    def _lm_step(self, batch):
        cfg = self.cfg
        theta = self.model.get_flat().values
        weight_noise = None
        if cfg.dropout == "dropconnect":
            weight_noise = apply_weight_noise(
                theta, f"dropconnect-{cfg.dropconnect_mode}", cfg.dropout_keep, self.rng_noise
            )
            self.model.set_flat(weight_noise.theta_noisy)
        dropout = DropoutSpec(cfg.dropout_keep) if cfg.dropout == "naive" else None
        init = None if batch.reset_state else self._carry
        try:
            res = lm_loss_and_grad(
                self.model, batch.inputs, batch.targets, init=init, dropout=dropout, rng=self.rng_noise
            )
        except FloatingPointError:
            raise NumericalError(f"nonfinite loss; first bad tensor: {first_nonfinite_tensor(self.model)}")
        if not np.isfinite(res.nll_sum):
            raise NumericalError(f"nonfinite loss; first bad tensor: {first_nonfinite_tensor(self.model)}")
        raw = res.grads.values
        if weight_noise is not None:
            raw = weight_noise.chain_grads(raw)
            self.model.set_flat(theta)
        g = self._posterior(raw, theta, res.token_count)
        self.model.set_flat(self._update(theta, g))
        self._carry = res.final_state
        return res.nll_sum, res.token_count

    def _classify_step(self, examples):
        cfg = self.cfg
        theta = self.model.get_flat().values
        weight_noise = None
        if cfg.dropout == "dropconnect":
            weight_noise = apply_weight_noise(
                theta, f"dropconnect-{cfg.dropconnect_mode}", cfg.dropout_keep, self.rng_noise
            )
            self.model.set_flat(weight_noise.theta_noisy)
        dropout = DropoutSpec(cfg.dropout_keep) if cfg.dropout == "naive" else None
        raw = np.zeros_like(theta)
        nll = 0.0
        for label, ids in examples:
            res = classifier_loss_and_grad(self.model, ids, label, dropout=dropout, rng=self.rng_noise)
            raw += res.grads.values
            nll += res.nll
        if not np.isfinite(nll):
            raise NumericalError(f"nonfinite loss; first bad tensor: {first_nonfinite_tensor(self.model)}")
        if weight_noise is not None:
            raw = weight_noise.chain_grads(raw)
            self.model.set_flat(theta)
        g = self._posterior(raw, theta, len(examples))
        self.model.set_flat(self._update(theta, g))
        return nll, len(examples)

    def _posterior(self, raw, theta, batch_size_actual):
        try:
            return posterior_grad(raw, theta, self.hp, batch_size_actual)
        except FloatingPointError:
            raise NumericalError(f"nonfinite gradient; first bad tensor: {first_nonfinite_tensor(self.model)}")

    # -- evaluation -------------------------------------------------------------

    def _valid_metrics(self):
        cfg = self.cfg
        if cfg.task == "classify":
            nll, n, err = evaluate.classifier_point_metrics(self.model, self.data.valid)
            return {"loss": nll / n, "error_rate": err}
        nll, n = evaluate.lm_point_metrics(
            self.model, self.data.valid_ids, cfg.minibatch_size, cfg.unroll_effective
        )
        out = {"loss": nll / n}
        if cfg.task == "char-lm":
            out["cross_entropy"] = cross_entropy_per_char(nll, n)
            out["bits_per_char"] = cross_entropy_per_char(nll, n, bits=True)
        else:
            out["perplexity"] = perplexity(nll, n)
        return out

    def _test_metrics(self):
        cfg = self.cfg
        if cfg.task == "classify":
            nll, n, err = evaluate.classifier_point_metrics(self.model, self.data.test)
            return {"loss": nll / n, "error_rate": err}
        nll, n = evaluate.lm_point_metrics(
            self.model, self.data.test_ids, cfg.minibatch_size, cfg.unroll_effective
        )
        out = {"loss": nll / n}
        if cfg.task == "char-lm":
            out["cross_entropy"] = cross_entropy_per_char(nll, n)
            out["bits_per_char"] = cross_entropy_per_char(nll, n, bits=True)
        else:
            out["perplexity"] = perplexity(nll, n)
        return out

    # -- the loop -----------------------------------------------------------------

    def _epoch_batches(self):
        cfg = self.cfg
        if cfg.task == "classify":
            order = self.rng_data.permutation(len(self.data.train))
            B = self.nominal_batch
            return [
                [self.data.train[i] for i in order[s : s + B]]
                for s in range(0, len(order), B)
            ]
        return self.plan.epoch_batches(self.rng_data)

    def run(self) -> dict:
        cfg = self.cfg
        started = time.monotonic()
        resume = cfg.resume
        self._acquire_lock()
        try:
            self._load_data()
            self._build(resume)
            if resume:
                writer = MetricsWriter(self.out / "metrics.csv", resume=True)
            else:
                write_config(self.out / "config.txt", cfg)
                with open(self.out / "vocab.json", "w", encoding="utf-8") as fh:
                    json.dump(self.vocab.to_json(), fh)
                if cfg.task == "classify":
                    with open(self.out / "labels.json", "w", encoding="utf-8") as fh:
                        json.dump(self.data.labels, fh)
                writer = MetricsWriter(self.out / "metrics.csv", resume=False)

            early_stopped = False
            with writer:
                for epoch in range(self.epoch_done + 1, cfg.epochs + 1):
                    batches = self._epoch_batches()
                    nb = len(batches)
                    nll_total, count_total = 0.0, 0
                    self._carry = None
                    for bi, batch in enumerate(batches):
                        if cfg.task == "classify":
                            nll, cnt = self._classify_step(batch)
                        else:
                            nll, cnt = self._lm_step(batch)
                        nll_total += nll
                        count_total += cnt
                        if self.bank is not None:
                            frac = (epoch - 1) + (bi + 1) / nb
                            maybe_collect(self.bank, self.policy, frac, self.model.get_flat().values)
                    writer.row(epoch, "train", "loss", nll_total / max(1, count_total))
                    if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                        vm = self._valid_metrics()
                        for metric, value in vm.items():
                            writer.row(epoch, "valid", metric, value)
                        if cfg.early_stop_patience > 0:
                            loss = vm["loss"]
                            if self._best_valid is None or loss < self._best_valid:
                                self._best_valid = loss
                                self._bad_evals = 0
                            else:
                                self._bad_evals += 1
                                if self._bad_evals >= cfg.early_stop_patience:
                                    early_stopped = True
                    self.epoch_done = epoch
                    self._save_checkpoint()
                    if early_stopped or (cfg.stop_after > 0 and epoch >= cfg.stop_after):
                        break

                if cfg.stop_after > 0 and self.epoch_done < cfg.epochs and not early_stopped:
                    return {"stopped_after": self.epoch_done, "completed": False}

                tm = self._test_metrics()
                for metric, value in tm.items():
                    writer.row(self.epoch_done, "test", metric, value)

            summary = {
                "task": cfg.task,
                "algorithm": cfg.algorithm,
                "seed": cfg.seed,
                "epochs_run": self.epoch_done,
                "early_stopped": early_stopped,
                "samples_collected": 0 if self.bank is None else len(self.bank),
                "final_test": tm,
                "completed": True,
                "runtime_seconds": round(time.monotonic() - started, 3),
            }
            write_summary(self.out / "summary.json", summary)
            return summary
        finally:
            self._release_lock()


def run_training(cfg: RunConfig) -> dict:
    return Trainer(cfg).run()
