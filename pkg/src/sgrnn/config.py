"""Run configuration: a flat key=value file, every key overridable by a
same-named command-line flag (flags win). Unknown keys are rejected so an
experiment record stays diffable and typo-proof.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1."""


def _parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


@dataclass(frozen=True)
class _Key:
    type: type
    default: object
    help: str
    choices: Optional[tuple] = None


SCHEMA = {
    "task": _Key(str, "", "char-lm | word-lm | classify", ("char-lm", "word-lm", "classify")),
    "cell": _Key(str, "lstm", "recurrent cell type", ("lstm", "gru", "vanilla")),
    "layers": _Key(int, 2, "stacked recurrent layers"),
    "hidden": _Key(int, 128, "hidden units per layer"),
    "bidirectional": _Key(bool, False, "run a reversed pass per layer and concatenate"),
    "embed_dim": _Key(int, 0, "embedding width; 0 means equal to hidden"),
    "algorithm": _Key(str, "psgld", "update rule", ("sgd", "rmsprop", "sgld", "psgld")),
    "step_size": _Key(float, 1e-3, "constant step size"),
    "minibatch_size": _Key(int, 32, "sequences per minibatch"),
    "unroll": _Key(int, 0, "BPTT window; 0 means task default (100 char / 20 word)"),
    "epochs": _Key(int, 20, "total training epochs"),
    "burn_in": _Key(float, 1.0, "epochs before snapshot collection starts"),
    "thinning": _Key(float, 1.0, "epochs between snapshots"),
    "prior_variance": _Key(float, 1.0, "Gaussian prior variance on every weight"),
    "beta1": _Key(float, 0.99, "second-moment decay for preconditioned rules"),
    "lam": _Key(float, 1e-8, "preconditioner damping"),
    "clip_norm": _Key(float, 0.0, "clip the summed likelihood gradient norm; 0 disables"),
    "dropout": _Key(str, "off", "activation or weight noise", ("off", "naive", "dropconnect")),
    "dropout_keep": _Key(float, 0.5, "keep probability when dropout is enabled"),
    "dropconnect_mode": _Key(str, "binary", "dropconnect noise form", ("binary", "gaussian")),
    "batch_mode": _Key(str, "successive", "minibatch schedule", ("successive", "random")),
    "seed": _Key(int, 1, "master seed; fixes the whole run"),
    "train_path": _Key(str, "", "training split path"),
    "valid_path": _Key(str, "", "validation split path"),
    "test_path": _Key(str, "", "test split path"),
    "data_path": _Key(str, "", "single-file corpus (LM) or TSV (classification)"),
    "split_fractions": _Key(str, "0.9,0.05,0.05", "train/valid/test fractions for data_path"),
    "num_folds": _Key(int, 0, "k-fold split count for classification data_path"),
    "fold_index": _Key(int, 0, "which fold is the test fold"),
    "max_vocab": _Key(int, 0, "keep at most this many token types; 0 unlimited"),
    "min_count": _Key(int, 1, "minimum frequency for a vocabulary entry"),
    "out": _Key(str, "", "output directory; every artifact lands here"),
    "eval_every": _Key(int, 1, "validation interval in epochs"),
    "collect": _Key(bool, True, "stream posterior snapshots to the sample bank"),
    "warm_start": _Key(bool, True, "pre-accumulate the pSGLD preconditioner from the first minibatch"),
    "early_stop_patience": _Key(int, 0, "stop after this many non-improving validations; 0 disables"),
    "decay_a": _Key(float, 0.0, "polynomial step decay a*(b+t)^-gamma; 0 keeps the constant step"),
    "decay_b": _Key(float, 0.0, "polynomial decay offset"),
    "decay_gamma": _Key(float, 0.0, "polynomial decay exponent"),
    "stop_after": _Key(int, 0, "checkpoint and exit after this epoch (for resumable runs); 0 disables"),
    "resume": _Key(bool, False, "continue a run from its last checkpoint"),
}

# keys that may differ between the original run and a resumed invocation
RESUME_EXEMPT = ("resume", "stop_after")


class RunConfig:
    """Validated, typed view of one experiment's settings."""

    def __init__(self, values: dict):
        for key in values:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
        for key, spec in SCHEMA.items():
            raw = values.get(key, spec.default)
            setattr(self, key, self._coerce(key, spec, raw))
        self._validate()

    @staticmethod
    def _coerce(key, spec, raw):
        try:
            if spec.type is bool:
                val = raw if isinstance(raw, bool) else _parse_bool(raw)
            else:
                val = spec.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if spec.choices is not None and val not in spec.choices:
            raise ConfigError(f"config key {key!r} must be one of {spec.choices}, got {val!r}")
        return val

    def _validate(self):
        if not self.task:
            raise ConfigError("config key 'task' is required")
        if not self.out:
            raise ConfigError("config key 'out' is required")
        if self.layers < 1 or self.hidden < 1:
            raise ConfigError("layers and hidden must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        if self.task == "classify":
            have_folds = bool(self.data_path) and self.num_folds >= 2
            have_paths = bool(self.train_path) and bool(self.test_path)
            if not (have_folds or have_paths):
                raise ConfigError("classify needs data_path with num_folds >= 2, or train/test paths")
        else:
            if not self.data_path and not (self.train_path and self.valid_path and self.test_path):
                raise ConfigError("language modelling needs data_path or all of train/valid/test paths")
        if self.burn_in < 0 or self.thinning < 0:
            raise ConfigError("burn_in and thinning must be >= 0")

    @property
    def unroll_effective(self) -> int:
        if self.unroll > 0:
            return self.unroll
        return 100 if self.task == "char-lm" else 20

    @property
    def embed_dim_effective(self) -> int:
        return self.embed_dim if self.embed_dim > 0 else self.hidden

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in SCHEMA}

    def matches_for_resume(self, other: dict) -> bool:
        mine = self.to_dict()
        return all(mine[k] == other.get(k) for k in SCHEMA if k not in RESUME_EXEMPT)


def parse_config_file(path) -> dict:
    """Read key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_config(file_values: Optional[dict], overrides: dict) -> RunConfig:
    """Merge config-file values with flag overrides (flags win)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(merged)


def write_config(path, cfg: RunConfig) -> None:
    """Persist the resolved configuration as a diffable key=value file."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in SCHEMA:
            fh.write(f"{key}={getattr(cfg, key)}\n")
