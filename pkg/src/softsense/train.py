"""Run configuration, the training loop and run records."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    CorruptionSpec,
    Dataset,
    SynthConfig,
    corrupt_labels,
    load_csv,
    load_schema,
    preprocess,
    synth_generate,
    time_split,
)
from .loss import ClassWeights, SuperLossConfig, compute_beta, compute_loss, weighted_bce
from .metrics import TaskMetrics, task_metrics
from .model import (
    ConfigError,
    ModelConfig,
    build_model,
    commit_batchnorm,
    count_params,
    model_backward,
    model_forward,
    predict,
    save_checkpoint,
)
from .numeric import NumericError, make_rng
from .optim import (
    AdamState,
    EarlyStopState,
    ScheduleConfig,
    adam_step,
    early_stop_update,
    noam_lr,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("superloss", "weighted-bce")

DEFAULTS = {
    "data": {"synth": asdict(SynthConfig())},
    "model": {
        "embed_dim": 64,
        "num_blocks": 3,
        "kernel_sizes": [3, 5, 7],
        "dilations": [1, 2, 4],
        "dropout_rate": 0.5,
        "weight_decay": 1e-4,
        "bn_momentum": 0.99,
        "bn_epsilon": 1e-5,
    },
    "loss": {"mode": "superloss", "lam": 0.25, "C": None, "tau": None, "granularity": "sample"},
    "schedule": {"scale": 0.1, "warmup": 4000, "per_batch": False},
    "epochs": 500,
    "batch_size": 256,
    "patience": 100,
    "restore_best": True,
    "seeds": [0, 1, 2],
    "corruption": None,
    "robustness": {"fractions": [0.0, 0.2, 0.4, 0.6], "loss_modes": ["superloss", "weighted-bce"]},
    "threshold": 0.5,
    "eval_split": "test",
    "output_dir": "runs/default",
}

CONFIG_FILE = "config.resolved.json"
RECORD_FILE = "record.json"
CHECKPOINT_FILE = "model.ckpt"


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key {path}{sorted(unknown)[0]!r}")
    out = {}
    for k, dv in defaults.items():
        gv = given.get(k, dv)
        if isinstance(dv, dict) and k not in ("data",) and isinstance(gv, dict):
            out[k] = _merge(dv, gv, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(gv)
    return out


def resolve_config(raw: dict) -> dict:
    """Apply defaults and validate; the result names every field explicitly."""
    cfg = _merge(DEFAULTS, raw)
    data = cfg["data"]
    if not isinstance(data, dict) or len(data) == 0:
        raise ConfigError("data must name one source: synth, csv or cache")
    if "synth" in data:
        try:
            data["synth"] = asdict(SynthConfig(**data["synth"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synth: {exc}") from None
    elif "csv" in data:
        if "schema" not in data:
            raise ConfigError("data.csv needs a data.schema sidecar")
        data.setdefault("max_T", 2)
        data.setdefault("split_fractions", [70, 14, 8])
    elif "cache" not in data:
        raise ConfigError("data must name one source: synth, csv or cache")
    if cfg["loss"]["mode"] not in LOSS_MODES:
        raise ConfigError(f"loss.mode must be one of {LOSS_MODES}")
    for mode in cfg["robustness"]["loss_modes"]:
        if mode not in LOSS_MODES:
            raise ConfigError(f"robustness.loss_modes: unknown mode {mode!r}")
    if not isinstance(cfg["restore_best"], bool):
        raise ConfigError("restore_best must be true or false")
    for key in ("epochs", "batch_size", "patience"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if not cfg["seeds"] or not all(isinstance(s, int) for s in cfg["seeds"]):
        raise ConfigError("seeds must be a non-empty list of integers")
    if cfg["corruption"] is not None:
        cfg["corruption"] = _merge(asdict(CorruptionSpec()), cfg["corruption"], "corruption.")
        try:
            CorruptionSpec(**cfg["corruption"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg["eval_split"] not in ("train", "val", "test"):
        raise ConfigError("eval_split must be train, val or test")
    try:
        lc = cfg["loss"]
        SuperLossConfig(lc["lam"], lc["C"], lc["tau"], lc["granularity"]).validate()
        ScheduleConfig(d=cfg["model"]["embed_dim"], **cfg["schedule"])
        ModelConfig(input_features=1, timesteps=1, num_tasks=1, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    data = raw.get("data", {})
    # relative data paths are taken relative to the config file
    for key in ("csv", "schema", "cache"):
        if isinstance(data, dict) and key in data and not Path(data[key]).is_absolute():
            data[key] = str((path.parent / data[key]).resolve())
    return resolve_config(raw)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)


def load_dataset(cfg: dict) -> Dataset:
    data = cfg["data"]
    if "synth" in data:
        return synth_generate(SynthConfig(**data["synth"]))
    if "cache" in data:
        return Dataset.load(data["cache"])
    table = load_csv(data["csv"], load_schema(data["schema"]))
    tags = time_split(table, tuple(data["split_fractions"]))
    return preprocess(table, int(data["max_T"]), split=tags)


def loss_config(cfg: dict, num_tasks: int, mode: str | None = None) -> SuperLossConfig | None:
    mode = mode or cfg["loss"]["mode"]
    if mode == "weighted-bce":
        return None
    lc = cfg["loss"]
    return SuperLossConfig(lc["lam"], lc["C"], lc["tau"], lc["granularity"]).resolve(num_tasks)


def model_config(cfg: dict, ds: Dataset) -> ModelConfig:
    _, T, F = ds.features.shape
    return ModelConfig(input_features=F, timesteps=T, num_tasks=ds.num_tasks, **cfg["model"])


def class_weights(ds: Dataset) -> ClassWeights:
    pos, _ = ds.class_counts("train")
    n_train = len(ds.indices("train"))
    return compute_beta(pos, n_train, ds.num_tasks)


@dataclass
class RunRecord:
    config: dict
    seed: int
    loss_mode: str
    num_params: int
    beta: list
    epochs: list = field(default_factory=list)
    early_stop: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    eval_split: str = "test"
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def task_metrics(self) -> TaskMetrics:
        return TaskMetrics.from_dict(self.metrics)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _val_loss(state, X, y, m, weights: ClassWeights) -> float:
    if len(X) == 0:
        return math.nan
    yhat = predict(state, X)
    mask = m * weights.active[None, :]
    per_sample, _ = weighted_bce(y, yhat, weights.beta, mask)
    has_any = mask.sum(axis=1) > 0
    return float(per_sample[has_any].mean()) if has_any.any() else 0.0


def train_model(cfg: dict, ds: Dataset, seed: int, loss_mode: str | None = None, out_dir=None):
    """Train one model; returns ``(best_state, RunRecord)``.

    Early stopping watches the validation weighted-BCE (the train objective
    when the validation split is empty). The best-validation state is kept
    unless ``restore_best`` is off, in which case the final state is.
    """
    t0 = time.perf_counter()
    loss_mode = loss_mode or cfg["loss"]["mode"]
    mcfg = model_config(cfg, ds)
    sl_cfg = loss_config(cfg, ds.num_tasks, loss_mode)
    sched = ScheduleConfig(d=mcfg.embed_dim, **cfg["schedule"])
    weights = class_weights(ds)

    state = build_model(mcfg, make_rng([seed, 1]))
    shuffle_rng = make_rng([seed, 2])
    dropout_rng = make_rng([seed, 3])
    adam = AdamState()
    stopper = EarlyStopState(patience=cfg["patience"])

    Xtr, ytr, mtr = ds.subset("train")
    Xva, yva, mva = ds.subset("val")
    bs = cfg["batch_size"]
    record = RunRecord(
        config=cfg, seed=seed, loss_mode=loss_mode, num_params=count_params(mcfg),
        beta=weights.beta.tolist(), eval_split=cfg["eval_split"],
    )
    best = state.copy()
    step = 0
    for epoch in range(1, cfg["epochs"] + 1):
        order = shuffle_rng.permutation(len(Xtr))
        total, seen, sig_sum, lr = 0.0, 0, 0.0, 0.0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            if len(idx) * mcfg.timesteps < 2:
                continue
            step += 1
            lr = noam_lr(step if sched.per_batch else epoch, sched)
            Y, trace = model_forward(Xtr[idx], state, "train", dropout_rng)
            rep = compute_loss(ytr[idx], Y, weights, mtr[idx], sl_cfg)
            if not math.isfinite(rep.objective):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = model_backward(trace, rep.dY, state)
            commit_batchnorm(state, trace)
            adam_step(state.params, grads, adam, lr)
            total += rep.objective * len(idx)
            sig_sum += float(np.mean(rep.sigma)) * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        val_loss = _val_loss(state, Xva, yva, mva, weights)
        monitored = val_loss if math.isfinite(val_loss) else train_loss
        improved = early_stop_update(stopper, monitored)
        record.epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
             "mean_weight": sig_sum / max(seen, 1)}
        )
        if stopper.failed:
            raise NumericError(f"monitored loss became non-finite at epoch {epoch}")
        if improved and cfg["restore_best"]:
            best = state.copy()
        if stopper.stopped:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    if not cfg["restore_best"]:
        best = state
    record.early_stop = {
        "stopped": stopper.stopped, "best_epoch": stopper.best_epoch,
        "best_loss": stopper.best, "epochs_run": len(record.epochs),
    }
    Xe, ye, me = ds.subset(cfg["eval_split"])
    record.metrics = task_metrics(predict(best, Xe), ye, me, cfg["threshold"]).to_dict()
    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")
        save_checkpoint(best, out / CHECKPOINT_FILE)
        record.checkpoint = str(out / CHECKPOINT_FILE)
        record.save(out / RECORD_FILE)
    return best, record


def prepare_dataset(cfg: dict) -> Dataset:
    ds = load_dataset(cfg)
    if cfg["corruption"] is not None:
        ds = corrupt_labels(ds, CorruptionSpec(**cfg["corruption"]))
    return ds
