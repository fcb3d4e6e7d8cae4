"""Contrastive alignment training: losses, optimizer, and the two-stage driver.

Two loss heads are available. The softmax head scales the cosine logit matrix
by a learnable inverse temperature (initialized to 14) and averages row-wise
and column-wise cross-entropy against the diagonal. The sigmoid head scores
every pair independently: mean over all B^2 entries of
log(1 + exp(-z_ij * (t * logit_ij + b))) with z = +1 on the diagonal and -1 off
it, t initialized to 10 and b to -10. Temperatures are parameterized through an
exponential so they stay positive.

Training runs staged: each stage sets its own learning rate and its own set of
unfrozen text-tower layers (the set encoder always trains). Adam uses decoupled
weight decay, linear warmup, and cosine decay over a shared step counter.
Everything is deterministic for a fixed schedule seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import eval as evalmod
from . import model as modelmod
from ._fileio import atomic_write_text
from .autodiff import Var
from .errors import ConfigError, DegenerateInput, ShapeMismatch
from .synth import pack_photos, pack_texts

__all__ = [
    "LossConfig",
    "LossParams",
    "create_loss_params",
    "infonce_loss",
    "siglip_loss",
    "compute_loss",
    "AdamHyper",
    "AdamState",
    "init_adam_state",
    "adam_step",
    "learning_rate_at",
    "TrainStage",
    "TrainSchedule",
    "TrainLog",
    "TrainResult",
    "train",
]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    kind: str = "infonce"  # "infonce" or "siglip"
    init_inv_temp: float = 14.0  # softmax head: logits are multiplied by this
    init_t: float = 10.0         # sigmoid head multiplier
    init_b: float = -10.0        # sigmoid head bias

    def validate(self) -> None:
        if self.kind not in ("infonce", "siglip"):
            raise ConfigError(f"loss kind must be 'infonce' or 'siglip', got {self.kind!r}")
        if self.init_inv_temp <= 0 or self.init_t <= 0:
            raise ConfigError("loss temperature initializers must be positive")


@dataclass
class LossParams:
    """Trainable loss scalars, exponential-parameterized where positivity matters."""

    kind: str
    tensors: dict[str, Var]

    def named(self):
        return list(self.tensors.items())

    def temperature(self) -> float:
        """Current temperature (the softmax divisor, or 1/t for the sigmoid head)."""
        if self.kind == "infonce":
            return float(np.exp(-self.tensors["loss.log_inv_temp"].value))
        return float(np.exp(-self.tensors["loss.log_t"].value))


def create_loss_params(config: LossConfig) -> LossParams:
    config.validate()
    if config.kind == "infonce":
        tensors = {"loss.log_inv_temp": ad.param(np.log(config.init_inv_temp))}
    else:
        tensors = {
            "loss.log_t": ad.param(np.log(config.init_t)),
            "loss.bias": ad.param(np.float64(config.init_b)),
        }
    return LossParams(kind=config.kind, tensors=tensors)


def _check_logits(logits, min_b: int) -> Var:
    lv = logits if isinstance(logits, Var) else ad.constant(np.asarray(logits, dtype=np.float64))
    if lv.value.ndim != 2 or lv.value.shape[0] != lv.value.shape[1]:
        raise ShapeMismatch(f"logits must be square, got shape {lv.value.shape}")
    if lv.value.shape[0] < min_b:
        raise DegenerateInput(f"need a batch of at least {min_b}, got {lv.value.shape[0]}")
    if not np.isfinite(lv.value).all():
        raise DegenerateInput("logits contain NaN or Inf")
    return lv


def infonce_loss(logits, temperature=1.0) -> Var:
    """Symmetric cross-entropy against the diagonal.

    Rows treat photoset i against all texts, columns treat text j against all
    photosets; the two cross-entropies are averaged. temperature divides the
    logits and may be a Var for a learnable value.
    """
    lv = _check_logits(logits, min_b=2)
    b = lv.value.shape[0]
    scaled = lv / temperature
    diag = (np.arange(b), np.arange(b))
    loss_rows = -(ad.log_softmax(scaled, axis=1)[diag]).mean()
    loss_cols = -(ad.log_softmax(scaled, axis=0)[diag]).mean()
    return (loss_rows + loss_cols) * 0.5


def siglip_loss(logits, temperature=1.0, bias=0.0) -> Var:
    """Pairwise sigmoid loss over all B^2 pairs.

    Positive pairs sit on the diagonal (sign +1), every off-diagonal pair is a
    negative (sign -1); each contributes log(1 + exp(-sign * (t * logit + b))).
    """
    lv = _check_logits(logits, min_b=1)
    b = lv.value.shape[0]
    signs = ad.constant(2.0 * np.eye(b) - 1.0)
    scaled = lv * temperature + bias
    return (-ad.log_sigmoid(signs * scaled)).mean()


def compute_loss(params: LossParams, logits) -> Var:
    """Loss for a logit matrix under the trainable loss scalars."""
    if params.kind == "infonce":
        temp = ad.exp(-params.tensors["loss.log_inv_temp"])
        return infonce_loss(logits, temperature=temp)
    t = ad.exp(params.tensors["loss.log_t"])
    return siglip_loss(logits, temperature=t, bias=params.tensors["loss.bias"])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("adam eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(*param_groups) -> AdamState:
    m, v = {}, {}
    for group in param_groups:
        for name, var in group.named():
            m[name] = np.zeros_like(var.value)
            v[name] = np.zeros_like(var.value)
    return AdamState(m=m, v=v)


def learning_rate_at(step: int, base_lr: float, warmup_steps: int, horizon: int) -> float:
    """base_lr x linear warmup (step/warmup, capped at 1) x cosine decay."""
    warm = min(1.0, step / warmup_steps) if warmup_steps > 0 else 1.0
    progress = min(1.0, step / horizon) if horizon > 0 else 0.0
    return base_lr * warm * 0.5 * (1.0 + np.cos(np.pi * progress))


def adam_step(param_groups, grads, state: AdamState, hyper: AdamHyper, step_index: int, lr: float) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Frozen tensors (requires_grad False) are skipped entirely: neither their
    values nor their moments change.
    """
    t = step_index + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for group in param_groups:
        for name, var in group.named():
            if not var.requires_grad:
                continue
            g = grads[name]
            m = state.m[name] = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
            v = state.v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
            var.value = var.value - lr * (update + hyper.weight_decay * var.value)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainStage:
    epochs: int
    lr: float
    unfreeze_text_layers: tuple = ()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("each stage needs epochs >= 1")
        if self.lr <= 0:
            raise ConfigError("stage learning rate must be positive")


@dataclass(frozen=True)
class TrainSchedule:
    stages: tuple = ()
    batch_size: int = 64
    seed: int = 0
    warmup_steps: int = 0
    cosine_horizon: int | None = None  # None: total optimizer steps
    adam: AdamHyper = field(default_factory=AdamHyper)
    grad_accum: int = 1
    eval_ks: tuple = (1, 5, 10)

    def validate(self) -> None:
        for stage in self.stages:
            stage.validate()
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.cosine_horizon is not None and self.cosine_horizon < 1:
            raise ConfigError("cosine_horizon must be >= 1")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        self.adam.validate()


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def save_jsonl(self, path: str) -> None:
        lines = [json.dumps({"kind": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"kind": "epoch", **e}, sort_keys=True) for e in self.epochs]
        atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")

    def save_epoch_csv(self, path: str) -> None:
        if not self.epochs:
            atomic_write_text(path, "")
            return
        cols = list(self.epochs[0].keys())
        rows = [",".join(cols)]
        for e in self.epochs:
            rows.append(",".join(repr(e[c]) if isinstance(e[c], float) else str(e[c]) for c in cols))
        atomic_write_text(path, "\n".join(rows) + "\n")


@dataclass
class TrainResult:
    ps: modelmod.SetEncoderParams
    te: modelmod.TextTowerParams
    loss_params: LossParams
    log: TrainLog


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _epoch_metrics(ps, te, photos, counts, texts, query_indices, ks):
    ps_emb = modelmod.encode_photoset_batch(ps, photos, counts)
    text_emb = modelmod.encode_text(te, texts)
    metrics = evalmod.retrieval_metrics(text_emb, ps_emb, ks=ks, query_indices=query_indices)
    row = {
        "mean_rank_t2i": metrics.mean_rank_t2i,
        "mean_rank_i2t": metrics.mean_rank_i2t,
    }
    for k in ks:
        row[f"recall_t2i@{k}"] = metrics.recall_t2i[k]
        row[f"recall_i2t@{k}"] = metrics.recall_i2t[k]
    return row


def train(
    train_records,
    holdout_records,
    ps: modelmod.SetEncoderParams,
    te: modelmod.TextTowerParams,
    loss_config: LossConfig,
    schedule: TrainSchedule,
) -> TrainResult:
    """Run the staged schedule; returns the trained towers, loss scalars, and log.

    Per optimizer step the log records loss, learning rate, and gradient norm;
    per epoch it records holdout retrieval metrics (holdout queries ranked
    against the full train+holdout gallery). An empty schedule returns the
    parameters untouched.
    """
    schedule.validate()
    loss_config.validate()
    n = len(train_records)
    if n < 2:
        raise DegenerateInput("train: need at least 2 training records")
    if schedule.batch_size > n:
        raise ConfigError(f"batch_size {schedule.batch_size} exceeds dataset size {n}")
    for stage in schedule.stages:  # fail fast on bad layer indices
        modelmod.set_text_freeze(te, stage.unfreeze_text_layers)

    loss_params = create_loss_params(loss_config)
    state = init_adam_state(ps, te, loss_params)
    groups = (ps, te, loss_params)
    log = TrainLog()

    photos, counts = pack_photos(train_records)
    texts = pack_texts(train_records)
    everything = list(train_records) + list(holdout_records or [])
    if holdout_records:
        all_photos, all_counts = pack_photos(everything)
        all_texts = pack_texts(everything)
        query_indices = np.arange(n, len(everything))

    batches_per_epoch = n // schedule.batch_size
    steps_per_epoch = -(-batches_per_epoch // schedule.grad_accum)
    total_epochs = sum(s.epochs for s in schedule.stages)
    total_steps = total_epochs * steps_per_epoch
    horizon = schedule.cosine_horizon if schedule.cosine_horizon is not None else total_steps

    step = 0
    epoch = 0
    for stage_idx, stage in enumerate(schedule.stages):
        modelmod.set_text_freeze(te, stage.unfreeze_text_layers)
        for _ in range(stage.epochs):
            order = np.random.default_rng((schedule.seed, epoch)).permutation(n)
            acc_grads = None
            acc_count = 0
            losses = []
            for b in range(batches_per_epoch):
                idx = order[b * schedule.batch_size : (b + 1) * schedule.batch_size]
                logits, tape = modelmod.forward_batch(ps, te, photos[idx], counts[idx], texts[idx])
                with tape:
                    loss = compute_loss(loss_params, logits)
                grads = modelmod.backward(tape, loss, *groups)
                losses.append(float(loss.value))
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for name in acc_grads:
                        acc_grads[name] = acc_grads[name] + grads[name]
                acc_count += 1
                if acc_count == schedule.grad_accum or b == batches_per_epoch - 1:
                    for name in acc_grads:
                        acc_grads[name] = acc_grads[name] / acc_count
                    lr = learning_rate_at(step, stage.lr, schedule.warmup_steps, horizon)
                    adam_step(groups, acc_grads, state, schedule.adam, step, lr)
                    gnorm = float(
                        np.sqrt(sum(float(np.sum(g * g)) for g in acc_grads.values()))
                    )
                    log.steps.append(
                        {
                            "step": step,
                            "stage": stage_idx,
                            "epoch": epoch,
                            "loss": float(np.mean(losses[-acc_count:])),
                            "lr": float(lr),
                            "grad_norm": gnorm,
                        }
                    )
                    step += 1
                    acc_grads = None
                    acc_count = 0
            epoch_row = {"epoch": epoch, "stage": stage_idx, "train_loss": float(np.mean(losses))}
            if holdout_records:
                epoch_row.update(
                    _epoch_metrics(ps, te, all_photos, all_counts, all_texts, query_indices, schedule.eval_ks)
                )
            log.epochs.append(epoch_row)
            epoch += 1
    return TrainResult(ps=ps, te=te, loss_params=loss_params, log=log)
