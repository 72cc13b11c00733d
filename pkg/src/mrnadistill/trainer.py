"""The distillation training loop.

AdamW with decoupled weight decay, linear warmup into a constant
learning rate, global gradient-norm clipping, dropout-enabled student
forwards against a frozen teacher, per-step metric logging to JSONL,
periodic eval-mode validation with the full diagnostic suite, and
checkpointing at eval points.

Determinism contract: with a fixed config and seed the entire metrics
file is byte-identical across runs on the same platform and kernel
backend.  Data order, dropout masks, and init each draw from their own
labelled streams of the run seed, so they cannot perturb one another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backend import kernels
from .errors import ConfigError, ContractError, TrainingDiverged
from .losses import (LossWeights, batch_entropy_profile, cosine_loss,
                     embedding_variance, kl_loss, linear_cka, mse_loss,
                     train_loss)
from .rng import SeededRng
from .student import StudentModel
from .tokenizer import TokenizedDataset

# stable metric field names; every JSONL record carries all of them
# (cka_* values are column-centered; *_raw applies the formula uncentered)
METRIC_FIELDS = (
    "step", "split", "loss_total", "loss_cos_tap1", "loss_cos_tap2",
    "loss_mse_tap1", "loss_mse_tap2", "kl", "grad_norm", "emb_var",
    "emb_norm", "cka_pre_tap1", "cka_pre_tap2", "cka_post_tap1",
    "cka_post_tap2", "cka_pre_tap1_raw", "cka_pre_tap2_raw",
    "cka_post_tap1_raw", "cka_post_tap2_raw", "entropy_mean",
    "entropy_max", "mean_token_prob", "student_entropy_mean",
    "student_mean_token_prob",
)


@dataclass
class TrainConfig:
    batch_size: int = 32
    context_length: int = 2048
    lr_max: float = 2e-4
    warmup_steps: int = 2000
    weight_decay: float = 1e-2
    grad_clip_max: float = 1.0
    dropout: float = 0.10
    lambda_cos: float = 1.0
    lambda_mse: float = 0.1
    temperature: float = 1.0
    # no defensible published default exists for run length
    max_steps: int | None = None
    eval_every: int = 200
    seed: int = 0
    mode: str = "embedding"  # "embedding" | "logit"
    val_fraction: float = 0.02

    def __post_init__(self):
        if self.mode not in ("embedding", "logit"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.max_steps is None:
            raise ConfigError("max_steps is a required config field")
        for name in ("batch_size", "context_length", "max_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr_max <= 0 or self.grad_clip_max <= 0:
            raise ConfigError("lr_max and grad_clip_max must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be non-negative")

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_cos=self.lambda_cos, lambda_mse=self.lambda_mse,
                           weight_decay=self.weight_decay, temperature=self.temperature)


def lr_schedule(step: int, lr_max: float, warmup_steps: int) -> float:
    """Linear warmup to lr_max over warmup_steps, constant afterwards."""
    if step < 1:
        raise ContractError(f"lr_schedule step must be >= 1, got {step}")
    if warmup_steps <= 0:
        return lr_max
    return lr_max * min(1.0, step / warmup_steps)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale grads in place so the global l2 norm is <= max_norm.

    Returns the pre-clip norm (the Fig-A2-style logged quantity).
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, T.Tensor], weight_decay: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        for p in params.values():  # reshape(-1) below must stay a view
            p.data = np.ascontiguousarray(p.data)
        self.m = {k: np.zeros(p.data.size, dtype=p.data.dtype) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.size, dtype=p.data.dtype) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = np.ascontiguousarray(grad, dtype=p.data.dtype).reshape(-1)
            kernels.adamw_update(p.data.reshape(-1), flat, self.m[name], self.v[name],
                                 self.t, lr, self.beta1, self.beta2, self.eps,
                                 self.weight_decay)


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               step: int, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Single raw AdamW update on flat arrays (in place)."""
    kernels.adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay)


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoint_paths: list[Path]
    final_metrics: dict
    initial_metrics: dict = field(default_factory=dict)


def _null_record(step: int, split: str) -> dict:
    rec = {name: None for name in METRIC_FIELDS}
    rec["step"] = step
    rec["split"] = split
    return rec


class _BatchSampler:
    """Seeded epoch-reshuffled index stream; deterministic and
    independent of everything else touching the run seed."""

    def __init__(self, n: int, batch_size: int, rng: SeededRng):
        if n < 1:
            raise ContractError("training dataset is empty")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.queue: list[int] = []

    def next_batch(self) -> np.ndarray:
        while len(self.queue) < self.batch_size:
            self.queue.extend(int(i) for i in self.rng.permutation(self.n))
        out = np.asarray(self.queue[: self.batch_size], dtype=np.int64)
        del self.queue[: self.batch_size]
        return out


def _validation(student: StudentModel, teacher, data: TokenizedDataset,
                indices: np.ndarray, config: TrainConfig) -> dict:
    """Eval-mode pass over the whole validation split; all diagnostics."""
    weights = config.loss_weights()
    taps = len(student.config.tap_layers)
    cos_sums = np.zeros(taps)
    mse_sums = np.zeros(taps)
    kl_sum = 0.0
    rows = 0
    raw_chunks: list[list[np.ndarray]] = [[] for _ in range(taps)]
    proj_chunks: list[list[np.ndarray]] = [[] for _ in range(taps)]
    target_chunks: list[list[np.ndarray]] = [[] for _ in range(taps)]
    final_chunks: list[np.ndarray] = []
    entropy_profiles = []
    student_profiles = []
    vocab_dim = 0

    for start in range(0, len(indices), config.batch_size):
        idx = indices[start:start + config.batch_size]
        tokens = data.tokens[idx]
        mask = data.masks[idx]
        out = student.forward(tokens, mask, train=False,
                              with_logits=(config.mode == "logit"))
        targets = teacher.targets(tokens, mask, indices=idx, dtype=student.dtype)
        b = len(idx)
        for i in range(taps):
            cos_sums[i] += cosine_loss(out.tap_projected[i], targets[i]).item() * b
            mse_sums[i] += mse_loss(out.tap_projected[i], targets[i]).item() * b
            raw_chunks[i].append(out.tap_raw[i].data)
            proj_chunks[i].append(out.tap_projected[i].data)
            target_chunks[i].append(targets[i])
        final_chunks.append(out.final_embedding.data)
        if config.mode == "logit":
            t_logits = teacher.logits(tokens, mask, indices=idx)
            vocab_dim = t_logits.shape[-1]
            kl_sum += kl_loss(t_logits, out.logits, mask, weights.temperature).item() * b
            entropy_profiles.append(batch_entropy_profile(t_logits, mask))
            student_profiles.append(batch_entropy_profile(out.logits.data, mask))
        rows += b

    cos_means = cos_sums / rows
    mse_means = mse_sums / rows
    finals = np.vstack(final_chunks)
    record: dict = {}
    if config.mode == "logit":
        record["kl"] = kl_sum / rows
        record["loss_total"] = record["kl"]
        profile = np.mean(np.vstack(entropy_profiles), axis=0)
        record["entropy_mean"] = float(profile.mean())
        record["entropy_max"] = float(profile.max())
        record["mean_token_prob"] = float(np.exp(-profile.mean()))
        record["entropy_profile"] = [float(x) for x in profile]
        sprofile = np.mean(np.vstack(student_profiles), axis=0)
        record["student_entropy_mean"] = float(sprofile.mean())
        record["student_mean_token_prob"] = float(np.exp(-sprofile.mean()))
        record["entropy_uniform"] = float(np.log(vocab_dim)) if vocab_dim else None
    else:
        record["loss_total"] = float(weights.lambda_cos * cos_means.mean()
                                     + weights.lambda_mse * mse_means.mean())
    norms = []
    for i in range(taps):
        raw = np.vstack(raw_chunks[i])
        proj = np.vstack(proj_chunks[i])
        tgt = np.vstack(target_chunks[i])
        record[f"loss_cos_tap{i+1}"] = float(cos_means[i])
        record[f"loss_mse_tap{i+1}"] = float(mse_means[i])
        if raw.shape[0] >= 2:
            record[f"cka_pre_tap{i+1}"] = linear_cka(tgt, raw)
            record[f"cka_post_tap{i+1}"] = linear_cka(tgt, proj)
            record[f"cka_pre_tap{i+1}_raw"] = linear_cka(tgt, raw, centered=False)
            record[f"cka_post_tap{i+1}_raw"] = linear_cka(tgt, proj, centered=False)
        norms.append(float(np.linalg.norm(proj, axis=1).mean()))
    record["emb_norm"] = float(np.mean(norms))
    if finals.shape[0] >= 2:
        record["emb_var"] = embedding_variance(finals)
    return record


def validation_pass(student: StudentModel, teacher, data: TokenizedDataset,
                    config: TrainConfig) -> dict:
    """Public eval-mode metrics pass over a whole dataset."""
    if len(data) == 0:
        raise ContractError("validation_pass requires a non-empty dataset")
    return _validation(student, teacher, data, np.arange(len(data), dtype=np.int64), config)


def train(config: TrainConfig, train_data: TokenizedDataset, val_data: TokenizedDataset,
          teacher, student: StudentModel, out_dir, val_teacher=None) -> TrainResult:
    """Run the distillation loop; writes metrics.jsonl and checkpoints.

    `val_teacher` defaults to `teacher`; a separate instance is needed
    only for file-backed teachers, whose targets are indexed per split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if val_teacher is None:
        val_teacher = teacher
    if tuple(teacher.layer_dims) != tuple(student.config.proj_dims):
        raise ConfigError(f"teacher layer dims {teacher.layer_dims} do not match "
                          f"student projection dims {student.config.proj_dims}")
    if train_data.context_length != config.context_length:
        raise ConfigError(f"dataset context length {train_data.context_length} "
                          f"!= config context length {config.context_length}")
    if config.mode == "logit" and not student.config.logit_head:
        raise ConfigError("logit mode requires a student logit head")

    weights = config.loss_weights()
    sampler = _BatchSampler(len(train_data), config.batch_size,
                            SeededRng(config.seed).derive("data"))
    dropout_rng = SeededRng(config.seed).derive("dropout")
    optimizer = AdamW(student.parameters(), weight_decay=config.weight_decay)
    val_indices = np.arange(len(val_data), dtype=np.int64)

    metrics_path = out_dir / "metrics.jsonl"
    checkpoints: list[Path] = []
    final_val: dict = {}
    initial_val: dict = {}

    with open(metrics_path, "w") as metrics_fh:
        def emit(record: dict) -> None:
            metrics_fh.write(json.dumps(record) + "\n")

        if len(val_data) > 0:
            rec = _null_record(0, "val")
            rec.update(_validation(student, val_teacher, val_data, val_indices, config))
            initial_val = rec
            emit(rec)

        for step in range(1, config.max_steps + 1):
            idx = sampler.next_batch()
            tokens = train_data.tokens[idx]
            mask = train_data.masks[idx]
            student.zero_grad()
            with T.Tape() as tape:
                out = student.forward(tokens, mask, train=True, dropout_rng=dropout_rng,
                                      with_logits=(config.mode == "logit"))
                if config.mode == "embedding":
                    targets = teacher.targets(tokens, mask, indices=idx, dtype=student.dtype)
                    loss, breakdown = train_loss(zip(out.tap_projected, targets), weights)
                else:
                    t_logits = teacher.logits(tokens, mask, indices=idx)
                    loss = kl_loss(t_logits, out.logits, mask, weights.temperature)
                    breakdown = {}
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                diag = {"step": step, "batch_indices": [int(i) for i in idx]}
                with open(out_dir / "divergence.json", "w") as fh:
                    json.dump(diag, fh)
                raise TrainingDiverged(f"non-finite loss at step {step}",
                                       step=step, batch_indices=idx)
            params = student.parameters()
            tape.backward(loss, params.values())
            grads = [p.grad for p in params.values()]
            pre_norm = clip_global_norm(grads, config.grad_clip_max)
            if T.debug_enabled():
                post = float(np.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1)))
                                         for g in grads)))
                assert post <= config.grad_clip_max * (1 + 1e-6), post
            optimizer.step(lr_schedule(step, config.lr_max, config.warmup_steps))

            rec = _null_record(step, "train")
            rec["loss_total"] = loss_value
            rec["grad_norm"] = pre_norm
            if config.mode == "embedding":
                for i in range(len(out.tap_projected)):
                    rec[f"loss_cos_tap{i+1}"] = breakdown.get(f"cos_tap{i+1}")
                    rec[f"loss_mse_tap{i+1}"] = breakdown.get(f"mse_tap{i+1}")
            else:
                rec["kl"] = loss_value
            emit(rec)

            if step % config.eval_every == 0 or step == config.max_steps:
                if len(val_data) > 0:
                    rec = _null_record(step, "val")
                    rec.update(_validation(student, val_teacher, val_data, val_indices, config))
                    final_val = rec
                    emit(rec)
                ckpt = out_dir / f"checkpoint_{step:06d}.hnanockp"
                student.save(ckpt)
                checkpoints.append(ckpt)

    return TrainResult(metrics_path=metrics_path, checkpoint_paths=checkpoints,
                       final_metrics=final_val, initial_metrics=initial_val)
