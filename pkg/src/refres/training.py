"""Optimizer, schedule, batching, and the staged transfer protocol.

Training runs the textual model first; its encoder weights then seed the
multimodal model (transfer) or the multimodal model starts fresh
(baseline).  Everything is deterministic given (corpus, config, seed):
shuffling uses a per-epoch generator derived from the seed, and batches
are fixed-size with the last partial batch kept.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .datamodel import (INDIRECT_LABELS, LABELS, RelationLabel, build_mm_instances,
                        build_text_instances, label_from_value)
from .encoder import EncoderConfig, Vocab
from .fusion import FusionConfig
from .model import MRRModel, TRRModel, load_parameters


class GradientError(RuntimeError):
    """Non-finite loss or gradient encountered during a step."""


LABEL_PRESETS: dict[str, tuple[RelationLabel, ...]] = {
    "coref": (RelationLabel.DIRECT,),
    "pas-ba": INDIRECT_LABELS,
    "trr": LABELS,
    "direct-only": (RelationLabel.DIRECT,),
    "full": LABELS,
}
TASK_PRESETS = {"trr": ("coref", "pas-ba", "trr"), "mrr": ("direct-only", "full")}


def labels_for(task: str, preset: str | None) -> tuple[RelationLabel, ...]:
    """Map an ablation preset name to its label subset, checking that the
    preset applies to the task."""
    if preset is None:
        return LABELS
    if preset not in LABEL_PRESETS:
        raise ValueError(f"unknown label preset {preset!r}; "
                         f"choose from {sorted(LABEL_PRESETS)}")
    if preset not in TASK_PRESETS[task]:
        raise ValueError(f"label preset {preset!r} is incompatible with task {task!r}; "
                         f"valid presets: {TASK_PRESETS[task]}")
    return LABEL_PRESETS[preset]


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 1000
    epochs: int = 16
    batch_size: int = 16
    seed: int = 0
    train_window: int = 3
    max_grad_norm: float | None = None
    linear_decay: bool = False  # post-warmup lr held constant unless set

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be at least 1")


def lr_schedule(step: int, warmup: int = 1000, peak: float = 5e-5,
                total_steps: int | None = None, linear_decay: bool = False) -> float:
    """Linear ramp 0 to peak over `warmup` steps, then constant (default)
    or linear decay to zero at `total_steps`."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if linear_decay and total_steps is not None and total_steps > warmup:
        frac = (total_steps - step) / (total_steps - warmup)
        return peak * max(0.0, frac)
    return peak


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, T.Tensor]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, T.Tensor], state: OptimizerState, lr_t: float,
               weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, max_grad_norm: float | None = None) -> None:
    """One AdamW update with decoupled weight decay.

    Parameters with no gradient this step (absent from the loss graph) see
    only the decay factor.  A zero-gradient parameter with zero moments
    shrinks by exactly (1 - lr_t * decay).
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r} "
                                f"at step {t}")
        grads[name] = g
    if max_grad_norm is not None and grads:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        dt = p.data.dtype
        if weight_decay:
            p.data *= dt.type(1.0 - lr_t * weight_decay)
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr_t / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(dt, copy=False)


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    steps: int
    checkpoint_path: Path | None = None


def _run_loop(model, instances, cfg: TrainConfig,
              active: tuple[RelationLabel, ...]) -> tuple[list[dict], int]:
    params = model.parameters()
    state = OptimizerState.init(params)
    history: list[dict] = []
    n_batches = math.ceil(len(instances) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(instances))
        for b in range(n_batches):
            batch = [instances[i] for i in order[b * cfg.batch_size:
                                                 (b + 1) * cfg.batch_size]]
            T.zero_grads(params.values())
            total: T.Tensor | None = None
            for inst in batch:
                li = model.loss(inst, active_labels=active)
                total = li if total is None else total + li
            mean = total * (1.0 / len(batch))
            if not np.isfinite(mean.data):
                raise GradientError(f"non-finite loss at step {step + 1}")
            T.backward(mean)
            step += 1
            lr_t = lr_schedule(step, cfg.warmup_steps, cfg.learning_rate,
                               total_steps, cfg.linear_decay)
            adamw_step(params, state, lr_t, cfg.weight_decay,
                       max_grad_norm=cfg.max_grad_norm)
            history.append({"step": step, "split": "train",
                            "loss": float(mean.data), "lr": lr_t, "seed": cfg.seed})
    return history, step


def _write_log(log_path, history) -> None:
    if log_path is None:
        return
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _base_config(task, vocab, enc_cfg, cfg, fus_cfg=None) -> dict:
    out = {"task": task, "encoder": asdict(enc_cfg), "vocab": list(vocab.tokens),
           "train": asdict(cfg)}
    if fus_cfg is not None:
        out["fusion"] = asdict(fus_cfg)
    return out


def train_trr(docs, vocab: Vocab, enc_cfg: EncoderConfig, cfg: TrainConfig,
              active_labels: tuple[RelationLabel, ...] = LABELS,
              checkpoint_path=None, log_path=None) -> TrainResult:
    """Train the textual model over sliding windows of every document."""
    instances = [i for doc in docs
                 for i in build_text_instances(doc, cfg.train_window)]
    if not instances:
        raise ValueError("no text instances to train on")
    model = TRRModel(vocab, enc_cfg, seed=cfg.seed)
    history, steps = _run_loop(model, instances, cfg, active_labels)
    _write_log(log_path, history)
    if checkpoint_path is not None:
        meta = CheckpointMeta(config=_base_config("trr", vocab, enc_cfg, cfg),
                              labels=tuple(l.value for l in active_labels),
                              seed=cfg.seed, step=steps)
        save_checkpoint(checkpoint_path, model.parameters(), meta)
    return TrainResult(model, history, steps,
                       Path(checkpoint_path) if checkpoint_path else None)


def _check_transfer_compat(meta: CheckpointMeta, enc_cfg: EncoderConfig,
                           vocab: Vocab) -> None:
    got = meta.config.get("encoder")
    want = asdict(enc_cfg)
    if got != want:
        raise ValueError(f"transfer checkpoint encoder config {got} does not match "
                         f"the requested config {want}")
    if meta.config.get("vocab") != list(vocab.tokens):
        raise ValueError("transfer checkpoint was trained with a different vocabulary")


def init_mrr_model(vocab: Vocab, enc_cfg: EncoderConfig, fus_cfg: FusionConfig,
                   cfg: TrainConfig, init_encoder=None) -> tuple[MRRModel, dict | None]:
    """Build the multimodal model as training would see it at step one:
    seeded init, then (optionally) the textual checkpoint's encoder weights
    copied in bitwise."""
    model = MRRModel(vocab, enc_cfg, fus_cfg, seed=cfg.seed)
    init_info = None
    if init_encoder is not None:
        meta, arrays = load_checkpoint(init_encoder)
        _check_transfer_compat(meta, enc_cfg, vocab)
        copied = model.load_encoder_weights(arrays)
        # content hash, not path: checkpoint bytes must not depend on where
        # the pretrained file happened to live
        digest = hashlib.sha256(Path(init_encoder).read_bytes()).hexdigest()
        init_info = {"sha256": digest, "tensors": copied}
    return model, init_info


def train_mrr(docs, vocab: Vocab, enc_cfg: EncoderConfig, fus_cfg: FusionConfig,
              cfg: TrainConfig, init_encoder=None,
              active_labels: tuple[RelationLabel, ...] = LABELS,
              checkpoint_path=None, log_path=None) -> TrainResult:
    """Train the multimodal model, optionally seeding the encoder from a
    textual checkpoint path (staged transfer)."""
    instances = [i for doc in docs
                 for i in build_mm_instances(doc, cfg.train_window, mode="train")]
    if not instances:
        raise ValueError("no multimodal instances to train on")
    model, init_info = init_mrr_model(vocab, enc_cfg, fus_cfg, cfg, init_encoder)
    history, steps = _run_loop(model, instances, cfg, active_labels)
    _write_log(log_path, history)
    if checkpoint_path is not None:
        config = _base_config("mrr", vocab, enc_cfg, cfg, fus_cfg)
        if init_info is not None:
            config["init_encoder"] = init_info
        meta = CheckpointMeta(config=config,
                              labels=tuple(l.value for l in active_labels),
                              seed=cfg.seed, step=steps)
        save_checkpoint(checkpoint_path, model.parameters(), meta)
    return TrainResult(model, history, steps,
                       Path(checkpoint_path) if checkpoint_path else None)


def restore_model(path, vocab: Vocab | None = None):
    """Rebuild a trained model from its checkpoint file."""
    meta, arrays = load_checkpoint(path)
    task = meta.config.get("task")
    if vocab is None:
        vocab = Vocab(list(meta.config["vocab"]))
    enc_cfg = EncoderConfig(**meta.config["encoder"])
    if task == "trr":
        model = TRRModel(vocab, enc_cfg, seed=meta.seed)
    elif task == "mrr":
        fus_cfg = FusionConfig(**meta.config["fusion"])
        model = MRRModel(vocab, enc_cfg, fus_cfg, seed=meta.seed)
    else:
        raise ValueError(f"checkpoint {path} has unknown task {task!r}")
    load_parameters(model, arrays)
    return model, meta


def active_labels_from_meta(meta: CheckpointMeta) -> tuple[RelationLabel, ...]:
    return tuple(label_from_value(v) for v in meta.labels) if meta.labels else LABELS


def summarize_seeds(values: list[float]) -> dict:
    """Mean and standard deviation over per-seed metric values."""
    arr = np.asarray(values, dtype=np.float64)
    return {"n": int(arr.size), "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}
