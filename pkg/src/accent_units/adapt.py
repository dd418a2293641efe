"""Adapter-based continual pre-training of a masked-prediction acoustic encoder.

The encoder reads feature frames through a linear projection.  Spans of input
frames are swapped for a learned mask embedding and the model predicts the
unit id of every masked frame.  A base model is trained on standard-accent
targets; adaptation then inserts adapters, freezes everything else and
resumes the same objective on new (for example corrected) targets.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import neural
from .exceptions import ContractError, NotFittedError
from .mlm import TrainingLog, mask_budget, select_spans
from .seqcore import ClusterSequence

LOG_HEADER = ("step", "loss", "masked_acc", "lr")


@dataclass
class AcousticEncoderSpec:
    encoder: neural.EncoderConfig
    span_len: int = 10
    p_mask: float = 0.2

    def __post_init__(self):
        if self.encoder.input_kind != "feature":
            raise ContractError("adapt", "the acoustic encoder takes feature inputs")
        if self.span_len < 1:
            raise ContractError("adapt", "span_len must be >= 1")
        if not 0.0 < self.p_mask < 1.0:
            raise ContractError("adapt", f"p_mask must lie in (0, 1), got {self.p_mask}")

    @classmethod
    def desk(cls, input_dim: int, vocab_size: int, layers: int = 4, model_dim: int = 64,
             heads: int = 4, ffn_dim: int = 128, max_len: int = 256, **kw) -> "AcousticEncoderSpec":
        cfg = neural.EncoderConfig(layers=layers, model_dim=model_dim, heads=heads, ffn_dim=ffn_dim,
                                   max_len=max_len, input_kind="feature", vocab_out=vocab_size,
                                   input_dim=input_dim)
        return cls(cfg, **kw)


def _pairs(features, targets, input_dim: int, vocab: int):
    feats = [np.asarray(f, dtype=np.float32) for f in features]
    tgts = [t.as_array() if isinstance(t, ClusterSequence) else np.asarray(t, dtype=np.int64)
            for t in targets]
    if len(feats) != len(tgts):
        raise ContractError("adapt", f"{len(feats)} feature matrices but {len(tgts)} target sequences")
    pairs = []
    for i, (f, t) in enumerate(zip(feats, tgts)):
        if f.ndim != 2 or f.shape[1] != input_dim:
            raise ContractError("adapt", f"utterance {i}: feature dim {f.shape[-1]} != {input_dim}")
        if f.shape[0] != t.size:
            raise ContractError("adapt", f"utterance {i}: {f.shape[0]} feature frames vs {t.size} targets")
        if t.size and (t.min() < 0 or t.max() >= vocab):
            raise ContractError("adapt", f"utterance {i}: target ids outside [0, {vocab})")
        if t.size:
            pairs.append((f, t))
    if not pairs:
        raise ContractError("adapt", "empty corpus")
    return pairs


def _batch(pairs, idx, spec: AcousticEncoderSpec, rng):
    """Crop, pad and span-mask a batch; returns tensors for the encoder."""
    max_len = spec.encoder.max_len
    rows = []
    for i in idx:
        f, t = pairs[i]
        if t.size > max_len:
            s = int(rng.integers(t.size - max_len + 1))
            f, t = f[s:s + max_len], t[s:s + max_len]
        sel, _ = select_spans(t.size, spec.span_len, spec.p_mask, rng)
        if not sel.any():  # utterance too short for the budget: mask one frame
            sel[int(rng.integers(t.size))] = True
        rows.append((f, t, sel))
    T = max(r[1].size for r in rows)
    B, D = len(rows), spec.encoder.input_dim
    x = np.zeros((B, T, D), dtype=np.float32)
    y = np.zeros((B, T), dtype=np.int64)
    m = np.zeros((B, T), dtype=bool)
    pad = np.ones((B, T), dtype=bool)
    for b, (f, t, sel) in enumerate(rows):
        n = t.size
        x[b, :n], y[b, :n], m[b, :n], pad[b, :n] = f, t, sel, False
    return torch.from_numpy(x), torch.from_numpy(y), torch.from_numpy(m), torch.from_numpy(pad)


def _train(params: neural.EncoderParams, pairs, spec, schedule: neural.LRSchedule, seed: int,
           batch_size: int, stream: int, max_grad_norm: float | None = 1.0) -> TrainingLog:
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    rows = []
    for step in range(1, schedule.total_steps + 1):
        x, y, m, pad = _batch(pairs, rng.integers(len(pairs), size=batch_size), spec, rng)
        names = params.trainable()
        leaves = {n: params.tensors[n].detach().requires_grad_(True) for n in names}
        view = neural.EncoderParams(params.config, {**params.tensors, **leaves}, params.frozen,
                                    adapter=params.adapter)
        _, logits = neural.encoder_forward(view, x, pad, feature_mask=m)
        loss = neural.masked_cross_entropy(logits, y, m)
        grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
        grads = {n: torch.zeros_like(params.tensors[n]) if g is None else g for n, g in zip(names, grads)}
        value = float(loss.detach())
        if not math.isfinite(value):
            raise ContractError("adapt", f"non-finite loss at step {step}")
        acc = float((logits.detach().argmax(-1)[m] == y[m]).double().mean())
        lr = neural.optimizer_step(params, grads, step, schedule, max_grad_norm=max_grad_norm)
        rows.append((step, value, acc, lr))
    return TrainingLog(rows, LOG_HEADER)


def pretrain_base(spec: AcousticEncoderSpec, features, targets, schedule: neural.LRSchedule,
                  seed: int = 0, batch_size: int = 8):
    """Train the standard-accent backbone from random initialization.

    Returns ``(params, log)`` with log rows ``(step, loss, masked_acc, lr)``.
    """
    pairs = _pairs(features, targets, spec.encoder.input_dim, spec.encoder.vocab_out)
    params = neural.init_params(spec.encoder, seed=seed)
    log = _train(params, pairs, spec, schedule, seed, batch_size, stream=0xBA5E)
    params.moments.clear()
    return params, log


def insert_adapters(backbone: neural.EncoderParams, config: neural.AdapterConfig,
                    seed: int = 0) -> neural.EncoderParams:
    """Add adapters after attention and FFN of every layer and freeze the backbone."""
    if backbone.config.input_kind != "feature":
        raise ContractError("adapt", "adapters go on a feature-input acoustic encoder")
    if backbone.config.layers < 1:
        raise ContractError("adapt", "backbone has no layers to adapt")
    out = neural.add_adapters(backbone, config, seed=seed)
    out.moments.clear()
    out.frozen = set(out.backbone_names())
    expected = trainable_count(backbone.config, config)
    if out.n_params(trainable_only=True) != expected:
        raise ContractError("adapt", f"trainable count {out.n_params(True)} != {expected}")
    return out


def remove_adapters(params: neural.EncoderParams) -> neural.EncoderParams:
    """Drop the adapters and hand back a trainable backbone."""
    out = neural.strip_adapters(params)
    out.frozen.clear()
    out.moments.clear()
    return out


def trainable_count(encoder: neural.EncoderConfig, config: neural.AdapterConfig) -> int:
    return neural.adapter_param_count(encoder.model_dim, config.bottleneck) * 2 * encoder.layers


def _check_frozen(params: neural.EncoderParams) -> None:
    if params.adapter is None:
        raise ContractError("adapt", "model has no adapters")
    backbone = set(params.backbone_names())
    thawed = sorted(backbone - params.frozen)
    if thawed:
        raise ContractError("adapt", f"backbone parameters are not frozen: {thawed[:3]}")
    frozen_adapters = sorted(params.frozen - backbone)
    if frozen_adapters:
        raise ContractError("adapt", f"adapter parameters are frozen: {frozen_adapters[:3]}")


def _digest(params) -> str:
    return hashlib.sha256(neural.backbone_bytes(params)).hexdigest()


def continual_pretrain(params: neural.EncoderParams, spec: AcousticEncoderSpec, features, targets,
                       schedule: neural.LRSchedule, seed: int = 0, batch_size: int = 8):
    """Train the adapters only; returns ``(params, log)`` and leaves the input untouched."""
    _check_frozen(params)
    pairs = _pairs(features, targets, spec.encoder.input_dim, spec.encoder.vocab_out)
    work = params.copy()
    before = _digest(work)
    log = _train(work, pairs, spec, schedule, seed, batch_size, stream=0xADA7)
    if _digest(work) != before:
        raise ContractError("adapt", "backbone changed during adapter training")
    return work, log


def masked_frame_accuracy(params: neural.EncoderParams, spec: AcousticEncoderSpec, features,
                          targets, seed: int = 0) -> float:
    """Accuracy on span-masked frames against ``targets``, with fixed per-utterance masks."""
    pairs = _pairs(features, targets, spec.encoder.input_dim, spec.encoder.vocab_out)
    hits = total = 0
    max_len = spec.encoder.max_len
    with torch.no_grad():
        for i, (f, t) in enumerate(pairs):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            for s in range(0, t.size, max_len):
                fc, tc = f[s:s + max_len], t[s:s + max_len]
                if mask_budget(tc.size, spec.p_mask) < 1:
                    continue
                sel, _ = select_spans(tc.size, spec.span_len, spec.p_mask, rng)
                _, logits = neural.encoder_forward(params, torch.from_numpy(fc),
                                                   feature_mask=torch.from_numpy(sel))
                pred = logits.argmax(-1).numpy()
                hits += int((pred[sel] == tc[sel]).sum())
                total += int(sel.sum())
    if total == 0:
        raise ContractError("adapt", "no frames were masked for evaluation")
    return hits / total


class AdaptedEncoder(BaseEstimator):
    """Masked-prediction acoustic encoder with adapter adaptation.

    ``fit(features, targets)`` trains the backbone; ``adapt(features,
    targets)`` inserts adapters and trains only those; ``score(features,
    targets)`` is masked-frame accuracy.
    """

    def __init__(self, vocab_size=500, layers=4, model_dim=64, heads=4, ffn_dim=128, max_len=256,
                 bottleneck=8, span_len=10, p_mask=0.2, peak_lr=1.5e-3, warmup_steps=50,
                 n_steps=300, adapt_steps=300, batch_size=8, random_state=0):
        self.vocab_size = vocab_size
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.max_len = max_len
        self.bottleneck = bottleneck
        self.span_len = span_len
        self.p_mask = p_mask
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.n_steps = n_steps
        self.adapt_steps = adapt_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _spec(self, input_dim):
        return AcousticEncoderSpec.desk(input_dim, self.vocab_size, self.layers, self.model_dim,
                                        self.heads, self.ffn_dim, self.max_len,
                                        span_len=self.span_len, p_mask=self.p_mask)

    def fit(self, X: Sequence[np.ndarray], y):
        if not len(X):
            raise ContractError("adapt", "empty corpus")
        self.spec_ = self._spec(np.asarray(X[0]).shape[1])
        sched = neural.LRSchedule(self.peak_lr, min(self.warmup_steps, self.n_steps), self.n_steps)
        self.base_params_, self.base_log_ = pretrain_base(self.spec_, X, y, sched, self.random_state,
                                                          self.batch_size)
        self.params_ = self.base_params_
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(self)

    def adapt(self, X, y):
        self._check()
        with_adapters = insert_adapters(self.base_params_, neural.AdapterConfig(self.bottleneck),
                                        self.random_state)
        sched = neural.LRSchedule(self.peak_lr, min(self.warmup_steps, self.adapt_steps), self.adapt_steps)
        self.params_, self.adapt_log_ = continual_pretrain(with_adapters, self.spec_, X, y, sched,
                                                           self.random_state, self.batch_size)
        return self

    def score(self, X, y):
        self._check()
        return masked_frame_accuracy(self.params_, self.spec_, X, y, seed=self.random_state)
