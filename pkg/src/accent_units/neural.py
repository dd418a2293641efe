"""Small pre-LN transformer encoder with Houlsby adapters, written functionally.

Parameters live in :class:`EncoderParams`, a flat table of named tensors with
per-parameter frozen flags and Adam moments.  ``encoder_forward`` reads that
table; autograd supplies the backward pass and ``finite_difference_check``
verifies it coordinate by coordinate.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ContractError

CHECKPOINT_MAGIC = b"ENCP"
CHECKPOINT_VERSION = 1
PLACEMENTS = ("attn", "ffn")
LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    layers: int = 6
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.0
    input_kind: Literal["token", "feature"] = "token"
    vocab_out: int = 500
    input_dim: int | None = None  # feature dim for input_kind="feature"

    def __post_init__(self):
        self.validate()

    @property
    def vocab_in(self) -> int:
        # one extra row for the mask id
        return self.vocab_out + 1

    def validate(self):
        for name in ("model_dim", "heads", "ffn_dim", "max_len", "vocab_out"):
            if getattr(self, name) < 1:
                raise ContractError("neural", f"{name} must be >= 1")
        if self.layers < 0:
            raise ContractError("neural", "layers must be >= 0")
        if self.model_dim % self.heads:
            raise ContractError("neural", f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("neural", "dropout must lie in [0, 1)")
        if self.input_kind not in ("token", "feature"):
            raise ContractError("neural", f"unknown input_kind {self.input_kind!r}")
        if self.input_kind == "feature" and not self.input_dim:
            raise ContractError("neural", "feature inputs need input_dim")


@dataclass
class AdapterConfig:
    bottleneck: int = 1024

    def __post_init__(self):
        if self.bottleneck < 1:
            raise ContractError("neural", "adapter bottleneck must be >= 1")


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, torch.Tensor]
    frozen: set[str] = field(default_factory=set)
    moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    adapter: AdapterConfig | None = None

    def __getitem__(self, name) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def n_params(self, trainable_only: bool = False) -> int:
        names = self.trainable() if trainable_only else list(self.tensors)
        return sum(self.tensors[n].numel() for n in names)

    def freeze(self, names: Iterable[str] | None = None) -> None:
        self.frozen |= set(self.tensors if names is None else names)

    def to(self, dtype: torch.dtype) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {k: v.detach().to(dtype).clone() for k, v in self.tensors.items()},
            set(self.frozen), {}, self.adapter,
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {k: v.detach().clone() for k, v in self.tensors.items()},
            set(self.frozen),
            {k: (m.clone(), v.clone()) for k, (m, v) in self.moments.items()},
            self.adapter,
        )

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("adapter.")]


def _normal(gen, shape, std, dtype):
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * std).to(dtype)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * rate)
    table[:, 1::2] = torch.cos(pos * rate[: dim // 2])
    return table


def init_params(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> EncoderParams:
    gen = torch.Generator().manual_seed(int(seed))
    D, Fd = config.model_dim, config.ffn_dim
    std = 0.02
    t: dict[str, torch.Tensor] = {}
    if config.input_kind == "token":
        t["embed.weight"] = _normal(gen, (config.vocab_in, D), std, dtype)
    else:
        t["input_proj.weight"] = _normal(gen, (config.input_dim, D), 1.0 / math.sqrt(config.input_dim), dtype)
        t["input_proj.bias"] = torch.zeros(D, dtype=dtype)
        t["input_ln.weight"] = torch.ones(D, dtype=dtype)
        t["input_ln.bias"] = torch.zeros(D, dtype=dtype)
        t["mask_embed"] = _normal(gen, (D,), 1.0, dtype)
    if config.input_kind == "token":
        t["pos.weight"] = _normal(gen, (config.max_len, D), std, dtype)
    else:
        # normalized frame projections are unit scale, so positions start at
        # a comparable scale from a sinusoidal table
        t["pos.weight"] = sinusoidal_positions(config.max_len, D).to(dtype)
    for i in range(config.layers):
        p = f"L{i}."
        t[p + "ln1.weight"] = torch.ones(D, dtype=dtype)
        t[p + "ln1.bias"] = torch.zeros(D, dtype=dtype)
        t[p + "attn.qkv.weight"] = _normal(gen, (D, 3 * D), 1.0 / math.sqrt(D), dtype)
        t[p + "attn.qkv.bias"] = torch.zeros(3 * D, dtype=dtype)
        t[p + "attn.out.weight"] = _normal(gen, (D, D), 1.0 / math.sqrt(D) / math.sqrt(2 * max(config.layers, 1)), dtype)
        t[p + "attn.out.bias"] = torch.zeros(D, dtype=dtype)
        t[p + "ln2.weight"] = torch.ones(D, dtype=dtype)
        t[p + "ln2.bias"] = torch.zeros(D, dtype=dtype)
        t[p + "ffn.in.weight"] = _normal(gen, (D, Fd), 1.0 / math.sqrt(D), dtype)
        t[p + "ffn.in.bias"] = torch.zeros(Fd, dtype=dtype)
        t[p + "ffn.out.weight"] = _normal(gen, (Fd, D), 1.0 / math.sqrt(Fd) / math.sqrt(2 * max(config.layers, 1)), dtype)
        t[p + "ffn.out.bias"] = torch.zeros(D, dtype=dtype)
    t["final_ln.weight"] = torch.ones(D, dtype=dtype)
    t["final_ln.bias"] = torch.zeros(D, dtype=dtype)
    t["out.weight"] = _normal(gen, (D, config.vocab_out), std, dtype)
    t["out.bias"] = torch.zeros(config.vocab_out, dtype=dtype)
    return EncoderParams(config, t)


def adapter_param_count(model_dim: int, bottleneck: int) -> int:
    """Parameters of one adapter: down/up projections with biases plus layer norm."""
    return 2 * model_dim * bottleneck + bottleneck + model_dim + 2 * model_dim


def add_adapters(params: EncoderParams, config: AdapterConfig, seed: int = 0,
                 up_std: float = 0.0) -> EncoderParams:
    """Return a copy with adapters after attention and FFN of every layer.

    The up-projection starts at ``up_std`` (zero by default), so each adapter
    initially reduces to its layer norm.
    """
    if params.adapter is not None:
        raise ContractError("neural", "parameters already carry adapters")
    out = params.copy()
    gen = torch.Generator().manual_seed(int(seed))
    D, B, dt = params.config.model_dim, config.bottleneck, params.dtype
    for i in range(params.config.layers):
        for place in PLACEMENTS:
            p = f"adapter.L{i}.{place}."
            out.tensors[p + "down.weight"] = _normal(gen, (D, B), 1.0 / math.sqrt(D), dt)
            out.tensors[p + "down.bias"] = torch.zeros(B, dtype=dt)
            out.tensors[p + "up.weight"] = _normal(gen, (B, D), up_std, dt) if up_std else torch.zeros(B, D, dtype=dt)
            out.tensors[p + "up.bias"] = torch.zeros(D, dtype=dt)
            out.tensors[p + "ln.weight"] = torch.ones(D, dtype=dt)
            out.tensors[p + "ln.bias"] = torch.zeros(D, dtype=dt)
    out.adapter = config
    return out


def strip_adapters(params: EncoderParams) -> EncoderParams:
    out = params.copy()
    for n in [n for n in out.tensors if n.startswith("adapter.")]:
        del out.tensors[n]
        out.frozen.discard(n)
        out.moments.pop(n, None)
    out.adapter = None
    return out


# -- forward -----------------------------------------------------------------

def layer_norm(h, weight, bias):
    return F.layer_norm(h, (h.shape[-1],), weight, bias, LN_EPS)


def adapter_forward(h: torch.Tensor, down_w, down_b, up_w, up_b, ln_w, ln_b) -> torch.Tensor:
    """``layer_norm(h + up(relu(down(h))))``."""
    if h.shape[-1] != down_w.shape[0] or up_w.shape[1] != h.shape[-1]:
        raise ContractError("neural", f"adapter shapes {tuple(down_w.shape)}/{tuple(up_w.shape)} "
                            f"do not fit hidden size {h.shape[-1]}")
    z = torch.relu(h @ down_w + down_b)
    return layer_norm(h + z @ up_w + up_b, ln_w, ln_b)


def _apply_adapter(params, h, layer, place):
    p = f"adapter.L{layer}.{place}."
    if p + "down.weight" not in params.tensors:
        return h
    t = params.tensors
    return adapter_forward(h, t[p + "down.weight"], t[p + "down.bias"], t[p + "up.weight"],
                           t[p + "up.bias"], t[p + "ln.weight"], t[p + "ln.bias"])


def _dropout(x, p, train_mode, gen):
    if not train_mode or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=torch.float64).to(x.dtype) >= p
    return x * keep / (1.0 - p)


def _attention(t, pre, x, pad, heads, dropout, train_mode, gen):
    B, T, D = x.shape
    dh = D // heads
    qkv = x @ t[pre + "qkv.weight"] + t[pre + "qkv.bias"]
    q, k, v = qkv.split(D, dim=-1)
    q = q.view(B, T, heads, dh).transpose(1, 2)
    k = k.view(B, T, heads, dh).transpose(1, 2)
    v = v.view(B, T, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if pad is not None:
        scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
    att = torch.softmax(scores, dim=-1)
    att = _dropout(att, dropout, train_mode, gen)
    ctx = (att @ v).transpose(1, 2).reshape(B, T, D)
    return ctx @ t[pre + "out.weight"] + t[pre + "out.bias"]


def embed_inputs(params: EncoderParams, inputs: torch.Tensor, feature_mask: torch.Tensor | None = None):
    cfg, t = params.config, params.tensors
    T = inputs.shape[1]
    if T > cfg.max_len:
        raise ContractError("neural", f"sequence length {T} exceeds max_len {cfg.max_len}")
    if cfg.input_kind == "token":
        if inputs.numel() and (int(inputs.min()) < 0 or int(inputs.max()) >= cfg.vocab_in):
            raise ContractError("neural", f"token id out of range [0, {cfg.vocab_in})")
        h = t["embed.weight"][inputs]
    else:
        if inputs.shape[-1] != cfg.input_dim:
            raise ContractError("neural", f"feature dim {inputs.shape[-1]} != {cfg.input_dim}")
        h = inputs.to(params.dtype) @ t["input_proj.weight"] + t["input_proj.bias"]
        h = layer_norm(h, t["input_ln.weight"], t["input_ln.bias"])
        if feature_mask is not None:
            m = feature_mask[..., None].to(h.dtype)
            h = h * (1 - m) + t["mask_embed"] * m
    return h + t["pos.weight"][:T]


def encoder_forward(params: EncoderParams, inputs, pad_mask=None, feature_mask=None,
                    train_mode: bool = False, rng: torch.Generator | None = None):
    """Bidirectional encoder pass.

    ``inputs`` is ``(B, T)`` token ids or ``(B, T, F)`` features (a single
    unbatched sequence is accepted too).  ``pad_mask`` flags padding
    positions, which no query attends to.  ``feature_mask`` flags frames
    replaced by the learned mask embedding.  Returns ``(hidden, logits)``.
    """
    cfg, t = params.config, params.tensors
    inputs = torch.as_tensor(inputs)
    unbatched = inputs.dim() == (1 if cfg.input_kind == "token" else 2)
    if unbatched:
        inputs = inputs[None]
        pad_mask = None if pad_mask is None else torch.as_tensor(pad_mask)[None]
        feature_mask = None if feature_mask is None else torch.as_tensor(feature_mask)[None]
    h = embed_inputs(params, inputs, feature_mask)
    h = _dropout(h, cfg.dropout, train_mode, rng)
    for i in range(cfg.layers):
        p = f"L{i}."
        a = _attention(t, p + "attn.", layer_norm(h, t[p + "ln1.weight"], t[p + "ln1.bias"]),
                       pad_mask, cfg.heads, cfg.dropout, train_mode, rng)
        h = h + _dropout(a, cfg.dropout, train_mode, rng)
        h = _apply_adapter(params, h, i, "attn")
        f = layer_norm(h, t[p + "ln2.weight"], t[p + "ln2.bias"])
        f = torch.relu(f @ t[p + "ffn.in.weight"] + t[p + "ffn.in.bias"]) @ t[p + "ffn.out.weight"] + t[p + "ffn.out.bias"]
        h = h + _dropout(f, cfg.dropout, train_mode, rng)
        h = _apply_adapter(params, h, i, "ffn")
    hidden = layer_norm(h, t["final_ln.weight"], t["final_ln.bias"])
    logits = hidden @ t["out.weight"] + t["out.bias"]
    if unbatched:
        return hidden[0], logits[0]
    return hidden, logits


# -- loss, gradients, optimizer ---------------------------------------------------

def masked_cross_entropy(logits, targets, loss_mask):
    loss_mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if not bool(loss_mask.any()):
        raise ContractError("neural", "loss mask selects no positions")
    targets = torch.as_tensor(targets, dtype=torch.long)
    return F.cross_entropy(logits[loss_mask], targets[loss_mask])


def loss_and_grads(params: EncoderParams, inputs, targets, loss_mask, pad_mask=None,
                   feature_mask=None, train_mode: bool = False, rng=None):
    """Mean cross-entropy over flagged positions and gradients of trainable parameters."""
    names = params.trainable()
    leaves = {n: params.tensors[n].detach().requires_grad_(True) for n in names}
    view = EncoderParams(params.config, {**params.tensors, **leaves}, params.frozen, adapter=params.adapter)
    _, logits = encoder_forward(view, inputs, pad_mask, feature_mask, train_mode, rng)
    loss = masked_cross_entropy(logits, targets, loss_mask)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(params.tensors[n]) if g is None else g
    return float(loss.detach()), out


@dataclass
class LRSchedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ContractError("neural", f"warmup {self.warmup_steps} exceeds total {self.total_steps}")

    def lr(self, step: int) -> float:
        if step < 1:
            raise ContractError("neural", "optimizer steps are counted from 1")
        if self.warmup_steps and step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return 0.0
        return self.peak_lr * max(0.0, (self.total_steps - step) / span)


def optimizer_step(params: EncoderParams, grads: dict[str, torch.Tensor], step: int,
                   schedule: LRSchedule, betas=(0.9, 0.999), eps: float = 1e-8,
                   max_grad_norm: float | None = None) -> float:
    """Adam update of every trainable parameter in place; returns the lr used."""
    lr = schedule.lr(step)
    b1, b2 = betas
    if max_grad_norm is not None:
        norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        if norm > max_grad_norm:
            grads = {n: g * (max_grad_norm / norm) for n, g in grads.items()}
    with torch.no_grad():
        for name, g in grads.items():
            if name in params.frozen:
                continue
            p = params.tensors[name]
            m, v = params.moments.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            params.tensors[name] = p - lr * m_hat / (v_hat.sqrt() + eps)
            params.moments[name] = (m, v)
    return lr


def finite_difference_check(params: EncoderParams, inputs, targets, loss_mask, eps: float = 1e-5,
                            names: Iterable[str] | None = None, **forward_kw) -> dict[str, float]:
    """Max relative error between autograd and central differences, per parameter.

    Requires float64 parameters.  Every coordinate of every selected parameter
    is perturbed.
    """
    if params.dtype != torch.float64:
        raise ContractError("neural", "finite-difference checks need float64 parameters")
    _, grads = loss_and_grads(params, inputs, targets, loss_mask, **forward_kw)

    def loss_at():
        with torch.no_grad():
            _, logits = encoder_forward(params, inputs, forward_kw.get("pad_mask"),
                                        forward_kw.get("feature_mask"))
            return float(masked_cross_entropy(logits, targets, loss_mask))

    report = {}
    for name in (names or params.trainable()):
        p = params.tensors[name]
        flat = p.view(-1)
        analytic = grads[name].reshape(-1)
        worst = 0.0
        for j in range(flat.numel()):
            orig = float(flat[j])
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[j])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        report[name] = worst
    return report


# -- checkpoint --------------------------------------------------------------------

def _write_str(buf, s: bytes, fmt="<H"):
    buf.write(struct.pack(fmt, len(s)))
    buf.write(s)


def params_to_bytes(params: EncoderParams, names: Iterable[str] | None = None) -> bytes:
    """Serialize to the ENCP layout.  ``names`` restricts the parameter table."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = asdict(params.config)
    if params.adapter is not None:
        cfg["adapter"] = asdict(params.adapter)
    _write_str(buf, json.dumps(cfg, sort_keys=True).encode(), "<I")
    selected = list(params.tensors) if names is None else list(names)
    buf.write(struct.pack("<I", len(selected)))
    for name in selected:
        tensor = params.tensors[name].detach()
        _write_str(buf, name.encode())
        buf.write(struct.pack("<B", tensor.dim()))
        for d in tensor.shape:
            buf.write(struct.pack("<I", d))
        buf.write(tensor.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        buf.write(struct.pack("<B", 1 if name in params.frozen else 0))
    return buf.getvalue()


def backbone_bytes(params: EncoderParams) -> bytes:
    return params_to_bytes(params, params.backbone_names())


def save_params(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def params_from_bytes(raw: bytes) -> EncoderParams:
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ContractError("neural", "not an ENCP checkpoint")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError("neural", f"unsupported ENCP version {version}")
    off = 8
    (n,) = struct.unpack_from("<I", view, off)
    off += 4
    cfg = json.loads(bytes(view[off:off + n]))
    off += n
    adapter = cfg.pop("adapter", None)
    config = EncoderConfig(**cfg)
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    tensors, frozen = {}, set()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + ln]).decode()
        off += ln
        (rank,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from("<" + "I" * rank, view, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        (flag,) = struct.unpack_from("<B", view, off)
        off += 1
        if flag:
            frozen.add(name)
    return EncoderParams(config, tensors, frozen,
                         adapter=None if adapter is None else AdapterConfig(**adapter))


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
