"""Two-stage channel-aware set-attention network.

Stage 1 pools each channel's 19 feature vectors with a trainable
temporal kernel query through a multihead attention block (MAB); stage 2
pools the per-channel outputs with a channel kernel, exposing the
head-averaged attention row over channels.  Attention rows accumulated
over inference feed a softmax whose output drives channel selection.

The MAB is LayerNorm(H + relu(W_H H + b)) with
H = LayerNorm(X + MultiHead(X W_Q, Y W_K, Y W_V) W_O); the Q/K/V/O
projections are pointwise (shared across set elements), which is what
keeps the block permutation-equivariant over Y.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class SelectionError(ValueError):
    """Channel selection did not produce a usable subset."""


class CheckpointError(ValueError):
    """A checkpoint file does not match the expected configuration."""


@dataclass
class ModelConfig:
    n_channels: int = 18
    seq_len: int = 19
    n_features: int = 44
    dim_temporal: int = 64
    dim_output: int = 64
    d_k: int = 64
    d_v: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.d_k % self.heads or self.d_v % self.heads:
            raise ValueError(
                f"d_k={self.d_k} and d_v={self.d_v} must divide into {self.heads} heads"
            )


@dataclass
class MabParams:
    w_q: Tensor   # d_x -> d_k
    w_k: Tensor   # d_y -> d_k
    w_v: Tensor   # d_y -> d_v
    w_o: Tensor   # d_v -> d_x
    w_h: Tensor   # d_x -> d_x
    b_h: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.w_h, self.b_h,
                self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]


@dataclass
class ModelParams:
    config: ModelConfig
    kernel_temp: Tensor       # 1 x dim_temporal
    temporal: MabParams
    kernel_channel: Tensor    # 1 x dim_output
    channel: MabParams
    head_w: Tensor            # dim_output x 1
    head_b: Tensor

    def tensors(self) -> list[Tensor]:
        return ([self.kernel_temp] + self.temporal.tensors()
                + [self.kernel_channel] + self.channel.tensors()
                + [self.head_w, self.head_b])

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        names = []
        for prefix, mab in (("temporal", self.temporal), ("channel", self.channel)):
            names += [(f"{prefix}.{f}", getattr(mab, f)) for f in
                      ("w_q", "w_k", "w_v", "w_o", "w_h", "b_h",
                       "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")]
        return ([("kernel_temp", self.kernel_temp)] + names[:10]
                + [("kernel_channel", self.kernel_channel)] + names[10:]
                + [("head_w", self.head_w), ("head_b", self.head_b)])


@dataclass
class AttentionAccumulator:
    """Running sum of per-sequence attention rows over channels."""

    n_channels: int
    total: np.ndarray = field(default=None)
    count: int = 0

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.n_channels, dtype=np.float64)

    def add(self, row: np.ndarray) -> None:
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.shape != (self.n_channels,):
            raise ShapeError(f"attention row {row.shape} != ({self.n_channels},)")
        self.total += row
        self.count += 1

    def add_batch(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.n_channels:
            raise ShapeError(f"attention rows {rows.shape} != (*, {self.n_channels})")
        self.total += rows.sum(axis=0)
        self.count += rows.shape[0]

    def merge(self, other: "AttentionAccumulator") -> None:
        if other.n_channels != self.n_channels:
            raise ShapeError("accumulator widths differ")
        self.total += other.total
        self.count += other.count


@dataclass
class SelectPolicy:
    dominance_factor: float = 1.5  # select channels with att >= factor / C
    fail_factor: float = 1.2       # Failed unless max att >= factor / C
    max_channels: int = 5


@dataclass
class ChannelSelection:
    status: str                 # "Selected" | "Failed"
    channels: list[int]
    attention_acc: np.ndarray

    @property
    def selected(self) -> bool:
        return self.status == "Selected"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_mab(rng: np.random.Generator, d_x: int, d_y: int, d_k: int, d_v: int,
              heads: int) -> MabParams:
    return MabParams(
        w_q=Tensor(_glorot(rng, d_x, d_k), requires_grad=True),
        w_k=Tensor(_glorot(rng, d_y, d_k), requires_grad=True),
        w_v=Tensor(_glorot(rng, d_y, d_v), requires_grad=True),
        w_o=Tensor(_glorot(rng, d_v, d_x), requires_grad=True),
        w_h=Tensor(_glorot(rng, d_x, d_x), requires_grad=True),
        b_h=Tensor(np.zeros(d_x), requires_grad=True),
        ln1_gain=Tensor(np.ones(d_x), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d_x), requires_grad=True),
        ln2_gain=Tensor(np.ones(d_x), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d_x), requires_grad=True),
        heads=heads,
    )


def init_model(cfg: ModelConfig, rng_seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(rng_seed)
    kernel_temp = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim_temporal), (1, cfg.dim_temporal))
    kernel_channel = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim_output), (1, cfg.dim_output))
    return ModelParams(
        config=cfg,
        kernel_temp=Tensor(kernel_temp, requires_grad=True),
        temporal=_init_mab(rng, cfg.dim_temporal, cfg.n_features, cfg.d_k, cfg.d_v, cfg.heads),
        kernel_channel=Tensor(kernel_channel, requires_grad=True),
        channel=_init_mab(rng, cfg.dim_output, cfg.dim_temporal, cfg.d_k, cfg.d_v, cfg.heads),
        head_w=Tensor(_glorot(rng, cfg.dim_output, 1), requires_grad=True),
        head_b=Tensor(np.zeros(1), requires_grad=True),
    )


def count_parameters(params: ModelParams) -> int:
    return sum(t.data.size for t in params.tensors())


def mab_forward(x, y, p: MabParams) -> tuple[Tensor, np.ndarray]:
    """MAB(X, Y) plus the head-averaged attention weights.

    ``x`` is (..., n_q, d_x), ``y`` is (..., n_y, d_y); leading batch
    dims broadcast.  The returned attention is a plain array of shape
    (..., n_q, n_y) and is not part of the gradient graph.
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape[-1] != p.w_q.shape[0]:
        raise ShapeError(f"query width {x.shape} does not match W_Q {p.w_q.shape}")
    if y.shape[-1] != p.w_k.shape[0]:
        raise ShapeError(f"key width {y.shape} does not match W_K {p.w_k.shape}")
    h = p.heads
    d_k, d_v = p.w_q.shape[1], p.w_v.shape[1]
    dh_k, dh_v = d_k // h, d_v // h

    q = T.matmul(x, p.w_q)
    k = T.matmul(y, p.w_k)
    v = T.matmul(y, p.w_v)

    head_outs = []
    head_atts = []
    scale = 1.0 / np.sqrt(dh_k)
    for i in range(h):
        qi = T.narrow_last(q, i * dh_k, dh_k)
        ki = T.narrow_last(k, i * dh_k, dh_k)
        vi = T.narrow_last(v, i * dh_v, dh_v)
        logits = T.mul(T.matmul(qi, T.transpose_last(ki)), scale)
        att = T.softmax_rows(logits)
        head_atts.append(att.data)
        head_outs.append(T.matmul(att, vi))

    multihead = T.matmul(T.concat_last(head_outs), p.w_o)
    hidden = T.layer_norm(T.add(x, multihead), p.ln1_gain, p.ln1_bias)
    ff = T.add(T.matmul(hidden, p.w_h), p.b_h)
    out = T.layer_norm(T.add(hidden, T.relu(ff)), p.ln2_gain, p.ln2_bias)
    attention = np.mean(np.stack(head_atts), axis=0)
    return out, attention


def forward_batch(feats: np.ndarray, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Logits and channel-attention rows for a batch.

    ``feats`` is batch x channels x seq_len x n_features; returns the
    (batch,) logit tensor and the (batch, channels) attention array.
    """
    cfg = params.config
    b, c, t_len, n_feat = feats.shape
    if c != cfg.n_channels:
        raise ShapeError(f"batch has {c} channels, model expects {cfg.n_channels}")
    if t_len != cfg.seq_len or n_feat != cfg.n_features:
        raise ShapeError(
            f"batch windows {(t_len, n_feat)} != ({cfg.seq_len}, {cfg.n_features})"
        )
    flat = Tensor(feats.reshape(b * c, t_len, n_feat))
    stage1, _ = mab_forward(params.kernel_temp, flat, params.temporal)
    per_channel = T.reshape(stage1, (b, c, cfg.dim_temporal))
    stage2, att = mab_forward(params.kernel_channel, per_channel, params.channel)
    pooled = T.reshape(stage2, (b, cfg.dim_output))
    # head as multiply + row reduction: bitwise identical for any batch size,
    # unlike a (b, d) @ (d, 1) BLAS product
    weighted = T.mul(pooled, T.reshape(params.head_w, (cfg.dim_output,)))
    logits = T.add(T.sum_last(weighted), params.head_b)
    return logits, att.reshape(b, c)


def temporal_stage(psd_seq: np.ndarray, params: ModelParams) -> np.ndarray:
    """Pool one channel's seq_len x 44 features into a dim_temporal vector."""
    psd_seq = np.asarray(psd_seq, dtype=np.float64)
    cfg = params.config
    if psd_seq.shape != (cfg.seq_len, cfg.n_features):
        raise ShapeError(
            f"temporal stage input {psd_seq.shape} != ({cfg.seq_len}, {cfg.n_features})"
        )
    with T.no_grad():
        out, _ = mab_forward(params.kernel_temp, Tensor(psd_seq), params.temporal)
    return out.data.reshape(-1)


def channel_stage(per_channel: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Pool channels x dim_temporal features; also return the attention row."""
    per_channel = np.asarray(per_channel, dtype=np.float64)
    cfg = params.config
    if per_channel.ndim != 2 or per_channel.shape[1] != cfg.dim_temporal:
        raise ShapeError(
            f"channel stage input {per_channel.shape} != (C, {cfg.dim_temporal})"
        )
    with T.no_grad():
        out, att = mab_forward(params.kernel_channel, Tensor(per_channel), params.channel)
    return out.data.reshape(-1), att.reshape(1, -1)


def predict(feats: np.ndarray, params: ModelParams) -> tuple[float, np.ndarray]:
    """Probability and channel attention for one channels x 19 x 44 sample."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"predict expects channels x seq x features, got {feats.shape}")
    with T.no_grad():
        logits, att = forward_batch(feats[None], params)
        prob = T.sigmoid(logits)
    return float(prob.data[0]), att[0]


def finalize_attention(acc: AttentionAccumulator) -> np.ndarray:
    """Softmax of the elementwise mean attention row."""
    if acc.count < 1:
        raise RuntimeError("attention accumulator is empty")
    mean = acc.total / acc.count
    shifted = np.exp(mean - mean.max())
    return shifted / shifted.sum()


def select_channels(att: np.ndarray, policy: SelectPolicy = SelectPolicy()) -> ChannelSelection:
    """Threshold the accumulated attention row into a dominant-channel set."""
    att = np.asarray(att, dtype=np.float64).reshape(-1)
    c = att.size
    if c < 2:
        raise ShapeError(f"channel selection needs >= 2 channels, got {c}")
    uniform = 1.0 / c
    over = [int(i) for i in np.argsort(-att, kind="stable")
            if att[i] >= policy.dominance_factor * uniform]
    chosen = over[:policy.max_channels]
    failed = not chosen or att.max() < policy.fail_factor * uniform
    if failed:
        return ChannelSelection(status="Failed", channels=[], attention_acc=att)
    return ChannelSelection(status="Selected", channels=sorted(chosen), attention_acc=att)


def save_checkpoint(params: ModelParams, path) -> None:
    """Self-describing .npz: config echo plus every parameter array."""
    arrays = {name.replace(".", "__"): t.data for name, t in params.named_tensors()}
    cfg_json = json.dumps(params.config.__dict__, sort_keys=True)
    np.savez(Path(path), __config__=np.frombuffer(cfg_json.encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelParams:
    with np.load(Path(path)) as blob:
        if "__config__" not in blob:
            raise CheckpointError(f"{path}: missing config echo")
        cfg = ModelConfig(**json.loads(bytes(blob["__config__"]).decode()))
        if expected is not None and cfg != expected:
            raise CheckpointError(
                f"{path}: checkpoint config {cfg} != expected {expected}"
            )
        params = init_model(cfg, rng_seed=0)
        for name, t in params.named_tensors():
            key = name.replace(".", "__")
            if key not in blob:
                raise CheckpointError(f"{path}: missing array {name}")
            stored = blob[key]
            if stored.shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {stored.shape}, expected {t.data.shape}"
                )
            t.data = stored.astype(np.float64)
    return params


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy of all parameter arrays (used for best-epoch snapshots)."""
    def copy_mab(m: MabParams) -> MabParams:
        return MabParams(**{
            f: Tensor(getattr(m, f).data.copy(), requires_grad=True)
            for f in ("w_q", "w_k", "w_v", "w_o", "w_h", "b_h",
                      "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
        }, heads=m.heads)

    return ModelParams(
        config=replace(params.config),
        kernel_temp=Tensor(params.kernel_temp.data.copy(), requires_grad=True),
        temporal=copy_mab(params.temporal),
        kernel_channel=Tensor(params.kernel_channel.data.copy(), requires_grad=True),
        channel=copy_mab(params.channel),
        head_w=Tensor(params.head_w.data.copy(), requires_grad=True),
        head_b=Tensor(params.head_b.data.copy(), requires_grad=True),
    )
