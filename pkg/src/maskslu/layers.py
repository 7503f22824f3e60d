"""Neural layers shared by the encoder, decoder and intent head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter:
    """A trainable array. `name` is assigned from the owning module tree."""

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.tensor = Tensor(np.asarray(value, dtype=T.default_dtype()), requires_grad=trainable)
        self.trainable = trainable
        self.name = ""

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype).reshape(
            self.tensor.data.shape
        )

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def freeze(self) -> None:
        self.trainable = False
        self.tensor.requires_grad = False

    def unfreeze(self) -> None:
        self.trainable = True
        self.tensor.requires_grad = True


class Module:
    """Lightweight container; discovers parameters by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for attr, val in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(val, Parameter):
                val.name = path
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield f"{path}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()


@dataclass
class AttentionConfig:
    """Width and head count of one attention stack; d must split evenly."""

    d: int
    heads: int

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = Parameter(uniform_init(rng, (out_dim, in_dim), in_dim))
        self.b = Parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        # flatten leading dims so BLAS sees one big GEMM
        lead = x.shape[:-1]
        in_dim = x.shape[-1]
        x2 = x if x.ndim == 2 else T.reshape(x, (-1, in_dim))
        y = T.matmul(x2, T.transpose(self.w.tensor, (1, 0)))
        if x.ndim != 2:
            y = T.reshape(y, (*lead, y.shape[-1]))
        return T.add(y, self.b.tensor)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, dim ** -0.5, size=(vocab_size, dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.table.tensor, ids)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at p=0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return T.mul(x, mask)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with projected Q/K/V and output merge.

    Keys flagged invalid by the padding mask receive exactly zero weight.
    Returns both the merged output and the per-head attention weights.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.d
        self.cfg = cfg
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, key_valid=None):
        cfg = self.cfg
        B, Lq, d = q_in.shape
        Lk = k_in.shape[1]
        if d != cfg.d or k_in.shape[2] != cfg.d:
            raise ValueError("attention input width does not match config")
        if key_valid is not None and np.asarray(key_valid).shape[-1] != Lk:
            raise ValueError("key padding mask length mismatch")

        def split(x: Tensor, L: int) -> Tensor:
            return T.transpose(T.reshape(x, (B, L, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

        q = split(self.wq(q_in), Lq)
        k = split(self.wk(k_in), Lk)
        v = split(self.wv(v_in), Lk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
        if key_valid is None:
            weights = T.softmax(scores, axis=-1)
        else:
            valid = np.asarray(key_valid, dtype=bool).reshape(B, 1, 1, Lk)
            weights = T.masked_softmax(scores, valid, axis=-1)
        ctx = T.matmul(weights, v)  # [B, h, Lq, hd]
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
        return self.wo(merged), weights


class FeedForward(Module):
    """Two linear maps with a ReLU between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class TransformerBlock(Module):
    """Self-attention + feed-forward with residuals.

    Pre-norm by default; `post_norm=True` restores the norm-after-residual
    arrangement.
    """

    def __init__(self, cfg: AttentionConfig, ffn_hidden: int, p_drop: float,
                 rng: np.random.Generator, post_norm: bool = False):
        self.attn = MultiHeadAttention(cfg, rng)
        self.ffn = FeedForward(cfg.d, ffn_hidden, rng)
        self.norm1 = LayerNorm(cfg.d)
        self.norm2 = LayerNorm(cfg.d)
        self.p_drop = p_drop
        self.post_norm = post_norm

    def __call__(self, x: Tensor, valid, mode: str, rng) -> Tensor:
        if self.post_norm:
            a, _ = self.attn(x, x, x, valid)
            x = self.norm1(T.add(x, dropout(a, self.p_drop, mode, rng)))
            f = self.ffn(x)
            return self.norm2(T.add(x, dropout(f, self.p_drop, mode, rng)))
        xn = self.norm1(x)
        a, _ = self.attn(xn, xn, xn, valid)
        x = T.add(x, dropout(a, self.p_drop, mode, rng))
        f = self.ffn(self.norm2(x))
        return T.add(x, dropout(f, self.p_drop, mode, rng))


class ConvFrontend(Module):
    """Two stride-2 3x3 convolutions over the time/frequency plane.

    Halves both axes twice (ceil division), then flattens channels with the
    reduced frequency axis and projects to the model width. Returns the
    projected sequence and the per-utterance valid length map.
    """

    def __init__(self, mel_bins: int, d_model: int, channels: tuple[int, int],
                 rng: np.random.Generator):
        c1, c2 = channels
        self.conv1_w = Parameter(uniform_init(rng, (c1, 1, 3, 3), 9))
        self.conv1_b = Parameter(np.zeros(c1))
        self.conv2_w = Parameter(uniform_init(rng, (c2, c1, 3, 3), 9 * c1))
        self.conv2_b = Parameter(np.zeros(c2))
        freq_out = T.conv_output_length(T.conv_output_length(mel_bins))
        self.proj = Linear(c2 * freq_out, d_model, rng)
        self.mel_bins = mel_bins
        self.channels = channels

    def __call__(self, feats: Tensor, lengths: np.ndarray):
        B, Tlen, F = feats.shape
        if Tlen < 1:
            raise ValueError("empty feature sequence")
        x = T.reshape(feats, (B, 1, Tlen, F))
        x = T.relu(T.conv2d_3x3_s2(x, self.conv1_w.tensor, self.conv1_b.tensor))
        len1 = np.minimum((lengths + 1) // 2, x.shape[2])
        x = T.mul(x, _length_mask(len1, x.shape[2])[:, None, :, None])
        x = T.relu(T.conv2d_3x3_s2(x, self.conv2_w.tensor, self.conv2_b.tensor))
        len2 = np.minimum((len1 + 1) // 2, x.shape[2])
        x = T.mul(x, _length_mask(len2, x.shape[2])[:, None, :, None])
        B2, C, T2, F2 = x.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (B2, T2, C * F2))
        return self.proj(x), len2


def _length_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    return (np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]).astype(T.default_dtype())


def length_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """Boolean [B, max_len] validity mask from per-utterance lengths."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def sinusoidal_encoding(length: int, dim: int, dtype=None) -> np.ndarray:
    """Standard fixed sine/cosine position table [length, dim]."""
    dtype = dtype or T.default_dtype()
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : pe[:, 1::2].shape[1]]
    return pe.astype(dtype)
