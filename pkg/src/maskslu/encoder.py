"""Speech encoder: convolutional front end plus transformer self-attention stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    AttentionConfig,
    ConvFrontend,
    LayerNorm,
    Module,
    TransformerBlock,
    length_mask,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the encoder-decoder backbone.

    The default vocabulary size is a nominal subword-scale value used for
    parameter accounting; actual runs overwrite it with the corpus vocabulary.
    """

    enc_layers: int = 12
    dec_layers: int = 6
    heads: int = 4
    d_model: int = 256
    ffn: int = 2048
    dropout: float = 0.1
    vocab_size: int = 6000
    mel_bins: int = 80
    conv_channels: tuple[int, int] = (64, 128)
    post_norm: bool = False

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "heads", "d_model", "ffn", "vocab_size", "mel_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.conv_channels = tuple(self.conv_channels)

    def to_dict(self) -> dict:
        return {
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "ffn": self.ffn,
            "dropout": self.dropout,
            "vocab_size": self.vocab_size,
            "mel_bins": self.mel_bins,
            "conv_channels": list(self.conv_channels),
            "post_norm": self.post_norm,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["conv_channels"] = tuple(doc.get("conv_channels", (64, 128)))
        return ModelConfig(**doc)


@dataclass
class EncoderOutput:
    """Acoustic embeddings with their per-utterance valid lengths."""

    h: Tensor  # [B, T', d_model]
    lengths: np.ndarray  # [B]
    layer_states: list[Tensor] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return length_mask(self.lengths, self.h.shape[1])


def subsampled_length(n: int) -> int:
    """Front-end length map: ceil(ceil(n/2)/2)."""
    return T.conv_output_length(T.conv_output_length(n))


class SpeechEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        attn_cfg = AttentionConfig(cfg.d_model, cfg.heads)
        self.frontend = ConvFrontend(cfg.mel_bins, cfg.d_model, cfg.conv_channels, rng)
        self.blocks = [
            TransformerBlock(attn_cfg, cfg.ffn, cfg.dropout, rng, cfg.post_norm)
            for _ in range(cfg.enc_layers)
        ]
        self.norm_out = LayerNorm(cfg.d_model)
        self.cfg = cfg

    def __call__(self, feats: Tensor | np.ndarray, lengths: np.ndarray, mode: str = "eval",
                 rng: np.random.Generator | None = None,
                 return_states: bool = False) -> EncoderOutput:
        """Encode a padded feature batch; positions beyond each length are masked out."""
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.ndim != 3 or feats.shape[0] < 1:
            raise ValueError("expected a non-empty [B, T, F] feature batch")
        lengths = np.asarray(lengths, dtype=np.int64)
        if (lengths < 1).any() or (lengths > feats.shape[1]).any():
            raise ValueError("utterance lengths must lie in [1, padded T]")
        x, out_lengths = self.frontend(feats, lengths)
        valid = length_mask(out_lengths, x.shape[1])
        states = []
        for block in self.blocks:
            x = block(x, valid, mode, rng)
            if return_states:
                states.append(x)
        x = self.norm_out(x)
        return EncoderOutput(x, out_lengths, states)
