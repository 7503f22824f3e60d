"""Bidirectional masked decoder: MLM training ops, mask-predict refinement,
and representation extraction from a chosen layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctc import MaskedHypothesis, Vocabulary, greedy_decode, mask_low_confidence
from .encoder import EncoderOutput, ModelConfig
from .layers import (
    AttentionConfig,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    dropout,
    length_mask,
    sinusoidal_encoding,
)
from .tensor import Tensor


@dataclass
class DecoderOutput:
    logits: Tensor  # [B, L, |V|]
    layer_states: list[Tensor]  # residual-stream output of every block, [B, L, d]
    self_attn: list[Tensor] = field(default_factory=list)  # [B, h, L, L] per layer
    cross_attn: list[Tensor] = field(default_factory=list)  # [B, h, L, T'] per layer


@dataclass
class RepresentationSequence:
    """Per-position embeddings from one model layer, aligned to a token template."""

    vectors: np.ndarray  # [L, d] float32
    source_layer: str
    tokens: list[str]
    fallback: bool = False  # True when an empty greedy decode forced a 1-mask template


class DecoderBlock(Module):
    """Bidirectional self-attention, cross-attention over the encoder, feed-forward."""

    def __init__(self, cfg: AttentionConfig, ffn_hidden: int, p_drop: float,
                 rng: np.random.Generator, post_norm: bool = False):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.ffn = FeedForward(cfg.d, ffn_hidden, rng)
        self.norm1 = LayerNorm(cfg.d)
        self.norm2 = LayerNorm(cfg.d)
        self.norm3 = LayerNorm(cfg.d)
        self.p_drop = p_drop
        self.post_norm = post_norm

    def __call__(self, x: Tensor, self_valid, memory: Tensor, memory_valid, mode: str, rng):
        if self.post_norm:
            a, w_self = self.self_attn(x, x, x, self_valid)
            x = self.norm1(T.add(x, dropout(a, self.p_drop, mode, rng)))
            c, w_cross = self.cross_attn(x, memory, memory, memory_valid)
            x = self.norm2(T.add(x, dropout(c, self.p_drop, mode, rng)))
            f = self.ffn(x)
            return self.norm3(T.add(x, dropout(f, self.p_drop, mode, rng))), w_self, w_cross
        xn = self.norm1(x)
        a, w_self = self.self_attn(xn, xn, xn, self_valid)
        x = T.add(x, dropout(a, self.p_drop, mode, rng))
        c, w_cross = self.cross_attn(self.norm2(x), memory, memory, memory_valid)
        x = T.add(x, dropout(c, self.p_drop, mode, rng))
        f = self.ffn(self.norm3(x))
        return T.add(x, dropout(f, self.p_drop, mode, rng)), w_self, w_cross


class MaskedDecoder(Module):
    """Fills masked positions of a fixed-length template, attending to h_enc.

    There is no causal mask: every position sees the full template, so masked
    slots are predicted from both left and right context.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        attn_cfg = AttentionConfig(cfg.d_model, cfg.heads)
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.blocks = [
            DecoderBlock(attn_cfg, cfg.ffn, cfg.dropout, rng, cfg.post_norm)
            for _ in range(cfg.dec_layers)
        ]
        self.norm_out = LayerNorm(cfg.d_model)
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.cfg = cfg

    def __call__(self, tokens: np.ndarray, token_lengths: np.ndarray, enc: EncoderOutput,
                 mode: str = "eval", rng: np.random.Generator | None = None) -> DecoderOutput:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, L = tokens.shape
        if L < 1:
            raise ValueError("decoder input template must be non-empty")
        if tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside the model vocabulary")
        token_lengths = np.asarray(token_lengths, dtype=np.int64)
        self_valid = length_mask(token_lengths, L)
        x = T.mul(self.embed(tokens), math.sqrt(self.cfg.d_model))
        x = T.add(x, sinusoidal_encoding(L, self.cfg.d_model, x.dtype))
        states, selfw, crossw = [], [], []
        for block in self.blocks:
            x, w_self, w_cross = block(x, self_valid, enc.h, enc.valid, mode, rng)
            states.append(x)
            selfw.append(w_self)
            crossw.append(w_cross)
        logits = self.out(self.norm_out(x))
        return DecoderOutput(logits, states, selfw, crossw)


def mlm_corrupt(target: np.ndarray, rng: np.random.Generator,
                vocab: Vocabulary) -> tuple[MaskedHypothesis, np.ndarray]:
    """Mask a uniform random count (1..L) of positions in a gold transcript."""
    target = np.asarray(target, dtype=np.int64)
    L = len(target)
    if L == 0:
        raise ValueError("cannot corrupt an empty target")
    n_mask = int(rng.integers(1, L + 1))
    positions = np.sort(rng.choice(L, size=n_mask, replace=False))
    tokens = target.copy()
    tokens[positions] = vocab.mask_id
    conf = np.ones(L)
    conf[positions] = 0.0
    masked = np.zeros(L, dtype=bool)
    masked[positions] = True
    return MaskedHypothesis(tokens, conf, masked), positions


def mlm_loss(logits: Tensor, target: np.ndarray, mask_positions: np.ndarray,
             smoothing: float = 0.1) -> Tensor:
    """Label-smoothing cross-entropy over the masked positions of one utterance.

    logits: [L, |V|]. Smoothing mass is spread uniformly over the non-gold
    classes; at smoothing=0 this is the standard cross-entropy.
    """
    target = np.asarray(target, dtype=np.int64)
    mask_positions = np.asarray(mask_positions, dtype=np.int64)
    if len(mask_positions) == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    V = logits.shape[-1]
    lp = T.log_softmax(logits, axis=-1)
    sel = T.strided_slice(lp, (mask_positions,))  # [M, V]; positions are unique
    gold = target[mask_positions]
    onehot = np.zeros((len(mask_positions), V), dtype=lp.data.dtype)
    onehot[np.arange(len(gold)), gold] = 1.0
    gold_lp = T.tsum(T.mul(sel, onehot), axis=-1)
    if smoothing == 0.0:
        return T.mul(T.tmean(gold_lp), -1.0)
    rest_lp = T.add(T.tsum(sel, axis=-1), T.mul(gold_lp, -1.0))
    per_pos = T.add(T.mul(gold_lp, -(1.0 - smoothing)), T.mul(rest_lp, -smoothing / (V - 1)))
    return T.tmean(per_pos)


def mask_predict(hyp: MaskedHypothesis, enc: EncoderOutput, decoder: MaskedDecoder,
                 vocab: Vocabulary, max_iter: int = 10,
                 trace: list | None = None) -> np.ndarray:
    """Iteratively fill masked slots, committing the most confident predictions first.

    Per iteration ceil(M0/max_iter) slots are committed (M0 = initial mask
    count); committed tokens are never revisited, and whatever is still masked
    at the last iteration is filled with its argmax. Length never changes.
    Reserved symbols are excluded from the prediction argmax.
    """
    tokens = hyp.tokens.copy()
    masked = hyp.is_masked.copy()
    m0 = int(masked.sum())
    if m0 == 0:
        return tokens
    per_iter = math.ceil(m0 / max_iter)
    reserved = len(Vocabulary.RESERVED)
    L = len(tokens)
    for it in range(max_iter):
        if not masked.any():
            break
        with T.no_grad():
            out = decoder(tokens[None, :], np.array([L]), enc, mode="eval")
        probs = np.exp(out.logits.data[0] - _logsumexp(out.logits.data[0]))
        probs[:, :reserved] = 0.0
        cand_ids = probs.argmax(axis=1)
        cand_conf = probs[np.arange(L), cand_ids]
        slots = np.where(masked)[0]
        last_round = it == max_iter - 1
        k = len(slots) if last_round else min(per_iter, len(slots))
        order = slots[np.argsort(-cand_conf[slots], kind="stable")][:k]
        tokens[order] = cand_ids[order]
        masked[order] = False
        if trace is not None:
            trace.append((tokens.copy(), masked.copy()))
    return tokens


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def resolve_layer(layer: str, cfg: ModelConfig) -> str:
    """Expand the 'decoder.penultimate' alias against a concrete config.

    The decoder's final layer is its output classification projection, so the
    penultimate layer is the last transformer block.
    """
    if layer == "decoder.penultimate":
        return f"decoder.{cfg.dec_layers - 1}"
    return layer


def extract_representations(model, vocab: Vocabulary, feats: np.ndarray,
                            layer: str = "decoder.penultimate", refine: bool = False,
                            threshold: float = 0.9) -> RepresentationSequence:
    """Frozen-backbone representations of a single normalized feature matrix.

    Pipeline: encode -> greedy CTC -> confidence masking -> one decoder pass
    (or mask-predict refinement first when `refine`), then the chosen layer's
    states. Encoder layers return frame-aligned sequences instead. An empty
    greedy decode falls back to a single-mask template and flags the result.
    """
    return extract_representation_batch(model, vocab, [feats], layer, refine, threshold)[0]


def extract_representation_batch(model, vocab: Vocabulary, feats_list, layer: str = "decoder.penultimate",
                                 refine: bool = False, threshold: float = 0.9,
                                 batch_size: int = 32) -> list[RepresentationSequence]:
    layer = resolve_layer(layer, model.cfg)
    scope, _, idx_str = layer.partition(".")
    idx = int(idx_str)
    if scope == "encoder":
        if not 0 <= idx < model.cfg.enc_layers:
            raise ValueError(f"unknown layer {layer!r}")
    elif scope == "decoder":
        if not 0 <= idx < model.cfg.dec_layers:
            raise ValueError(f"unknown layer {layer!r}")
    else:
        raise ValueError(f"unknown layer {layer!r}")
    out: list[RepresentationSequence] = []
    for start in range(0, len(feats_list), batch_size):
        chunk = feats_list[start : start + batch_size]
        out.extend(_extract_chunk(model, vocab, chunk, scope, idx, layer, refine, threshold))
    return out


def _extract_chunk(model, vocab, chunk, scope, idx, layer, refine, threshold):
    lengths = np.array([f.shape[0] for f in chunk], dtype=np.int64)
    Tmax = int(lengths.max())
    feats = np.zeros((len(chunk), Tmax, chunk[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(chunk):
        feats[i, : f.shape[0]] = f
    with T.no_grad():
        enc = model.encoder(feats, lengths, mode="eval", return_states=(scope == "encoder"))
        if scope == "encoder":
            states = enc.layer_states[idx].data
            return [
                RepresentationSequence(states[i, : enc.lengths[i]].astype(np.float32), layer, [])
                for i in range(len(chunk))
            ]
        log_probs = model.ctc_log_probs(enc).data
    results: list[RepresentationSequence] = []
    hyps: list[MaskedHypothesis] = []
    fallbacks: list[bool] = []
    for i in range(len(chunk)):
        tokens, conf = greedy_decode(log_probs[i, : enc.lengths[i]],
                                      exclude=vocab.non_transcript_ids)
        if len(tokens) == 0:
            hyp = MaskedHypothesis(
                np.array([vocab.mask_id]), np.array([0.0]), np.array([True])
            )
            fallbacks.append(True)
        else:
            hyp = mask_low_confidence(tokens, conf, vocab, threshold)
            fallbacks.append(False)
        hyps.append(hyp)
    if refine:
        filled = []
        for i, hyp in enumerate(hyps):
            sub = _narrow_encoding(enc, i)
            filled.append(mask_predict(hyp, sub, model.decoder, vocab))
        token_rows = filled
    else:
        token_rows = [h.tokens for h in hyps]
    Lmax = max(len(t) for t in token_rows)
    batch_tokens = np.full((len(chunk), Lmax), vocab.pad_id, dtype=np.int64)
    token_lengths = np.array([len(t) for t in token_rows], dtype=np.int64)
    for i, t in enumerate(token_rows):
        batch_tokens[i, : len(t)] = t
    with T.no_grad():
        dec = model.decoder(batch_tokens, token_lengths, enc, mode="eval")
    states = dec.layer_states[idx].data
    for i in range(len(chunk)):
        L = token_lengths[i]
        results.append(
            RepresentationSequence(
                states[i, :L].astype(np.float32),
                layer,
                vocab.decode(batch_tokens[i, :L]),
                fallback=fallbacks[i],
            )
        )
    return results


def _narrow_encoding(enc: EncoderOutput, i: int) -> EncoderOutput:
    """View of one utterance of a batched encoder output."""
    h = Tensor(enc.h.data[i : i + 1])
    return EncoderOutput(h, enc.lengths[i : i + 1])
