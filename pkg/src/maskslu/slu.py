"""Class-attention intent recognizer over frozen representation sequences.

The head pools a sequence into a single learned class vector: the class vector
is the only query, keys/values are projections of the sequence, and the class
vector itself is excluded from the keys and values. Predictions are multihot
bit vectors projected back onto the set of valid (action, arguments)
combinations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import CommandGrammar
from .layers import Linear, LayerNorm, Module, Parameter, length_mask
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class IntentSchema:
    """Ordered label bits (one per action / argument value) plus all legal vectors."""

    label_bits: list[tuple[str, str]]  # (kind, name); kind is "action" or "value"
    valid_set: np.ndarray  # [K, n_bits] uint8
    combos: list[tuple[str, dict[str, str]]]  # combo behind each valid vector

    def __post_init__(self):
        self.valid_set = np.asarray(self.valid_set, dtype=np.uint8)
        if len(self.valid_set) == 0:
            raise ValueError("schema needs a non-empty valid set")
        if self.valid_set.shape[1] != len(self.label_bits):
            raise ValueError("valid vectors must match the number of label bits")
        action_cols = [i for i, (kind, _) in enumerate(self.label_bits) if kind == "action"]
        if not np.all(self.valid_set[:, action_cols].sum(axis=1) == 1):
            raise ValueError("every valid vector must set exactly one action bit")
        self._bit_index = {name: i for i, (_, name) in enumerate(self.label_bits)}

    @property
    def num_bits(self) -> int:
        return len(self.label_bits)

    @staticmethod
    def from_grammar(grammar: CommandGrammar) -> "IntentSchema":
        bits: list[tuple[str, str]] = [("action", a) for a in grammar.actions]
        value_bits = sorted(
            {
                (slot, value)
                for slots in grammar.actions.values()
                for slot, values in slots.items()
                for value in values
            }
        )
        bits.extend(("value", f"{slot}={value}") for slot, value in value_bits)
        combos = grammar.valid_combinations()
        index = {name: i for i, (_, name) in enumerate(bits)}
        vectors = np.zeros((len(combos), len(bits)), dtype=np.uint8)
        for k, (action, args) in enumerate(combos):
            vectors[k, index[action]] = 1
            for slot, value in args.items():
                vectors[k, index[f"{slot}={value}"]] = 1
        return IntentSchema(bits, vectors, combos)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "label_bits": [list(b) for b in self.label_bits],
            "valid_set": self.valid_set.tolist(),
            "combos": [[a, args] for a, args in self.combos],
        }

    @staticmethod
    def from_dict(doc: dict) -> "IntentSchema":
        return IntentSchema(
            [tuple(b) for b in doc["label_bits"]],
            np.asarray(doc["valid_set"], dtype=np.uint8),
            [(a, dict(args)) for a, args in doc["combos"]],
        )

    def encode_intent(self, action: str, args: dict[str, str]) -> np.ndarray:
        """Multihot vector of a structured label; must name known bits."""
        vec = np.zeros(self.num_bits, dtype=np.uint8)
        if action not in self._bit_index:
            raise KeyError(f"unknown action {action!r}")
        vec[self._bit_index[action]] = 1
        for slot, value in args.items():
            key = f"{slot}={value}"
            if key not in self._bit_index:
                raise KeyError(f"unknown argument value {key!r}")
            vec[self._bit_index[key]] = 1
        if not (self.valid_set == vec).all(axis=1).any():
            raise ValueError(f"({action}, {args}) is not a valid combination")
        return vec

    def decode_intent(self, multihot: np.ndarray) -> tuple[str, dict[str, str]]:
        """Structured label of a valid vector; rejects anything outside the valid set."""
        multihot = np.asarray(multihot, dtype=np.uint8)
        matches = np.where((self.valid_set == multihot).all(axis=1))[0]
        if len(matches) == 0:
            raise ValueError("vector is not in the valid set")
        return self.combos[int(matches[0])]


@dataclass
class IntentLabel:
    action: str
    args: dict[str, str]
    multihot: np.ndarray


class ClassAttentionLayer(Module):
    """One attention + feed-forward update of the class vector.

    Queries come only from the class vector (no query projection); keys and
    values are projections of the input sequence, which itself never changes.
    """

    def __init__(self, input_dim: int, d: int, heads: int, ffn_hidden: int,
                 rng: np.random.Generator):
        if d % heads != 0:
            raise ValueError("class-attention width must be divisible by heads")
        self.wk = Linear(input_dim, d, rng)
        self.wv = Linear(input_dim, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm_x = LayerNorm(input_dim)
        self.norm_cls = LayerNorm(d)
        self.norm_ffn = LayerNorm(d)
        self.ffn_in = Linear(d, ffn_hidden, rng)
        self.ffn_out = Linear(ffn_hidden, d, rng)
        self.d = d
        self.heads = heads

    def __call__(self, x: Tensor, x_cls: Tensor, valid) -> tuple[Tensor, Tensor]:
        B, L, _ = x.shape
        h, hd = self.heads, self.d // self.heads
        xn = self.norm_x(x)
        q = T.reshape(self.norm_cls(x_cls), (B, h, 1, hd))
        k = T.transpose(T.reshape(self.wk(xn), (B, L, h, hd)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(self.wv(xn), (B, L, h, hd)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        weights = T.masked_softmax(scores, np.asarray(valid, dtype=bool).reshape(B, 1, 1, L))
        pooled = T.reshape(T.matmul(weights, v), (B, self.d))
        x_cls = T.add(x_cls, self.wo(pooled))
        f = self.ffn_out(T.relu(self.ffn_in(self.norm_ffn(x_cls))))
        return T.add(x_cls, f), T.reshape(weights, (B, h, L))


class IntentClassifier(Module):
    """Two class-attention layers followed by a hidden fully connected stage.

    Attention weights of both layers are captured from the forward pass itself
    and kept for export.
    """

    def __init__(self, input_dim: int, num_bits: int, rng: np.random.Generator,
                 d: int = 128, heads: int = 4, num_layers: int = 2,
                 ffn_hidden: int = 1024, classifier_hidden: int = 1024):
        self.x_cls = Parameter(rng.normal(0.0, d ** -0.5, size=d))
        self.layers = [
            ClassAttentionLayer(input_dim, d, heads, ffn_hidden, rng) for _ in range(num_layers)
        ]
        self.norm_out = LayerNorm(d)
        self.fc_hidden = Linear(d, classifier_hidden, rng)
        self.fc_out = Linear(classifier_hidden, num_bits, rng)
        self.input_dim = input_dim
        self.num_bits = num_bits
        self.d = d
        self.heads = heads

    def hparams(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_bits": self.num_bits,
            "d": self.d,
            "heads": self.heads,
            "num_layers": len(self.layers),
            "ffn_hidden": self.layers[0].ffn_in.w.data.shape[0],
            "classifier_hidden": self.fc_hidden.w.data.shape[0],
        }

    def __call__(self, reprs: Tensor | np.ndarray, lengths) -> tuple[Tensor, list[Tensor]]:
        """Logits over label bits plus per-layer attention weights [B, h, L]."""
        x = reprs if isinstance(reprs, Tensor) else Tensor(reprs)
        if x.ndim == 2:
            x = T.reshape(x, (1, *x.shape))
        B, L, width = x.shape
        if width != self.input_dim:
            raise ValueError(f"representation width {width} != head input dim {self.input_dim}")
        lengths = np.asarray(lengths, dtype=np.int64)
        if (lengths < 1).any():
            raise ValueError("every sequence needs at least one unpadded position")
        valid = length_mask(lengths, L)
        cls = T.reshape(self.x_cls.tensor, (1, self.d))
        cls = T.add(cls, np.zeros((B, self.d), dtype=cls.dtype))  # broadcast per batch row
        attn = []
        for layer in self.layers:
            cls, w = layer(x, cls, valid)
            attn.append(w)
        logits = self.fc_out(T.relu(self.fc_hidden(self.norm_out(cls))))
        return logits, attn


def bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all bits, in the stable softplus form."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ValueError("logits and targets must have the same shape")
    return T.tmean(T.add(T.softplus(logits), T.mul(logits, -targets)))


def enforce_structure(probs: np.ndarray, schema: IntentSchema) -> IntentLabel:
    """Project sigmoid outputs onto the closest valid combination.

    Closeness is the bitwise cross-entropy between the valid vector and the
    clamped probabilities; ties go to the lowest valid-set index. The score is
    decomposed as a shared constant plus a sum over set bits, accumulated
    sequentially, so mathematically tied combinations compare exactly equal.
    """
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if probs.shape != (schema.num_bits,):
        raise ValueError("probability vector does not match the schema")
    logp = np.log(probs)
    log1m = np.log1p(-probs)
    delta = log1m - logp  # adding bit b changes the score by +delta[b]
    best_idx = 0
    best_score = None
    for idx in range(len(schema.valid_set)):
        score = 0.0
        for b in np.flatnonzero(schema.valid_set[idx]):
            score += delta[b]
        if best_score is None or score < best_score:
            best_idx, best_score = idx, score
    action, args = schema.combos[best_idx]
    return IntentLabel(action, dict(args), schema.valid_set[best_idx].copy())


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out
