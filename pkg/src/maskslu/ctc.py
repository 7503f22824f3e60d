"""CTC loss, greedy decoding with the collapse rule, and confidence masking.

The loss marginalizes over all monotonic alignments on the blank-interleaved
state lattice, entirely in log space. Gradients with respect to the per-frame
log-probabilities come from the forward/backward occupation counts, so the
loss plugs straight into the autodiff graph as a single node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf


@dataclass
class Vocabulary:
    """Symbol table with the reserved ids blank=0, pad=1, unk=2, mask=3."""

    symbols: list[str]
    blank_id: int = 0
    pad_id: int = 1
    unk_id: int = 2
    mask_id: int = 3

    RESERVED = ("<blank>", "<pad>", "<unk>", "<mask>")

    def __post_init__(self):
        if self.symbols[: len(self.RESERVED)] != list(self.RESERVED):
            raise ValueError("vocabulary must start with the reserved symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @staticmethod
    def from_tokens(tokens) -> "Vocabulary":
        seen = sorted(set(tokens))
        return Vocabulary(list(Vocabulary.RESERVED) + seen)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self._index.get(t, self.unk_id) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.symbols[int(i)] for i in ids]

    def is_reserved(self, idx: int) -> bool:
        return idx < len(self.RESERVED)

    @property
    def non_transcript_ids(self) -> tuple[int, int, int]:
        """Reserved ids a decoder must never emit (blank is handled by collapse)."""
        return (self.pad_id, self.unk_id, self.mask_id)


@dataclass
class MaskedHypothesis:
    """Token template with per-position confidence and mask flags."""

    tokens: np.ndarray
    confidence: np.ndarray
    is_masked: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.is_masked = np.asarray(self.is_masked, dtype=bool)
        if not (len(self.tokens) == len(self.confidence) == len(self.is_masked)):
            raise ValueError("hypothesis fields must have equal lengths")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_masked(self) -> int:
        return int(self.is_masked.sum())


def _interleave_blanks(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target) -> int:
    """Shortest feasible alignment: one frame per symbol plus one blank per repeat."""
    target = np.asarray(target)
    repeats = int((target[1:] == target[:-1]).sum()) if len(target) > 1 else 0
    return len(target) + repeats


def ctc_forward_alpha(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Alpha lattice [T, S] in log space; emission at t included in alpha[t]."""
    Tn = log_probs.shape[0]
    S = len(ext)
    alpha = np.full((Tn, S), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[2:] = (ext[2:] != ext[:-2]) & (ext[2:] != ext[0])
    for t in range(1, Tn):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        skip = np.where(skip_ok, skip, NEG_INF)
        with np.errstate(invalid="ignore"):
            acc = np.logaddexp(np.logaddexp(stay, step), skip)
        alpha[t] = acc + log_probs[t, ext]
    return alpha


def _ctc_backward_beta(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Beta lattice [T, S]; emission at t excluded from beta[t]."""
    Tn = log_probs.shape[0]
    S = len(ext)
    beta = np.full((Tn, S), NEG_INF)
    beta[Tn - 1, S - 1] = 0.0
    if S > 1:
        beta[Tn - 1, S - 2] = 0.0
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[: S - 2] = (ext[: S - 2] != ext[2:]) & (ext[0] != ext[2:])
    emit = log_probs[:, ext]
    for t in range(Tn - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        skip = np.where(skip_ok, skip, NEG_INF)
        with np.errstate(invalid="ignore"):
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
    return beta


def ctc_loss_value(log_probs: np.ndarray, target) -> tuple[float, np.ndarray, bool]:
    """Negative log likelihood of `target`, its gradient w.r.t. log_probs, feasibility.

    Infeasible lengths give (+inf, zero gradient, False) rather than raising, so
    training batches can skip such items.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if len(target) == 0:
        raise ValueError("CTC target must be non-empty")
    if target.min() < 0 or target.max() >= log_probs.shape[1]:
        raise ValueError("CTC target id out of vocabulary range")
    if (target == 0).any():
        raise ValueError("CTC target may not contain the blank id")
    Tn = log_probs.shape[0]
    if Tn < min_frames(target):
        return float("inf"), np.zeros_like(log_probs), False
    ext = _interleave_blanks(target, blank=0)
    alpha = ctc_forward_alpha(log_probs, ext)
    beta = _ctc_backward_beta(log_probs, ext)
    total = np.logaddexp(alpha[Tn - 1, len(ext) - 1], alpha[Tn - 1, len(ext) - 2])
    occupancy = alpha + beta  # log P(paths through state s at frame t)
    grad = np.zeros_like(log_probs)
    with np.errstate(invalid="ignore"):
        gamma = np.exp(occupancy - total)
    gamma[~np.isfinite(occupancy)] = 0.0
    for s, sym in enumerate(ext):
        grad[:, sym] -= gamma[:, s]
    return float(-total), grad, True


def ctc_loss(log_probs: Tensor | np.ndarray, target) -> tuple[Tensor, bool]:
    """Graph node for the CTC loss of a single utterance.

    `log_probs` is the [T', |V|] log-softmax output; the returned flag is False
    when the target cannot be aligned (loss +inf, zero gradient).
    """
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    loss, grad, feasible = ctc_loss_value(lp.data, target)
    out_dtype = lp.data.dtype
    node = T._make(
        np.asarray(loss, dtype=out_dtype),
        (lp,),
        lambda g: (g * grad.astype(out_dtype),),
    )
    return node, feasible


def collapse(frame_labels, blank: int = 0) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for lab in frame_labels:
        lab = int(lab)
        if lab != prev:
            if lab != blank:
                out.append(lab)
            prev = lab
    return out


def greedy_decode(log_probs: np.ndarray, blank: int = 0,
                  exclude=()) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame argmax, collapsed; confidence is the best frame probability per token.

    Each emitted token corresponds to one maximal run of its id in the frame
    argmaxes; its confidence is the maximum (linear) probability over that run.
    `exclude` removes ids (e.g. pad/unk/mask) from the argmax so reserved
    symbols can never be emitted.
    """
    log_probs = np.asarray(log_probs)
    if len(exclude):
        log_probs = log_probs.copy()
        log_probs[:, list(exclude)] = -np.inf
    ids = log_probs.argmax(axis=1)
    best = np.exp(log_probs.max(axis=1))
    tokens: list[int] = []
    confs: list[float] = []
    prev = None
    for t, lab in enumerate(ids):
        lab = int(lab)
        if lab == prev:
            if lab != blank:
                confs[-1] = max(confs[-1], float(best[t]))
        else:
            if lab != blank:
                tokens.append(lab)
                confs.append(float(best[t]))
            prev = lab
    return np.array(tokens, dtype=np.int64), np.array(confs, dtype=np.float64)


def mask_low_confidence(tokens, confidence, vocab: Vocabulary,
                        threshold: float = 0.9) -> MaskedHypothesis:
    """Replace tokens predicted below the threshold with the mask id."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("confidence threshold must lie in [0, 1]")
    tokens = np.asarray(tokens, dtype=np.int64)
    confidence = np.asarray(confidence, dtype=np.float64)
    if tokens.shape != confidence.shape:
        raise ValueError("tokens and confidence must align")
    masked = confidence < threshold
    out = tokens.copy()
    out[masked] = vocab.mask_id
    return MaskedHypothesis(out, confidence, masked)
