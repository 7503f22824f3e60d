"""Shared fixtures and independent oracles used across the test suite."""

import itertools

import numpy as np
import pytest

from maskslu import tensor as T
from maskslu.encoder import ModelConfig
from maskslu.features import SynthSpec, demo_grammar, synth_corpus
from maskslu.model import SpeechModel


def brute_force_ctc(log_probs: np.ndarray, target, blank: int = 0) -> float:
    """-log P(target) by enumerating every frame-label path and collapsing it."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    Tn, V = log_probs.shape
    target = np.asarray(target, dtype=np.int64)
    paths = np.array(np.meshgrid(*([np.arange(V)] * Tn), indexing="ij")).reshape(Tn, -1).T
    path_lp = np.zeros(len(paths))
    for t in range(Tn):
        path_lp += log_probs[t, paths[:, t]]
    keep = np.ones(paths.shape, dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    sel = keep & (paths != blank)
    counts = sel.sum(axis=1)
    cand = counts == len(target)
    if not cand.any():
        return float("inf")
    vals = paths[cand][sel[cand]].reshape(-1, len(target))
    match = (vals == target).all(axis=1)
    if not match.any():
        return float("inf")
    lps = path_lp[cand][match]
    m = lps.max()
    return float(-(m + np.log(np.exp(lps - m).sum())))


def collapse_oracle(frame_labels, blank: int = 0) -> list[int]:
    """Reference collapse: groupby-merge adjacent repeats, then drop blanks."""
    return [int(k) for k, _ in itertools.groupby(frame_labels) if int(k) != blank]


def normalized_log_probs(rng, frames: int, vocab: int) -> np.ndarray:
    x = rng.normal(size=(frames, vocab))
    m = x.max(axis=1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))


def tiny_model(vocab_size=9, mel_bins=8, enc_layers=1, dec_layers=1, d_model=16, ffn=24,
               heads=2, conv_channels=(2, 3), dropout=0.0, seed=0) -> SpeechModel:
    cfg = ModelConfig(
        enc_layers=enc_layers, dec_layers=dec_layers, heads=heads, d_model=d_model, ffn=ffn,
        dropout=dropout, vocab_size=vocab_size, mel_bins=mel_bins, conv_channels=conv_channels,
    )
    return SpeechModel(cfg, seed=seed)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60-utterance synthetic corpus shared by file-based tests."""
    root = tmp_path_factory.mktemp("corpus")
    grammar = demo_grammar()
    spec = SynthSpec.for_grammar(grammar)
    manifest = synth_corpus(grammar, spec, 60, seed=11, out_dir=root)
    return {"root": root, "grammar": grammar, "spec": spec, "manifest": manifest}


@pytest.fixture()
def f64():
    with T.dtype_scope(np.float64):
        yield
