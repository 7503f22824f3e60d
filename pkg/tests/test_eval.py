"""Metrics against naive reimplementations, learning-curve mechanics, exports."""

import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from maskslu.eval import (
    attention_report,
    attention_svg,
    intent_accuracy,
    learning_curve,
    levenshtein,
    micro_f1,
    token_error_rate,
)
from maskslu.features import demo_grammar
from maskslu.slu import IntentClassifier, IntentSchema
from maskslu.train import SluExample, TrainConfig


def naive_accuracy(preds, refs):
    hits = 0
    for p, r in zip(preds, refs):
        hits += int(all(int(a) == int(b) for a, b in zip(p, r)))
    return hits / len(refs)


def naive_micro_f1(preds, refs):
    tp = fp = fn = 0
    for p, r in zip(preds, refs):
        for a, b in zip(p, r):
            if a and b:
                tp += 1
            elif a and not b:
                fp += 1
            elif b and not a:
                fn += 1
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def naive_levenshtein(a, b):
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        dp[i][0] = i
    for j in range(n + 1):
        dp[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            dp[i][j] = min(dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                           dp[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return dp[m][n]


class TestAccuracy:
    def test_all_exact(self):
        refs = [np.array([1, 0, 1]), np.array([0, 1, 0])]
        assert intent_accuracy(refs, refs) == 1.0

    def test_one_wrong_slot_counts_as_incorrect(self):
        ref = [np.array([1, 0, 1, 0])]
        pred = [np.array([1, 0, 0, 1])]  # action bit right, slot bits wrong
        assert intent_accuracy(pred, ref) == 0.0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            intent_accuracy([], [])

    def test_matches_naive_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, bits = int(rng.integers(1, 30)), int(rng.integers(1, 12))
            preds = [rng.integers(0, 2, bits) for _ in range(n)]
            refs = [rng.integers(0, 2, bits) for _ in range(n)]
            assert intent_accuracy(preds, refs) == naive_accuracy(preds, refs)


class TestMicroF1:
    def test_perfect(self):
        refs = [np.array([1, 0, 1])]
        assert micro_f1(refs, refs) == 1.0

    def test_all_zero_predictions(self):
        refs = [np.array([1, 1, 0])]
        preds = [np.zeros(3, dtype=int)]
        assert micro_f1(preds, refs) == 0.0

    def test_hand_case(self):
        # TP=3, FP=1, FN=2 -> P=0.75, R=0.6, F1=2/3
        refs = [np.array([1, 1, 1, 0, 1, 1])]
        preds = [np.array([1, 1, 1, 1, 0, 0])]
        assert np.isclose(micro_f1(preds, refs), 2 / 3)

    def test_matches_naive_on_random_sets(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n, bits = int(rng.integers(1, 8)), int(rng.integers(1, 10))
            preds = [rng.integers(0, 2, bits) for _ in range(n)]
            refs = [rng.integers(0, 2, bits) for _ in range(n)]
            assert micro_f1(preds, refs) == naive_micro_f1(preds, refs)
            assert intent_accuracy(preds, refs) == naive_accuracy(preds, refs)


class TestTer:
    def test_identical(self):
        assert token_error_rate([["a", "b"]], [["a", "b"]]) == 0.0

    def test_empty_hypothesis(self):
        assert token_error_rate([[]], [["a", "b", "c"]]) == 1.0

    def test_single_substitution(self):
        assert np.isclose(token_error_rate([["a", "x", "c"]], [["a", "b", "c"]]), 1 / 3)

    def test_empty_reference_corpus_rejected(self):
        with pytest.raises(ValueError):
            token_error_rate([[]], [[]])

    def test_levenshtein_matches_naive(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            b = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            assert levenshtein(a, b) == naive_levenshtein(a, b)


@pytest.fixture(scope="module")
def fabricated_slu():
    """Synthetic, separable representation space; no backbone involved."""
    schema = IntentSchema.from_grammar(demo_grammar())
    rng = np.random.default_rng(3)
    combo_centers = rng.normal(size=(len(schema.valid_set), 12)).astype(np.float32)
    by_idx = {}
    groups = {}
    test_examples = []
    idx = 0
    for k, (action, args) in enumerate(schema.combos):
        vec = schema.encode_intent(action, args)
        for _ in range(20):
            reprs = combo_centers[k] + 0.05 * rng.normal(size=(3, 12)).astype(np.float32)
            ex = SluExample(reprs.astype(np.float32), vec)
            if _ < 16:
                by_idx[idx] = ex
                groups.setdefault(action, []).append(idx)
                idx += 1
            else:
                test_examples.append(ex)
    return {"schema": schema, "by_idx": by_idx, "groups": groups, "test": test_examples}


class TestLearningCurve:
    def test_csv_complete_and_deterministic(self, fabricated_slu, tmp_path):
        cfg = TrainConfig(epochs=6, batch_size=64, peak_lr=0.01, seed=5)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        out_a.mkdir()
        out_b.mkdir()
        kwargs = dict(
            sizes=[1, 2], repeats=2, seeds=[11, 12],
        )
        f = fabricated_slu
        points_a = learning_curve(f["by_idx"], f["groups"], f["test"][:40], f["schema"],
                                  cfg=cfg, out_dir=out_a, **kwargs)
        points_b = learning_curve(f["by_idx"], f["groups"], f["test"][:40], f["schema"],
                                  cfg=cfg, out_dir=out_b, **kwargs)
        assert (out_a / "curve.csv").read_bytes() == (out_b / "curve.csv").read_bytes()
        with open(out_a / "curve.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["size", "repeat", "seed", "micro_f1", "accuracy"]
        assert len(rows) == 1 + 2 * 2
        assert len(points_a) == 2
        assert all(len(p.repeats) == 2 for p in points_a)
        assert all(p.std("micro_f1") >= 0 for p in points_a)
        del points_b

    def test_subset_manifests_written(self, fabricated_slu, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=64, peak_lr=0.01, seed=5)
        f = fabricated_slu
        learning_curve(f["by_idx"], f["groups"], f["test"][:10], f["schema"], sizes=[1],
                       repeats=2, seeds=[1, 2], cfg=cfg, out_dir=tmp_path)
        subs = sorted(tmp_path.glob("subset-*.json"))
        assert len(subs) == 2
        doc = json.loads(subs[0].read_text())
        assert set(doc) == {"seed", "size", "indices"}
        assert len(doc["indices"]) == 8  # one per action class

    def test_oversized_request_uses_all(self, fabricated_slu):
        from maskslu.eval import sample_per_class

        f = fabricated_slu
        flagged = []
        rng = np.random.default_rng(0)
        chosen = sample_per_class(f["groups"], 999, rng,
                                  flag_short=lambda cls, n: flagged.append((cls, n)))
        assert len(chosen) == len(f["by_idx"])
        assert len(flagged) == 8


class TestAttentionExport:
    def test_report_and_svg_structure(self, fabricated_slu):
        f = fabricated_slu
        head = IntentClassifier(12, f["schema"].num_bits, np.random.default_rng(0),
                                d=8, heads=2, ffn_hidden=16, classifier_hidden=16)
        ex = f["test"][0]
        tokens = ["go", "to", "the"]
        report = attention_report(head, ex, tokens, f["schema"])
        assert report["tokens"] == tokens
        for lname, layer in report["attention"].items():
            for hname, weights in layer.items():
                assert len(weights) == len(tokens)
                assert np.isclose(sum(weights), 1.0, atol=1e-5)
        svg = attention_svg(report)
        root = ET.fromstring(svg)  # well-formed, self-contained XML
        assert root.tag.endswith("svg")
        texts = [el.text for el in root.iter() if el.tag.endswith("text")]
        for tok in tokens:
            assert texts.count(tok) == 1

    def test_padded_positions_absent(self, fabricated_slu):
        f = fabricated_slu
        head = IntentClassifier(12, f["schema"].num_bits, np.random.default_rng(0),
                                d=8, heads=2, ffn_hidden=16, classifier_hidden=16)
        reprs = np.zeros((5, 12), dtype=np.float32)
        reprs[:2] = f["test"][0].reprs[:2]
        ex = SluExample(reprs[:2], f["test"][0].multihot)
        report = attention_report(head, ex, ["a", "b"], f["schema"])
        for layer in report["attention"].values():
            for weights in layer.values():
                assert len(weights) == 2


class TestEmbeddingExport:
    def test_mean_pooling_matches_oracle(self, small_corpus, tmp_path):
        from conftest import tiny_model
        from maskslu.decoder import extract_representation_batch
        from maskslu.eval import export_embeddings
        from maskslu.train import SpeechDataset, compute_feature_norm, normalized_features

        ds = SpeechDataset(small_corpus["manifest"], {"mel_bins": 24})
        norm = compute_feature_norm(ds, range(10))
        vocab = ds.build_vocab()
        model = tiny_model(vocab_size=len(vocab), mel_bins=24, d_model=16, dec_layers=2)
        out = export_embeddings(model, vocab, ds, norm, range(5), "decoder.penultimate",
                                tmp_path / "emb.npz")
        arch = np.load(out)
        index = json.loads((tmp_path / "emb.json").read_text())
        assert len(arch.files) == 5
        assert len(index["utterances"]) == 5
        feats = [normalized_features(ds, i, norm) for i in range(5)]
        reps = extract_representation_batch(model, vocab, feats, "decoder.penultimate")
        for i, rep in enumerate(reps):
            utt = ds.entries[i]["id"]
            manual = rep.vectors.mean(axis=0)
            assert np.allclose(arch[utt], manual, atol=1e-6)
            assert index["utterances"][utt]["intent"] == ds.intent(i)

    def test_constant_sequence_mean_is_constant(self, small_corpus, tmp_path):
        ex = np.tile(np.arange(4, dtype=np.float32), (3, 1))
        assert np.allclose(ex.mean(axis=0), ex[0])
