"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 6-8 share a single synthetic end-to-end pipeline (corpus, tiny
pretrained backbone, frozen/fine-tuned intent heads, learning curve) built
once per session; expect a few minutes of wall time for that fixture.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import brute_force_ctc, collapse_oracle, normalized_log_probs
from maskslu import tensor as T
from maskslu.ctc import Vocabulary, collapse, ctc_loss, ctc_loss_value, greedy_decode
from maskslu.decoder import mask_predict, mlm_loss
from maskslu.encoder import ModelConfig
from maskslu.features import SynthSpec, demo_grammar, synth_corpus
from maskslu.layers import AttentionConfig, FeedForward, Linear, MultiHeadAttention
from maskslu.model import Checkpoint, SpeechModel
from maskslu.slu import IntentClassifier, IntentSchema, bce_loss, enforce_structure
from maskslu.tensor import Tensor, grad_check
from maskslu.train import (
    Adam,
    SpeechDataset,
    TrainConfig,
    batch_losses,
    finetune,
    hybrid_loss,
    manifest_to_slu_examples,
    noam_lr,
    pretrain,
    slu_accuracy,
    substream,
    train_slu,
)

# Criterion-6 thresholds, from the spec, confirmed by the first honest run
# of this pipeline (observed: TER 0.0039, frozen accuracy 1.00, random
# backbone 0.26 — see notes in the repository history).
TER_THRESHOLD = 0.10
FROZEN_ACC_THRESHOLD = 0.95
RANDOM_ACC_CEILING = 0.60


def report(criterion: str, ok: bool, detail: str = "") -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion} {detail}".rstrip())


class TestCriterion1CtcOracle:
    def test_ctc_matches_brute_force_on_200_instances(self):
        rng = np.random.default_rng(42)
        t0 = time.time()
        worst = 0.0
        checked = 0
        for _ in range(200):
            Tn = int(rng.integers(1, 9))
            V = int(rng.integers(2, 5))
            L = int(rng.integers(1, 5))
            target = rng.integers(1, V, size=L)
            lp = normalized_log_probs(rng, Tn, V)
            loss, _, feasible = ctc_loss_value(lp, target)
            expected = brute_force_ctc(lp, target)
            if math.isinf(expected):
                assert not feasible
            else:
                assert feasible
                worst = max(worst, abs(loss - expected))
                checked += 1
        elapsed = time.time() - t0
        ok = worst < 1e-6 and elapsed < 10.0
        report("criterion-1 ctc-oracle",
               ok, f"(max |diff|={worst:.2e} over {checked} feasible, {elapsed:.1f}s)")
        assert worst < 1e-6
        assert elapsed < 10.0


class TestCriterion2GradientSuite:
    def test_gradients_of_all_listed_ops(self):
        t0 = time.time()
        results = {}
        with T.dtype_scope(np.float64):
            rng = np.random.default_rng(7)

            lin = Linear(4, 3, rng)
            x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
            coef = rng.normal(size=(2, 3))
            results["linear"] = grad_check(
                lambda x, w, b: T.tsum(T.mul(lin(x), coef)),
                [x, lin.w.tensor, lin.b.tensor],
            )

            g = Tensor(rng.normal(size=5), requires_grad=True)
            b = Tensor(rng.normal(size=5), requires_grad=True)
            xn = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            coef_ln = rng.normal(size=(3, 5))
            results["layer_norm"] = grad_check(
                lambda xn, g, b: T.tsum(T.mul(T.layer_norm(xn, g, b), coef_ln)), [xn, g, b]
            )

            mha = MultiHeadAttention(AttentionConfig(8, 2), rng)
            q = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
            kv = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
            valid = np.array([[True, True, True, False]])
            coef_a = rng.normal(size=(1, 3, 8))
            params = [q, kv] + [p.tensor for _, p in mha.named_parameters()]
            results["attention"] = grad_check(
                lambda q, kv, *ps: T.tsum(T.mul(mha(q, kv, kv, valid)[0], coef_a)), params
            )

            ffn = FeedForward(6, 9, rng)
            xf = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
            coef_f = rng.normal(size=(2, 6))
            results["ffn"] = grad_check(
                lambda xf, *ps: T.tsum(T.mul(ffn(xf), coef_f)),
                [xf] + [p.tensor for _, p in ffn.named_parameters()],
            )

            xc = Tensor(rng.normal(size=(1, 1, 6, 5)), requires_grad=True)
            wc = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
            bc = Tensor(rng.normal(size=2), requires_grad=True)
            coef_c = rng.normal(size=(1, 2, 3, 3))
            results["conv_frontend"] = grad_check(
                lambda xc, wc, bc: T.tsum(T.mul(T.conv2d_3x3_s2(xc, wc, bc), coef_c)),
                [xc, wc, bc],
            )

            target = np.array([1, 2])
            xl = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            results["ctc_loss"] = grad_check(
                lambda xl: ctc_loss(T.log_softmax(xl, axis=-1), target)[0], [xl]
            )

            xm = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            results["mlm_loss"] = grad_check(
                lambda xm: mlm_loss(xm, np.array([4, 5, 4, 5]), np.array([0, 2]), 0.1), [xm]
            )

            xb = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
            tb = (rng.random((2, 5)) > 0.5).astype(np.float64)
            results["bce_loss"] = grad_check(lambda xb: bce_loss(xb, tb), [xb])

            results["microstack"] = self._microstack_check(rng)

        elapsed = time.time() - t0
        worst = max(r["max_rel_err"] for r in results.values())
        ok = worst < 1e-4 and elapsed < 60.0
        detail = " ".join(f"{k}={v['max_rel_err']:.1e}" for k, v in results.items())
        report("criterion-2 gradient-suite", ok, f"({detail}, {elapsed:.1f}s)")
        for name, r in results.items():
            assert r["max_rel_err"] < 1e-4, (name, r)
        assert elapsed < 60.0

    @staticmethod
    def _microstack_check(rng) -> dict:
        """Full encoder+decoder+SLU stack, d_model=16, 2 layers each."""
        cfg = ModelConfig(enc_layers=2, dec_layers=2, heads=2, d_model=16, ffn=16,
                          dropout=0.0, vocab_size=6, mel_bins=6, conv_channels=(2, 2))
        model = SpeechModel(cfg, seed=3)
        grammar = demo_grammar()
        schema = IntentSchema.from_grammar(grammar)
        head = IntentClassifier(16, schema.num_bits, rng, d=8, heads=2,
                                ffn_hidden=8, classifier_hidden=8)
        feats = rng.normal(size=(1, 8, 6))
        lengths = np.array([8])
        target = np.array([4, 5])
        hyp_tokens = np.array([[3, 5]])  # one mask, one committed token
        mask_positions = np.array([0])
        intent = schema.encode_intent("lift", {"height": "high"}).astype(np.float64)

        params = [p.tensor for _, p in model.named_parameters()]
        params += [p.tensor for _, p in head.named_parameters()]

        def forward(*ps):
            enc = model.encoder(Tensor(feats), lengths, mode="eval")
            lp = model.ctc_log_probs(enc)
            ctc_node, feasible = ctc_loss(T.strided_slice(lp, (0,)), target)
            assert feasible
            dec = model.decoder(hyp_tokens, np.array([2]), enc, mode="eval")
            mlm = mlm_loss(T.strided_slice(dec.logits, (0,)), np.array([4, 5]),
                           mask_positions, 0.1)
            logits, _ = head(dec.layer_states[-1], np.array([2]))
            bce = bce_loss(logits, intent[None, :])
            return T.add(hybrid_loss(ctc_node, mlm, 0.3), bce)

        return grad_check(forward, params)


class TestCriterion3CollapseRule:
    def test_ten_thousand_random_sequences(self):
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(10000):
            n = int(rng.integers(0, 24))
            vocab = int(rng.integers(2, 7))
            labels = rng.integers(0, vocab, size=n).tolist()
            out = collapse(labels)
            assert out == collapse_oracle(labels)
            assert 0 not in out  # no blanks survive
            # fixed-point form of idempotence (see decisions ledger): outputs
            # without adjacent repeats are unchanged by a second collapse, and
            # the repeat-merging stage alone is idempotent on every input
            if all(a != b for a, b in zip(out, out[1:])):
                assert collapse(out) == out
            merged = [k for i, k in enumerate(labels) if i == 0 or labels[i - 1] != k]
            assert [k for i, k in enumerate(merged) if i == 0 or merged[i - 1] != k] == merged
            checked += 1
        report("criterion-3 collapse-rule", True, f"({checked} sequences, oracle-exact)")

    def test_greedy_decode_never_emits_reserved(self):
        rng = np.random.default_rng(6)
        vocab = Vocabulary.from_tokens(["a", "b", "c"])
        for _ in range(500):
            lp = normalized_log_probs(rng, int(rng.integers(1, 10)), len(vocab))
            tokens, _ = greedy_decode(lp, exclude=vocab.non_transcript_ids)
            assert vocab.blank_id not in tokens
            assert vocab.mask_id not in tokens
            assert vocab.pad_id not in tokens
            assert vocab.unk_id not in tokens


class TestCriterion4StructureEnforcement:
    def test_thousand_random_vectors_match_scan_oracle(self):
        schema = IntentSchema.from_grammar(demo_grammar())
        assert len(schema.valid_set) == 36
        rng = np.random.default_rng(8)

        def oracle(probs):
            # naive full cross-entropy scan, sequentially summed, first minimum
            p = np.clip(probs, 1e-7, 1 - 1e-7)
            best, best_score = 0, None
            for idx, v in enumerate(schema.valid_set):
                score = 0.0
                for bit in range(schema.num_bits):
                    if v[bit]:
                        score -= math.log(p[bit])
                    else:
                        score -= math.log(1.0 - p[bit])
                if best_score is None or score < best_score:
                    best, best_score = idx, score
            return best

        mismatches = 0
        for _ in range(1000):
            probs = rng.random(schema.num_bits)
            got = enforce_structure(probs, schema)
            want = schema.valid_set[oracle(probs)]
            mismatches += int(not np.array_equal(got.multihot, want))
        # engineered exact ties: uniform probabilities tie every combination;
        # equal probabilities on swapped bits tie combination pairs
        tie_ok = True
        label = enforce_structure(np.full(schema.num_bits, 0.5), schema)
        tie_ok &= np.array_equal(label.multihot, schema.valid_set[0])
        probs = np.full(schema.num_bits, 0.2)
        grab_ball = schema.encode_intent("grab", {"target": "ball"})
        grab_box = schema.encode_intent("grab", {"target": "box"})
        idx_ball = int(np.where((schema.valid_set == grab_ball).all(axis=1))[0][0])
        idx_box = int(np.where((schema.valid_set == grab_box).all(axis=1))[0][0])
        assert idx_ball < idx_box
        action_col = [i for i, (k, n) in enumerate(schema.label_bits) if n == "grab"][0]
        probs[action_col] = 0.99  # the two target values stay exactly tied
        label = enforce_structure(probs, schema)
        tie_ok &= np.array_equal(label.multihot, grab_ball)
        ok = mismatches == 0 and tie_ok
        report("criterion-4 structure-enforcement", ok,
               f"({1000 - mismatches}/1000 oracle-exact, ties deterministic)")
        assert ok


class TestCriterion5MaskPredict:
    def test_contract_over_500_trials(self):
        rng = np.random.default_rng(9)
        cfg = ModelConfig(enc_layers=1, dec_layers=1, heads=2, d_model=16, ffn=16,
                          dropout=0.0, vocab_size=24, mel_bins=6, conv_channels=(2, 2))
        model = SpeechModel(cfg, seed=4)
        vocab = Vocabulary.from_tokens([f"w{i}" for i in range(20)])
        from maskslu.ctc import MaskedHypothesis

        feats = rng.normal(size=(1, 12, 6)).astype(np.float32)
        enc = model.encoder(feats, np.array([12]))
        violations = 0
        for trial in range(500):
            L = int(rng.integers(1, 21))
            m0 = int(rng.integers(1, L + 1))
            tokens = rng.integers(4, 24, size=L)
            masked = np.zeros(L, dtype=bool)
            masked[rng.choice(L, size=m0, replace=False)] = True
            tokens[masked] = vocab.mask_id
            hyp = MaskedHypothesis(tokens.copy(), np.where(masked, 0.0, 1.0), masked)
            trace = []
            out = mask_predict(hyp, enc, model.decoder, vocab, max_iter=10, trace=trace)
            ok = vocab.mask_id not in out
            ok &= len(trace) <= 10
            committed = ~masked
            ref = tokens.copy()
            for step_tokens, step_masked in trace:
                ok &= bool(np.all(step_tokens[committed] == ref[committed]))
                committed = ~step_masked
                ref = step_tokens
            ok &= bool(np.all(out[~masked] == hyp.tokens[~masked]))
            violations += int(not ok)
        report("criterion-5 mask-predict", violations == 0,
               f"({500 - violations}/500 trials clean)")
        assert violations == 0


@pytest.fixture(scope="session")
def synthetic_pipeline(tmp_path_factory):
    """Criteria 6-8 artifacts: corpus, pretrained tiny backbone, SLU heads."""
    t_start = time.time()
    root = tmp_path_factory.mktemp("endtoend")
    grammar = demo_grammar()
    schema = IntentSchema.from_grammar(grammar)
    assert len(grammar.actions) == 8
    assert len(schema.valid_set) == 36
    assert schema.num_bits == 31
    spec = SynthSpec.for_grammar(grammar)
    synth_corpus(grammar, spec, 2000, seed=101, out_dir=root)
    entries = (root / "manifest.jsonl").read_text().strip().split("\n")
    order = np.random.default_rng(0).permutation(len(entries))
    splits = {"train": order[:1600], "valid": order[1600:1800], "test": order[1800:]}
    for name, idx in splits.items():
        (root / f"manifest-{name}.jsonl").write_text(
            "\n".join(entries[i] for i in idx) + "\n"
        )
    feature_params = {"mel_bins": 40}
    model_cfg = ModelConfig(enc_layers=4, dec_layers=3, heads=4, d_model=128, ffn=512,
                            dropout=0.1, vocab_size=1, mel_bins=40)
    train_cfg = TrainConfig(rho=0.3, epochs=30, batch_size=32, accum_steps=1,
                            peak_lr=0.004, warmup_steps=300, seed=11,
                            early_stop_patience=8)
    best_path = pretrain(root / "manifest-train.jsonl", root / "manifest-valid.jsonl",
                         model_cfg, train_cfg, root / "pt", feature_params=feature_params)
    ckpt = Checkpoint.load(best_path)
    ter = ckpt.metrics["valid_ter"]

    backbone = ckpt.build_model()
    backbone.freeze()
    train_ds = SpeechDataset(root / "manifest-train.jsonl", feature_params)
    test_ds = SpeechDataset(root / "manifest-test.jsonl", feature_params)
    train_examples = manifest_to_slu_examples(
        range(len(train_ds)), train_ds, backbone, ckpt.vocab, ckpt.feature_norm, schema
    )
    test_examples = manifest_to_slu_examples(
        range(len(test_ds)), test_ds, backbone, ckpt.vocab, ckpt.feature_norm, schema
    )

    # 10 examples per action class for the frozen stage
    groups: dict[str, list[int]] = {}
    for i in range(len(train_ds)):
        groups.setdefault(train_ds.intent(i)["action"], []).append(i)
    rng = np.random.default_rng(77)
    subset = []
    for action in sorted(groups):
        pool = groups[action]
        subset.extend(pool[j] for j in rng.choice(len(pool), size=10, replace=False))
    valid_pool = [i for i in range(len(train_ds)) if i not in set(subset)]
    head_valid = [train_examples[i] for i in valid_pool[:200]]
    slu_cfg = TrainConfig(epochs=150, batch_size=80, peak_lr=0.005, seed=5,
                          early_stop_patience=25)
    head_kwargs = {"d": 128, "heads": 4, "ffn_hidden": 1024, "classifier_hidden": 1024}
    frozen_head, _ = train_slu([train_examples[i] for i in subset], head_valid,
                               schema, slu_cfg, head_kwargs=head_kwargs)
    frozen_acc = slu_accuracy(frozen_head, test_examples, schema)

    # identical protocol on a randomly initialized frozen backbone
    random_backbone = SpeechModel(ckpt.model_config, seed=999)
    random_backbone.freeze()
    rnd_train = manifest_to_slu_examples(
        subset, train_ds, random_backbone, ckpt.vocab, ckpt.feature_norm, schema
    )
    rnd_valid__pool = manifest_to_slu_examples(
        valid_pool[:200], train_ds, random_backbone, ckpt.vocab, ckpt.feature_norm, schema
    )
    rnd_test = manifest_to_slu_examples(
        range(len(test_ds)), test_ds, random_backbone, ckpt.vocab, ckpt.feature_norm, schema
    )
    random_head, _ = train_slu(rnd_train, rnd_valid__pool, schema, slu_cfg,
                               head_kwargs=head_kwargs)
    random_acc = slu_accuracy(random_head, rnd_test, schema)

    return {
        "root": root,
        "grammar": grammar,
        "schema": schema,
        "ckpt": ckpt,
        "ckpt_path": best_path,
        "backbone": backbone,
        "train_ds": train_ds,
        "test_ds": test_ds,
        "train_examples": train_examples,
        "test_examples": test_examples,
        "subset": subset,
        "frozen_head": frozen_head,
        "frozen_acc": frozen_acc,
        "random_acc": random_acc,
        "ter": ter,
        "head_kwargs": head_kwargs,
        "slu_cfg": slu_cfg,
        "elapsed_s": time.time() - t_start,
    }


class TestCriterion6SyntheticEndToEnd:
    def test_pretrained_frozen_representations_suffice(self, synthetic_pipeline):
        p = synthetic_pipeline
        ok = (p["ter"] < TER_THRESHOLD
              and p["frozen_acc"] >= FROZEN_ACC_THRESHOLD
              and p["random_acc"] <= RANDOM_ACC_CEILING
              and p["elapsed_s"] < 45 * 60)
        report(
            "criterion-6 synthetic-end-to-end", ok,
            f"(ter={p['ter']:.4f} frozen_acc={p['frozen_acc']:.3f} "
            f"random_acc={p['random_acc']:.3f} elapsed={p['elapsed_s']:.0f}s)",
        )
        assert p["ter"] < TER_THRESHOLD
        assert p["frozen_acc"] >= FROZEN_ACC_THRESHOLD
        assert p["random_acc"] <= RANDOM_ACC_CEILING
        assert p["elapsed_s"] < 45 * 60


class TestCriterion7FinetuneContract:
    def test_hashes_and_accuracy(self, synthetic_pipeline):
        p = synthetic_pipeline
        ckpt = p["ckpt"]
        import copy

        head = copy.deepcopy(p["frozen_head"])
        before = ckpt.build_model().state_hashes()
        ft_cfg = TrainConfig(epochs=2, batch_size=32, peak_lr=1e-4, seed=21)
        tuned_model, tuned_head, _ = finetune(
            ckpt, head, p["subset"], p["train_ds"], p["schema"], ft_cfg,
            unfreeze="decoder_last4",
        )
        after = tuned_model.state_hashes()
        changed = {n for n in after if after[n] != before[n]}
        k = min(4, ckpt.model_config.dec_layers)
        first = ckpt.model_config.dec_layers - k
        hash_ok = bool(changed) and all(
            n.startswith("decoder.blocks.") and int(n.split(".")[2]) >= first
            for n in changed
        )
        tuned_test = manifest_to_slu_examples(
            range(len(p["test_ds"])), p["test_ds"], tuned_model, ckpt.vocab,
            ckpt.feature_norm, p["schema"],
        )
        tuned_acc = slu_accuracy(tuned_head, tuned_test, p["schema"])
        acc_ok = tuned_acc >= p["frozen_acc"] - 0.005
        report(
            "criterion-7 finetune-contract", hash_ok and acc_ok,
            f"(changed={sorted({n.split('.')[2] for n in changed})} "
            f"tuned_acc={tuned_acc:.3f} frozen_acc={p['frozen_acc']:.3f})",
        )
        assert hash_ok, sorted(changed)[:8]
        assert acc_ok


class TestCriterion8LearningCurve:
    def test_sizes_and_monotone_endpoints(self, synthetic_pipeline, tmp_path):
        from maskslu.eval import group_by_action, learning_curve

        p = synthetic_pipeline
        by_idx = dict(enumerate(p["train_examples"]))
        groups = group_by_action(p["train_ds"], range(len(p["train_ds"])))
        cell_cfg = TrainConfig(epochs=60, batch_size=128, peak_lr=0.005, seed=5,
                               early_stop_patience=60)
        points = learning_curve(
            by_idx, groups, p["test_examples"], p["schema"], sizes=[1, 2, 4, 8, 16],
            cfg=cell_cfg, repeats=3, seeds=[31, 32, 33], out_dir=tmp_path,
        )
        csv_rows = (tmp_path / "curve.csv").read_text().strip().split("\n")
        complete = len(csv_rows) == 1 + 5 * 3
        f1_first = points[0].mean("micro_f1")
        f1_last = points[-1].mean("micro_f1")
        monotone = f1_last > f1_first
        stds = [p_.std("micro_f1") for p_ in points]
        report(
            "criterion-8 learning-curve", complete and monotone,
            f"(f1@1={f1_first:.3f} f1@16={f1_last:.3f} stds={[round(s, 3) for s in stds]})",
        )
        assert complete
        assert monotone
        assert all(s >= 0 for s in stds)


class TestCriterion9SpotValues:
    def test_schedule_and_losses(self):
        ok = (
            abs(noam_lr(25000) - 0.4) < 1e-12
            and abs(noam_lr(12500) - 0.2) < 1e-12
            and abs(noam_lr(100000) - 0.2) < 1e-12
            and abs(hybrid_loss(2.0, 1.0, 0.3) - 1.3) < 1e-12
        )
        logits = Tensor(np.zeros((3, 11)))
        mlm = mlm_loss(logits, np.array([4, 5, 6]), np.array([0, 1, 2]), smoothing=0.1)
        ok = ok and abs(mlm.item() - math.log(11)) < 1e-6
        report("criterion-9 spot-values", ok)
        assert ok


class TestCriterion10ParameterCounts:
    def test_backbone_and_head_sizes(self):
        model = SpeechModel(ModelConfig(), seed=0)
        total = model.num_parameters()
        rel_model = (total - 30.9e6) / 30.9e6
        head = IntentClassifier(256, 31, np.random.default_rng(0))
        head_total = head.num_parameters()
        rel_head = (head_total - 890e3) / 890e3
        ok = abs(rel_model) < 0.05 and abs(rel_head) < 0.10
        report("criterion-10 parameter-counts", ok,
               f"(backbone={total:,} [{rel_model:+.1%}] head={head_total:,} [{rel_head:+.1%}])")
        assert abs(rel_model) < 0.05, total
        assert abs(rel_head) < 0.10, head_total
