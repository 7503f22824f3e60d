"""Metrics, the low-resource learning-curve protocol, and artifact export."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import extract_representation_batch, resolve_layer
from .slu import IntentClassifier, IntentSchema, enforce_structure, sigmoid_np


@dataclass
class EvalReport:
    accuracy: float
    micro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion_pairs: list[tuple[str, str, int]]
    ter: float | None = None
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "accuracy": self.accuracy,
            "micro_f1": self.micro_f1,
            "per_class": self.per_class,
            "confusion_pairs": [list(p) for p in self.confusion_pairs],
            "ter": self.ter,
            "runtime_s": self.runtime_s,
        }


@dataclass
class LearningCurvePoint:
    train_size: int
    repeats: list[dict] = field(default_factory=list)  # {"seed","micro_f1","accuracy"}

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.repeats]))

    def std(self, key: str) -> float:
        return float(np.std([r[key] for r in self.repeats]))


def intent_accuracy(predictions, references) -> float:
    """Exact-match rate over full multihot vectors (action and every slot)."""
    predictions, references = list(predictions), list(references)
    if len(predictions) != len(references):
        raise ValueError("prediction/reference lengths differ")
    if not references:
        raise ValueError("cannot score an empty set")
    hits = sum(
        int(np.array_equal(np.asarray(p, dtype=np.uint8), np.asarray(r, dtype=np.uint8)))
        for p, r in zip(predictions, references)
    )
    return hits / len(references)


def micro_f1(predictions, references) -> float:
    """Micro-averaged F1 with TP/FP/FN pooled over every label bit; 0 on empty denominators."""
    predictions, references = list(predictions), list(references)
    if len(predictions) != len(references):
        raise ValueError("prediction/reference lengths differ")
    tp = fp = fn = 0
    for p, r in zip(predictions, references):
        p = np.asarray(p, dtype=bool)
        r = np.asarray(r, dtype=bool)
        if p.shape != r.shape:
            raise ValueError("bit-vector length mismatch")
        tp += int((p & r).sum())
        fp += int((p & ~r).sum())
        fn += int((~p & r).sum())
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(hyps, refs) -> float:
    """Summed edit distance over the corpus divided by total reference tokens."""
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise ValueError("hypothesis/reference counts differ")
    total_ref = sum(len(list(r)) for r in refs)
    if total_ref == 0:
        raise ValueError("empty reference corpus")
    dist = sum(levenshtein(list(h), list(r)) for h, r in zip(hyps, refs))
    return dist / total_ref


def evaluate_intents(head: IntentClassifier, examples, schema: IntentSchema) -> EvalReport:
    """Accuracy, micro-F1, per-action precision/recall and confusion pairs."""
    from .train import _slu_batch

    t0 = time.time()
    preds, refs = [], []
    for start in range(0, len(examples), 256):
        chunk = examples[start : start + 256]
        reprs, lengths, targets = _slu_batch(chunk)
        with T.no_grad():
            logits, _ = head(reprs, lengths)
        probs = sigmoid_np(logits.data)
        for row in range(len(chunk)):
            preds.append(enforce_structure(probs[row], schema).multihot)
            refs.append(targets[row].astype(np.uint8))
    acc = intent_accuracy(preds, refs)
    f1 = micro_f1(preds, refs)
    actions = [name for kind, name in schema.label_bits if kind == "action"]
    per_class = {}
    confusion: dict[tuple[str, str], int] = {}
    for name in actions:
        col = [i for i, (k, n) in enumerate(schema.label_bits) if n == name][0]
        tp = sum(int(p[col] and r[col]) for p, r in zip(preds, refs))
        fp = sum(int(p[col] and not r[col]) for p, r in zip(preds, refs))
        fn = sum(int(not p[col] and r[col]) for p, r in zip(preds, refs))
        per_class[name] = {
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
        }
    for p, r in zip(preds, refs):
        pa = schema.decode_intent(p)[0]
        ra = schema.decode_intent(r)[0]
        if pa != ra:
            confusion[(ra, pa)] = confusion.get((ra, pa), 0) + 1
    pairs = sorted(((r, p, n) for (r, p), n in confusion.items()), key=lambda x: -x[2])
    return EvalReport(acc, f1, per_class, pairs, runtime_s=round(time.time() - t0, 3))


# -- learning curve ------------------------------------------------------

def sample_per_class(indices_by_class: dict, size: int, rng: np.random.Generator,
                     flag_short=None) -> list[int]:
    """`size` random examples per class (all of them when fewer are available)."""
    chosen = []
    for cls in sorted(indices_by_class):
        pool = indices_by_class[cls]
        if len(pool) <= size:
            if len(pool) < size and flag_short is not None:
                flag_short(cls, len(pool))
            chosen.extend(pool)
        else:
            picks = rng.choice(len(pool), size=size, replace=False)
            chosen.extend(pool[j] for j in picks)
    return sorted(chosen)


def group_by_action(dataset, indices) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i in indices:
        action = dataset.intent(i)["action"]
        groups.setdefault(action, []).append(i)
    return groups


def group_by_combo(dataset, indices) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i in indices:
        intent = dataset.intent(i)
        key = json.dumps([intent["action"], intent.get("args", {})], sort_keys=True)
        groups.setdefault(key, []).append(i)
    return groups


def learning_curve(train_examples_by_idx: dict, groups: dict, test_examples, schema: IntentSchema,
                   sizes, cfg, repeats: int = 3, seeds=None, out_dir=None,
                   progress=None) -> list[LearningCurvePoint]:
    """Train a fresh head per (size, repeat) cell and score it on the fixed test set.

    `train_examples_by_idx` maps manifest index -> SluExample so subsets are
    reproducible from (seed, size) alone; subset manifests are written next to
    the CSV for audit when `out_dir` is given.
    """
    from .train import TrainConfig, train_slu

    seeds = list(seeds) if seeds is not None else [cfg.seed + r for r in range(repeats)]
    if len(seeds) != repeats:
        raise ValueError("need one seed per repeat")
    out_dir = Path(out_dir) if out_dir is not None else None
    points = []
    rows = []
    for size in sizes:
        point = LearningCurvePoint(train_size=size)
        for r, seed in enumerate(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(size)]))
            subset = sample_per_class(groups, size, rng)
            if out_dir is not None:
                with open(out_dir / f"subset-size{size}-rep{r}.json", "w") as fh:
                    json.dump({"seed": seed, "size": size, "indices": subset}, fh)
            cell_cfg = TrainConfig(
                rho=cfg.rho, epochs=cfg.epochs, batch_size=cfg.batch_size,
                accum_steps=1, peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps,
                smoothing=cfg.smoothing, seed=seed,
                early_stop_patience=cfg.early_stop_patience,
            )
            train_ex = [train_examples_by_idx[i] for i in subset]
            head, _ = train_slu(train_ex, [], schema, cell_cfg)
            report = evaluate_intents(head, test_examples, schema)
            point.repeats.append(
                {"seed": seed, "micro_f1": report.micro_f1, "accuracy": report.accuracy}
            )
            rows.append([size, r, seed, report.micro_f1, report.accuracy])
            if progress:
                progress(size, r, report)
        points.append(point)
    if out_dir is not None:
        with open(out_dir / "curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["size", "repeat", "seed", "micro_f1", "accuracy"])
            writer.writerows(rows)
        doc = {
            "format_version": 1,
            "points": [
                {
                    "train_size": p.train_size,
                    "repeats": p.repeats,
                    "micro_f1_mean": p.mean("micro_f1"),
                    "micro_f1_std": p.std("micro_f1"),
                    "accuracy_mean": p.mean("accuracy"),
                    "accuracy_std": p.std("accuracy"),
                }
                for p in points
            ],
        }
        with open(out_dir / "curve.json", "w") as fh:
            json.dump(doc, fh, indent=2)
    for prev, nxt in zip(points, points[1:]):
        slack = max(prev.std("micro_f1"), nxt.std("micro_f1"))
        if nxt.mean("micro_f1") < prev.mean("micro_f1") - slack:
            import logging

            logging.getLogger("maskslu").warning(
                "learning curve dips beyond one std (size %d: %.3f -> size %d: %.3f); "
                "noise at small sizes is expected",
                prev.train_size, prev.mean("micro_f1"), nxt.train_size, nxt.mean("micro_f1"),
            )
    return points


# -- exports -------------------------------------------------------------

def export_embeddings(model, vocab, dataset, norm, indices, layer, out_path) -> Path:
    """Mean-pooled per-utterance vectors in an .npz archive plus a JSON index."""
    layer = resolve_layer(layer, model.cfg)
    from .train import normalized_features

    indices = list(indices)
    feats = [normalized_features(dataset, i, norm) for i in indices]
    reps = extract_representation_batch(model, vocab, feats, layer)
    out_path = Path(out_path)
    arrays = {}
    index = {}
    for i, rep in zip(indices, reps):
        utt = dataset.entries[i]["id"]
        arrays[utt] = rep.vectors.mean(axis=0).astype(np.float32)
        index[utt] = {
            "layer": layer,
            "shape": list(arrays[utt].shape),
            "intent": dataset.intent(i),
            "token_string": " ".join(rep.tokens),
        }
    np.savez(out_path, **arrays)
    with open(out_path.with_suffix(".json"), "w") as fh:
        json.dump({"format_version": 1, "utterances": index}, fh, indent=2)
    return out_path


def export_representations(model, vocab, dataset, norm, indices, layer, out_path) -> Path:
    """Full per-position representation matrices (.npz + JSON index)."""
    layer = resolve_layer(layer, model.cfg)
    from .train import normalized_features

    indices = list(indices)
    feats = [normalized_features(dataset, i, norm) for i in indices]
    reps = extract_representation_batch(model, vocab, feats, layer)
    out_path = Path(out_path)
    arrays = {}
    index = {}
    for i, rep in zip(indices, reps):
        utt = dataset.entries[i]["id"]
        arrays[utt] = rep.vectors
        index[utt] = {
            "layer": layer,
            "shape": list(rep.vectors.shape),
            "token_string": " ".join(rep.tokens),
        }
    np.savez(out_path, **arrays)
    with open(out_path.with_suffix(".json"), "w") as fh:
        json.dump({"format_version": 1, "utterances": index}, fh, indent=2)
    return out_path


def attention_report(head: IntentClassifier, example, tokens, schema: IntentSchema) -> dict:
    """Class-attention weights of one utterance, as used in the forward pass."""
    from .train import _slu_batch

    reprs, lengths, _ = _slu_batch([example])
    with T.no_grad():
        logits, attn = head(reprs, lengths)
    L = int(lengths[0])
    probs = sigmoid_np(logits.data[0])
    label = enforce_structure(probs, schema)
    layers = {}
    for li, w in enumerate(attn):
        layers[f"layer{li}"] = {
            f"head{h}": [float(x) for x in w.data[0, h, :L]] for h in range(w.shape[1])
        }
    return {
        "format_version": 1,
        "tokens": list(tokens)[:L],
        "predicted": {"action": label.action, "args": label.args},
        "attention": layers,
    }


def attention_svg(report: dict) -> str:
    """Self-contained heatmap: tokens on the x-axis, layer/head rows on the y-axis."""
    tokens = report["tokens"]
    rows = []
    for lname in sorted(report["attention"]):
        for hname in sorted(report["attention"][lname]):
            rows.append((f"{lname}/{hname}", report["attention"][lname][hname]))
    cell_w, cell_h = 56, 24
    left, top = 120, 40
    width = left + cell_w * max(len(tokens), 1) + 10
    height = top + cell_h * len(rows) + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for j, tok in enumerate(tokens):
        parts.append(
            f'<text x="{left + j * cell_w + cell_w / 2:.0f}" y="{top - 8}" '
            f'text-anchor="middle">{tok}</text>'
        )
    for r, (name, weights) in enumerate(rows):
        y = top + r * cell_h
        parts.append(f'<text x="{left - 6}" y="{y + cell_h * 0.65:.0f}" text-anchor="end">{name}</text>')
        for j, w in enumerate(weights):
            shade = int(255 * (1.0 - min(max(w, 0.0), 1.0)))
            parts.append(
                f'<rect x="{left + j * cell_w}" y="{y}" width="{cell_w - 2}" height="{cell_h - 2}" '
                f'fill="rgb({shade},{shade},255)"/>'
            )
            parts.append(
                f'<text x="{left + j * cell_w + cell_w / 2:.0f}" y="{y + cell_h * 0.65:.0f}" '
                f'text-anchor="middle" fill="{"black" if shade > 100 else "white"}">{w:.2f}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)
