"""Training: hybrid CTC+MLM pretraining, frozen intent-head training, and
partial fine-tuning, plus the optimizer and learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .ctc import Vocabulary, ctc_loss, greedy_decode, mask_low_confidence
from .decoder import extract_representation_batch, mlm_corrupt, resolve_layer
from .encoder import ModelConfig
from .features import load_audio, log_mel, read_manifest
from .layers import Module, Parameter
from .model import Checkpoint, SpeechModel, load_parameters
from .slu import IntentClassifier, IntentSchema, bce_loss, enforce_structure, sigmoid_np
from .tensor import Tensor

log = logging.getLogger("maskslu")

DEFAULT_FEATURES = {
    "mel_bins": 80,
    "frame_length_ms": 25.0,
    "frame_shift_ms": 10.0,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic child stream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class TrainConfig:
    """Knobs shared by the three training stages.

    `peak_lr`/`warmup_steps` drive the Noam schedule during pretraining; the
    SLU and fine-tuning stages use `peak_lr` as a constant learning rate.
    """

    rho: float = 0.3
    epochs: int = 200
    batch_size: int = 32
    accum_steps: int = 8
    peak_lr: float = 0.4
    warmup_steps: int = 25000
    smoothing: float = 0.1
    seed: int = 1234
    freeze_spec: tuple[str, ...] = ()
    early_stop_patience: int = 10

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        for name in ("epochs", "batch_size", "accum_steps", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.freeze_spec = tuple(self.freeze_spec)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["freeze_spec"] = list(self.freeze_spec)
        return doc


def noam_lr(step: int, warmup: int = 25000, peak: float = 0.4) -> float:
    """Linear warmup to `peak`, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("schedule step starts at 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def hybrid_loss(l_ctc, l_dec, rho: float):
    """rho-weighted sum of the alignment and masked-reconstruction losses."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if isinstance(l_ctc, Tensor) or isinstance(l_dec, Tensor):
        return T.add(T.mul(l_ctc, rho), T.mul(l_dec, 1.0 - rho))
    return rho * l_ctc + (1.0 - rho) * l_dec


class Adam:
    """Adam with bias correction; skips a step when any gradient is non-finite."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> bool:
        updates = {}
        for name, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                log.warning("non-finite gradient in %s; skipping optimizer step", name)
                return False
            updates[name] = p.grad
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in updates.items():
            p = self.params[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# -- data ----------------------------------------------------------------

class SpeechDataset:
    """Manifest-backed dataset with cached log-Mel features."""

    def __init__(self, manifest_path, feature_params: dict | None = None):
        self.entries = read_manifest(manifest_path)
        self.root = Path(manifest_path).parent
        self.feature_params = dict(DEFAULT_FEATURES, **(feature_params or {}))
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def tokens(self, i: int) -> list[str]:
        return self.entries[i]["text"].split()

    def intent(self, i: int) -> dict | None:
        return self.entries[i].get("intent")

    def features(self, i: int) -> np.ndarray:
        if i not in self._cache:
            signal = load_audio(self.root / self.entries[i]["audio"])
            self._cache[i] = log_mel(
                signal,
                mel_bins=self.feature_params["mel_bins"],
                frame_length_ms=self.feature_params["frame_length_ms"],
                frame_shift_ms=self.feature_params["frame_shift_ms"],
            ).frames
        return self._cache[i]

    def build_vocab(self) -> Vocabulary:
        toks: set[str] = set()
        for i in range(len(self)):
            toks.update(self.tokens(i))
        return Vocabulary.from_tokens(sorted(toks))


def compute_feature_norm(dataset: SpeechDataset, indices=None) -> dict:
    """Per-bin mean/std over the given utterances (std floored at 1e-3)."""
    indices = range(len(dataset)) if indices is None else indices
    total = None
    sq = None
    count = 0
    for i in indices:
        f = dataset.features(i).astype(np.float64)
        total = f.sum(axis=0) if total is None else total + f.sum(axis=0)
        sq = (f ** 2).sum(axis=0) if sq is None else sq + (f ** 2).sum(axis=0)
        count += f.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 0.0))
    std = np.maximum(std, 1e-3)
    return {"mean": mean.tolist(), "std": std.tolist()}


def normalized_features(dataset: SpeechDataset, i: int, norm: dict) -> np.ndarray:
    f = dataset.features(i)
    return ((f - np.asarray(norm["mean"], dtype=np.float32))
            / np.asarray(norm["std"], dtype=np.float32)).astype(np.float32)


def make_feature_batch(feats_list) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad a ragged list of [T, F] matrices into one [B, Tmax, F] block."""
    lengths = np.array([f.shape[0] for f in feats_list], dtype=np.int64)
    Tmax = int(lengths.max())
    out = np.zeros((len(feats_list), Tmax, feats_list[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(feats_list):
        out[i, : f.shape[0]] = f
    return out, lengths


# -- pretraining ---------------------------------------------------------

def batch_losses(model: SpeechModel, vocab: Vocabulary, feats: np.ndarray,
                 feat_lengths: np.ndarray, targets: list[np.ndarray], cfg: TrainConfig,
                 mode: str, mask_rng, drop_rng) -> tuple[Tensor | float, Tensor, int]:
    """Per-batch CTC and MLM losses (each averaged per utterance).

    CTC losses are normalized by target length and infeasible utterances are
    skipped; the MLM loss averages each utterance over its masked positions.
    Returns (ctc_mean, mlm_mean, n_skipped).
    """
    B = len(targets)
    enc = model.encoder(feats, feat_lengths, mode=mode, rng=drop_rng)
    log_probs = model.ctc_log_probs(enc)
    ctc_terms = []
    skipped = 0
    for b in range(B):
        lp_b = T.strided_slice(log_probs, (b, slice(0, int(enc.lengths[b]))))
        node, feasible = ctc_loss(lp_b, targets[b])
        if feasible:
            ctc_terms.append(T.mul(node, 1.0 / len(targets[b])))
        else:
            skipped += 1
    if skipped:
        log.warning("skipped %d CTC-infeasible utterances in batch", skipped)
    ctc_mean = T.mul(_sum_tensors(ctc_terms), 1.0 / len(ctc_terms)) if ctc_terms else 0.0

    hyps, positions = [], []
    for b in range(B):
        hyp, pos = mlm_corrupt(targets[b], mask_rng, vocab)
        hyps.append(hyp)
        positions.append(pos)
    Lmax = max(len(h) for h in hyps)
    tok = np.full((B, Lmax), vocab.pad_id, dtype=np.int64)
    tok_lengths = np.array([len(h) for h in hyps], dtype=np.int64)
    for b, h in enumerate(hyps):
        tok[b, : len(h)] = h.tokens
    dec = model.decoder(tok, tok_lengths, enc, mode=mode, rng=drop_rng)
    lp = T.log_softmax(dec.logits, axis=-1)
    V = len(vocab)
    idx0 = np.concatenate([np.full(len(p), b, dtype=np.int64) for b, p in enumerate(positions)])
    idx1 = np.concatenate(positions)
    gold = np.concatenate([targets[b][positions[b]] for b in range(B)])
    sel = T.gather_nd(lp, idx0, idx1)  # [K, V]
    onehot = np.zeros((len(gold), V), dtype=lp.data.dtype)
    onehot[np.arange(len(gold)), gold] = 1.0
    gold_lp = T.tsum(T.mul(sel, onehot), axis=-1)
    eps = cfg.smoothing
    if eps == 0.0:
        per_pos = T.mul(gold_lp, -1.0)
    else:
        rest_lp = T.add(T.tsum(sel, axis=-1), T.mul(gold_lp, -1.0))
        per_pos = T.add(T.mul(gold_lp, -(1.0 - eps)), T.mul(rest_lp, -eps / (V - 1)))
    weights = np.concatenate(
        [np.full(len(p), 1.0 / (B * len(p)), dtype=lp.data.dtype) for p in positions]
    )
    mlm_mean = T.tsum(T.mul(per_pos, weights))
    return ctc_mean, mlm_mean, skipped


def _sum_tensors(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def greedy_transcripts(model: SpeechModel, dataset: SpeechDataset, norm: dict, indices,
                       vocab: Vocabulary, batch_size: int = 16) -> list[np.ndarray]:
    """Greedy CTC token ids for the given utterances, batched, without gradients."""
    out = []
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        feats, lengths = make_feature_batch([normalized_features(dataset, i, norm) for i in chunk])
        with T.no_grad():
            enc = model.encoder(feats, lengths, mode="eval")
            lp = model.ctc_log_probs(enc).data
        for row, i in enumerate(chunk):
            tokens, _ = greedy_decode(lp[row, : enc.lengths[row]],
                                      exclude=vocab.non_transcript_ids)
            out.append(tokens)
    return out


def pretrain(train_manifest, valid_manifest, model_cfg: ModelConfig, train_cfg: TrainConfig,
             out_dir, feature_params: dict | None = None,
             resume_from: Checkpoint | None = None, progress=None) -> Path:
    """Hybrid CTC+MLM pretraining; returns the path of the best checkpoint.

    The vocabulary is built from the training transcripts (overriding the
    nominal config size), feature normalization stats are computed once on the
    training set and stored in every checkpoint, and the best checkpoint is
    the one with the lowest greedy-decode token error rate on the validation
    manifest.
    """
    from .eval import token_error_rate

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None and resume_from.feature_params:
        feature_params = resume_from.feature_params
    train_ds = SpeechDataset(train_manifest, feature_params)
    valid_ds = SpeechDataset(valid_manifest, feature_params)
    if resume_from is not None:
        vocab = resume_from.vocab
        model_cfg = resume_from.model_config
        norm = resume_from.feature_norm
        start_epoch = resume_from.epoch
        global_step = int(resume_from.extra.get("global_step", 0))
    else:
        vocab = train_ds.build_vocab()
        model_cfg.vocab_size = len(vocab)
        norm = compute_feature_norm(train_ds)
        start_epoch = 0
        global_step = 0
    model = SpeechModel(model_cfg, seed=train_cfg.seed)
    if resume_from is not None:
        load_parameters(model, resume_from.tensors)
    for prefix in train_cfg.freeze_spec:
        for name, p in model.named_parameters():
            if name.startswith(prefix):
                p.freeze()
    adam = Adam(dict(model.named_parameters()))
    targets_all = [vocab.encode(train_ds.tokens(i)) for i in range(len(train_ds))]
    valid_refs = [vocab.encode(valid_ds.tokens(i)) for i in range(len(valid_ds))]
    drop_rng = substream(train_cfg.seed, "dropout")
    best_ter = math.inf
    best_path = out_dir / "checkpoint-best.ckpt"
    last_path = out_dir / "checkpoint-last.ckpt"
    metrics_path = out_dir / "metrics.jsonl"
    since_best = 0
    ckpt_kwargs = dict(
        feature_norm=norm,
        feature_params=dict(train_ds.feature_params),
        train_config=train_cfg.to_dict(),
    )
    with open(metrics_path, "a") as metrics_fh:
        for epoch in range(start_epoch, train_cfg.epochs):
            t0 = time.time()
            order = substream(train_cfg.seed, f"shuffle.{epoch}").permutation(len(train_ds))
            mask_rng = substream(train_cfg.seed, f"mask.{epoch}")
            sums = {"loss": 0.0, "ctc": 0.0, "mlm": 0.0}
            n_batches = 0
            lr = noam_lr(max(global_step, 1), train_cfg.warmup_steps, train_cfg.peak_lr)
            pending = 0
            model.zero_grad()
            for start in range(0, len(order), train_cfg.batch_size):
                batch_idx = order[start : start + train_cfg.batch_size]
                feats, lengths = make_feature_batch(
                    [normalized_features(train_ds, i, norm) for i in batch_idx]
                )
                targets = [targets_all[i] for i in batch_idx]
                ctc_mean, mlm_mean, _ = batch_losses(
                    model, vocab, feats, lengths, targets, train_cfg, "train", mask_rng, drop_rng
                )
                loss = hybrid_loss(ctc_mean, mlm_mean, train_cfg.rho)
                T.mul(loss, 1.0 / train_cfg.accum_steps).backward()
                sums["loss"] += float(loss.data)
                sums["ctc"] += float(ctc_mean.data) if isinstance(ctc_mean, Tensor) else ctc_mean
                sums["mlm"] += float(mlm_mean.data)
                n_batches += 1
                pending += 1
                if pending == train_cfg.accum_steps:
                    global_step += 1
                    lr = noam_lr(global_step, train_cfg.warmup_steps, train_cfg.peak_lr)
                    adam.step(lr)
                    model.zero_grad()
                    pending = 0
            if pending:
                global_step += 1
                lr = noam_lr(global_step, train_cfg.warmup_steps, train_cfg.peak_lr)
                adam.step(lr)
                model.zero_grad()
            hyps = greedy_transcripts(model, valid_ds, norm, range(len(valid_ds)), vocab)
            ter = token_error_rate(hyps, valid_refs)
            record = {
                "epoch": epoch + 1,
                "loss": sums["loss"] / max(n_batches, 1),
                "ctc_loss": sums["ctc"] / max(n_batches, 1),
                "mlm_loss": sums["mlm"] / max(n_batches, 1),
                "valid_ter": ter,
                "lr": lr,
                "seconds": round(time.time() - t0, 3),
            }
            metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()
            if progress:
                progress(record)
            ckpt = Checkpoint.of_model(
                model, vocab, epoch=epoch + 1,
                metrics={"valid_ter": ter},
                extra={"global_step": global_step},
                **ckpt_kwargs,
            )
            ckpt.save(last_path)
            if ter < best_ter:
                best_ter = ter
                since_best = 0
                ckpt.save(best_path)
            else:
                since_best += 1
                if since_best >= train_cfg.early_stop_patience:
                    break
    return best_path


# -- SLU head ------------------------------------------------------------

@dataclass
class SluExample:
    reprs: np.ndarray  # [L, D] float32
    multihot: np.ndarray  # [num_bits]


def manifest_to_slu_examples(indices, dataset: SpeechDataset, model: SpeechModel,
                             vocab: Vocabulary, norm: dict, schema: IntentSchema,
                             layer: str = "decoder.penultimate") -> list[SluExample]:
    """Frozen-backbone representations plus encoded intents for manifest rows."""
    indices = list(indices)
    feats = [normalized_features(dataset, i, norm) for i in indices]
    reps = extract_representation_batch(model, vocab, feats, layer)
    examples = []
    for i, rep in zip(indices, reps):
        intent = dataset.intent(i)
        if intent is None:
            raise ValueError(f"manifest entry {dataset.entries[i]['id']} lacks an intent")
        vec = schema.encode_intent(intent["action"], intent.get("args", {}))
        examples.append(SluExample(rep.vectors, vec))
    return examples


def _slu_batch(examples: list[SluExample]):
    lengths = np.array([len(e.reprs) for e in examples], dtype=np.int64)
    Lmax = int(lengths.max())
    D = examples[0].reprs.shape[1]
    reprs = np.zeros((len(examples), Lmax, D), dtype=np.float32)
    targets = np.zeros((len(examples), len(examples[0].multihot)), dtype=np.float32)
    for i, e in enumerate(examples):
        reprs[i, : len(e.reprs)] = e.reprs
        targets[i] = e.multihot
    return reprs, lengths, targets


def slu_accuracy(head: IntentClassifier, examples: list[SluExample],
                 schema: IntentSchema, batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        reprs, lengths, targets = _slu_batch(chunk)
        with T.no_grad():
            logits, _ = head(reprs, lengths)
        probs = sigmoid_np(logits.data)
        for row in range(len(chunk)):
            label = enforce_structure(probs[row], schema)
            hits += int((label.multihot == targets[row].astype(np.uint8)).all())
    return hits / len(examples)


def train_slu(train_examples: list[SluExample], valid_examples: list[SluExample],
              schema: IntentSchema, cfg: TrainConfig, head: IntentClassifier | None = None,
              head_kwargs: dict | None = None, progress=None) -> tuple[IntentClassifier, dict]:
    """Train the class-attention head on frozen representations.

    Early-stops on validation intent accuracy and restores the best weights,
    so the returned head is never worse than any intermediate snapshot.
    """
    if head is None:
        rng = substream(cfg.seed, "slu.init")
        head = IntentClassifier(
            input_dim=train_examples[0].reprs.shape[1],
            num_bits=schema.num_bits,
            rng=rng,
            **(head_kwargs or {}),
        )
    adam = Adam(dict(head.named_parameters()))
    shuffle_rng = substream(cfg.seed, "slu.shuffle")
    best = {"accuracy": -1.0, "epoch": 0}
    best_params = None
    since_best = 0
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_examples))
        total = 0.0
        n = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_examples[i] for i in order[start : start + cfg.batch_size]]
            reprs, lengths, targets = _slu_batch(chunk)
            logits, _ = head(reprs, lengths)
            loss = bce_loss(logits, targets)
            head.zero_grad()
            loss.backward()
            adam.step(cfg.peak_lr)
            total += float(loss.data)
            n += 1
        acc = slu_accuracy(head, valid_examples, schema) if valid_examples else None
        history.append({"epoch": epoch + 1, "train_bce": total / max(n, 1), "valid_accuracy": acc})
        if progress:
            progress(history[-1])
        if acc is None:
            continue  # no validation set: keep training, return the final weights
        if acc > best["accuracy"]:
            best = {"accuracy": acc, "epoch": epoch + 1}
            best_params = {k: p.data.copy() for k, p in head.named_parameters()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    if best_params is not None:
        load_parameters(head, best_params)
    return head, {"best": best, "history": history}


def save_slu_head(path, head: IntentClassifier, schema: IntentSchema, source_layer: str,
                  metrics: dict | None = None) -> None:
    import io
    import zipfile

    header = {
        "format_version": 1,
        "hparams": head.hparams(),
        "schema": schema.to_dict(),
        "source_layer": source_layer,
        "metrics": metrics or {},
        "tensors": {k: list(p.data.shape) for k, p in head.named_parameters()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2))
        for name, p in head.named_parameters():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(p.data, dtype="<f4"))
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())


def load_slu_head(path) -> tuple[IntentClassifier, IntentSchema, str, dict]:
    import io
    import zipfile

    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        hp = header["hparams"]
        schema = IntentSchema.from_dict(header["schema"])
        head = IntentClassifier(
            input_dim=hp["input_dim"], num_bits=hp["num_bits"],
            rng=np.random.default_rng(0), d=hp["d"], heads=hp["heads"],
            num_layers=hp["num_layers"], ffn_hidden=hp["ffn_hidden"],
            classifier_hidden=hp["classifier_hidden"],
        )
        tensors = {
            name: np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            for name in header["tensors"]
        }
    load_parameters(head, tensors)
    return head, schema, header["source_layer"], header.get("metrics", {})


# -- fine-tuning ---------------------------------------------------------

def finetune(checkpoint: Checkpoint, head: IntentClassifier, indices, dataset: SpeechDataset,
             schema: IntentSchema, cfg: TrainConfig, layer: str = "decoder.penultimate",
             unfreeze: str = "decoder_last4", allow_encoder: bool = False,
             valid_examples_fn=None, progress=None) -> tuple[SpeechModel, IntentClassifier, dict]:
    """Unfreeze the last decoder layers and train them jointly with the head.

    The encoder and CTC module stay frozen (they produce the templates);
    representations are generated with a single decoder pass. `unfreeze`
    accepts decoder_last<k> or decoder_all; unfreezing the encoder requires
    the explicit override flag.
    """
    model = checkpoint.build_model()
    vocab = checkpoint.vocab
    norm = checkpoint.feature_norm
    layer = resolve_layer(layer, model.cfg)
    layer_idx = int(layer.split(".")[1])
    if not layer.startswith("decoder."):
        raise ValueError("fine-tuning expects a decoder representation layer")
    model.freeze()
    if unfreeze == "decoder_all":
        k = model.cfg.dec_layers
    elif unfreeze.startswith("decoder_last"):
        k = int(unfreeze.removeprefix("decoder_last"))
    elif unfreeze == "encoder":
        if not allow_encoder:
            raise ValueError("unfreezing the encoder degrades it; pass the explicit override")
        k = model.cfg.dec_layers
    else:
        raise ValueError(f"unknown unfreeze spec {unfreeze!r}")
    first = max(0, model.cfg.dec_layers - k)
    for block in model.decoder.blocks[first:]:
        block.unfreeze()
    if unfreeze == "encoder" and allow_encoder:
        model.encoder.unfreeze()
    head.unfreeze()
    params = dict(model.named_parameters())
    params.update({f"slu.{k2}": p for k2, p in head.named_parameters()})
    adam = Adam(params)
    shuffle_rng = substream(cfg.seed, "ft.shuffle")
    drop_rng = substream(cfg.seed, "ft.dropout")
    indices = list(indices)
    targets = np.stack([
        schema.encode_intent(dataset.intent(i)["action"], dataset.intent(i).get("args", {}))
        for i in indices
    ]).astype(np.float32)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(indices))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            feats, lengths = make_feature_batch(
                [normalized_features(dataset, indices[r], norm) for r in rows]
            )
            with T.no_grad():
                enc = model.encoder(feats, lengths, mode="eval")
                log_probs = model.ctc_log_probs(enc).data
            token_rows = []
            for row_pos, r in enumerate(rows):
                tokens, conf = greedy_decode(log_probs[row_pos, : enc.lengths[row_pos]],
                                          exclude=vocab.non_transcript_ids)
                if len(tokens) == 0:
                    token_rows.append(np.array([vocab.mask_id], dtype=np.int64))
                else:
                    token_rows.append(mask_low_confidence(tokens, conf, vocab).tokens)
            Lmax = max(len(t) for t in token_rows)
            tok = np.full((len(rows), Lmax), vocab.pad_id, dtype=np.int64)
            tok_lengths = np.array([len(t) for t in token_rows], dtype=np.int64)
            for b, t_row in enumerate(token_rows):
                tok[b, : len(t_row)] = t_row
            dec = model.decoder(tok, tok_lengths, enc, mode="train", rng=drop_rng)
            reprs = dec.layer_states[layer_idx]
            logits, _ = head(reprs, tok_lengths)
            loss = bce_loss(logits, targets[rows])
            for p in params.values():
                p.zero_grad()
            loss.backward()
            adam.step(cfg.peak_lr)
            total += float(loss.data)
        rec = {"epoch": epoch + 1, "train_bce": total}
        if valid_examples_fn is not None:
            rec["valid_accuracy"] = valid_examples_fn(model, head)
        history.append(rec)
        if progress:
            progress(rec)
    return model, head, {"history": history}
