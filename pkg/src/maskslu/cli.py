"""Command-line entry points wiring the library into reproducible runs.

Every command resolves one RunConfig (YAML file + dotted-path overrides),
echoes it as config.lock into the output directory, and writes into a fresh
timestamped subdirectory unless --overwrite is given. Exit codes: 0 ok,
2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError

DEFAULT_CONFIG: dict = {
    "features": {"mel_bins": 80, "frame_length_ms": 25.0, "frame_shift_ms": 10.0},
    "model": {
        "enc_layers": 12,
        "dec_layers": 6,
        "heads": 4,
        "d_model": 256,
        "ffn": 2048,
        "dropout": 0.1,
        "conv_channels": [64, 128],
        "post_norm": False,
    },
    "train": {
        "rho": 0.3,
        "epochs": 200,
        "batch_size": 32,
        "accum_steps": 8,
        "peak_lr": 0.4,
        "warmup_steps": 25000,
        "smoothing": 0.1,
        "seed": 1234,
        "early_stop_patience": 10,
    },
    "slu": {
        "d": 128,
        "heads": 4,
        "layers": 2,
        "ffn_hidden": 1024,
        "classifier_hidden": 1024,
        "lr": 0.005,
        "batch_size": 512,
        "epochs": 100,
        "patience": 10,
        "layer": "decoder.penultimate",
        "valid_fraction": 0.1,
        "seed": 1234,
    },
    "finetune": {
        "lr": 1e-4,
        "epochs": 3,
        "batch_size": 32,
        "unfreeze": "decoder_last4",
        "seed": 1234,
    },
    "synth": {
        "token_duration_ms": 160.0,
        "noise_snr_db": 25.0,
        "sample_rate_hz": 16000,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} expects a mapping")
            out[key] = _merge(base[key], value, dotted + ".")
        else:
            out[key] = _coerce(dotted, base[key], value)
    return out


def _coerce(dotted: str, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {dotted!r} expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {dotted!r} expects an integer, got {value!r}")
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {dotted!r} expects a number, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return [type(default[0])(v) for v in value] if default else list(value)
    return value


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    """DEFAULT_CONFIG + YAML file + --key.path=value overrides, unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        import yaml

        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, _, raw = item.partition("=")
        node = cfg
        default_node = DEFAULT_CONFIG
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(default_node, dict) or part not in default_node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
            default_node = default_node[part]
        leaf = parts[-1]
        if leaf not in default_node or isinstance(default_node[leaf], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = _coerce(dotted, default_node[leaf], raw)
    return cfg


def resolve_out_dir(out: str, overwrite: bool) -> Path:
    base = Path(out)
    if overwrite:
        base.mkdir(parents=True, exist_ok=True)
        return base
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("run-%Y%m%d-%H%M%S")
    candidate = base / stamp
    k = 1
    while candidate.exists():
        candidate = base / f"{stamp}-{k}"
        k += 1
    candidate.mkdir(parents=True)
    return candidate


def write_lock(cfg: dict, out_dir: Path, extra: dict | None = None) -> None:
    import yaml

    doc = copy.deepcopy(cfg)
    if extra:
        doc["_invocation"] = extra
    with open(out_dir / "config.lock", "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def _train_config(cfg: dict):
    from .train import TrainConfig

    t = cfg["train"]
    return TrainConfig(
        rho=t["rho"], epochs=t["epochs"], batch_size=t["batch_size"],
        accum_steps=t["accum_steps"], peak_lr=t["peak_lr"], warmup_steps=t["warmup_steps"],
        smoothing=t["smoothing"], seed=t["seed"], early_stop_patience=t["early_stop_patience"],
    )


def _model_config(cfg: dict, vocab_size: int = 6000):
    from .encoder import ModelConfig

    m = cfg["model"]
    return ModelConfig(
        enc_layers=m["enc_layers"], dec_layers=m["dec_layers"], heads=m["heads"],
        d_model=m["d_model"], ffn=m["ffn"], dropout=m["dropout"], vocab_size=vocab_size,
        mel_bins=cfg["features"]["mel_bins"], conv_channels=tuple(m["conv_channels"]),
        post_norm=m["post_norm"],
    )


def _head_kwargs(cfg: dict) -> dict:
    s = cfg["slu"]
    return {
        "d": s["d"], "heads": s["heads"], "num_layers": s["layers"],
        "ffn_hidden": s["ffn_hidden"], "classifier_hidden": s["classifier_hidden"],
    }


def _slu_train_config(cfg: dict):
    from .train import TrainConfig

    s = cfg["slu"]
    return TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], peak_lr=s["lr"],
        seed=s["seed"], early_stop_patience=s["patience"],
    )


# -- commands ------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .features import CommandGrammar, SynthSpec, synth_corpus
    from .slu import IntentSchema
    from .train import substream

    grammar = CommandGrammar.from_json(args.grammar)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "synth", "n": args.n, "seed": args.seed})
    spec = SynthSpec.for_grammar(
        grammar,
        token_duration_ms=cfg["synth"]["token_duration_ms"],
        noise_snr_db=cfg["synth"]["noise_snr_db"],
        sample_rate_hz=cfg["synth"]["sample_rate_hz"],
        seed=args.seed,
    )
    manifest = synth_corpus(grammar, spec, args.n, args.seed, out_dir)
    schema = IntentSchema.from_grammar(grammar)
    with open(out_dir / "schema.json", "w") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
    grammar.to_json(out_dir / "grammar.json")
    if args.split:
        fractions = _parse_split(args.split)
        _write_splits(manifest, fractions, substream(args.seed, "split"))
    print(f"wrote {args.n} utterances under {out_dir}")
    return 0


def _parse_split(spec: str) -> dict[str, float]:
    fractions = {}
    for part in spec.split(","):
        name, _, frac = part.partition(":")
        fractions[name] = float(frac)
    if abs(sum(fractions.values()) - 1.0) > 1e-6:
        raise ConfigError(f"split fractions {spec!r} must sum to 1")
    return fractions


def _write_splits(manifest_path: Path, fractions: dict[str, float], rng) -> None:
    from .features import read_manifest

    entries = read_manifest(manifest_path)
    order = rng.permutation(len(entries))
    start = 0
    for i, (name, frac) in enumerate(fractions.items()):
        count = round(len(entries) * frac) if i < len(fractions) - 1 else len(entries) - start
        chunk = [entries[j] for j in order[start : start + count]]
        start += count
        with open(manifest_path.parent / f"manifest-{name}.jsonl", "w") as fh:
            for entry in chunk:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_pretrain(args, cfg) -> int:
    from .model import Checkpoint
    from .train import pretrain

    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "pretrain", "train": args.train, "valid": args.valid})
    resume = Checkpoint.load(args.resume) if args.resume else None
    model_cfg = _model_config(cfg) if resume is None else resume.model_config
    best = pretrain(
        args.train, args.valid, model_cfg, _train_config(cfg), out_dir,
        feature_params=cfg["features"], resume_from=resume,
        progress=lambda rec: print(
            f"epoch {rec['epoch']}: loss={rec['loss']:.4f} ter={rec['valid_ter']:.4f} "
            f"lr={rec['lr']:.2e} ({rec['seconds']}s)"
        ),
    )
    print(f"best checkpoint: {best}")
    return 0


def _load_backbone(path):
    from .model import Checkpoint

    ckpt = Checkpoint.load(path)
    model = ckpt.build_model()
    model.freeze()
    return ckpt, model


def _load_schema(path):
    from .slu import IntentSchema

    with open(path) as fh:
        return IntentSchema.from_dict(json.load(fh))


def cmd_train_slu(args, cfg) -> int:
    from .eval import evaluate_intents
    from .train import (SpeechDataset, manifest_to_slu_examples, save_slu_head,
                        substream, train_slu)

    ckpt, model = _load_backbone(args.checkpoint)
    schema = _load_schema(args.schema)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "train-slu", "manifest": args.manifest})
    dataset = SpeechDataset(args.manifest, ckpt.feature_params)
    layer = cfg["slu"]["layer"]
    examples = manifest_to_slu_examples(
        range(len(dataset)), dataset, model, ckpt.vocab, ckpt.feature_norm, schema, layer
    )
    order = substream(cfg["slu"]["seed"], "slu.split").permutation(len(examples))
    n_valid = max(1, int(round(len(examples) * cfg["slu"]["valid_fraction"])))
    valid_ex = [examples[i] for i in order[:n_valid]]
    train_ex = [examples[i] for i in order[n_valid:]]
    head, info = train_slu(
        train_ex, valid_ex, schema, _slu_train_config(cfg), head_kwargs=_head_kwargs(cfg),
        progress=lambda rec: print(
            f"epoch {rec['epoch']}: bce={rec['train_bce']:.4f} acc={rec['valid_accuracy']:.4f}"
        ),
    )
    if args.test:
        test_ds = SpeechDataset(args.test, ckpt.feature_params)
        test_ex = manifest_to_slu_examples(
            range(len(test_ds)), test_ds, model, ckpt.vocab, ckpt.feature_norm, schema, layer
        )
        report = evaluate_intents(head, test_ex, schema)
    else:
        report = evaluate_intents(head, valid_ex, schema)
    metrics = {"best_valid_accuracy": info["best"]["accuracy"], "report": report.to_dict()}
    save_slu_head(out_dir / "slu-head.ckpt", head, schema, layer, metrics)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"accuracy={report.accuracy:.4f} micro_f1={report.micro_f1:.4f}")
    return 0


def cmd_finetune(args, cfg) -> int:
    from .eval import evaluate_intents
    from .model import Checkpoint
    from .train import (SpeechDataset, TrainConfig, finetune, load_slu_head,
                        manifest_to_slu_examples, save_slu_head)

    if args.unfreeze == "encoder" and not args.i_know:
        raise ConfigError("unfreezing the encoder degrades it; add --i-know to override")
    ckpt = Checkpoint.load(args.checkpoint)
    head, schema, layer, _ = load_slu_head(args.slu)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "finetune", "manifest": args.manifest})
    dataset = SpeechDataset(args.manifest, ckpt.feature_params)
    ft = cfg["finetune"]
    ft_cfg = TrainConfig(
        epochs=ft["epochs"], batch_size=ft["batch_size"], peak_lr=ft["lr"], seed=ft["seed"]
    )
    model, head, _info = finetune(
        ckpt, head, range(len(dataset)), dataset, schema, ft_cfg, layer=layer,
        unfreeze=args.unfreeze, allow_encoder=args.i_know,
    )
    Checkpoint.of_model(
        model, ckpt.vocab, feature_norm=ckpt.feature_norm, feature_params=ckpt.feature_params,
        train_config=ft_cfg.to_dict(), metrics={"stage": "finetune"},
    ).save(out_dir / "checkpoint-finetuned.ckpt")
    save_slu_head(out_dir / "slu-head.ckpt", head, schema, layer)
    if args.test:
        test_ds = SpeechDataset(args.test, ckpt.feature_params)
        test_ex = manifest_to_slu_examples(
            range(len(test_ds)), test_ds, model, ckpt.vocab, ckpt.feature_norm, schema, layer
        )
        report = evaluate_intents(head, test_ex, schema)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"accuracy={report.accuracy:.4f} micro_f1={report.micro_f1:.4f}")
    print(f"fine-tuned artifacts in {out_dir}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .eval import evaluate_intents
    from .train import SpeechDataset, load_slu_head, manifest_to_slu_examples

    ckpt, model = _load_backbone(args.checkpoint)
    head, schema, layer, _ = load_slu_head(args.slu)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "eval", "manifest": args.manifest})
    dataset = SpeechDataset(args.manifest, ckpt.feature_params)
    examples = manifest_to_slu_examples(
        range(len(dataset)), dataset, model, ckpt.vocab, ckpt.feature_norm, schema, layer
    )
    report = evaluate_intents(head, examples, schema)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"accuracy={report.accuracy:.4f} micro_f1={report.micro_f1:.4f}")
    return 0


def cmd_curve(args, cfg) -> int:
    from .eval import group_by_action, group_by_combo, learning_curve
    from .train import SpeechDataset, manifest_to_slu_examples

    ckpt, model = _load_backbone(args.checkpoint)
    schema = _load_schema(args.schema)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": "curve", "sizes": args.sizes})
    sizes = [int(s) for s in args.sizes.split(",")]
    layer = cfg["slu"]["layer"]
    train_ds = SpeechDataset(args.train_manifest, ckpt.feature_params)
    test_ds = SpeechDataset(args.test_manifest, ckpt.feature_params)
    train_idx = list(range(len(train_ds)))
    train_examples = manifest_to_slu_examples(
        train_idx, train_ds, model, ckpt.vocab, ckpt.feature_norm, schema, layer
    )
    by_idx = dict(zip(train_idx, train_examples))
    groups = (group_by_combo if args.per_combo else group_by_action)(train_ds, train_idx)
    test_examples = manifest_to_slu_examples(
        range(len(test_ds)), test_ds, model, ckpt.vocab, ckpt.feature_norm, schema, layer
    )
    points = learning_curve(
        by_idx, groups, test_examples, schema, sizes, _slu_train_config(cfg),
        repeats=args.repeats, out_dir=out_dir,
        progress=lambda s, r, rep: print(
            f"size={s} repeat={r}: f1={rep.micro_f1:.4f} acc={rep.accuracy:.4f}"
        ),
    )
    for p in points:
        print(
            f"size {p.train_size}: micro_f1 {p.mean('micro_f1'):.4f} +- {p.std('micro_f1'):.4f}"
        )
    return 0


def cmd_export(args, cfg) -> int:
    from .eval import attention_report, attention_svg, export_embeddings
    from .train import SpeechDataset, load_slu_head, manifest_to_slu_examples

    ckpt, model = _load_backbone(args.checkpoint)
    out_dir = resolve_out_dir(args.out, args.overwrite)
    write_lock(cfg, out_dir, {"command": f"export-{args.what}", "manifest": args.manifest})
    dataset = SpeechDataset(args.manifest, ckpt.feature_params)
    indices = list(range(len(dataset)))[: args.limit] if args.limit else range(len(dataset))
    if args.what == "embeddings":
        out = export_embeddings(
            model, ckpt.vocab, dataset, ckpt.feature_norm, indices, args.layer,
            out_dir / "embeddings.npz",
        )
        print(f"wrote {out}")
        return 0
    head, schema, layer, _ = load_slu_head(args.slu)
    examples = manifest_to_slu_examples(
        indices, dataset, model, ckpt.vocab, ckpt.feature_norm, schema, layer
    )
    from .decoder import extract_representation_batch
    from .train import normalized_features

    feats = [normalized_features(dataset, i, ckpt.feature_norm) for i in indices]
    reps = extract_representation_batch(model, ckpt.vocab, feats, layer)
    for i, example, rep in zip(indices, examples, reps):
        utt = dataset.entries[i]["id"]
        report = attention_report(head, example, rep.tokens, schema)
        with open(out_dir / f"{utt}.json", "w") as fh:
            json.dump(report, fh, indent=2)
        with open(out_dir / f"{utt}.svg", "w") as fh:
            fh.write(attention_svg(report))
    print(f"wrote attention reports for {len(list(indices))} utterances to {out_dir}")
    return 0


def cmd_decode(args, cfg) -> int:
    import numpy as np

    from . import tensor as T
    from .ctc import greedy_decode, mask_low_confidence
    from .decoder import mask_predict
    from .features import load_audio, log_mel

    ckpt, model = _load_backbone(args.checkpoint)
    fp = ckpt.feature_params or cfg["features"]
    signal = load_audio(args.audio)
    feats = log_mel(
        signal, mel_bins=fp["mel_bins"], frame_length_ms=fp["frame_length_ms"],
        frame_shift_ms=fp["frame_shift_ms"],
    ).frames
    norm = ckpt.feature_norm
    feats = (feats - np.asarray(norm["mean"], dtype=np.float32)) / np.asarray(
        norm["std"], dtype=np.float32
    )
    with T.no_grad():
        enc = model.encoder(feats[None], np.array([len(feats)]), mode="eval")
        lp = model.ctc_log_probs(enc).data[0, : enc.lengths[0]]
    vocab = ckpt.vocab
    tokens, conf = greedy_decode(lp, exclude=vocab.non_transcript_ids)
    print("greedy :", " ".join(vocab.decode(tokens)) or "<empty>")
    print("conf   :", " ".join(f"{c:.2f}" for c in conf))
    if len(tokens) == 0:
        print("refined: <empty>")
        return 0
    hyp = mask_low_confidence(tokens, conf, vocab, threshold=args.threshold)
    refined = mask_predict(hyp, enc, model.decoder, vocab, max_iter=args.max_iter)
    print("masked :", " ".join(vocab.decode(hyp.tokens)))
    print("refined:", " ".join(vocab.decode(refined)))
    return 0


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskslu",
        description="Hybrid CTC+MLM speech representation training and class-attention SLU.",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS worker threads (0 = library default)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numerics")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override one config value")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true",
                       help="write into --out directly instead of a timestamped subdirectory")

    p = sub.add_parser("synth", help="generate a synthetic spoken-command corpus")
    common(p)
    p.add_argument("--grammar", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default=None, metavar="train:0.8,valid:0.1,test:0.1")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="hybrid CTC+MLM pretraining")
    common(p)
    p.add_argument("--train", required=True, metavar="MANIFEST")
    p.add_argument("--valid", required=True, metavar="MANIFEST")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-slu", help="train the intent head on frozen representations")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--test", default=None, metavar="MANIFEST")
    p.set_defaults(func=cmd_train_slu)

    p = sub.add_parser("finetune", help="partially unfreeze the decoder and fine-tune")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slu", required=True, metavar="SLU_CHECKPOINT")
    p.add_argument("--test", default=None, metavar="MANIFEST")
    p.add_argument("--unfreeze", default="decoder_last4")
    p.add_argument("--i-know", action="store_true",
                   help="required to unfreeze the encoder")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate an SLU head on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slu", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="low-resource learning curve")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--sizes", default="1,2,4,8,16")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--per-combo", action="store_true",
                   help="sample per full combination instead of per action")
    p.set_defaults(func=cmd_curve)

    for what in ("embeddings", "attention"):
        p = sub.add_parser(f"export-{what}", help=f"export {what}")
        common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--limit", type=int, default=0)
        if what == "embeddings":
            p.add_argument("--layer", default="decoder.penultimate")
        else:
            p.add_argument("--slu", required=True)
        p.set_defaults(func=cmd_export, what=what)

    p = sub.add_parser("decode", help="greedy + refined transcription of one WAV")
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--audio", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--max-iter", type=int, default=10)
    p.set_defaults(func=cmd_decode)

    return parser


def _extras_to_overrides(extras: list[str]) -> list[str]:
    """Turn leftover `--dotted.path value` (or `=value`) flags into overrides."""
    overrides = []
    i = 0
    while i < len(extras):
        item = extras[i]
        if not (item.startswith("--") and "." in item):
            raise ConfigError(f"unrecognized argument {item!r}")
        body = item[2:]
        if "=" in body:
            overrides.append(body)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"flag {item!r} needs a value")
            overrides.append(f"{body}={extras[i + 1]}")
            i += 2
    return overrides


def main(argv=None) -> int:
    args, extras = build_parser().parse_known_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    try:
        overrides = list(getattr(args, "overrides", [])) + _extras_to_overrides(extras)
        cfg = load_config(getattr(args, "config", None), overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
