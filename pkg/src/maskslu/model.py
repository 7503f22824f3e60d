"""The full backbone (encoder, CTC head, masked decoder) and checkpoint I/O.

Checkpoints are single-file archives: named float32 tensors plus one JSON
header carrying the model config, vocabulary, feature normalization stats and
training metadata. `format_version` is mandatory.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctc import Vocabulary
from .decoder import MaskedDecoder
from .encoder import EncoderOutput, ModelConfig, SpeechEncoder
from .layers import Linear, Module
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class SpeechModel(Module):
    """Encoder, per-frame CTC classification layer, and masked decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
        self.encoder = SpeechEncoder(cfg, rng)
        self.ctc_head = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.decoder = MaskedDecoder(cfg, rng)
        self.cfg = cfg

    def ctc_log_probs(self, enc: EncoderOutput) -> Tensor:
        return T.log_softmax(self.ctc_head(enc.h), axis=-1)

    def param_dict(self) -> dict:
        return dict(self.named_parameters())

    def state_hashes(self) -> dict[str, str]:
        """SHA-256 of every parameter's bytes, for freeze verification."""
        return {
            name: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
            for name, p in self.named_parameters()
        }


@dataclass
class Checkpoint:
    """In-memory checkpoint: header metadata plus named parameter arrays."""

    model_config: ModelConfig
    vocab: Vocabulary
    tensors: dict[str, np.ndarray]
    feature_norm: dict | None = None  # {"mean": [...], "std": [...]} per mel bin
    feature_params: dict | None = None
    train_config: dict | None = None
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "vocab": self.vocab.symbols,
            "feature_norm": self.feature_norm,
            "feature_params": self.feature_params,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "metrics": self.metrics,
            "extra": self.extra,
            "tensors": {k: list(v.shape) for k, v in self.tensors.items()},
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("header.json", json.dumps(header, indent=2))
            for name, arr in self.tensors.items():
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arr, dtype="<f4"))
                zf.writestr(f"tensors/{name}.npy", buf.getvalue())

    @staticmethod
    def load(path) -> "Checkpoint":
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
            tensors = {}
            for name, shape in header["tensors"].items():
                arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
                if list(arr.shape) != shape:
                    raise ValueError(f"tensor {name} shape mismatch in {path}")
                tensors[name] = arr
        return Checkpoint(
            model_config=ModelConfig.from_dict(header["model_config"]),
            vocab=Vocabulary(header["vocab"]),
            tensors=tensors,
            feature_norm=header.get("feature_norm"),
            feature_params=header.get("feature_params"),
            train_config=header.get("train_config"),
            epoch=header.get("epoch", 0),
            metrics=header.get("metrics", {}),
            extra=header.get("extra", {}),
        )

    @staticmethod
    def of_model(model: SpeechModel, vocab: Vocabulary, **kwargs) -> "Checkpoint":
        tensors = {name: p.data.copy() for name, p in model.named_parameters()}
        return Checkpoint(model.cfg, vocab, tensors, **kwargs)

    def build_model(self) -> SpeechModel:
        model = SpeechModel(self.model_config, seed=0)
        load_parameters(model, self.tensors)
        return model


def load_parameters(module: Module, tensors: dict[str, np.ndarray]) -> None:
    named = dict(module.named_parameters())
    missing = set(named) - set(tensors)
    unexpected = set(tensors) - set(named)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:4]} unexpected={sorted(unexpected)[:4]}")
    for name, p in named.items():
        p.data = tensors[name]
