"""Audio ingestion, log-Mel features, and the synthetic spoken-command corpus.

The synthetic corpus maps every vocabulary word to a distinct harmonic tone so
that utterances are fully decodable from their spectra; it stands in for a real
command corpus while keeping the whole pipeline file-based (PCM16 WAV + JSONL
manifest).
"""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

LOG_FLOOR = 1e-10


@dataclass
class AudioSignal:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class FeatureSequence:
    frames: np.ndarray  # [T, F] float32
    frame_shift_ms: float
    frame_length_ms: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def load_audio(path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV into normalized float samples."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as wav:
            if wav.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {wav.getnchannels()} channels")
            if wav.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * wav.getsampwidth()}-bit")
            n = wav.getnframes()
            if n == 0:
                raise DataError(f"{path}: zero-length payload")
            raw = wav.readframes(n)
            rate = wav.getframerate()
    except (wave.Error, EOFError, struct.error) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float32) / 32768.0, rate)


def save_audio(path, signal: AudioSignal) -> None:
    """Write PCM16 mono WAV, clipping to the representable range."""
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(signal.sample_rate_hz)
        wav.writeframes(pcm.tobytes())


# -- mel features -------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel_bins: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular, area-unnormalized filters on the HTK mel scale: [mel_bins, n_fft//2+1]."""
    nyquist = sample_rate / 2.0
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), mel_bins + 2))
    freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    bank = np.zeros((mel_bins, len(freqs)))
    for k in range(mel_bins):
        lo, mid, hi = points[k], points[k + 1], points[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[k] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def mel_center_frequencies(mel_bins: int, sample_rate: int) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    return points[1:-1]


def log_mel(signal: AudioSignal, mel_bins: int = 80, frame_length_ms: float = 25.0,
            frame_shift_ms: float = 10.0) -> FeatureSequence:
    """Hann window -> magnitude spectrum -> triangular mel weighting -> floored log."""
    if mel_bins < 1:
        raise ValueError("mel_bins must be >= 1")
    if frame_length_ms < frame_shift_ms:
        raise ValueError("frame length must be >= frame shift")
    sr = signal.sample_rate_hz
    frame = int(round(sr * frame_length_ms / 1000.0))
    shift = int(round(sr * frame_shift_ms / 1000.0))
    n = len(signal.samples)
    if n < frame:
        raise DataError(f"audio of {n} samples shorter than one {frame}-sample frame")
    num_frames = 1 + (n - frame) // shift
    idx = np.arange(frame)[None, :] + shift * np.arange(num_frames)[:, None]
    windowed = signal.samples[idx].astype(np.float64) * np.hanning(frame)[None, :]
    n_fft = 1 << (frame - 1).bit_length()
    spectrum = np.abs(np.fft.rfft(windowed, n=n_fft, axis=1))
    bank = mel_filterbank(mel_bins, n_fft, sr)
    mel = spectrum @ bank.T
    feats = np.log(np.maximum(mel, LOG_FLOOR))
    return FeatureSequence(feats.astype(np.float32), frame_shift_ms, frame_length_ms)


# -- command grammar ----------------------------------------------------

@dataclass
class CommandGrammar:
    """Actions with finite argument slots and surface templates.

    Templates are token tuples where "{slot}" marks a hole; each template of
    an action must reference every slot of that action exactly once, so any
    (action, argument assignment) pair expands to at least one surface form.
    """

    actions: dict[str, dict[str, list[str]]]  # action -> slot -> values
    templates: dict[str, list[tuple[str, ...]]]  # action -> surface templates

    def __post_init__(self):
        for action, templs in self.templates.items():
            if action not in self.actions:
                raise ValueError(f"templates given for unknown action {action!r}")
            slots = set(self.actions[action])
            for tmpl in templs:
                holes = [tok[1:-1] for tok in tmpl if tok.startswith("{")]
                if set(holes) != slots or len(holes) != len(slots):
                    raise ValueError(
                        f"template {tmpl} of action {action!r} must use slots {sorted(slots)} exactly once"
                    )
        for action in self.actions:
            if not self.templates.get(action):
                raise ValueError(f"action {action!r} has no surface template")

    def valid_combinations(self) -> list[tuple[str, dict[str, str]]]:
        """All legal (action, argument assignment) pairs, in deterministic order."""
        combos = []
        for action, slots in self.actions.items():
            assignments = [{}]
            for slot, values in slots.items():
                assignments = [{**a, slot: v} for a in assignments for v in values]
            combos.extend((action, a) for a in assignments)
        return combos

    def surface(self, action: str, args: dict[str, str], template_index: int = 0) -> list[str]:
        tmpl = self.templates[action][template_index]
        return [args[tok[1:-1]] if tok.startswith("{") else tok for tok in tmpl]

    def terminals(self) -> list[str]:
        """Every token that can appear in a surface form, sorted."""
        toks = set()
        for action, templs in self.templates.items():
            for tmpl in templs:
                for tok in tmpl:
                    if tok.startswith("{"):
                        toks.update(self.actions[action][tok[1:-1]])
                    else:
                        toks.add(tok)
        return sorted(toks)

    @staticmethod
    def from_json(path) -> "CommandGrammar":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: grammar parse error at line {exc.lineno}: {exc.msg}") from exc
        try:
            actions = {a: dict(spec.get("slots", {})) for a, spec in doc["actions"].items()}
            templates = {
                a: [tuple(t) for t in spec["templates"]] for a, spec in doc["actions"].items()
            }
        except KeyError as exc:
            raise DataError(f"{path}: grammar missing key {exc}") from exc
        return CommandGrammar(actions, templates)

    def to_json(self, path) -> None:
        doc = {
            "actions": {
                a: {"slots": self.actions[a], "templates": [list(t) for t in self.templates[a]]}
                for a in self.actions
            }
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def demo_grammar() -> CommandGrammar:
    """Robot-command grammar: 8 actions, 36 valid combinations, 31 label bits."""
    actions = {
        "approach": {"speed": ["fast", "slow"]},
        "grab": {"target": ["ball", "box", "cup", "pen"]},
        "lift": {"height": ["high", "low"]},
        "point": {"target": ["ball", "box", "cup", "pen"]},
        "move_rel": {"direction": ["forward", "backward"], "speed": ["fast", "slow"]},
        "move_abs": {"place": ["kitchen", "door", "table", "window", "charger", "corner"]},
        "turn_rel": {"angle": ["little", "half", "full"], "speed": ["fast", "slow"]},
        "turn_abs": {"heading": ["north", "east", "south", "west"], "speed": ["fast", "slow"]},
    }
    templates = {
        "approach": [("approach", "{speed}")],
        "grab": [("grab", "the", "{target}"), ("take", "the", "{target}")],
        "lift": [("lift", "{height}")],
        "point": [("point", "at", "the", "{target}")],
        "move_rel": [("move", "{direction}", "{speed}")],
        "move_abs": [("go", "to", "the", "{place}")],
        "turn_rel": [("turn", "{angle}", "{speed}")],
        "turn_abs": [("face", "{heading}", "{speed}")],
    }
    return CommandGrammar(actions, templates)


# -- synthesis ----------------------------------------------------------

@dataclass
class SynthSpec:
    """Deterministic tone mapping for corpus synthesis.

    Every vocabulary word is a harmonic tone with its own base frequency;
    speakers are small pitch factors applied on top.
    """

    token_to_tone: dict[str, tuple[float, tuple[float, ...]]]
    token_duration_ms: float = 160.0
    noise_snr_db: float = 25.0
    sample_rate_hz: int = 16000
    seed: int = 0
    speakers: dict[str, float] = field(default_factory=lambda: {"spk0": 1.0, "spk1": 1.03, "spk2": 0.97})

    def __post_init__(self):
        if self.token_duration_ms <= 0:
            raise ValueError("token duration must be positive")
        freqs = [f for f, _ in self.token_to_tone.values()]
        if len(set(freqs)) != len(freqs):
            raise ValueError("distinct tokens must have distinct base frequencies")

    @staticmethod
    def for_grammar(grammar: CommandGrammar, base_hz: float = 170.0, ratio: float = 1.115,
                    **kwargs) -> "SynthSpec":
        """Assign a geometric ladder of base frequencies to the grammar terminals."""
        profiles = [(1.0, 0.5, 0.25), (1.0, 0.3), (1.0, 0.6, 0.2, 0.1), (1.0,)]
        tones = {}
        for i, tok in enumerate(grammar.terminals()):
            tones[tok] = (base_hz * ratio ** i, profiles[i % len(profiles)])
        return SynthSpec(token_to_tone=tones, **kwargs)


def synth_utterance(tokens, spec: SynthSpec, rng_seed: int, pitch: float = 1.0) -> AudioSignal:
    """Concatenated per-token harmonic tones plus noise at the configured SNR."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot synthesize an empty utterance")
    for tok in tokens:
        if tok not in spec.token_to_tone:
            raise KeyError(f"token {tok!r} has no tone entry")
    sr = spec.sample_rate_hz
    seg_len = int(round(sr * spec.token_duration_ms / 1000.0))
    t = np.arange(seg_len) / sr
    ramp = min(seg_len // 8, int(0.01 * sr))
    env = np.ones(seg_len)
    if ramp > 0:
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[-ramp:] = env[:ramp][::-1]
    pieces = []
    for tok in tokens:
        base, amps = spec.token_to_tone[tok]
        seg = np.zeros(seg_len)
        for k, amp in enumerate(amps, start=1):
            f = base * pitch * k
            if f < 0.45 * sr:
                seg += amp * np.sin(2.0 * math.pi * f * t)
        pieces.append(seg * env)
    sig = np.concatenate(pieces)
    sig /= max(1e-9, np.abs(sig).max()) / 0.6
    rng = np.random.default_rng(np.random.PCG64(rng_seed))
    sig_power = float(np.mean(sig ** 2))
    noise_power = sig_power / (10.0 ** (spec.noise_snr_db / 10.0))
    sig = sig + rng.normal(0.0, math.sqrt(noise_power), size=sig.shape)
    peak = np.abs(sig).max()
    if peak > 0.99:
        sig *= 0.99 / peak
    return AudioSignal(sig.astype(np.float32), sr)


def synth_corpus(grammar: CommandGrammar, spec: SynthSpec, n_utterances: int, seed: int,
                 out_dir) -> Path:
    """Write WAVs plus a JSONL manifest; returns the manifest path.

    Valid combinations are sampled in balanced shuffled rounds, so each of the
    k combinations appears floor(n/k) or ceil(n/k) times and every combination
    is covered whenever n >= k.
    """
    if n_utterances < 1:
        raise ValueError("need at least one utterance")
    combos = grammar.valid_combinations()
    if not combos:
        raise DataError("grammar has zero valid combinations")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(seed))
    order: list[int] = []
    while len(order) < n_utterances:
        order.extend(rng.permutation(len(combos)).tolist())
    order = order[:n_utterances]
    speakers = sorted(spec.speakers)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for i, combo_idx in enumerate(order):
            action, args = combos[combo_idx]
            tmpl_idx = int(rng.integers(len(grammar.templates[action])))
            speaker = speakers[int(rng.integers(len(speakers)))]
            tokens = grammar.surface(action, args, tmpl_idx)
            signal = synth_utterance(tokens, spec, rng_seed=seed + i, pitch=spec.speakers[speaker])
            rel = f"wav/utt{i:06d}.wav"
            save_audio(out_dir / rel, signal)
            entry = {
                "id": f"utt{i:06d}",
                "audio": rel,
                "text": " ".join(tokens),
                "intent": {"action": action, "args": args},
                "speaker": speaker,
            }
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(path) -> list[dict]:
    """Load a JSONL manifest; audio paths stay relative to the manifest dir."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad manifest line: {exc.msg}") from exc
            for key in ("id", "audio", "text"):
                if key not in entry:
                    raise DataError(f"{path}:{lineno}: manifest entry missing {key!r}")
            entries.append(entry)
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries
