"""Synthetic speech-like corpus with speaker variability, plus augmentation.

An utterance is its token prototypes laid end to end, time-warped by the
speaker's speaking rate, passed through the speaker's per-dimension channel
(scale and bias) and finally corrupted by white Gaussian noise.  Frames are
rounded to float32 so that the in-memory corpus equals its on-disk form.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream

# Chosen by sweeping noise_std with the default SI TDNN; see README "Corpus calibration".
DEFAULT_NOISE_STD = 1.5


class CorpusConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 12
    feat_dim: int = 16
    proto_frames: int = 6
    n_train_speakers: int = 20
    train_utts_per_speaker: int = 50
    n_test_speakers: int = 8
    test_utts_per_speaker: int = 30
    adapt_utts_per_speaker: int = 5
    min_tokens: int = 2
    max_tokens: int = 5
    noise_std: float = DEFAULT_NOISE_STD
    proto_smoothing: float = 0.5
    min_proto_distance: float = 4.0
    scale_range: tuple[float, float] = (0.6, 1.4)
    bias_std: float = 0.5
    rate_range: tuple[float, float] = (0.85, 1.15)
    allow_repeats: bool = False

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise CorpusConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_train_speakers < 1 or self.train_utts_per_speaker < 1:
            raise CorpusConfigError("training split is empty")
        if self.n_test_speakers < 1 or self.test_utts_per_speaker < 1:
            raise CorpusConfigError("test split is empty")
        if self.noise_std < 0:
            raise CorpusConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise CorpusConfigError(f"bad token range [{self.min_tokens}, {self.max_tokens}]")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise CorpusConfigError(f"channel scales must be positive, got {self.scale_range}")
        lo, hi = self.rate_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise CorpusConfigError(f"rates must lie in [0.5, 2], got {self.rate_range}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("scale_range", "rate_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Speaker:
    id: str
    channel_scale: np.ndarray
    channel_bias: np.ndarray
    rate: float

    @classmethod
    def identity(cls, id: str, dim: int) -> "Speaker":
        return cls(id, np.ones(dim), np.zeros(dim), 1.0)


@dataclass
class FeatureSequence:
    frames: np.ndarray
    speaker_id: str
    utterance_id: str
    reference: tuple[int, ...]

    def __post_init__(self):
        if len(self.frames) < len(self.reference):
            raise ValueError(f"{self.utterance_id}: fewer frames than reference tokens")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "FeatureSequence":
        return FeatureSequence(frames, self.speaker_id, self.utterance_id, self.reference)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    prototypes: np.ndarray  # (V, P, D)
    speakers: dict[str, Speaker]
    splits: dict[str, list[FeatureSequence]] = field(default_factory=dict)

    def by_speaker(self, split: str) -> dict[str, list[FeatureSequence]]:
        out: dict[str, list[FeatureSequence]] = {}
        for utt in self.splits[split]:
            out.setdefault(utt.speaker_id, []).append(utt)
        return out

    def references(self, split: str) -> dict[str, tuple[int, ...]]:
        return {u.utterance_id: u.reference for u in self.splits[split]}

    # ------------------------------------------------------------------ io

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "feats").mkdir(parents=True, exist_ok=True)
        index = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "prototypes": self.prototypes.tolist(),
            "speakers": {
                s.id: {"channel_scale": s.channel_scale.tolist(), "channel_bias": s.channel_bias.tolist(), "rate": s.rate}
                for s in self.speakers.values()
            },
            "splits": {},
        }
        for name, utts in self.splits.items():
            index["splits"][name] = [
                {"utt": u.utterance_id, "speaker": u.speaker_id, "reference": list(u.reference), "frames": u.num_frames}
                for u in utts
            ]
            for u in utts:
                (out / "feats" / f"{u.utterance_id}.f32").write_bytes(u.frames.astype("<f4").tobytes())
        (out / "corpus.json").write_text(json.dumps(index, indent=1, sort_keys=True))

    @classmethod
    def load(cls, in_dir) -> "Corpus":
        src = Path(in_dir)
        index = json.loads((src / "corpus.json").read_text())
        config = CorpusConfig.from_dict(index["config"])
        speakers = {
            sid: Speaker(sid, np.array(d["channel_scale"]), np.array(d["channel_bias"]), float(d["rate"]))
            for sid, d in index["speakers"].items()
        }
        splits = {}
        for name, entries in index["splits"].items():
            utts = []
            for e in entries:
                raw = np.frombuffer((src / "feats" / f"{e['utt']}.f32").read_bytes(), dtype="<f4")
                frames = raw.astype(np.float64).reshape(e["frames"], config.feat_dim)
                utts.append(FeatureSequence(frames, e["speaker"], e["utt"], tuple(e["reference"])))
            splits[name] = utts
        return cls(config, int(index["seed"]), np.array(index["prototypes"]), speakers, splits)


# ------------------------------------------------------------- generation


def make_prototypes(cfg: CorpusConfig, stream: Stream) -> np.ndarray:
    """Token prototypes, redrawn until every pair is at least the distance floor apart."""
    V, P, D = cfg.vocab_size, cfg.proto_frames, cfg.feat_dim
    for _ in range(1000):
        protos = stream.normal((V, P, D))
        if cfg.proto_smoothing:
            a = cfg.proto_smoothing
            smooth = protos.copy()
            smooth[:, 1:] += a * protos[:, :-1]
            smooth[:, :-1] += a * protos[:, 1:]
            protos = smooth / np.sqrt(1 + 2 * a * a)
        diffs = protos[:, None] - protos[None, :]
        dist = np.sqrt((diffs**2).sum(axis=(2, 3)))
        dist[np.arange(V), np.arange(V)] = np.inf
        if dist.min() >= cfg.min_proto_distance:
            return protos
    raise CorpusConfigError("could not draw prototypes satisfying min_proto_distance")


def make_speaker(cfg: CorpusConfig, speaker_id: str, stream: Stream) -> Speaker:
    lo, hi = cfg.scale_range
    scale = stream.uniform((cfg.feat_dim,), lo, hi)
    bias = stream.normal((cfg.feat_dim,), std=cfg.bias_std)
    rate = float(stream.uniform((1,), *cfg.rate_range)[0])
    return Speaker(speaker_id, scale, bias, rate)


def draw_tokens(cfg: CorpusConfig, stream: Stream) -> tuple[int, ...]:
    n = stream.integer(cfg.min_tokens, cfg.max_tokens + 1)
    tokens: list[int] = []
    while len(tokens) < n:
        tok = stream.integer(0, cfg.vocab_size)
        if cfg.allow_repeats or not tokens or tokens[-1] != tok:
            tokens.append(tok)
    return tuple(tokens)


def render_utterance(cfg: CorpusConfig, prototypes: np.ndarray, speaker: Speaker,
                     tokens: tuple[int, ...], stream: Stream) -> np.ndarray:
    clean = np.concatenate([prototypes[t] for t in tokens], axis=0)
    warped = time_warp(clean, speaker.rate)
    frames = warped * speaker.channel_scale + speaker.channel_bias
    if cfg.noise_std:
        frames = frames + stream.normal(frames.shape, std=cfg.noise_std)
    return frames.astype(np.float32).astype(np.float64)


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Deterministic train/adapt/test corpus; test speakers are disjoint from training speakers."""
    config.validate()
    root = Stream(seed, "corpus")
    prototypes = make_prototypes(config, root.child("prototypes"))
    speakers: dict[str, Speaker] = {}
    plan = []
    for i in range(config.n_train_speakers):
        sid = f"tr{i:02d}"
        speakers[sid] = make_speaker(config, sid, root.child(f"speaker/{sid}"))
        plan += [("train", sid, f"{sid}-{j:04d}") for j in range(config.train_utts_per_speaker)]
    for i in range(config.n_test_speakers):
        sid = f"te{i:02d}"
        speakers[sid] = make_speaker(config, sid, root.child(f"speaker/{sid}"))
        plan += [("adapt", sid, f"{sid}-a{j:03d}") for j in range(config.adapt_utts_per_speaker)]
        plan += [("test", sid, f"{sid}-{j:04d}") for j in range(config.test_utts_per_speaker)]
    splits: dict[str, list[FeatureSequence]] = {"train": [], "adapt": [], "test": []}
    for split, sid, uid in plan:
        stream = root.child(f"utt/{sid}/{uid}")
        tokens = draw_tokens(config, stream)
        frames = render_utterance(config, prototypes, speakers[sid], tokens, stream)
        splits[split].append(FeatureSequence(frames, sid, uid, tokens))
    return Corpus(config, seed, prototypes, speakers, splits)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class MaskPolicy:
    n_time: int = 2
    max_time_width: int = 4
    n_freq: int = 2
    max_freq_width: int = 3


@dataclass(frozen=True)
class MaskDraws:
    time: tuple[tuple[int, int], ...]  # (start, width)
    freq: tuple[tuple[int, int], ...]


def draw_masks(T: int, D: int, policy: MaskPolicy, stream: Stream) -> MaskDraws:
    if policy.max_time_width > T:
        raise ValueError(f"time mask width {policy.max_time_width} exceeds {T} frames")
    if policy.max_freq_width > D:
        raise ValueError(f"frequency mask width {policy.max_freq_width} exceeds {D} dims")
    time = []
    for _ in range(policy.n_time):
        w = stream.integer(0, policy.max_time_width + 1)
        time.append((stream.integer(0, T - w + 1), w))
    freq = []
    for _ in range(policy.n_freq):
        w = stream.integer(0, policy.max_freq_width + 1)
        freq.append((stream.integer(0, D - w + 1), w))
    return MaskDraws(tuple(time), tuple(freq))


def apply_masks(features: FeatureSequence, draws: MaskDraws) -> FeatureSequence:
    frames = features.frames.copy()
    fill = features.frames.mean(axis=0)
    for start, w in draws.time:
        frames[start : start + w] = fill
    for start, w in draws.freq:
        frames[:, start : start + w] = fill[start : start + w]
    return features.with_frames(frames)


def spec_augment(features: FeatureSequence, policy: MaskPolicy, stream: Stream) -> FeatureSequence:
    """Time and feature-band masking; masked cells take the utterance mean."""
    T, D = features.frames.shape
    return apply_masks(features, draw_masks(T, D, policy, stream))


def time_warp(frames: np.ndarray, factor: float) -> np.ndarray:
    """Resample to round(T / factor) frames by linear interpolation along time."""
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"speed factor {factor} outside [0.5, 2.0]")
    T = frames.shape[0]
    n = int(round(T / factor))
    if n < 1:
        raise ValueError(f"speed factor {factor} leaves no frames from {T}")
    if factor == 1.0:
        return frames.copy()
    pos = np.minimum(np.arange(n) * factor, T - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return frames[lo] + (frames[hi] - frames[lo]) * w


def speed_perturb(features: FeatureSequence, factor: float) -> FeatureSequence:
    frames = time_warp(features.frames, factor)
    if len(frames) < len(features.reference):
        raise ValueError(f"speed factor {factor} leaves fewer frames than tokens")
    return features.with_frames(frames)
