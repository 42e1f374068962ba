"""Experiment manifests: strict JSON documents describing a full run.

Every section is optional and falls back to library defaults.  Unknown keys
are rejected so that typos cannot silently change an experiment.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .adaptation import AdaptHyper
from .combination import CombinationConfig
from .conformer import ConformerConfig
from .corpus import CorpusConfig
from .decoding import DecodeConfig
from .tdnn import TdnnConfig, TrainHyper

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "XSYSCOMB_OUTPUT_ROOT"

TDNN_TRAIN_DEFAULTS = {"epochs": 10}
CFM_TRAIN_DEFAULTS = {"epochs": 60, "lr": 4e-3, "warmup_steps": 150}


class ManifestError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class AdaptationSettings:
    hyper: AdaptHyper = AdaptHyper(batch_size=5)
    data: str = "adapt+test"  # or "adapt": only the held-out adaptation utterances
    bayesian_conformer: bool = False


@dataclass(frozen=True)
class DecodeSettings:
    nbest: DecodeConfig = DecodeConfig()
    onebest_beam: int = 8  # beam for 1-best decodes of standalone systems


@dataclass(frozen=True)
class CombinationSettings:
    config: CombinationConfig = CombinationConfig()
    depth_beta: float | None = None  # None: the best weight of the sweep
    alpha: float = 0.05


@dataclass(frozen=True)
class ExperimentManifest:
    seed: int = 1
    output_dir: str = "runs/default"
    corpus: CorpusConfig = CorpusConfig()
    tdnn: TdnnConfig = TdnnConfig()
    tdnn_train: TrainHyper = TrainHyper(**TDNN_TRAIN_DEFAULTS)
    conformer: ConformerConfig = ConformerConfig()
    conformer_train: TrainHyper = TrainHyper(**CFM_TRAIN_DEFAULTS)
    adaptation: AdaptationSettings = AdaptationSettings()
    decode: DecodeSettings = DecodeSettings()
    combination: CombinationSettings = CombinationSettings()
    jobs: int = 1
    source: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "jobs": self.jobs,
            "corpus": self.corpus.to_dict(),
            "tdnn": self.tdnn.to_dict(),
            "tdnn_train": self.tdnn_train.to_dict(),
            "conformer": self.conformer.to_dict(),
            "conformer_train": self.conformer_train.to_dict(),
            "adaptation": {**self.adaptation.hyper.to_dict(), "data": self.adaptation.data,
                           "bayesian_conformer": self.adaptation.bayesian_conformer},
            "decode": {**dataclasses.asdict(self.decode.nbest), "onebest_beam": self.decode.onebest_beam},
            "combination": {"beta": self.combination.config.beta, "grid": list(self.combination.config.grid),
                            "depths": list(self.combination.config.depths),
                            "depth_beta": self.combination.depth_beta, "alpha": self.combination.alpha},
        }

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def section_digest(self, *keys: str) -> str:
        d = self.to_dict()
        payload = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def experiment_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _section(raw: dict, name: str, allowed: set[str], errors: list[str]) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        errors.append(f"{name}: expected an object")
        return {}
    for key in sorted(set(sec) - allowed):
        errors.append(f"{name}.{key}: unknown key")
    return {k: v for k, v in sec.items() if k in allowed}


def _build(cls, name: str, values: dict, errors: list[str], defaults: dict | None = None):
    merged = {**(defaults or {}), **values}
    try:
        obj = cls.from_dict(merged) if hasattr(cls, "from_dict") else cls(**merged)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return None


TOP_LEVEL = {"schema_version", "seed", "output_dir", "jobs", "corpus", "tdnn", "tdnn_train", "conformer",
             "conformer_train", "adaptation", "decode", "combination"}


def parse_manifest(raw: dict) -> ExperimentManifest:
    """Validate a manifest document; raises ManifestError listing every problem found."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ManifestError(["manifest: expected a JSON object"])
    for key in sorted(set(raw) - TOP_LEVEL):
        errors.append(f"{key}: unknown key")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {raw['schema_version']}")
    seed = raw.get("seed", 1)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(f"seed: expected a non-negative integer, got {seed!r}")
    jobs = raw.get("jobs", 1)
    if not isinstance(jobs, int) or jobs < 1:
        errors.append(f"jobs: expected a positive integer, got {jobs!r}")
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str) or not output_dir:
        errors.append("output_dir: expected a non-empty string")

    corpus = _build(CorpusConfig, "corpus", _section(raw, "corpus", _fields(CorpusConfig), errors), errors)
    tdnn = _build(TdnnConfig, "tdnn", _section(raw, "tdnn", _fields(TdnnConfig), errors), errors)
    tdnn_train = _build(TrainHyper, "tdnn_train", _section(raw, "tdnn_train", _fields(TrainHyper), errors),
                        errors, TDNN_TRAIN_DEFAULTS)
    cfm_sec = _section(raw, "conformer", _fields(ConformerConfig), errors)
    lam = cfm_sec.get("ctc_weight", 0.2)
    if not isinstance(lam, (int, float)) or not 0.0 <= lam <= 1.0:
        errors.append(f"conformer.ctc_weight: {lam!r} outside [0, 1]")
        cfm_sec.pop("ctc_weight")
    conformer = _build(ConformerConfig, "conformer", cfm_sec, errors)
    cfm_train = _build(TrainHyper, "conformer_train",
                       _section(raw, "conformer_train", _fields(TrainHyper), errors), errors, CFM_TRAIN_DEFAULTS)

    ad_sec = _section(raw, "adaptation", _fields(AdaptHyper) | {"data", "bayesian_conformer"}, errors)
    data = ad_sec.pop("data", "adapt+test")
    if data not in ("adapt+test", "adapt"):
        errors.append(f"adaptation.data: expected 'adapt+test' or 'adapt', got {data!r}")
    bayes_cfm = bool(ad_sec.pop("bayesian_conformer", False))
    hyper = _build(AdaptHyper, "adaptation", {"batch_size": 5, **ad_sec}, errors)

    dec_sec = _section(raw, "decode", _fields(DecodeConfig) | {"onebest_beam"}, errors)
    onebest_beam = dec_sec.pop("onebest_beam", 8)
    if not isinstance(onebest_beam, int) or onebest_beam < 1:
        errors.append(f"decode.onebest_beam: expected a positive integer, got {onebest_beam!r}")
    nbest = _build(DecodeConfig, "decode", dec_sec, errors)

    comb_sec = _section(raw, "combination", {"beta", "grid", "depths", "depth_beta", "alpha"}, errors)
    for key in ("beta", "depth_beta"):
        v = comb_sec.get(key)
        if v is not None and (not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0):
            errors.append(f"combination.{key}: {v!r} outside [0, 1]")
            comb_sec.pop(key)
    for i, b in enumerate(comb_sec.get("grid", [])):
        if not isinstance(b, (int, float)) or not 0.0 <= b <= 1.0:
            errors.append(f"combination.grid[{i}]: {b!r} outside [0, 1]")
    alpha = comb_sec.pop("alpha", 0.05)
    if not isinstance(alpha, (int, float)) or not 0.0 < alpha < 1.0:
        errors.append(f"combination.alpha: {alpha!r} outside (0, 1)")
    depth_beta = comb_sec.pop("depth_beta", None)
    if "grid" in comb_sec:
        comb_sec["grid"] = tuple(float(b) for b in comb_sec["grid"])
    if "depths" in comb_sec:
        comb_sec["depths"] = tuple(comb_sec["depths"])
    combo = None if any(e.startswith("combination.grid") for e in errors) else \
        _build(CombinationConfig, "combination", comb_sec, errors)

    if corpus and tdnn and conformer:
        for name, cfg in (("tdnn", tdnn), ("conformer", conformer)):
            if cfg.feat_dim != corpus.feat_dim:
                errors.append(f"{name}.feat_dim: {cfg.feat_dim} != corpus.feat_dim {corpus.feat_dim}")
            if cfg.vocab_size != corpus.vocab_size:
                errors.append(f"{name}.vocab_size: {cfg.vocab_size} != corpus.vocab_size {corpus.vocab_size}")
    if nbest and combo and max(combo.depths) > nbest.nbest:
        errors.append(f"combination.depths: {max(combo.depths)} exceeds decode.nbest {nbest.nbest}")
    if errors:
        raise ManifestError(errors)
    return ExperimentManifest(
        seed=seed, output_dir=output_dir, corpus=corpus, tdnn=tdnn, tdnn_train=tdnn_train,
        conformer=conformer, conformer_train=cfm_train,
        adaptation=AdaptationSettings(hyper, data, bayes_cfm),
        decode=DecodeSettings(nbest, onebest_beam),
        combination=CombinationSettings(combo, depth_beta, float(alpha)),
        jobs=jobs, source=raw,
    )


def validate_manifest(path) -> ExperimentManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError([f"{path}: no such file"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: invalid JSON ({exc})"]) from None
    return parse_manifest(raw)


def default_manifest(**overrides) -> dict:
    """The shipped default manifest as a JSON-ready dict."""
    d = ExperimentManifest().to_dict()
    d.update(overrides)
    return d
