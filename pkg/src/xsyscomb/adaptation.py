"""Speaker adaptation by learning hidden unit contributions (LHUC).

Both model families expose ``lhuc_widths()`` naming the hidden layers whose
activations may be rescaled by ``2 * sigmoid(r)``.  Plain LHUC fits ``r`` by
gradient descent on the model's own training loss; the Bayesian variant fits a
diagonal Gaussian posterior over ``r`` with one reparameterized sample per
step and a closed-form KL to the prior.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .conformer import ConformerModel
from .corpus import FeatureSequence
from .losses import ctc_loss_op
from .nn import apply_lhuc  # noqa: F401  re-exported
from .rng import Stream
from .tdnn import TdnnModel, pad_batch

SUPERVISION_SOURCES = ("reference", "self-decode", "cross-system")


def xi(r: np.ndarray) -> np.ndarray:
    """The LHUC scaling 2 * sigmoid(r), in (0, 2)."""
    return 2.0 * ag._sigmoid(np.asarray(r, dtype=np.float64))


@dataclass
class LhucTransform:
    speaker_id: str
    params: dict[str, np.ndarray]

    @classmethod
    def identity(cls, model, speaker_id: str) -> "LhucTransform":
        return cls(speaker_id, {k: np.zeros(w) for k, w in model.lhuc_widths().items()})

    def as_lhuc(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def to_json(self) -> dict:
        return {"speaker": self.speaker_id, "kind": "lhuc",
                "layers": {k: v.tolist() for k, v in sorted(self.params.items())}}


@dataclass
class AdaptationSet:
    speaker_id: str
    utterances: list[FeatureSequence]
    supervision: list[tuple[int, ...]]
    source: str = "reference"

    def __post_init__(self):
        if self.source not in SUPERVISION_SOURCES:
            raise ValueError(f"unknown supervision source {self.source!r}")
        if len(self.utterances) != len(self.supervision):
            raise ValueError("adaptation set: one supervision sequence per utterance is required")
        for u in self.utterances:
            if u.speaker_id != self.speaker_id:
                raise ValueError(f"utterance {u.utterance_id} belongs to {u.speaker_id}, not {self.speaker_id}")

    def __len__(self) -> int:
        return len(self.utterances)

    @classmethod
    def from_references(cls, speaker_id: str, utterances: Sequence[FeatureSequence]) -> "AdaptationSet":
        return cls(speaker_id, list(utterances), [tuple(u.reference) for u in utterances], "reference")


@dataclass
class VariationalLhuc:
    speaker_id: str
    mu: dict[str, np.ndarray]
    log_sigma: dict[str, np.ndarray]
    prior_mu: dict[str, np.ndarray] | None = None  # None means N(0, 1)
    prior_sigma: dict[str, np.ndarray] | None = None
    mc_samples: int = 1

    def sigma(self, layer: str) -> np.ndarray:
        return np.exp(self.log_sigma[layer])

    def prior(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        w = self.mu[layer].shape
        m = self.prior_mu[layer] if self.prior_mu else np.zeros(w)
        s = self.prior_sigma[layer] if self.prior_sigma else np.ones(w)
        return m, s

    def mean_transform(self) -> LhucTransform:
        return LhucTransform(self.speaker_id, {k: v.copy() for k, v in self.mu.items()})

    def to_json(self) -> dict:
        return {"speaker": self.speaker_id, "kind": "blhuc",
                "layers": {k: {"mu": self.mu[k].tolist(), "log_sigma": self.log_sigma[k].tolist()}
                           for k in sorted(self.mu)}}


@dataclass(frozen=True)
class BlhucLossBreakdown:
    l1: float
    l2: float

    @property
    def bound(self) -> float:
        return self.l1 + self.l2


@dataclass(frozen=True)
class AdaptHyper:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 1
    sigma_init: float = 0.5
    kl_weight: float = 1.0
    sigma_clamp: float | None = None  # fixes sigma and stops its updates
    layers: tuple[str, ...] | None = None  # None adapts every attachment point

    def validate(self) -> None:
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("adaptation: lr, epochs must be >= 0 and batch_size >= 1")
        if self.sigma_init <= 0:
            raise ValueError("adaptation: sigma_init must be positive")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["layers"] = list(self.layers) if self.layers is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptHyper":
        d = dict(d)
        if d.get("layers") is not None:
            d["layers"] = tuple(d["layers"])
        return cls(**d)


# ------------------------------------------------------------------ losses


def sequence_losses(model, utts: Sequence[FeatureSequence], supervision, lhuc) -> Tensor:
    """Per-utterance adaptation losses (B,): CTC for the TDNN, the multitask mix for the Conformer."""
    feats, lengths = pad_batch([u.frames for u in utts])
    if isinstance(model, TdnnModel):
        lp = model.forward(feats, lengths, lhuc)
        return ctc_loss_op(lp, [model.to_model_labels(s) for s in supervision], lengths)
    if isinstance(model, ConformerModel):
        att, ctc = model.losses(feats, lengths, list(supervision), lhuc)
        lam = model.cfg.ctc_weight
        return ag.add(ag.mul(att, 1.0 - lam), ag.mul(ctc, lam))
    raise TypeError(f"cannot adapt a {type(model).__name__}")


def kl_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> float:
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    mu_q, sigma_q, mu_p, sigma_p = (np.asarray(a, dtype=np.float64) for a in (mu_q, sigma_q, mu_p, sigma_p))
    if np.any(sigma_q <= 0) or np.any(sigma_p <= 0):
        raise ValueError("kl_gaussian: standard deviations must be positive")
    terms = (sigma_q**2 + (mu_q - mu_p) ** 2) / sigma_p**2 + 2.0 * np.log(sigma_p / sigma_q) - 1.0
    return float(0.5 * terms.sum())


def kl_op(mu: Tensor, log_sigma: Tensor, mu_p: np.ndarray, sigma_p: np.ndarray) -> Tensor:
    var = ag.exp(ag.mul(log_sigma, 2.0))
    quad = ag.div(ag.add(var, ag.square(ag.sub(mu, mu_p))), sigma_p**2)
    terms = ag.sub(ag.add(quad, 2.0 * np.log(sigma_p)), ag.add(ag.mul(log_sigma, 2.0), 1.0))
    return ag.mul(ag.tsum(terms), 0.5)


def kl_monte_carlo(mu_q, sigma_q, mu_p, sigma_p, samples: int, stream: Stream) -> float:
    """Sample estimate of E_q[log q - log p]; a test oracle for :func:`kl_gaussian`."""
    mu_q, sigma_q, mu_p, sigma_p = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mu_q, sigma_q, mu_p, sigma_p))
    x = mu_q + sigma_q * stream.normal((samples, mu_q.size))

    def logpdf(v, m, s):
        return -0.5 * ((v - m) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi)

    return float((logpdf(x, mu_q, sigma_q) - logpdf(x, mu_p, sigma_p)).sum(axis=1).mean())


# -------------------------------------------------------------- estimation


def _check(model, adapt_set: AdaptationSet, hyper: AdaptHyper) -> list[str]:
    if len(adapt_set) == 0:
        raise ValueError(f"speaker {adapt_set.speaker_id}: empty adaptation set")
    hyper.validate()
    widths = model.lhuc_widths()
    layers = list(hyper.layers) if hyper.layers is not None else list(widths)
    unknown = set(layers) - set(widths)
    if unknown:
        raise ValueError(f"no LHUC attachment point named {sorted(unknown)}")
    return layers


def _batches(n: int, hyper: AdaptHyper, stream: Stream, epoch: int) -> list[np.ndarray]:
    order = stream.child(f"order{epoch}").permutation(n)
    return [order[i : i + hyper.batch_size] for i in range(0, n, hyper.batch_size)]


def _stream(seed: int, speaker_id: str) -> Stream:
    return Stream(seed, f"adapt/{speaker_id}")


def estimate_lhuc(model, adapt_set: AdaptationSet, hyper: AdaptHyper = AdaptHyper(), seed: int = 0,
                  trajectory: list | None = None) -> LhucTransform:
    """Fit per-speaker LHUC vectors with the backbone frozen.

    Dropout is off and batch norm uses its running statistics throughout.
    ``trajectory``, when given, receives a copy of the parameters after every step.
    """
    layers = _check(model, adapt_set, hyper)
    widths = model.lhuc_widths()
    r = {k: Tensor(np.zeros(widths[k]), requires_grad=True) for k in layers}
    stream = _stream(seed, adapt_set.speaker_id)
    with nn.frozen(model):
        model.eval()
        for epoch in range(hyper.epochs):
            for batch in _batches(len(adapt_set), hyper, stream, epoch):
                if hyper.lr == 0:
                    continue
                utts = [adapt_set.utterances[i] for i in batch]
                sup = [adapt_set.supervision[i] for i in batch]
                loss = ag.mean(sequence_losses(model, utts, sup, r))
                grads = ag.backward(loss)
                for t in r.values():
                    t.data = t.data - hyper.lr * grads[t]
                if trajectory is not None:
                    trajectory.append({k: t.data.copy() for k, t in r.items()})
    return LhucTransform(adapt_set.speaker_id, {k: t.data for k, t in r.items()})


def blhuc_objective(model, utts, supervision, post_mu: dict[str, Tensor], post_log_sigma: dict[str, Tensor],
                    eps: dict[str, np.ndarray], num_total: int, kl_weight: float = 1.0,
                    prior: VariationalLhuc | None = None) -> tuple[Tensor, BlhucLossBreakdown]:
    """One-sample bound on a minibatch: mean loss at r = mu + sigma * eps plus KL / num_total."""
    r = {k: ag.add(post_mu[k], ag.mul(ag.exp(post_log_sigma[k]), eps[k])) for k in post_mu}
    l1 = ag.mean(sequence_losses(model, utts, supervision, r))
    l2 = None
    for k in post_mu:
        if prior is not None:
            pm, ps = prior.prior(k)
        else:
            pm, ps = np.zeros(post_mu[k].shape), np.ones(post_mu[k].shape)
        term = kl_op(post_mu[k], post_log_sigma[k], pm, ps)
        l2 = term if l2 is None else ag.add(l2, term)
    l2 = ag.mul(l2, kl_weight / num_total)
    return ag.add(l1, l2), BlhucLossBreakdown(l1.item(), l2.item())


def estimate_blhuc(model, adapt_set: AdaptationSet, hyper: AdaptHyper = AdaptHyper(), seed: int = 0,
                   trajectory: list | None = None, history: list | None = None) -> VariationalLhuc:
    """Fit a Gaussian posterior over the LHUC vectors with the reparameterization trick.

    The prior is standard normal.  ``history`` receives one BlhucLossBreakdown per step.
    """
    layers = _check(model, adapt_set, hyper)
    widths = model.lhuc_widths()
    sigma0 = hyper.sigma_clamp if hyper.sigma_clamp is not None else hyper.sigma_init
    mu = {k: Tensor(np.zeros(widths[k]), requires_grad=True) for k in layers}
    log_sigma = {k: Tensor(np.full(widths[k], math.log(sigma0)), requires_grad=hyper.sigma_clamp is None)
                 for k in layers}
    stream = _stream(seed, adapt_set.speaker_id)
    noise = stream.child("eps")
    with nn.frozen(model):
        model.eval()
        for epoch in range(hyper.epochs):
            for batch in _batches(len(adapt_set), hyper, stream, epoch):
                if hyper.lr == 0:
                    continue
                eps = {k: noise.normal((widths[k],)) for k in layers}
                utts = [adapt_set.utterances[i] for i in batch]
                sup = [adapt_set.supervision[i] for i in batch]
                bound, parts = blhuc_objective(model, utts, sup, mu, log_sigma, eps, len(adapt_set), hyper.kl_weight)
                grads = ag.backward(bound)
                for k in layers:
                    mu[k].data = mu[k].data - hyper.lr * grads[mu[k]]
                    if hyper.sigma_clamp is None:
                        log_sigma[k].data = log_sigma[k].data - hyper.lr * grads[log_sigma[k]]
                if trajectory is not None:
                    trajectory.append({k: t.data.copy() for k, t in mu.items()})
                if history is not None:
                    history.append(parts)
    return VariationalLhuc(adapt_set.speaker_id, {k: t.data for k, t in mu.items()},
                           {k: t.data for k, t in log_sigma.items()})


# -------------------------------------------------------------- prediction


def model_log_probs(model, features: FeatureSequence, lhuc: dict | None) -> np.ndarray:
    """Frame-level output log-probabilities: TDNN outputs or the Conformer's CTC head."""
    if isinstance(model, TdnnModel):
        return model.log_probs(features, lhuc)
    return model.encode(features, lhuc)[1]


def blhuc_predict(model, posterior: VariationalLhuc, features: FeatureSequence) -> np.ndarray:
    """Predictive outputs with r fixed at the posterior mean."""
    return model_log_probs(model, features, posterior.mean_transform().as_lhuc())


def blhuc_predict_mc(model, posterior: VariationalLhuc, features: FeatureSequence, samples: int,
                     stream: Stream) -> np.ndarray:
    """Monte-Carlo average of output probabilities over posterior samples (test oracle)."""
    total = None
    for _ in range(samples):
        r = {k: posterior.mu[k] + posterior.sigma(k) * stream.normal(posterior.mu[k].shape) for k in posterior.mu}
        p = np.exp(model_log_probs(model, features, r))
        total = p if total is None else total + p
    return np.log(total / samples)


# -------------------------------------------------------------------- io


def save_transform(transform: LhucTransform | VariationalLhuc, directory) -> Path:
    path = Path(directory) / f"{transform.speaker_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(transform.to_json(), indent=1, sort_keys=True) + "\n")
    return path


def load_transform(path) -> LhucTransform | VariationalLhuc:
    d = json.loads(Path(path).read_text())
    if d["kind"] == "lhuc":
        return LhucTransform(d["speaker"], {k: np.asarray(v, dtype=np.float64) for k, v in d["layers"].items()})
    if d["kind"] == "blhuc":
        return VariationalLhuc(
            d["speaker"],
            {k: np.asarray(v["mu"], dtype=np.float64) for k, v in d["layers"].items()},
            {k: np.asarray(v["log_sigma"], dtype=np.float64) for k, v in d["layers"].items()},
        )
    raise ValueError(f"{path}: unknown transform kind {d['kind']!r}")


def load_transforms(directory) -> dict[str, dict[str, np.ndarray]]:
    """speaker -> lhuc dict (posterior means for Bayesian transforms)."""
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        t = load_transform(path)
        out[t.speaker_id] = t.mu if isinstance(t, VariationalLhuc) else t.params
    return out
