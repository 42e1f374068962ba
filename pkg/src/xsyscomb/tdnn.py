"""Factored context-splicing TDNN with a 2-D convolutional front end, trained with CTC."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .corpus import Corpus, FeatureSequence, MaskPolicy, spec_augment, speed_perturb
from .losses import ctc_loss_op
from .rng import Stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TdnnConfig:
    feat_dim: int = 16
    vocab_size: int = 12
    conv_layers: int = 2
    conv_channels: int = 8
    hidden_dim: int = 64
    bottleneck_dim: int = 16
    offsets: tuple[tuple[int, ...], ...] = ((-1, 0, 1),) * 3 + ((-3, 0, 3),) * 3
    dropout: float = 0.1
    skip_scale: float = 0.66
    lhuc_start: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.offsets)

    @property
    def output_dim(self) -> int:
        return self.vocab_size + 1

    def validate(self) -> None:
        if self.bottleneck_dim >= self.hidden_dim:
            raise ValueError("bottleneck_dim must be smaller than hidden_dim")
        for offs in self.offsets:
            if sorted(offs) != sorted(-o for o in offs):
                raise ValueError(f"splicing offsets {offs} are not symmetric around 0")
        if self.bottleneck_dim > self.hidden_dim * len(self.offsets[0]):
            raise ValueError("bottleneck wider than spliced input")

    def receptive_radius(self) -> int:
        return self.conv_layers + sum(max(o) for o in self.offsets)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TdnnConfig":
        d = dict(d)
        if "offsets" in d:
            d["offsets"] = tuple(tuple(o) for o in d["offsets"])
        return cls(**d)


class SpliceLayer(nn.Module):
    """splice -> [semi-orthogonal projection] -> affine -> ReLU -> batch norm."""

    def __init__(self, d_in: int, cfg: TdnnConfig, offsets, factored: bool, stream: Stream):
        self.offsets = tuple(offsets)
        wide = d_in * len(self.offsets)
        self.factored = factored
        if factored:
            g = stream.child("proj").normal((wide, cfg.bottleneck_dim))
            q, _ = np.linalg.qr(g)  # orthonormal columns -> semi-orthogonal rows of M = q.T
            self.proj = nn.param(q)
            self.affine = nn.Linear(cfg.bottleneck_dim, cfg.hidden_dim, stream.child("affine"))
        else:
            self.affine = nn.Linear(wide, cfg.hidden_dim, stream.child("affine"))
        self.norm = nn.BatchNorm(cfg.hidden_dim)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = ag.splice(x, self.offsets)
        if self.factored:
            h = ag.affine(h, self.proj)
        return self.norm(ag.relu(self.affine(h)), mask)


class TdnnModel(nn.Module):
    def __init__(self, cfg: TdnnConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        root = Stream(seed, "tdnn/init")
        C = cfg.conv_channels
        self.convs = [
            nn.Conv2d(1 if i == 0 else C, C, 3, root.child(f"conv{i}"), padding=1)
            for i in range(cfg.conv_layers)
        ]
        d_in = C * cfg.feat_dim if cfg.conv_layers else cfg.feat_dim
        self.layers = []
        for i, offs in enumerate(cfg.offsets):
            self.layers.append(SpliceLayer(d_in if i == 0 else cfg.hidden_dim, cfg, offs, i > 0, root.child(f"layer{i}")))
        self.prefinal = nn.Linear(cfg.hidden_dim, cfg.hidden_dim, root.child("prefinal"))
        self.prefinal_norm = nn.BatchNorm(cfg.hidden_dim)
        self.output = nn.Linear(cfg.hidden_dim, cfg.output_dim, root.child("output"))

    # ------------------------------------------------------------ lhuc

    def lhuc_widths(self) -> dict[str, int]:
        widths = {f"layer{i}": self.cfg.hidden_dim for i in range(self.cfg.lhuc_start, self.cfg.num_layers)}
        widths["prefinal"] = self.cfg.hidden_dim
        return widths

    def _scale(self, name: str, h: Tensor, lhuc) -> Tensor:
        if lhuc is None or name not in lhuc:
            return h
        return nn.apply_lhuc(h, lhuc[name])

    def projections(self) -> list[Tensor]:
        """The semi-orthogonal factors, stored transposed as (wide, bottleneck)."""
        return [layer.proj for layer in self.layers if layer.factored]

    # ---------------------------------------------------------- forward

    def forward(self, feats: np.ndarray, lengths, lhuc: dict | None = None,
                stream: Stream | None = None) -> Tensor:
        """(B, T, D) padded features -> (B, T, V + 1) log-probabilities."""
        if feats.ndim != 3 or feats.shape[-1] != self.cfg.feat_dim:
            raise ag.ShapeError(f"tdnn: expected (B, T, {self.cfg.feat_dim}) features, got {feats.shape}")
        if lhuc is not None:
            unknown = set(lhuc) - set(self.lhuc_widths())
            if unknown:
                raise ag.ShapeError(f"tdnn: no LHUC attachment point named {sorted(unknown)}")
        B, T, D = feats.shape
        mask = nn.time_mask(lengths, T)
        drop = self.cfg.dropout if self.training else 0.0
        h = Tensor(feats * mask)
        if self.convs:
            h4 = ag.reshape(h, (B, 1, T, D))
            m4 = mask.reshape(B, 1, T, 1)
            for conv in self.convs:
                h4 = ag.mul(ag.relu(conv(h4)), m4)
            C = h4.shape[1]
            h = ag.reshape(ag.transpose(h4, (0, 2, 1, 3)), (B, T, C * D))
        for i, layer in enumerate(self.layers):
            out = layer(h, mask)
            out = self._scale(f"layer{i}", out, lhuc)
            if drop:
                out = ag.dropout(out, drop, stream)
            if layer.factored:
                out = ag.add(out, ag.mul(h, self.cfg.skip_scale))
            h = ag.mul(out, mask)
        h = self.prefinal_norm(ag.relu(self.prefinal(h)), mask)
        h = ag.mul(self._scale("prefinal", h, lhuc), mask)
        return ag.log_softmax(self.output(h), axis=-1)

    def log_probs(self, features: FeatureSequence, lhuc: dict | None = None) -> np.ndarray:
        out = self.forward(features.frames[None], [features.num_frames], lhuc)
        return ag.check_finite(out, "tdnn forward").data[0]

    def to_model_labels(self, tokens) -> list[int]:
        return [t + 1 for t in tokens]


def pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    lengths = [len(s) for s in seqs]
    out = np.zeros((len(seqs), max(lengths), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


# -------------------------------------------------------- semi-orthogonal


def semi_orthogonal_step(M: np.ndarray, nu: float = 0.125) -> np.ndarray:
    """One scale-invariant step pulling the rows of ``M`` towards an orthogonal set.

    M <- M - (nu / alpha) (M M^T - alpha I) M with alpha = trace(M M^T) / rows.
    """
    rows, cols = M.shape
    if rows > cols:
        raise ValueError(f"semi-orthogonal constraint needs rows <= cols, got {M.shape}")
    P = M @ M.T
    alpha = np.trace(P) / rows
    return M - (nu / alpha) * (P - alpha * np.eye(rows)) @ M


def orthogonality_residual(M: np.ndarray) -> float:
    """||M M^T / alpha - I||_F."""
    P = M @ M.T
    alpha = np.trace(P) / M.shape[0]
    return float(np.linalg.norm(P / alpha - np.eye(M.shape[0])))


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 2e-3
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    spec_augment: MaskPolicy | None = field(default_factory=MaskPolicy)
    orth_period: int = 4
    orth_nu: float = 0.125
    final_orth_steps: int = 50
    clip: float = 5.0
    warmup_steps: int = 0  # linear learning-rate warmup
    average_last: int = 5  # sequence model only: epochs averaged at the end
    final_lr_scale: float = 1.0  # < 1: linear decay after warmup down to lr * final_lr_scale

    def validate(self) -> None:
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError("training: epochs and lr must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.final_lr_scale <= 1.0:
            raise ValueError(f"final_lr_scale must lie in [0, 1], got {self.final_lr_scale}")
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError(f"speed factors must be positive, got {self.speed_factors}")

    def lr_at(self, step: int, total_steps: int | None = None) -> float:
        lr = self.lr
        if self.warmup_steps > 0:
            lr *= min(1.0, (step + 1) / self.warmup_steps)
        if total_steps and self.final_lr_scale != 1.0 and step >= self.warmup_steps:
            span = max(1, total_steps - self.warmup_steps)
            frac = min(1.0, (step - self.warmup_steps) / span)
            lr *= 1.0 - (1.0 - self.final_lr_scale) * frac
        return lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        d = dict(d)
        if "speed_factors" in d:
            d["speed_factors"] = tuple(d["speed_factors"])
        if d.get("spec_augment") is not None:
            d["spec_augment"] = MaskPolicy(**d["spec_augment"])
        return cls(**d)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    orth_residual: list[float] = field(default_factory=list)

    def upticks(self) -> int:
        return sum(1 for a, b in zip(self.epoch_loss, self.epoch_loss[1:]) if b > a)


class DivergenceError(FloatingPointError):
    pass


def augment(utt: FeatureSequence, hyper, stream: Stream) -> FeatureSequence:
    if hyper.speed_factors and len(hyper.speed_factors) > 1:
        factor = hyper.speed_factors[stream.integer(0, len(hyper.speed_factors))]
        if factor != 1.0:
            utt = speed_perturb(utt, factor)
    policy = hyper.spec_augment
    if policy is not None and utt.num_frames >= policy.max_time_width:
        utt = spec_augment(utt, policy, stream)
    return utt


def minibatches(n: int, batch_size: int, stream: Stream) -> list[np.ndarray]:
    order = stream.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def apply_orthogonality(model: TdnnModel, nu: float, steps: int = 1) -> None:
    for p in model.projections():
        M = p.data.T
        for _ in range(steps):
            M = semi_orthogonal_step(M, nu)
        p.data = np.ascontiguousarray(M.T)


def train_frame_system(corpus: Corpus, config: TdnnConfig, hyper: TrainHyper, seed: int,
                       init: TdnnModel | None = None) -> tuple[TdnnModel, TrainLog]:
    hyper.validate()
    train = corpus.splits["train"]
    if not train:
        raise ValueError("training split is empty")
    model = init if init is not None else TdnnModel(config, seed)
    params = model.parameters()
    opt = nn.Adam(params, lr=hyper.lr, clip=hyper.clip)
    stream = Stream(seed, "tdnn/train")
    history = TrainLog()
    step = 0
    total_steps = hyper.epochs * -(-len(train) // hyper.batch_size)
    for epoch in range(hyper.epochs):
        model.train()
        total, count = 0.0, 0
        for batch in minibatches(len(train), hyper.batch_size, stream.child(f"order{epoch}")):
            utts = [augment(train[i], hyper, stream) for i in batch]
            feats, lengths = pad_batch([u.frames for u in utts])
            lp = model.forward(feats, lengths, stream=stream)
            losses = ctc_loss_op(lp, [model.to_model_labels(u.reference) for u in utts], lengths)
            loss = ag.mean(losses)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"tdnn: non-finite CTC loss at epoch {epoch}, step {step}")
            opt.lr = hyper.lr_at(step, total_steps)
            opt.step(ag.backward(loss))
            step += 1
            if hyper.lr > 0 and step % hyper.orth_period == 0:
                apply_orthogonality(model, hyper.orth_nu)
            total += float(losses.data.sum())
            count += len(batch)
        history.epoch_loss.append(total / count)
        log.info("tdnn epoch %d: ctc %.4f", epoch, total / count)
    if hyper.lr > 0 and hyper.final_orth_steps:
        apply_orthogonality(model, hyper.orth_nu, hyper.final_orth_steps)
    history.orth_residual = [orthogonality_residual(p.data.T) for p in model.projections()]
    model.eval()
    return model, history


def save_tdnn(model: TdnnModel, path, extra: dict | None = None) -> None:
    nn.save_checkpoint(path, "tdnn", model.cfg.to_dict(), model.state_arrays(), extra)


def load_tdnn(path) -> TdnnModel:
    header, state = nn.load_checkpoint(path)
    if header["kind"] != "tdnn":
        raise ValueError(f"{path}: checkpoint kind {header['kind']!r} is not tdnn")
    model = TdnnModel(TdnnConfig.from_dict(header["config"]), 0)
    model.load_state_arrays(state)
    return model.eval()
