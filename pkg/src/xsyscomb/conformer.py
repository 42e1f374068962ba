"""Conformer encoder with a Transformer decoder and a CTC head.

Token indices in model space: 0 is the CTC blank, 1..V are tokens and V + 1
doubles as start- and end-of-sequence.  External token ids are shifted down
by one.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .corpus import Corpus, FeatureSequence
from .losses import MultitaskConfig, ctc_loss_op, nll_op
from .rng import Stream
from .tdnn import DivergenceError, TrainHyper, TrainLog, augment, minibatches, pad_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConformerConfig:
    feat_dim: int = 16
    vocab_size: int = 12
    enc_blocks: int = 4
    dec_blocks: int = 2
    heads: int = 4
    d_model: int = 64
    ffn_dim: int = 128
    conv_kernel: int = 7
    subsample_channels: int = 8
    dropout: float = 0.1
    ffn_residual: float = 0.5
    max_positions: int = 64
    min_input_frames: int = 4
    ctc_weight: float = 0.2

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("depthwise kernel size must be odd")
        MultitaskConfig(self.ctc_weight)

    @property
    def sos(self) -> int:
        return self.vocab_size + 1

    eos = sos

    @property
    def decoder_vocab(self) -> int:
        return self.vocab_size + 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConformerConfig":
        return cls(**d)


def subsampled_length(T: int) -> int:
    """Frames left after two stride-2 convolutions: ceil(ceil(T / 2) / 2)."""
    return -(-(-(-T // 2)) // 2)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, stream: Stream):
        self.heads = heads
        self.q = nn.Linear(d, d, stream.child("q"))
        self.k = nn.Linear(d, d, stream.child("k"))
        self.v = nn.Linear(d, d, stream.child("v"))
        self.o = nn.Linear(d, d, stream.child("o"))
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return ag.transpose(ag.reshape(x, (B, T, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, bias: np.ndarray) -> Tensor:
        """``bias`` is additive over (B|1, 1, Tq|1, Tk) with MASK_VALUE at blocked keys."""
        B, Tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ag.mul(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(d // self.heads))
        weights = ag.softmax(ag.add(scores, bias), axis=-1)
        self.last_weights = weights.data
        ctx = ag.matmul(weights, v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
        return self.o(ctx)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, stream: Stream):
        self.norm = nn.LayerNorm(d)
        self.w1 = nn.Linear(d, hidden, stream.child("w1"))
        self.w2 = nn.Linear(hidden, d, stream.child("w2"))

    def __call__(self, x: Tensor, drop: float, stream) -> Tensor:
        h = ag.swish(self.w1(self.norm(x)))
        if drop:
            h = ag.dropout(h, drop, stream)
        return self.w2(h)


class ConvModule(nn.Module):
    """pointwise -> GLU -> pointwise -> depthwise -> Swish -> pointwise."""

    def __init__(self, d: int, kernel: int, stream: Stream):
        self.norm = nn.LayerNorm(d)
        self.pw1 = nn.Linear(d, 2 * d, stream.child("pw1"))
        self.pw2 = nn.Linear(d, d, stream.child("pw2"))
        self.dw = nn.DepthwiseConv1d(d, kernel, stream.child("dw"))
        self.pw3 = nn.Linear(d, d, stream.child("pw3"))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = ag.glu(self.pw1(self.norm(x)), axis=-1)
        h = ag.mul(self.pw2(h), mask)
        h = ag.swish(self.dw(h))
        return self.pw3(h)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig, stream: Stream):
        self.ffn1 = FeedForward(cfg.d_model, cfg.ffn_dim, stream.child("ffn1"))
        self.att_norm = nn.LayerNorm(cfg.d_model)
        self.att = MultiHeadAttention(cfg.d_model, cfg.heads, stream.child("mhsa"))
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel, stream.child("conv"))
        self.ffn2 = FeedForward(cfg.d_model, cfg.ffn_dim, stream.child("ffn2"))
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.half = cfg.ffn_residual

    def __call__(self, x: Tensor, mask: np.ndarray, bias: np.ndarray, drop: float, stream) -> Tensor:
        def dropped(h):
            return ag.dropout(h, drop, stream) if drop else h

        x = ag.add(x, ag.mul(dropped(self.ffn1(x, drop, stream)), self.half))
        x = ag.add(x, dropped(self.att(self.att_norm(x), self.att_norm(x), bias)))
        x = ag.add(x, dropped(self.conv(x, mask)))
        x = ag.add(x, ag.mul(dropped(self.ffn2(x, drop, stream)), self.half))
        return ag.mul(self.out_norm(x), mask)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig, stream: Stream):
        self.self_norm = nn.LayerNorm(cfg.d_model)
        self.self_att = MultiHeadAttention(cfg.d_model, cfg.heads, stream.child("self"))
        self.src_norm = nn.LayerNorm(cfg.d_model)
        self.src_att = MultiHeadAttention(cfg.d_model, cfg.heads, stream.child("src"))
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, stream.child("ffn"))

    def __call__(self, y: Tensor, memory: Tensor, self_bias, src_bias, drop: float, stream) -> Tensor:
        def dropped(h):
            return ag.dropout(h, drop, stream) if drop else h

        h = self.self_norm(y)
        y = ag.add(y, dropped(self.self_att(h, h, self_bias)))
        y = ag.add(y, dropped(self.src_att(self.src_norm(y), memory, src_bias)))
        return ag.add(y, dropped(self.ffn(y, drop, stream)))


@dataclass
class Encoded:
    states: Tensor  # (B, T', d)
    ctc_log_probs: Tensor  # (B, T', V + 1)
    lengths: list[int]


class ConformerModel(nn.Module):
    def __init__(self, cfg: ConformerConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        root = Stream(seed, "conformer/init")
        C = cfg.subsample_channels
        self.sub1 = nn.Conv2d(1, C, 3, root.child("sub1"), stride=2, padding=1)
        self.sub2 = nn.Conv2d(C, C, 3, root.child("sub2"), stride=2, padding=1)
        self.sub_out = nn.Linear(C * subsampled_length(cfg.feat_dim), cfg.d_model, root.child("sub_out"))
        self.blocks = [EncoderBlock(cfg, root.child(f"enc{i}")) for i in range(cfg.enc_blocks)]
        self.ctc_head = nn.Linear(cfg.d_model, cfg.vocab_size + 1, root.child("ctc"))
        self.embed = nn.Embedding(cfg.decoder_vocab, cfg.d_model, root.child("embed"))
        self.dec_blocks = [DecoderBlock(cfg, root.child(f"dec{i}")) for i in range(cfg.dec_blocks)]
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.dec_out = nn.Linear(cfg.d_model, cfg.decoder_vocab, root.child("dec_out"))
        self._pos = sinusoid_table(cfg.max_positions, cfg.d_model)

    def lhuc_widths(self) -> dict[str, int]:
        widths = {"frontend": self.cfg.d_model}
        widths.update({f"block{i}": self.cfg.d_model for i in range(self.cfg.enc_blocks)})
        return widths

    # ---------------------------------------------------------- encoder

    def encode_batch(self, feats: np.ndarray, lengths, lhuc: dict | None = None,
                     stream: Stream | None = None) -> Encoded:
        cfg = self.cfg
        if feats.ndim != 3 or feats.shape[-1] != cfg.feat_dim:
            raise ag.ShapeError(f"conformer: expected (B, T, {cfg.feat_dim}) features, got {feats.shape}")
        if min(lengths) < cfg.min_input_frames:
            raise ag.ShapeError(
                f"conformer: {min(lengths)} frames cannot survive subsampling (need >= {cfg.min_input_frames})"
            )
        if lhuc is not None:
            unknown = set(lhuc) - set(self.lhuc_widths())
            if unknown:
                raise ag.ShapeError(f"conformer: no LHUC attachment point named {sorted(unknown)}")
        drop = cfg.dropout if self.training else 0.0
        B, T, D = feats.shape
        mask0 = nn.time_mask(lengths, T)
        half = [-(-n // 2) for n in lengths]
        out_lengths = [subsampled_length(n) for n in lengths]
        x = Tensor((feats * mask0).reshape(B, 1, T, D))
        x = ag.relu(self.sub1(x))
        x = ag.mul(x, nn.time_mask(half, x.shape[2]).reshape(B, 1, -1, 1))
        x = ag.relu(self.sub2(x))
        Tp = x.shape[2]
        mask = nn.time_mask(out_lengths, Tp)
        x = ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, Tp, -1))
        x = ag.mul(self.sub_out(x), mask)
        if lhuc is not None and "frontend" in lhuc:
            x = nn.apply_lhuc(x, lhuc["frontend"])
        bias = np.where(mask[:, None, None, :, 0] > 0, 0.0, ag.MASK_VALUE)  # (B, 1, 1, T')
        for i, block in enumerate(self.blocks):
            x = block(x, mask, bias, drop, stream)
            if lhuc is not None and f"block{i}" in lhuc:
                x = nn.apply_lhuc(x, lhuc[f"block{i}"])
        ctc = ag.log_softmax(self.ctc_head(x), axis=-1)
        return Encoded(x, ctc, out_lengths)

    def encode(self, features: FeatureSequence, lhuc: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        enc = self.encode_batch(features.frames[None], [features.num_frames], lhuc)
        ag.check_finite(enc.states, "conformer encoder")
        return enc.states.data[0], enc.ctc_log_probs.data[0]

    # ---------------------------------------------------------- decoder

    def decode_batch(self, memory: Tensor, mem_lengths, inputs: np.ndarray,
                     stream: Stream | None = None) -> Tensor:
        """Teacher-forced decoder: (B, L) input ids -> (B, L, W) log-probabilities."""
        B, L = inputs.shape
        if L > self.cfg.max_positions:
            raise ValueError(f"prefix of length {L} exceeds {self.cfg.max_positions} positions")
        drop = self.cfg.dropout if self.training else 0.0
        y = ag.add(self.embed(inputs), self._pos[:L])
        causal = np.where(np.tril(np.ones((L, L))) > 0, 0.0, ag.MASK_VALUE)[None, None]
        Tm = memory.shape[1]
        src = np.where(np.arange(Tm)[None, :] < np.asarray(mem_lengths)[:, None], 0.0, ag.MASK_VALUE)
        src = src[:, None, None, :]
        for block in self.dec_blocks:
            y = block(y, memory, causal, src, drop, stream)
        return ag.log_softmax(self.dec_out(self.dec_norm(y)), axis=-1)

    def decoder_step(self, states: np.ndarray, prefixes) -> np.ndarray:
        """Next-token log-probabilities for equal-length prefixes (each starting with sos)."""
        prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
        if np.any(prefixes[:, 0] != self.cfg.sos):
            raise ValueError("decoder prefixes must begin with sos")
        n = prefixes.shape[0]
        memory = Tensor(np.broadcast_to(states, (n,) + states.shape))
        out = self.decode_batch(memory, [states.shape[0]] * n, prefixes)
        return out.data[:, -1]

    def teacher_forced(self, states: np.ndarray, token_seqs) -> list[np.ndarray]:
        """Per-sequence (len + 1, W) log-prob rows for sos+tokens predicting tokens+eos."""
        if not token_seqs:
            return []
        L = max(len(s) for s in token_seqs) + 1
        inputs = np.full((len(token_seqs), L), self.cfg.eos, dtype=np.int64)
        for i, s in enumerate(token_seqs):
            inputs[i, 0] = self.cfg.sos
            inputs[i, 1 : len(s) + 1] = s
        memory = Tensor(np.broadcast_to(states, (len(token_seqs),) + states.shape))
        out = self.decode_batch(memory, [states.shape[0]] * len(token_seqs), inputs).data
        return [out[i, : len(s) + 1] for i, s in enumerate(token_seqs)]

    def to_model_labels(self, tokens) -> list[int]:
        return [t + 1 for t in tokens]

    # ----------------------------------------------------------- losses

    def losses(self, feats, lengths, references, lhuc=None, stream=None) -> tuple[Tensor, Tensor]:
        """Per-utterance attention and CTC losses, each shaped (B,)."""
        enc = self.encode_batch(feats, lengths, lhuc, stream)
        labels = [self.to_model_labels(r) for r in references]
        L = max(len(r) for r in labels) + 1
        B = len(labels)
        inputs = np.full((B, L), self.cfg.eos, dtype=np.int64)
        targets = np.full((B, L), self.cfg.eos, dtype=np.int64)
        tmask = np.zeros((B, L))
        for i, lab in enumerate(labels):
            inputs[i, 0] = self.cfg.sos
            inputs[i, 1 : len(lab) + 1] = lab
            targets[i, : len(lab)] = lab
            tmask[i, : len(lab) + 1] = 1.0
        dec = self.decode_batch(enc.states, enc.lengths, inputs, stream)
        att = nll_op(dec, targets, tmask)
        ctc = ctc_loss_op(enc.ctc_log_probs, labels, enc.lengths)
        return att, ctc


def multitask_loss(att: Tensor, ctc: Tensor, lam: float) -> Tensor:
    return ag.add(ag.mul(ag.mean(att), 1.0 - lam), ag.mul(ag.mean(ctc), lam))


def train_seq_system(corpus: Corpus, config: ConformerConfig, hyper: TrainHyper, seed: int
                     ) -> tuple[ConformerModel, TrainLog]:
    hyper.validate()
    train = corpus.splits["train"]
    if not train:
        raise ValueError("training split is empty")
    model = ConformerModel(config, seed)
    params = model.parameters()
    opt = nn.Adam(params, lr=hyper.lr, clip=hyper.clip)
    stream = Stream(seed, "conformer/train")
    history = TrainLog()
    snapshots: list[list[np.ndarray]] = []
    step = 0
    total_steps = hyper.epochs * -(-len(train) // hyper.batch_size)
    for epoch in range(hyper.epochs):
        model.train()
        total, count = 0.0, 0
        for batch in minibatches(len(train), hyper.batch_size, stream.child(f"order{epoch}")):
            utts = [augment(train[i], hyper, stream) for i in batch]
            feats, lengths = pad_batch([u.frames for u in utts])
            att, ctc = model.losses(feats, lengths, [u.reference for u in utts], stream=stream)
            loss = multitask_loss(att, ctc, config.ctc_weight)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"conformer: non-finite loss at epoch {epoch}")
            opt.lr = hyper.lr_at(step, total_steps)
            opt.step(ag.backward(loss))
            step += 1
            total += loss.item() * len(batch)
            count += len(batch)
        history.epoch_loss.append(total / count)
        log.info("conformer epoch %d: loss %.4f", epoch, total / count)
        if epoch >= hyper.epochs - hyper.average_last:
            snapshots.append([p.data.copy() for p in params])
    if len(snapshots) > 1:
        for i, p in enumerate(params):
            p.data = sum(s[i] for s in snapshots) / len(snapshots)
    model.eval()
    return model, history


def save_conformer(model: ConformerModel, path, extra: dict | None = None) -> None:
    nn.save_checkpoint(path, "conformer", model.cfg.to_dict(), model.state_arrays(), extra)


def load_conformer(path) -> ConformerModel:
    header, state = nn.load_checkpoint(path)
    if header["kind"] != "conformer":
        raise ValueError(f"{path}: checkpoint kind {header['kind']!r} is not conformer")
    model = ConformerModel(ConformerConfig.from_dict(header["config"]), 0)
    model.load_state_arrays(state)
    return model.eval()
