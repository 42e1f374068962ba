import itertools
import math

import numpy as np
import pytest

from xsyscomb import autograd as ag
from xsyscomb.autograd import Tensor, grad_check
from xsyscomb.losses import (
    CTCInfeasibleError, LossBreakdown, MultitaskConfig, attention_ce, breakdown, collapse, ctc_batch, ctc_loss,
    ctc_loss_op, ctc_oracle, ctc_score, min_ctc_frames, multitask, nll_op,
)
from xsyscomb.rng import Stream


def random_log_probs(T, K, seed):
    x = Stream(seed, "ctc").normal((T, K)) * 2
    return x - np.log(np.exp(x).sum(1, keepdims=True))


def test_single_frame_single_label():
    lp = np.log(np.full((1, 2), 0.5))
    loss, _ = ctc_loss(lp, [1])
    assert loss == pytest.approx(-math.log(0.5), abs=1e-15)


def test_empty_label_is_all_blank_path():
    lp = random_log_probs(6, 4, 1)
    assert ctc_loss(lp, [])[0] == pytest.approx(-lp[:, 0].sum(), abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_matches_path_enumeration(seed):
    s = Stream(seed, "labels")
    lp = random_log_probs(5, 4, seed)
    n = s.integer(1, 4)
    labels = [s.integer(1, 4) for _ in range(n)]
    if min_ctc_frames(labels) > 5:
        labels = labels[:2]
    assert abs(ctc_loss(lp, labels)[0] - ctc_oracle(lp, labels)) < 1e-10


def test_infeasible_labels_raise():
    lp = random_log_probs(3, 3, 0)
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(lp, [1, 1, 2])  # needs a blank between the repeats: 4 frames
    assert min_ctc_frames([1, 1, 2]) == 4


def test_probabilities_normalize():
    for T, V in ((3, 2), (4, 2), (4, 1)):
        lp = random_log_probs(T, V + 1, T * 10 + V)
        total = 0.0
        for n in range(T + 1):
            for labels in itertools.product(range(1, V + 1), repeat=n):
                if min_ctc_frames(labels) <= T:
                    total += math.exp(-ctc_score(lp, labels))
        assert total == pytest.approx(1.0, abs=1e-8)


def test_oracle_refuses_large_instances():
    with pytest.raises(ValueError):
        ctc_oracle(np.zeros((9, 3)), [1])


def test_collapse():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == (1, 1, 2)


def test_ctc_gradient_wrt_logits():
    labels = [[1, 2]]

    def f(logits):
        lp = ag.log_softmax(ag.reshape(logits, (1, 4, 3)), axis=-1)
        return ag.tsum(ctc_loss_op(lp, labels, [4]))

    assert grad_check(f, Stream(2, "logits").normal((4, 3))) < 1e-4


def test_batched_ctc_handles_padding():
    lp = np.stack([random_log_probs(6, 4, 1), random_log_probs(6, 4, 2)])
    lp[1, 4:] = 0.0  # padding beyond the second length
    losses, grad = ctc_batch(lp, [[1, 2], [3]], [6, 4])
    assert losses[0] == pytest.approx(ctc_oracle(lp[0], [1, 2]), abs=1e-10)
    assert losses[1] == pytest.approx(ctc_oracle(lp[1, :4], [3]), abs=1e-10)
    assert np.all(grad[1, 4:] == 0.0)


# -------------------------------------------------------------- attention


def test_attention_ce_one_hot_is_zero():
    rows = np.full((3, 4), -800.0)  # exp underflows to exactly 0
    rows[[0, 1, 2], [2, 0, 3]] = 0.0
    loss, _ = attention_ce(rows, [2, 0, 3])
    assert loss == 0.0


def test_attention_ce_uniform():
    L, W = 5, 7
    loss, _ = attention_ce(np.full((L, W), -math.log(W)), [1, 2, 3, 4, 6])
    assert loss == pytest.approx(L * math.log(W), rel=1e-14)


def test_attention_ce_length_mismatch():
    with pytest.raises(ValueError):
        attention_ce(np.zeros((3, 4)), [1, 2])


def test_attention_ce_gradient_wrt_logits():
    targets = np.array([[1, 3, 0]])

    def f(logits):
        lp = ag.log_softmax(ag.reshape(logits, (1, 3, 4)), axis=-1)
        return ag.tsum(nll_op(lp, targets, np.ones((1, 3))))

    assert grad_check(f, Stream(3, "att").normal((3, 4))) < 1e-6


def test_nll_op_matches_attention_ce_with_smoothing():
    lp = random_log_probs(4, 5, 9)
    for smoothing in (0.0, 0.1):
        ref, _ = attention_ce(lp, [1, 0, 4, 2], smoothing)
        got = nll_op(Tensor(lp[None]), np.array([[1, 0, 4, 2]]), np.ones((1, 4)), smoothing).item()
        assert got == pytest.approx(ref, rel=1e-14)


# --------------------------------------------------------------- multitask


def test_multitask_examples():
    assert multitask(2.0, 7.0) == pytest.approx(3.0, abs=1e-15)
    assert multitask(2.0, 7.0, MultitaskConfig(0.0)) == 2.0
    assert multitask(2.0, 7.0, MultitaskConfig(1.0)) == 7.0
    b = breakdown(1.5, 4.0)
    assert isinstance(b, LossBreakdown) and abs(b.total - (0.8 * 1.5 + 0.2 * 4.0)) < 1e-12
    with pytest.raises(ValueError):
        MultitaskConfig(1.2)
