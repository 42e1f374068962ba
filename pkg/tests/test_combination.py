import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xsyscomb.adaptation import AdaptHyper, VariationalLhuc
from xsyscomb.combination import (
    DEFAULT_GRID, CombinationConfig, CombinationError, adapt_system, combined_csv, cross_adapt,
    nbest_depth_study, parse_grid, rescore_corpus, rescore_ranking, speaker_sets, two_pass_rescore, weight_sweep,
)
from xsyscomb.evaluation import corpus_wer
from xsyscomb.decoding import DecodeConfig, Hypothesis, NBestList, System
from xsyscomb.rng import Stream
from xsyscomb.tdnn import TdnnModel

from conftest import TINY_TDNN, random_utterance


def _list(uid, s_cfm, s_tdnn, tokens=None):
    tokens = tokens or [(i,) for i in range(len(s_cfm))]
    return NBestList(uid, [Hypothesis(tuple(t), td, c, i) for i, (t, c, td) in enumerate(zip(tokens, s_cfm, s_tdnn))])


def test_worked_example():
    out = two_pass_rescore(_list("u", [2.0, 1.0], [1.0, 3.0]), 0.3)
    # 0.3 * 2 + 0.7 * 1 and 0.3 * 1 + 0.7 * 3
    assert np.allclose(out.combined, [1.3, 2.4], rtol=0, atol=1e-15)
    assert out.index == 0 and out.tokens == (0,)


@pytest.mark.parametrize("seed", range(20))
def test_endpoints_reproduce_single_system_rankings(seed):
    s = Stream(seed, "endpoints")
    s_cfm, s_tdnn = s.normal((12,)), s.normal((12,))
    assert rescore_ranking(s_cfm, s_tdnn, 0.0) == [int(i) for i in np.argsort(s_tdnn, kind="stable")]
    assert rescore_ranking(s_cfm, s_tdnn, 1.0) == [int(i) for i in np.argsort(s_cfm, kind="stable")]


@given(seed=st.integers(0, 10_000), a=st.floats(1e-3, 1e3), beta=st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_positive_rescaling_keeps_the_winner(seed, a, beta):
    s = Stream(seed, "scale")
    s_cfm, s_tdnn = s.normal((8,)), s.normal((8,))
    assert rescore_ranking(s_cfm, s_tdnn, beta)[0] == rescore_ranking(a * s_cfm, a * s_tdnn, beta)[0]


def test_ties_fall_back_to_first_pass_rank():
    nb = NBestList("u", [Hypothesis((0,), 1.0, 1.0, 1), Hypothesis((1,), 1.0, 1.0, 0)])
    assert two_pass_rescore(nb, 0.5).tokens == (1,)


def test_hypotheses_without_both_scores_are_dropped():
    nb = NBestList("u", [Hypothesis((0,), 0.1, None, 0), Hypothesis((1,), 2.0, 2.0, 1)])
    out = two_pass_rescore(nb, 0.3)
    assert out.tokens == (1,) and out.dropped == 1


def test_empty_list_is_an_error_naming_the_utterance():
    with pytest.raises(CombinationError, match="utt-7"):
        two_pass_rescore(NBestList("utt-7", [Hypothesis((0,), 1.0, None, 0)]), 0.3)
    with pytest.raises(CombinationError, match="utt-8"):
        two_pass_rescore(NBestList("utt-8", []), 0.3)


def test_beta_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        two_pass_rescore(_list("u", [1.0], [1.0]), 1.5)
    with pytest.raises(ValueError):
        CombinationConfig(beta=-0.1).validate()


def test_parse_grid():
    assert parse_grid("0:1:0.1") == DEFAULT_GRID
    assert parse_grid("0.2,0.5") == (0.2, 0.5)


def test_combined_csv_columns():
    text = combined_csv(rescore_corpus([_list("b", [1.0], [2.0]), _list("a", [3.0], [1.0])], 0.5))
    lines = text.splitlines()
    assert lines[0] == "utt_id,tokens,beta,score_cfm,score_tdnn,combined,index"
    assert [l.split(",")[0] for l in lines[1:]] == ["a", "b"]


# ---------------------------------------------------------------- studies


def _corpus_lists(seed=0, n_utts=12, depth=30):
    s = Stream(seed, "lists")
    lists, refs = [], {}
    for u in range(n_utts):
        uid = f"u{u:02d}"
        refs[uid] = tuple(s.integers(0, 5, (3,)).tolist())
        toks = [refs[uid]] + [tuple(s.integers(0, 5, (int(s.integer(1, 5)),)).tolist()) for _ in range(depth - 1)]
        toks = list(dict.fromkeys(toks))
        order = s.permutation(len(toks))
        toks = [toks[i] for i in order]
        lists.append(_list(uid, s.normal((len(toks),)).tolist(), np.sort(s.normal((len(toks),))).tolist(), toks))
    return lists, refs


def test_sweep_endpoints_match_standalone_rankings():
    lists, refs = _corpus_lists()
    rows = weight_sweep(lists, DEFAULT_GRID, refs)
    assert [r.beta for r in rows] == list(DEFAULT_GRID)
    for beta, row in ((0.0, rows[0]), (1.0, rows[-1])):
        attr = "score_tdnn" if beta == 0.0 else "score_cfm"
        hyps = {nb.utterance_id: min(nb.hypotheses, key=lambda h: (getattr(h, attr), h.rank_origin)).tokens
                for nb in lists}
        assert row.wer == corpus_wer(refs, hyps).wer
    assert sum(r.best for r in rows) == 1
    assert min(rows, key=lambda r: r.wer).best


def test_sweep_is_pure():
    lists, refs = _corpus_lists(1)
    assert weight_sweep(lists, DEFAULT_GRID, refs) == weight_sweep(lists, DEFAULT_GRID, refs)


def test_oracle_wer_is_monotone_in_depth():
    lists, refs = _corpus_lists(2)
    rows = nbest_depth_study(lists, (1, 5, 10, 25), 0.3, refs)
    oracles = [r.oracle_wer for r in rows]
    assert all(b <= a for a, b in zip(oracles, oracles[1:]))
    assert [r.depth for r in rows] == [1, 5, 10, 25]


# ------------------------------------------------------- cross adaptation


def test_cross_adaptation_with_references_is_plain_adaptation():
    model = TdnnModel(TINY_TDNN, 1).eval()
    system = System("tdnn", model, None, DecodeConfig(3))
    adapt = [random_utterance(10, 4, i, speaker=f"s{i % 2}", tokens=(i % 3, (i + 1) % 3)) for i in range(6)]
    test = [random_utterance(10, 4, 100 + i, speaker=f"s{i % 2}") for i in range(4)]
    refs = {u.utterance_id: u.reference for u in adapt}
    hyper = AdaptHyper(epochs=2)
    res = cross_adapt(system, system, adapt, test, hyper, 5, method="lhuc", source_decodes=refs)
    plain, _ = adapt_system(system, speaker_sets(adapt, refs, "reference"), "lhuc", hyper, 5, "plain")
    assert res.supervision_wer == 0.0
    for spk in plain.lhuc:
        for k in plain.lhuc[spk]:
            assert np.array_equal(plain.lhuc[spk][k], res.lhuc[spk][k])
    assert [nb.utterance_id for nb in res.decodes] == sorted(u.utterance_id for u in test)


def test_cross_adaptation_defaults_to_bayesian_for_the_frame_model():
    model = TdnnModel(TINY_TDNN, 2).eval()
    system = System("tdnn", model, None, DecodeConfig(2))
    adapt = [random_utterance(10, 4, i, speaker="s") for i in range(2)]
    res = cross_adapt(system, system, adapt, adapt, AdaptHyper(epochs=1), 0)
    assert isinstance(res.transforms["s"], VariationalLhuc)
    with pytest.raises(ValueError):
        adapt_system(system, {}, "fmllr", AdaptHyper(), 0, "x")
