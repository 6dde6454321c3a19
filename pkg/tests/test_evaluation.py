import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidefuse.evaluation import ConfusionCounts, evaluate
from slidefuse.model import GroundTruthMatches, MatchPair, MatchSet

from oracles import recount_confusion


def predicted(pairs, src="A", tgt="B"):
    return MatchSet(
        source_slide=src,
        target_slide=tgt,
        direction="bidirectional",
        pairs=tuple(MatchPair(g, h, 0.0) for g, h in pairs),
    )


TRUTH = GroundTruthMatches(
    slide_ids=("A", "B"),
    rows=(
        {"A": "g1", "B": "h1"},
        {"A": "g2", "B": "h2"},
        {"A": "g3"},
        {"B": "h3"},
    ),
)


class TestEvaluate:
    def test_mixed_prediction(self):
        m = evaluate(predicted([("g1", "h1"), ("g2", "h3")]), TRUTH)
        assert (m.counts.tp, m.counts.fp, m.counts.fn) == (1, 1, 1)
        assert m.sensitivity == 0.5
        assert m.precision == 0.5

    def test_unpaired_unmatched_is_tn(self):
        m = evaluate(predicted([("g1", "h1"), ("g2", "h2")]), TRUTH)
        # g3 and h3 are unpaired in truth and untouched by the prediction
        assert m.counts.tn == 2
        assert m.specificity == 1.0
        assert m.npv == 1.0

    def test_perfect_prediction(self):
        m = evaluate(predicted([("g1", "h1"), ("g2", "h2")]), TRUTH)
        assert m.sensitivity == 1.0
        assert m.precision == 1.0
        assert m.counts.fp == 0
        assert m.counts.fn == 0

    def test_matched_unpaired_landmark_is_fp_not_tn(self):
        m = evaluate(predicted([("g1", "h1"), ("g3", "h3")]), TRUTH)
        assert m.counts.fp == 1
        assert m.counts.tn == 0  # both unpaired landmarks were (wrongly) used
        assert m.counts.fn == 1  # (g2, h2) was missed

    def test_empty_prediction_has_undefined_precision(self):
        m = evaluate(predicted([]), TRUTH)
        assert m.precision is None
        assert m.sensitivity == 0.0
        assert m.counts.tn == 2

    def test_all_paired_truth_has_undefined_specificity(self):
        truth = GroundTruthMatches(
            slide_ids=("A", "B"), rows=({"A": "g1", "B": "h1"},)
        )
        m = evaluate(predicted([("g1", "h1")]), truth)
        assert m.specificity is None
        assert m.npv is None

    def test_unknown_id_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            evaluate(predicted([("zz", "h1")]), TRUTH)
        with pytest.raises(ValueError, match="unknown"):
            evaluate(predicted([("g1", "zz")]), TRUTH)

    def test_slide_mismatch_rejected(self):
        with pytest.raises(ValueError, match="not covered"):
            evaluate(predicted([("g1", "h1")], src="A", tgt="C"), TRUTH)

    def test_tp_plus_fn_is_truth_size(self):
        m = evaluate(predicted([("g1", "h1"), ("g2", "h3")]), TRUTH)
        assert m.counts.tp + m.counts.fn == len(TRUTH.pairs("A", "B"))

    def test_counts_must_be_nonnegative(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1, fp=0, fn=0, tn=0)

    @given(seed=st.integers(0, 100_000))
    @settings(max_examples=150, deadline=None)
    def test_matches_set_operation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_pairs = int(rng.integers(1, 10))
        n_only_a = int(rng.integers(0, 5))
        n_only_b = int(rng.integers(0, 5))
        rows = [{"A": f"g{i}", "B": f"h{i}"} for i in range(n_pairs)]
        rows += [{"A": f"g{n_pairs + i}"} for i in range(n_only_a)]
        rows += [{"B": f"h{n_pairs + i}"} for i in range(n_only_b)]
        truth = GroundTruthMatches(slide_ids=("A", "B"), rows=tuple(rows))

        a_ids = sorted(truth.universe("A"))
        b_ids = sorted(truth.universe("B"))
        k = int(rng.integers(0, min(len(a_ids), len(b_ids)) + 1))
        pred_pairs = list(
            zip(rng.permutation(a_ids)[:k], rng.permutation(b_ids)[:k])
        )
        m = evaluate(predicted(pred_pairs), truth)
        only_a, only_b = truth.unpaired_ids("A", "B")
        tp, fp, fn, tn = recount_confusion(
            pred_pairs, truth.pairs("A", "B"), only_a, only_b
        )
        assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == (tp, fp, fn, tn)

    def test_role_swap_symmetry(self):
        m_fwd = evaluate(predicted([("g1", "h1"), ("g2", "h3")]), TRUTH)
        swapped = MatchSet(
            source_slide="B",
            target_slide="A",
            direction="bidirectional",
            pairs=(MatchPair("h1", "g1", 0.0), MatchPair("h3", "g2", 0.0)),
        )
        m_bwd = evaluate(swapped, TRUTH)
        assert m_fwd.counts == m_bwd.counts
