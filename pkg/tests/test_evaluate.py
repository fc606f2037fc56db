import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aphasiakit.corpus import UtteranceRecord
from aphasiakit.evaluate import (ABSTAIN, APH, NONAPH, Confusion, EmptyReference, Prediction,
                                 detection_report, edit_ops, evaluate_predictions, interctc_detect,
                                 majority_vote, resolve_sentence_tag, wer)
from aphasiakit.ctc import NEG
from aphasiakit.model import Vocabulary, insert_tags


def _levenshtein(a, b):
    """Plain recursive-free DP distance used as an independent oracle."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------- WER


def test_identical_sequences():
    st_ = wer(["a", "b"], ["a", "b"])
    assert st_.wer == 0 and st_.errors == 0


def test_wer_hand_example():
    st_ = wer(["a", "b", "c"], ["a", "x", "c", "d"])
    assert (st_.substitutions, st_.insertions, st_.deletions) == (1, 1, 0)
    assert st_.wer == pytest.approx(2 / 3)


def test_tags_excluded_from_wer():
    assert wer(["[APH]", "a"], ["[NONAPH]", "a"]).wer == 0


def test_substitution_preferred_over_insert_delete():
    assert edit_ops(["a"], ["b"]) == (1, 0, 0)
    assert edit_ops(["a", "b"], ["c", "d"]) == (2, 0, 0)


def test_empty_reference():
    with pytest.raises(EmptyReference):
        wer(["[APH]"], ["a"])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcd"), max_size=8))
def test_edit_counts_are_a_minimal_script(ref, hyp):
    S, I, D = edit_ops(ref, hyp)
    assert S + I + D == _levenshtein(ref, hyp)
    assert len(ref) - D + I == len(hyp)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=7), st.lists(st.sampled_from("abc"), max_size=7),
       st.booleans(), st.booleans(), st.sampled_from(["prepend", "append", "both"]))
def test_wer_invariant_under_tag_insertion(ref, hyp, y, y2, mode):
    base = wer(ref, hyp)
    tagged = wer(insert_tags(ref, y, mode), insert_tags(hyp, y2, mode))
    assert (tagged.substitutions, tagged.insertions, tagged.deletions, tagged.ref_words) == \
        (base.substitutions, base.insertions, base.deletions, base.ref_words)


# ---------------------------------------------------------------- detection


def test_resolve_examples():
    assert resolve_sentence_tag(["[APH]", "w"]) == APH
    assert resolve_sentence_tag(["w"]) == ABSTAIN
    assert resolve_sentence_tag(["[APH]", "w", "[NONAPH]"]) == ABSTAIN
    assert resolve_sentence_tag(["[NONAPH]", "w", "[NONAPH]"]) == NONAPH


def _one_hot(ids, V):
    x = np.full((len(ids), V), NEG)
    x[np.arange(len(ids)), ids] = 0.0
    return x


def test_interctc_detect_examples():
    v = Vocabulary(["w1", "w2"])
    w1, w2 = v.index["w1"], v.index["w2"]
    assert interctc_detect(_one_hot([v.aph, 0, w1], len(v)), v) == APH
    assert interctc_detect(_one_hot([w1, 0, w2], len(v)), v) == ABSTAIN
    assert interctc_detect(_one_hot([0, v.nonaph, v.nonaph], len(v)), v) == NONAPH
    assert interctc_detect(_one_hot([w1, v.nonaph, v.aph], len(v)), v) == NONAPH


def test_majority_vote_examples():
    assert majority_vote([APH, APH, NONAPH]) == APH
    assert majority_vote([APH, NONAPH]) == APH
    assert majority_vote([NONAPH] * 7) == NONAPH
    assert majority_vote([ABSTAIN, ABSTAIN]) == APH
    assert majority_vote([ABSTAIN, ABSTAIN, NONAPH]) == NONAPH


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([APH, NONAPH, ABSTAIN]), min_size=1, max_size=12), st.integers(0, 1000))
def test_majority_vote_ignores_order(labels, seed):
    shuffled = list(labels)
    random.Random(seed).shuffle(shuffled)
    assert majority_vote(shuffled) == majority_vote(labels)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from([APH, NONAPH, ABSTAIN])), min_size=1,
                max_size=30))
def test_report_counts_are_consistent(rows):
    speakers = [f"s{s}" for s, _ in rows]
    truths = [s % 2 == 0 for s, _ in rows]
    labels = [lab for _, lab in rows]
    rep = detection_report(speakers, truths, labels)
    c = rep.sentence_confusion
    assert c.total == len(rows)
    assert rep.sentence_accuracy == (c.tp + c.tn) / c.total
    assert sum(sum(v.values()) for v in rep.votes.values()) == len(rows)
    assert rep.speaker_confusion.total == len(set(speakers))
    assert 0 <= rep.sentence_accuracy_raw <= rep.sentence_accuracy + 1e-12
    assert 0 <= rep.speaker_accuracy <= 1


def test_raw_accuracy_counts_abstain_as_error():
    rep = detection_report(["a", "b"], [True, False], [ABSTAIN, ABSTAIN])
    assert rep.sentence_accuracy == 0.5  # ABSTAIN -> APH: right for a, wrong for b
    assert rep.sentence_accuracy_raw == 0.0
    assert rep.abstain_rate == 1.0


def test_confusion_accuracy():
    c = Confusion(tp=3, fp=1, tn=4, fn=2)
    assert c.accuracy == 7 / 10


# ---------------------------------------------------------------- full report


def _corpus(rng, n_spk=6, per=4):
    recs = []
    sevs = ["mild", "moderate", "severe", "very_severe"]
    for s in range(n_spk):
        aph = s < n_spk // 2
        for u in range(per):
            toks = [str(x) for x in rng.choice(list("abcde"), size=int(rng.integers(1, 6)))]
            recs.append(UtteranceRecord(f"s{s}_{u}", f"s{s}", toks, 1.0, aph, 60.0 if aph else None,
                                        sevs[s % 4] if aph else "control"))
    return recs


def test_perfect_predictions():
    recs = _corpus(np.random.default_rng(0))
    preds = {r.utt_id: Prediction(r.utt_id, insert_tags(r.tokens, r.aphasia, "both"),
                                  interctc_labels={2: APH if r.aphasia else NONAPH}) for r in recs}
    rep = evaluate_predictions(recs, preds)
    assert rep["overall_wer"] == 0
    assert rep["sentence_acc"] == 1.0 and rep["speaker_acc"] == 1.0
    assert rep["detectors"]["interctc_layer2"]["speaker_acc"] == 1.0


def test_constant_aph_on_balanced_speakers():
    recs = _corpus(np.random.default_rng(1))
    preds = {r.utt_id: Prediction(r.utt_id, ["[APH]"] + r.tokens) for r in recs}
    rep = evaluate_predictions(recs, preds)
    assert rep["speaker_acc"] == 0.5
    assert rep["sentence_acc"] == 0.5


def test_per_severity_wer_recombines_to_overall():
    rng = np.random.default_rng(2)
    recs = _corpus(rng, n_spk=10, per=5)
    preds = {}
    for r in recs:
        hyp = list(r.tokens)
        if rng.random() < 0.6 and hyp:
            hyp[int(rng.integers(len(hyp)))] = "zz"
        if rng.random() < 0.3:
            hyp.append("q")
        preds[r.utt_id] = Prediction(r.utt_id, hyp)
    rep = evaluate_predictions(recs, preds, tag_detector=False)
    stats = rep["per_severity_stats"]
    errors = sum(s["substitutions"] + s["insertions"] + s["deletions"] for s in stats.values())
    words = sum(s["ref_words"] for s in stats.values())
    weighted = sum(rep["per_severity"][k] * stats[k]["ref_words"] for k in stats if stats[k]["ref_words"])
    assert abs(errors / words - rep["overall_wer"]) < 1e-12
    assert abs(weighted / words - rep["overall_wer"]) < 1e-12
    assert "sentence_acc" not in rep


def test_report_keys():
    recs = _corpus(np.random.default_rng(3))
    preds = {r.utt_id: Prediction(r.utt_id, r.tokens) for r in recs}
    rep = evaluate_predictions(recs, preds)
    for key in ("overall_wer", "per_severity", "sentence_acc", "speaker_acc", "confusion", "abstain_rate"):
        assert key in rep
    assert set(rep["per_severity"]) == {"mild", "moderate", "severe", "very_severe", "control"}
    assert rep["abstain_rate"] == 1.0
