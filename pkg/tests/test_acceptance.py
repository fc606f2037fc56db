"""Acceptance checks A1-A8.

Each test records a one-line detail; the terminal summary prints one
PASS/FAIL line per criterion (see conftest.py). Run alone with

    pytest tests/test_acceptance.py -v
"""

import importlib.util
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
from hypothesis import given, settings, strategies as st

from aphasiakit import autodiff as ad
from aphasiakit import chat, corpus
from aphasiakit.cli import run as cli_run
from aphasiakit.corpus import Severity, SplitSpec, UtteranceRecord, classify_severity
from aphasiakit.ctc import NEG, ctc_greedy, ctc_loss
from aphasiakit.decode import joint_beam_search
from aphasiakit.evaluate import wer
from aphasiakit.model import ModelConfig, Vocabulary, compute_loss, decode_step, encode, init_params, \
    insert_tags, strip_tags

from oracles import brute_force_ctc_logprob, brute_force_joint, central_diff, random_lattice, rel_err
from toy import toy_batch, toy_model

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures"


# ---------------------------------------------------------------- A1


def test_A1_ctc_matches_enumeration_and_finite_differences(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst_nll = worst_grad = 0.0
    n_inf = 0
    n = 1000
    for _ in range(n):
        T, V = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        K = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, V, size=K)]
        logp = random_lattice(rng, T, V)
        res = ctc_loss(logp, target)
        ref = -brute_force_ctc_logprob(logp, target)
        if np.isinf(ref):
            assert np.isinf(res.neg_log_likelihood) and not res.feasible
            n_inf += 1
            continue
        worst_nll = max(worst_nll, abs(res.neg_log_likelihood - ref))
        fd = central_diff(lambda x: ctc_loss(x, target).neg_log_likelihood, logp, 1e-5)
        worst_grad = max(worst_grad, rel_err(res.grad_logp, fd).max())
    secs = time.time() - t0
    criterion(f"{n} instances ({n_inf} infeasible), max |nll err| {worst_nll:.1e}, "
              f"max grad rel err {worst_grad:.1e}, {secs:.1f}s")
    assert worst_nll < 1e-9
    assert worst_grad < 1e-5
    assert secs < 60


# ---------------------------------------------------------------- A2


def _loss(lam, alpha, taps, seed, **over):
    targets = ("tag_prefixed_tokens",) * len(taps)
    cfg, vocab, params = toy_model(seed=seed, interctc_layers=taps, interctc_targets=targets, num_layers=3,
                                   tag_mode="both", ctc_weight=lam, interctc_weight=alpha, **over)
    return compute_loss(toy_batch(np.random.default_rng(seed)), params, cfg, vocab)


def test_A2_multitask_loss_composition(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    tap_sets = [(), (1,), (2,), (1, 2)]
    for _ in range(100):
        lam, alpha = (float(x) for x in rng.uniform(size=2))
        taps = tap_sets[int(rng.integers(len(tap_sets)))]
        lb = _loss(lam, alpha, taps, int(rng.integers(1000)))
        ctc_term = lb.l_ctc if not taps else alpha * lb.l_inter + (1 - alpha) * lb.l_ctc
        worst = max(worst, abs(lb.l_total - (lam * ctc_term + (1 - lam) * lb.l_dec)))
        if taps:
            worst = max(worst, abs(lb.l_inter - np.mean([lb.l_inter_layers[e] for e in taps])))
    ends = [
        _loss(0.0, 0.3, (1,), 1).l_total == _loss(0.0, 0.3, (1,), 1).l_dec,
        (lambda b: b.l_total == b.l_ctc)(_loss(1.0, 0.3, (), 2)),
        (lambda b: abs(b.l_total - b.l_inter) < 1e-12)(_loss(1.0, 1.0, (1,), 3)),
        abs(_loss(0.4, 0.0, (1,), 4, interctc_condition=False).l_total - _loss(0.4, 0.0, (), 4).l_total) < 1e-12,
    ]
    criterion(f"100 random (lambda, alpha, taps) draws, max err {worst:.1e}; endpoints {sum(ends)}/4")
    assert worst < 1e-12
    assert all(ends)


# ---------------------------------------------------------------- A3


def _decode_setup(seed, T, words):
    vocab = Vocabulary(list(words))
    cfg = ModelConfig(input_dim=3, vocab_size=len(vocab), num_layers=1, hidden=8, heads=2, mlp_units=8,
                      decoder_layers=1, decoder_ffn=8)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    hidden = encode(rng.normal(size=(T, 3)), params, cfg).hidden.data[0]
    return vocab, cfg, params, hidden, random_lattice(rng, T, len(vocab))


def test_A3_joint_beam_search_is_exact(criterion):
    n_exact = n_cases = 0
    for seed in range(10):
        vocab, cfg, params, hidden, lattice = _decode_setup(seed, 4, ("a",))
        allowed = [c for c in range(len(vocab)) if c not in (0, vocab.eos)]
        assert len(allowed) + 1 <= 5

        @lru_cache(maxsize=None)
        def dec(prefix):
            return decode_step(hidden, (vocab.sos,) + prefix, params, cfg)

        for w in (0.7, 0.5, 0.3):
            best, score = brute_force_joint(dec, lattice, allowed, vocab.eos, 4, w)
            res = joint_beam_search(hidden, 4, lattice, params, cfg, vocab, beam=10_000, decode_weight=w,
                                    max_len=4)
            n_cases += 1
            n_exact += res.best.tokens == best and abs(res.best.joint_score - score) < 1e-9

    n_modes = n_mode_ok = 0
    for seed in range(5):
        vocab, cfg, params, hidden, lattice = _decode_setup(seed, 5, ("a", "b", "c"))
        prefix = ()
        for _ in range(5):
            logp = decode_step(hidden, (vocab.sos,) + prefix, params, cfg)
            logp[0] = -np.inf
            nxt = int(np.argmax(logp))
            if nxt == vocab.eos:
                break
            prefix += (nxt,)
        res = joint_beam_search(hidden, 5, lattice, params, cfg, vocab, beam=1, decode_weight=1.0, max_len=5)
        n_modes += 1
        n_mode_ok += res.best.tokens == prefix

        rng = np.random.default_rng(50 + seed)
        emit = [c for c in range(len(vocab)) if c != vocab.eos]
        path = [int(x) for x in rng.choice(emit, size=5)]
        one_hot = np.full((5, len(vocab)), NEG)
        one_hot[np.arange(5), path] = 0.0
        res = joint_beam_search(hidden, 5, one_hot, params, cfg, vocab, beam=4, decode_weight=0.0)
        n_modes += 1
        n_mode_ok += list(res.best.tokens) == ctc_greedy(one_hot)
    criterion(f"exhaustive search = brute force on {n_exact}/{n_cases} cases; "
              f"pure-decoder/pure-CTC modes {n_mode_ok}/{n_modes}")
    assert n_exact == n_cases
    assert n_mode_ok == n_modes


# ---------------------------------------------------------------- A4

_CATEGORIES = ["[/]", "[//]", "[x ", "&-", "&+", "&=", "@", "[+ ", "[%", "(.)", "[<]", "[>]", "xxx", "www",
               "+..."]


def test_A4_golden_chat_corpus_is_reproducible(criterion, tmp_path):
    text = (FIXTURES / "chat" / "golden.cha").read_text(encoding="utf-8")
    expected = (FIXTURES / "chat" / "golden.expected.jsonl").read_text(encoding="utf-8")
    doc = chat.parse_chat(text)
    missing = [c for c in _CATEGORIES if c not in text]
    outs = {(run, jobs): chat.to_jsonl(chat.clean_document(doc, jobs=jobs)) for run in range(2)
            for jobs in (1, 2, 4, 8)}
    in_mem = len(set(outs.values())) == 1 and outs[(0, 1)] == expected

    d = tmp_path / "chat"
    d.mkdir()
    (d / "golden.cha").write_text(text, encoding="utf-8")
    files = []
    for jobs in ("1", "4"):
        out = tmp_path / f"clean{jobs}.jsonl"
        assert cli_run(["prepare", "--chat-dir", str(d), "--out", str(out), "--jobs", jobs]) == 0
        files.append(out.read_bytes())
    criterion(f"{len(doc.utterances)} utterances, {len(expected.splitlines())} kept; "
              f"8 in-memory runs identical={in_mem}; CLI jobs 1/4 byte-identical={files[0] == files[1]}")
    assert len(doc.utterances) >= 25
    assert len(expected.splitlines()) < len(doc.utterances)  # some tiers are empty after cleaning
    assert not missing, missing
    assert in_mem
    assert files[0] == files[1]


# ---------------------------------------------------------------- A5


def _experiment_module():
    spec = importlib.util.spec_from_file_location("run_synthetic_experiment",
                                                  ROOT / "scripts" / "run_synthetic_experiment.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_A5_synthetic_end_to_end(criterion):
    mod = _experiment_module()
    t0 = time.time()
    res = mod.run(mod.ExperimentConfig())
    secs = time.time() - t0
    dets = res["detectors"]
    criterion(f"WER {res['wer']:.4f}; " + ", ".join(
        f"{k} sent {v['sentence_acc']:.3f} spk {v['speaker_acc']:.3f}" for k, v in sorted(dets.items()))
        + f"; {secs:.0f}s")
    assert res["wer"] <= 0.05
    assert {"tag", "interctc_layer2"} <= set(dets)
    for v in dets.values():
        assert v["sentence_acc"] >= 0.95
        assert v["speaker_acc"] == 1.0
    assert secs < 15 * 60


# ---------------------------------------------------------------- A6


def _stratum(n, severity, aphasia):
    aq = {"mild": 90.0, "moderate": 60.0, "severe": 40.0, "very_severe": 10.0}.get(severity)
    return [UtteranceRecord(f"{severity}{s:03d}_{u}", f"{severity}{s:03d}", ["a"], 1.0, aphasia, aq, severity)
            for s in range(n) for u in range(2)]


def test_A6_boundaries_split_and_schedule(criterion):
    cases = {0.0: Severity.VERY_SEVERE, 25.0: Severity.VERY_SEVERE, 25.01: Severity.SEVERE,
             50.0: Severity.SEVERE, 75.0: Severity.MODERATE, 75.01: Severity.MILD, 100.0: Severity.MILD}
    sev_ok = all(classify_severity(aq, True) is want for aq, want in cases.items())

    recs = []
    for sev in corpus.SEVERITY_ORDER:
        recs += _stratum(100, sev, sev != "control")
    parts = corpus.stratified_split(recs, SplitSpec((0.56, 0.19, 0.25), 0))
    counts = {sev: [len({r.speaker_id for r in p if r.severity == sev}) for p in parts]
              for sev in corpus.SEVERITY_ORDER}
    split_ok = all(c == [56, 19, 25] for c in counts.values())

    durs = [0.0, 0.29, 0.2999, 0.3, 5.0, 30.0, 30.0001, 31.0]
    fixtures = [UtteranceRecord(f"u{i}", "s", ["a"], d, False) for i, d in enumerate(durs)]
    kept = [r.duration_s for r in corpus.filter_duration(fixtures)]
    dur_ok = kept == [0.3, 5.0, 30.0]

    lr_err = abs(ad.warmup_lr(2500, 1e-3, 2500) - 1e-3)
    criterion(f"AQ boundaries ok={sev_ok}; speakers per stratum {counts['mild']} x5 strata ok={split_ok}; "
              f"duration kept {kept}; |lr(2500) - base| {lr_err:.1e}")
    assert sev_ok and split_ok and dur_ok
    assert lr_err < 1e-12


# ---------------------------------------------------------------- A7

_A7 = {"cases": 0}


@settings(max_examples=500, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "<LAU>"]), min_size=1, max_size=8),
       st.lists(st.sampled_from(["a", "b", "c", "<LAU>"]), max_size=8), st.booleans(), st.booleans(),
       st.sampled_from(["prepend", "append", "both"]))
def _tag_properties(ref, hyp, y, y2, mode):
    _A7["cases"] += 1
    base = wer(ref, hyp)
    tagged = wer(insert_tags(ref, y, mode), insert_tags(hyp, y2, mode))
    assert (tagged.substitutions, tagged.insertions, tagged.deletions, tagged.ref_words) == \
        (base.substitutions, base.insertions, base.deletions, base.ref_words)
    kept, found = strip_tags(insert_tags(ref, y, mode))
    assert kept == ref
    assert found == ["[APH]" if y else "[NONAPH]"] * (2 if mode == "both" else 1)


def test_A7_tags_are_transparent_to_wer_and_round_trip(criterion):
    _A7["cases"] = 0
    _tag_properties()
    criterion(f"{_A7['cases']} hypothesis cases over prepend/append/both")


# ---------------------------------------------------------------- A8


def test_A8_checkpoint_averaging_and_serialization(criterion, tmp_path):
    rng = np.random.default_rng(8)
    shapes = {"enc.w": (16, 32), "enc.b": (32,), "dec.emb": (25, 16), "scalar": (1,)}
    stores = []
    for _ in range(10):
        s = ad.ParamStore()
        for name, shape in shapes.items():
            # |w| < 1 keeps half an ulp of float32 below the 1e-7 budget
            s.add(name, rng.uniform(-1.0, 1.0, size=shape).astype(np.float32))
        stores.append(s)
    avg = ad.average_checkpoints(stores)
    worst = max(np.abs(avg[k].data.astype(np.float64)
                       - np.mean([s[k].data.astype(np.float64) for s in stores], axis=0)).max() for k in shapes)

    path = tmp_path / "avg.ckpt"
    ad.save_checkpoint(avg, path, b'{"k": 10}')
    back, meta = ad.load_checkpoint(path)
    exact = meta == b'{"k": 10}' and list(back) == list(avg) and all(
        back[k].data.dtype == np.float32 and back[k].data.tobytes() == avg[k].data.tobytes() for k in shapes)
    ad.save_checkpoint(back, tmp_path / "again.ckpt", meta)
    same_file = (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    criterion(f"k=10 float32 average max err {worst:.1e}; load bit-exact={exact}; re-save identical={same_file}")
    assert worst < 1e-7
    assert exact and same_file
