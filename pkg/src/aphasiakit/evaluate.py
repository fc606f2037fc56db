"""WER with tag exclusion, Aphasia tag resolution, voting and the evaluation report."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import SEVERITY_ORDER, UtteranceRecord
from .ctc import ctc_greedy
from .model import Model, strip_tags

log = logging.getLogger(__name__)

APH = "APH"
NONAPH = "NONAPH"
ABSTAIN = "ABSTAIN"
DEFAULT_TAGS = ("[APH]", "[NONAPH]")


class EmptyReference(ValueError):
    pass


# ---------------------------------------------------------------- WER


@dataclass
class WerStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words if self.ref_words else float("nan")

    def __add__(self, other: "WerStats") -> "WerStats":
        return WerStats(self.substitutions + other.substitutions, self.insertions + other.insertions,
                        self.deletions + other.deletions, self.ref_words + other.ref_words)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["wer"] = self.wer
        return d


def edit_ops(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int]:
    """(S, I, D) of a minimum-cost alignment; backtrace prefers substitutions."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = I = D = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return S, I, D


def wer(ref: Sequence[str], hyp: Sequence[str], tags: Sequence[str] = DEFAULT_TAGS) -> WerStats:
    """Word error statistics after removing detection tags from both sides."""
    ref, _ = strip_tags(ref, tags)
    hyp, _ = strip_tags(hyp, tags)
    if not ref:
        raise EmptyReference("reference has no words after tag removal")
    S, I, D = edit_ops(ref, hyp)
    return WerStats(S, I, D, len(ref))


# ---------------------------------------------------------------- detection


def resolve_sentence_tag(tokens: Sequence[str], tags: Sequence[str] = DEFAULT_TAGS) -> str:
    """Unanimous decoded tags give a label; none or disagreement abstains."""
    _, found = strip_tags(tokens, tags)
    labels = {APH if t == tags[0] else NONAPH for t in found}
    if len(labels) == 1:
        return labels.pop()
    return ABSTAIN


def interctc_detect(lattice: np.ndarray, vocab) -> str:
    """Label from the first tag in the greedy InterCTC output."""
    for tok in ctc_greedy(lattice):
        if tok == vocab.aph:
            return APH
        if tok == vocab.nonaph:
            return NONAPH
    return ABSTAIN


def coerce(label: str) -> str:
    return APH if label == ABSTAIN else label


def majority_vote(labels: Iterable[str]) -> str:
    """Most frequent non-abstaining label; ties and all-abstain go to APH."""
    counts = Counter(l for l in labels if l != ABSTAIN)
    if counts[APH] >= counts[NONAPH]:
        return APH
    return NONAPH


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, truth: bool, pred: str) -> None:
        if pred == APH:
            if truth:
                self.tp += 1
            else:
                self.fp += 1
        else:
            if truth:
                self.fn += 1
            else:
                self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")


@dataclass
class DetectionReport:
    sentence_accuracy: float
    sentence_accuracy_raw: float
    speaker_accuracy: float
    abstain_rate: float
    sentence_confusion: Confusion
    speaker_confusion: Confusion
    votes: Dict[str, Dict[str, int]] = field(default_factory=dict)
    speaker_predictions: Dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "sentence_acc": self.sentence_accuracy,
            "sentence_acc_raw": self.sentence_accuracy_raw,
            "speaker_acc": self.speaker_accuracy,
            "abstain_rate": self.abstain_rate,
            "confusion": {"sentence": asdict(self.sentence_confusion),
                          "speaker": asdict(self.speaker_confusion)},
            "votes": self.votes,
            "speaker_predictions": self.speaker_predictions,
        }


def detection_report(speakers: Sequence[str], truths: Sequence[bool],
                     labels: Sequence[str]) -> DetectionReport:
    """Sentence- and speaker-level accuracy from per-utterance raw labels.

    The headline sentence accuracy counts abstentions as APH; the raw variant
    counts them as errors.
    """
    sent = Confusion()
    raw_correct = 0
    per_spk: Dict[str, List[str]] = defaultdict(list)
    truth_of: Dict[str, bool] = {}
    for spk, y, lab in zip(speakers, truths, labels):
        sent.add(y, coerce(lab))
        raw_correct += int(lab == (APH if y else NONAPH))
        per_spk[spk].append(lab)
        truth_of[spk] = y
    spk_conf = Confusion()
    votes, preds = {}, {}
    for spk in sorted(per_spk):
        c = Counter(per_spk[spk])
        votes[spk] = {APH: c[APH], NONAPH: c[NONAPH], ABSTAIN: c[ABSTAIN]}
        preds[spk] = majority_vote(per_spk[spk])
        spk_conf.add(truth_of[spk], preds[spk])
    n = len(labels)
    return DetectionReport(
        sentence_accuracy=sent.accuracy,
        sentence_accuracy_raw=raw_correct / n if n else float("nan"),
        speaker_accuracy=spk_conf.accuracy,
        abstain_rate=sum(l == ABSTAIN for l in labels) / n if n else float("nan"),
        sentence_confusion=sent, speaker_confusion=spk_conf, votes=votes, speaker_predictions=preds)


# ---------------------------------------------------------------- full protocol


@dataclass
class Prediction:
    utt_id: str
    tokens: List[str]
    interctc: Dict[int, List[str]] = field(default_factory=dict)
    interctc_labels: Dict[int, str] = field(default_factory=dict)
    nbest: List[Tuple[float, List[str]]] = field(default_factory=list)


def wer_table(records: Sequence[UtteranceRecord], predictions: Dict[str, Prediction],
              tags: Sequence[str] = DEFAULT_TAGS) -> Tuple[WerStats, Dict[str, WerStats], int]:
    """Overall and per-severity WER; returns (overall, per_severity, n_empty_refs)."""
    overall = WerStats()
    per = {s: WerStats() for s in SEVERITY_ORDER}
    empty = 0
    for r in records:
        try:
            st = wer(r.tokens, predictions[r.utt_id].tokens, tags)
        except EmptyReference:
            empty += 1
            continue
        overall = overall + st
        per[r.severity] = per[r.severity] + st
    return overall, per, empty


def evaluate_predictions(records: Sequence[UtteranceRecord], predictions: Dict[str, Prediction],
                         tag_detector: bool = True, tags: Sequence[str] = DEFAULT_TAGS) -> dict:
    """Assemble the report dictionary from decoded outputs."""
    overall, per, empty = wer_table(records, predictions, tags)
    speakers = [r.speaker_id for r in records]
    truths = [r.aphasia for r in records]
    detectors: Dict[str, DetectionReport] = {}
    if tag_detector:
        detectors["tag"] = detection_report(
            speakers, truths, [resolve_sentence_tag(predictions[r.utt_id].tokens, tags) for r in records])
    layers = sorted({e for p in predictions.values() for e in p.interctc_labels})
    for e in layers:
        detectors[f"interctc_layer{e}"] = detection_report(
            speakers, truths, [predictions[r.utt_id].interctc_labels.get(e, ABSTAIN) for r in records])
    report = {
        "overall_wer": overall.wer,
        "wer_stats": overall.as_dict(),
        "per_severity": {s: per[s].wer if per[s].ref_words else None for s in SEVERITY_ORDER},
        "per_severity_stats": {s: per[s].as_dict() for s in SEVERITY_ORDER},
        "empty_references": empty,
        "num_utterances": len(records),
    }
    if detectors:
        primary = detectors.get("tag") or next(iter(detectors.values()))
        report.update({k: v for k, v in primary.as_dict().items()
                       if k in ("sentence_acc", "sentence_acc_raw", "speaker_acc", "confusion",
                                "abstain_rate")})
        report["detectors"] = {k: v.as_dict() for k, v in detectors.items()}
    return report


def predict(model: Model, record: UtteranceRecord, beam: int = 10,
            decode_weight: Optional[float] = None, nbest: int = 1) -> Prediction:
    from .decode import recognize

    dec = recognize(model, record.features, beam=beam, decode_weight=decode_weight, nbest=nbest)
    cfg, vocab = model.config, model.vocab
    labels = {}
    for e in cfg.detector_layers:
        toks = dec.interctc[e]
        labels[e] = ABSTAIN
        for t in toks:
            if vocab.is_tag(t):
                labels[e] = APH if t == vocab.aph_tag else NONAPH
                break
    return Prediction(record.utt_id, dec.tokens, dec.interctc, labels, dec.nbest)


def predict_all(model: Model, records: Sequence[UtteranceRecord], beam: int = 10,
                decode_weight: Optional[float] = None, nbest: int = 1, jobs: int = 1
                ) -> Dict[str, Prediction]:
    def run(r):
        return predict(model, r, beam, decode_weight, nbest)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            preds = list(pool.map(run, records))
    else:
        preds = [run(r) for r in records]
    return {p.utt_id: p for p in preds}


def evaluate(records: Sequence[UtteranceRecord], model: Model, beam: int = 10,
             decode_weight: Optional[float] = None, jobs: int = 1) -> Tuple[dict, Dict[str, Prediction]]:
    preds = predict_all(model, records, beam, decode_weight, jobs=jobs)
    report = evaluate_predictions(records, preds, tag_detector=model.config.tag_mode != "none",
                                  tags=model.vocab.tag_strings)
    return report, preds


def write_report(report: dict, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
