"""Manifests, severity strata, speaker splits, augmentation and synthetic data."""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MIN_DURATION_S = 0.3
MAX_DURATION_S = 30.0
DEFAULT_SPLIT = (0.56, 0.19, 0.25)
FEATURE_MAGIC = b"APHFEAT\x00"
FEATURE_DIR_ENV = "APHASIAKIT_FEATURE_DIR"


class CorpusError(ValueError):
    pass


class AqOutOfRange(CorpusError):
    pass


class EmptyStratum(UserWarning):
    pass


class LabelInconsistency(CorpusError):
    pass


class Severity(str, Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"
    VERY_SEVERE = "very_severe"
    CONTROL = "control"


SEVERITY_ORDER = [s.value for s in Severity]


def classify_severity(aq: Optional[float], aphasia: bool) -> Severity:
    """WAB Aphasia Quotient buckets; speakers without aphasia are ``control``."""
    if not aphasia:
        return Severity.CONTROL
    if aq is None or not (0.0 <= aq <= 100.0) or math.isnan(aq):
        raise AqOutOfRange(f"AQ must be in [0, 100] for aphasic speakers, got {aq}")
    if aq > 75:
        return Severity.MILD
    if aq > 50:
        return Severity.MODERATE
    if aq > 25:
        return Severity.SEVERE
    return Severity.VERY_SEVERE


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    tokens: List[str]
    duration_s: float
    aphasia: bool
    aq: Optional[float] = None
    severity: str = Severity.CONTROL.value
    feature_path: Optional[str] = None
    features: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        obj = {"utt_id": self.utt_id, "speaker_id": self.speaker_id, "tokens": list(self.tokens),
               "duration_s": self.duration_s, "aphasia": self.aphasia, "aq": self.aq,
               "severity": self.severity, "feature_path": self.feature_path}
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "UtteranceRecord":
        obj = json.loads(line)
        return cls(utt_id=obj["utt_id"], speaker_id=obj["speaker_id"], tokens=list(obj["tokens"]),
                   duration_s=float(obj["duration_s"]), aphasia=bool(obj["aphasia"]),
                   aq=obj.get("aq"), severity=obj.get("severity", Severity.CONTROL.value),
                   feature_path=obj.get("feature_path"))


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be three non-negative numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


# ---------------------------------------------------------------- manifests


def check_speaker_labels(records: Iterable[UtteranceRecord]) -> None:
    seen: Dict[str, Tuple[bool, str]] = {}
    for r in records:
        key = (r.aphasia, r.severity)
        if seen.setdefault(r.speaker_id, key) != key:
            raise LabelInconsistency(f"speaker {r.speaker_id!r} has mixed labels/severities")


def read_manifest(path, load_features: bool = False) -> List[UtteranceRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(UtteranceRecord.from_json(line))
    check_speaker_labels(records)
    if load_features:
        for r in records:
            r.features = read_features(resolve_feature_path(path, r.feature_path))
    return records


def write_manifest(records: Sequence[UtteranceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    tmp.replace(path)


def resolve_feature_path(manifest_path, feature_path: Optional[str]) -> Path:
    if feature_path is None:
        raise CorpusError("record has no feature_path")
    p = Path(feature_path)
    if p.is_absolute():
        return p
    base = os.environ.get(FEATURE_DIR_ENV)
    if base:
        return Path(base) / p
    return Path(manifest_path).parent / p


def write_features(frames: np.ndarray, path) -> None:
    """16-byte header (8-byte magic, u32 L, u32 D) then float32 LE frames."""
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise CorpusError(f"feature matrix must be L x D with L, D >= 1, got {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(FEATURE_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes())
    tmp.replace(path)


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not a feature file")
    L, D = struct.unpack_from("<II", raw, 8)
    if len(raw) != 16 + 4 * L * D:
        raise CorpusError(f"{path}: payload size does not match header ({L}x{D})")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(L, D).astype(np.float32)


# ---------------------------------------------------------------- splits & filters


def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    quotas = [r * n for r in ratios]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    rest = n - sum(counts)
    # ties go to the earlier split, so a lone speaker lands in train
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def stratified_split(records: Sequence[UtteranceRecord], spec: SplitSpec = SplitSpec()
                     ) -> Tuple[List[UtteranceRecord], List[UtteranceRecord], List[UtteranceRecord]]:
    """Split by speaker within each severity stratum (controls are one stratum)."""
    check_speaker_labels(records)
    strata: Dict[str, List[str]] = {}
    speaker_severity: Dict[str, str] = {}
    for r in records:
        if r.speaker_id not in speaker_severity:
            speaker_severity[r.speaker_id] = r.severity
            strata.setdefault(r.severity, []).append(r.speaker_id)
    assignment: Dict[str, int] = {}
    for sev in SEVERITY_ORDER:
        speakers = sorted(strata.get(sev, []))
        if not speakers:
            warnings.warn(f"severity stratum {sev!r} has no speakers; skipped", EmptyStratum,
                          stacklevel=2)
            continue
        rng = np.random.default_rng(_derive_seed(spec.seed, "split", sev))
        perm = rng.permutation(len(speakers))
        counts = _largest_remainder(len(speakers), spec.ratios)
        cursor = 0
        for split_idx, c in enumerate(counts):
            for i in perm[cursor:cursor + c]:
                assignment[speakers[i]] = split_idx
            cursor += c
    unknown = set(strata) - set(SEVERITY_ORDER)
    if unknown:
        raise CorpusError(f"unknown severity labels: {sorted(unknown)}")
    out: Tuple[List, List, List] = ([], [], [])
    for r in records:
        out[assignment[r.speaker_id]].append(r)
    return out


def filter_duration(records: Iterable[UtteranceRecord], lo: float = MIN_DURATION_S,
                    hi: float = MAX_DURATION_S) -> List[UtteranceRecord]:
    return [r for r in records if lo <= r.duration_s <= hi]


# ---------------------------------------------------------------- augmentation


def speed_perturb(frames: np.ndarray, ratio: float) -> np.ndarray:
    """Resample the time axis to ``round(L / ratio)`` frames by linear interpolation."""
    frames = np.asarray(frames)
    L = frames.shape[0]
    if ratio == 1.0:
        return frames.copy()
    new_L = max(1, int(round(L / ratio)))
    if L == 1:
        return np.repeat(frames, new_L, axis=0)
    pos = np.linspace(0.0, L - 1, new_L)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, L - 1)
    w = (pos - lo)[:, None]
    out = (1.0 - w) * frames[lo] + w * frames[hi]
    return out.astype(frames.dtype)


def spec_augment(frames: np.ndarray, time_masks: int = 2, time_width: int = 20,
                 freq_masks: int = 2, freq_width: int = 10,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Time and frequency masking; masked cells take the utterance mean.

    Each mask width is drawn uniformly from ``[0, width]`` (clipped to the axis)
    and its start uniformly from the positions where it fits.
    """
    rng = rng or np.random.default_rng()
    out = np.array(frames, copy=True)
    L, D = out.shape
    fill = out.mean()
    for _ in range(time_masks):
        w = int(rng.integers(0, min(time_width, L) + 1))
        t0 = int(rng.integers(0, L - w + 1))
        out[t0:t0 + w, :] = fill
    for _ in range(freq_masks):
        w = int(rng.integers(0, min(freq_width, D) + 1))
        f0 = int(rng.integers(0, D - w + 1))
        out[:, f0:f0 + w] = fill
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    speakers_per_class: int = 20
    utterances_per_speaker: int = 20
    vocab_size: int = 20
    feature_dim: int = 16
    frames_per_token: int = 3
    min_tokens: int = 3
    max_tokens: int = 6
    noise_std: float = 0.1
    bias_scale: float = 1.0
    skew: float = 2.0
    frame_rate_hz: float = 10.0
    seed: int = 0


def _derive_seed(seed: int, *keys) -> int:
    h = hashlib.sha256(repr((seed,) + keys).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def record_rng(seed: int, utt_id: str, *extra) -> np.random.Generator:
    """Per-record RNG stream; independent of iteration order."""
    return np.random.default_rng(_derive_seed(seed, utt_id, *extra))


def synthetic_vocab(spec: SyntheticSpec) -> List[str]:
    return [f"w{i:02d}" for i in range(spec.vocab_size)]


def token_templates(spec: SyntheticSpec) -> np.ndarray:
    """(vocab, frames_per_token, D) templates; one fixed pattern per word."""
    rng = np.random.default_rng(_derive_seed(spec.seed, "templates"))
    return rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.frames_per_token, spec.feature_dim))


def class_biases(spec: SyntheticSpec) -> Dict[bool, np.ndarray]:
    rng = np.random.default_rng(_derive_seed(spec.seed, "bias"))
    b = rng.normal(0.0, 1.0, size=(2, spec.feature_dim))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return {True: spec.bias_scale * b[0], False: spec.bias_scale * b[1]}


def token_distribution(spec: SyntheticSpec, aphasia: bool) -> np.ndarray:
    """Aphasic speakers favour the low half of the vocabulary, controls the high half."""
    idx = np.arange(spec.vocab_size)
    half = idx < spec.vocab_size // 2
    favoured = half if aphasia else ~half
    w = np.where(favoured, spec.skew, 1.0)
    return w / w.sum()


def render_features(token_ids: Sequence[int], aphasia: bool, spec: SyntheticSpec,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    templates = token_templates(spec)
    frames = np.concatenate([templates[t] for t in token_ids], axis=0)
    frames = frames + class_biases(spec)[aphasia]
    if spec.noise_std > 0:
        rng = rng or np.random.default_rng()
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
    return frames.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> List[UtteranceRecord]:
    """Desk-scale stand-in corpus with inline feature matrices.

    Aphasic speakers get AQ scores spread across the four severity buckets.
    Adjacent tokens never repeat, so every target fits in its frames.
    """
    vocab = synthetic_vocab(spec)
    records: List[UtteranceRecord] = []
    for aphasia in (True, False):
        probs = token_distribution(spec, aphasia)
        for s in range(spec.speakers_per_class):
            spk = f"{'aph' if aphasia else 'ctl'}{s:03d}"
            aq = None
            if aphasia:
                srng = np.random.default_rng(_derive_seed(spec.seed, spk, "aq"))
                bucket = s % 4
                lo, hi = [(75.5, 100.0), (50.5, 75.0), (25.5, 50.0), (0.0, 25.0)][bucket]
                aq = round(float(srng.uniform(lo, hi)), 1)
            severity = classify_severity(aq, aphasia).value
            for u in range(spec.utterances_per_speaker):
                utt_id = f"{spk}_{u:03d}"
                rng = record_rng(spec.seed, utt_id)
                n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
                ids: List[int] = []
                while len(ids) < n:
                    t = int(rng.choice(spec.vocab_size, p=probs))
                    if not ids or ids[-1] != t:
                        ids.append(t)
                feats = render_features(ids, aphasia, spec, rng)
                records.append(UtteranceRecord(
                    utt_id=utt_id, speaker_id=spk, tokens=[vocab[i] for i in ids],
                    duration_s=round(feats.shape[0] / spec.frame_rate_hz, 6), aphasia=aphasia,
                    aq=aq, severity=severity, features=feats))
    return records


def save_corpus(records: Sequence[UtteranceRecord], out_dir, name: str = "manifest.jsonl") -> Path:
    """Write feature files under ``out_dir/feats`` and a manifest pointing at them."""
    out_dir = Path(out_dir)
    for r in records:
        if r.features is not None:
            rel = f"feats/{r.utt_id}.feat"
            write_features(r.features, out_dir / rel)
            r.feature_path = rel
    path = out_dir / name
    write_manifest(records, path)
    return path
