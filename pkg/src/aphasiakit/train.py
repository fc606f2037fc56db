"""Minibatch training with warmup, clipping and best-k checkpoint averaging."""

from __future__ import annotations

import configparser
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .corpus import UtteranceRecord, record_rng, spec_augment, speed_perturb
from .model import Example, Model, ModelConfig, Vocabulary, compute_loss, init_params

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 2500
    clip: float = 1.0
    weight_decay: float = 1e-6
    keep_best: int = 10
    seed: int = 0


@dataclass
class AugmentConfig:
    speed_ratios: Tuple[float, ...] = (0.9, 1.0, 1.1)
    spec_augment: bool = True
    time_masks: int = 2
    time_width: int = 20
    freq_masks: int = 2
    freq_width: int = 10


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if not parts:
            return ()
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                return tuple(parts)
    return value.strip()


def _fill(cls, section) -> object:
    defaults = cls()
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in section.items():
        if key not in names:
            raise KeyError(f"unknown {cls.__name__} key {key!r}")
        kwargs[key] = _coerce(value, getattr(defaults, key))
    return cls(**kwargs)


def load_config(path) -> Tuple[ModelConfig, TrainConfig, AugmentConfig]:
    """Read an INI-style file with optional [model], [train] and [augment] sections."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[model]\n" + text
    parser.read_string(text)
    model = _fill(ModelConfig, parser["model"]) if parser.has_section("model") else ModelConfig()
    train = _fill(TrainConfig, parser["train"]) if parser.has_section("train") else TrainConfig()
    aug = _fill(AugmentConfig, parser["augment"]) if parser.has_section("augment") else AugmentConfig()
    return model, train, aug


def dump_config(model: ModelConfig, train: TrainConfig, aug: AugmentConfig) -> str:
    out = []
    for name, obj in (("model", model), ("train", train), ("augment", aug)):
        out.append(f"[{name}]")
        for k, v in asdict(obj).items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------- data


def to_example(r: UtteranceRecord, features: Optional[np.ndarray] = None) -> Example:
    feats = r.features if features is None else features
    return Example(r.utt_id, np.asarray(feats, dtype=np.float64), list(r.tokens), r.aphasia,
                   r.speaker_id, r.severity)


def augmented_examples(records: Sequence[UtteranceRecord], aug: Optional[AugmentConfig],
                       seed: int, epoch: int) -> List[Example]:
    """One example per (record, speed ratio); SpecAugment redrawn every epoch."""
    out = []
    for r in records:
        ratios = aug.speed_ratios if aug else (1.0,)
        for ratio in ratios:
            f = speed_perturb(r.features, ratio)
            if aug and aug.spec_augment:
                rng = record_rng(seed, r.utt_id, "specaug", epoch, ratio)
                f = spec_augment(f, aug.time_masks, aug.time_width, aug.freq_masks, aug.freq_width, rng)
            ex = to_example(r, f)
            if ratio != 1.0:
                ex.utt_id = f"sp{ratio}-{r.utt_id}"
            out.append(ex)
    return out


def make_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator
                 ) -> List[List[Example]]:
    """Length-sorted buckets, shuffled at the bucket level."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i].features.shape[0], examples[i].utt_id))
    batches = [[examples[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def build_vocab(records: Sequence[UtteranceRecord], tags=("[APH]", "[NONAPH]")) -> Vocabulary:
    return Vocabulary(sorted({t for r in records for t in r.tokens}), *tags)


# ---------------------------------------------------------------- loop


@dataclass
class EpochResult:
    epoch: int
    valid_acc: float
    params: ad.ParamStore


@dataclass
class TrainResult:
    model: Model
    log: List[dict]
    epochs: List[EpochResult] = field(default_factory=list)
    selected_epochs: List[int] = field(default_factory=list)


def validation_accuracy(params: ad.ParamStore, cfg: ModelConfig, vocab: Vocabulary,
                        examples: Sequence[Example], batch_size: int = 32) -> float:
    """Teacher-forced next-token accuracy of the decoder."""
    correct = total = 0
    ordered = sorted(examples, key=lambda e: e.features.shape[0])
    for k in range(0, len(ordered), batch_size):
        lb = compute_loss(ordered[k:k + batch_size], params, cfg, vocab)
        correct += lb.dec_correct
        total += lb.dec_tokens
    return correct / total if total else 0.0


def train(train_records: Sequence[UtteranceRecord], valid_records: Sequence[UtteranceRecord],
          model_cfg: ModelConfig, train_cfg: TrainConfig, aug: Optional[AugmentConfig] = None,
          vocab: Optional[Vocabulary] = None, log_fn: Optional[Callable[[dict], None]] = None
          ) -> TrainResult:
    """Train from scratch and return the average of the best ``keep_best`` epochs.

    Records must carry in-memory features. Everything random flows from
    ``train_cfg.seed``.
    """
    vocab = vocab or build_vocab(list(train_records) + list(valid_records))
    model_cfg.vocab_size = len(vocab)
    model_cfg.input_dim = int(train_records[0].features.shape[1])
    model_cfg.validate()
    params = init_params(model_cfg, seed=train_cfg.seed)
    opt = ad.OptimizerState(lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay, clip=train_cfg.clip)
    rng = np.random.default_rng(train_cfg.seed)
    valid_examples = [to_example(r) for r in valid_records]
    history: List[dict] = []
    epochs: List[EpochResult] = []

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.time()
        examples = augmented_examples(train_records, aug, train_cfg.seed, epoch)
        sums = {}
        n_batches = 0
        for batch in make_batches(examples, train_cfg.batch_size, rng):
            params.zero_grad()
            lb = compute_loss(batch, params, model_cfg, vocab)
            if not np.isfinite(lb.l_total):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            ad.backward(lb.graph)
            lr = ad.warmup_lr(opt.step + 1, train_cfg.base_lr, train_cfg.warmup_steps)
            ad.adam_step(params, opt, lr=lr)
            for k, v in lb.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        acc = validation_accuracy(params, model_cfg, vocab, valid_examples) if valid_examples else 0.0
        entry = {"epoch": epoch, "step": opt.step, "lr": lr}
        entry.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        entry["valid_acc"] = acc
        entry["seconds"] = round(time.time() - t0, 3)
        history.append(entry)
        if log_fn:
            log_fn(entry)
        log.info("epoch %d loss %.4f valid_acc %.4f", epoch, entry.get("l_total", float("nan")), acc)
        epochs.append(EpochResult(epoch, acc, params.snapshot()))

    k = max(1, min(train_cfg.keep_best, len(epochs)))
    best = sorted(epochs, key=lambda e: (-e.valid_acc, -e.epoch))[:k]
    averaged = ad.average_checkpoints([e.params for e in best])
    return TrainResult(Model(model_cfg, vocab, averaged), history, epochs,
                       sorted(e.epoch for e in best))


def write_log(entries: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
