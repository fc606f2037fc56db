"""Toy hybrid CTC/attention recognizer with Aphasia tags and InterCTC taps.

The encoder is a stack of two-branch blocks (self-attention next to a gated
MLP, merged by a linear layer). After any tapped block the shared CTC head
produces an intermediate lattice and, when self-conditioning is on, the
residual stream is replaced by ``Norm(h) + Linear(posteriors)``. The decoder
is a small pre-norm transformer decoder over the tag-extended vocabulary.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import ctc as ctclib
from .autodiff import ParamStore, Tensor

TAG_MODES = ("none", "prepend", "append", "both")
INTERCTC_TARGETS = ("asr_tokens", "tag_prefixed_tokens")
BLANK_TOKEN = "<blank>"
UNK_TOKEN = "<unk>"
SOS_EOS_TOKEN = "<sos/eos>"
MASK_VALUE = -1e9


class ModelError(ValueError):
    pass


class AlreadyTagged(ModelError):
    pass


class NaNDetected(FloatingPointError):
    pass


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Blank at 0, unk at 1, words, the two Aphasia tags, then sos/eos last."""

    def __init__(self, words: Sequence[str], aph_tag: str = "[APH]", nonaph_tag: str = "[NONAPH]"):
        reserved = {BLANK_TOKEN, UNK_TOKEN, SOS_EOS_TOKEN, aph_tag, nonaph_tag}
        uniq = sorted({w for w in words if w not in reserved})
        self.tokens: List[str] = [BLANK_TOKEN, UNK_TOKEN] + uniq + [aph_tag, nonaph_tag, SOS_EOS_TOKEN]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.aph_tag = aph_tag
        self.nonaph_tag = nonaph_tag
        self.blank = 0
        self.unk = 1
        self.aph = self.index[aph_tag]
        self.nonaph = self.index[nonaph_tag]
        self.sos = self.eos = self.index[SOS_EOS_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def tag_strings(self) -> Tuple[str, str]:
        return (self.aph_tag, self.nonaph_tag)

    def is_tag(self, tok: Union[int, str]) -> bool:
        if isinstance(tok, str):
            return tok in (self.aph_tag, self.nonaph_tag)
        return tok in (self.aph, self.nonaph)

    def tag_for(self, aphasia: bool) -> str:
        return self.aph_tag if aphasia else self.nonaph_tag

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "aph_tag": self.aph_tag, "nonaph_tag": self.nonaph_tag}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        words = [t for t in d["tokens"] if t not in (BLANK_TOKEN, UNK_TOKEN, SOS_EOS_TOKEN,
                                                   d["aph_tag"], d["nonaph_tag"])]
        vocab = cls(words, d["aph_tag"], d["nonaph_tag"])
        if vocab.tokens != list(d["tokens"]):
            raise ModelError("vocabulary order does not round-trip")
        return vocab


def insert_tags(tokens: Sequence[str], aphasia: bool, mode: str,
                tags: Tuple[str, str] = ("[APH]", "[NONAPH]")) -> List[str]:
    if mode not in TAG_MODES:
        raise ModelError(f"unknown tag mode {mode!r}")
    if any(t in tags for t in tokens):
        raise AlreadyTagged("token sequence already contains a tag")
    tag = tags[0] if aphasia else tags[1]
    out = list(tokens)
    if mode in ("prepend", "both"):
        out.insert(0, tag)
    if mode in ("append", "both"):
        out.append(tag)
    return out


def strip_tags(tokens: Sequence, tags: Sequence = ("[APH]", "[NONAPH]")) -> Tuple[list, list]:
    """Split a sequence into (non-tag tokens, tags in order of appearance)."""
    kept, found = [], []
    for t in tokens:
        (found if t in tags else kept).append(t)
    return kept, found


# ---------------------------------------------------------------- config


@dataclass
class ModelConfig:
    input_dim: int = 16
    vocab_size: int = 0
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_units: int = 128
    decoder_layers: int = 2
    decoder_ffn: int = 128
    subsample: int = 1
    interctc_layers: Tuple[int, ...] = ()
    interctc_targets: Tuple[str, ...] = ()
    interctc_condition: bool = True
    ctc_weight: float = 0.3
    interctc_weight: float = 0.3
    tag_mode: str = "none"
    label_smoothing: float = 0.1

    def __post_init__(self):
        self.interctc_layers = tuple(int(e) for e in self.interctc_layers)
        targets = tuple(self.interctc_targets)
        if not targets:
            targets = ("asr_tokens",) * len(self.interctc_layers)
        self.interctc_targets = targets
        self.validate()

    def validate(self) -> None:
        if len(self.interctc_targets) != len(self.interctc_layers):
            raise ModelError("need one InterCTC target kind per tapped layer")
        for e in self.interctc_layers:
            if not 1 <= e < self.num_layers:
                raise ModelError(f"InterCTC layer {e} must satisfy 1 <= e < {self.num_layers}")
        if len(set(self.interctc_layers)) != len(self.interctc_layers):
            raise ModelError("duplicate InterCTC layer")
        for t in self.interctc_targets:
            if t not in INTERCTC_TARGETS:
                raise ModelError(f"unknown InterCTC target kind {t!r}")
        if self.tag_mode not in TAG_MODES:
            raise ModelError(f"unknown tag mode {self.tag_mode!r}")
        if not 0.0 <= self.ctc_weight <= 1.0 or not 0.0 <= self.interctc_weight <= 1.0:
            raise ModelError("ctc_weight and interctc_weight must lie in [0, 1]")
        if self.hidden % self.heads:
            raise ModelError("hidden size must be divisible by the number of heads")
        if self.subsample < 1:
            raise ModelError("subsample must be >= 1")

    @property
    def detector_layers(self) -> List[int]:
        return [e for e, t in zip(self.interctc_layers, self.interctc_targets)
                if t == "tag_prefixed_tokens"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interctc_layers"] = list(self.interctc_layers)
        d["interctc_targets"] = list(self.interctc_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = ParamStore()
    H, V = cfg.hidden, cfg.vocab_size

    def lin(name, n_in, n_out):
        p.add(name + ".w", rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)), dtype)
        p.add(name + ".b", np.zeros(n_out), dtype)

    def norm(name, n):
        p.add(name + ".g", np.ones(n), dtype)
        p.add(name + ".b", np.zeros(n), dtype)

    def attn(name):
        for part in ("q", "k", "v", "o"):
            lin(f"{name}.{part}", H, H)

    lin("enc.input", cfg.input_dim * cfg.subsample, H)
    for i in range(cfg.num_layers):
        pre = f"enc.block{i + 1}"
        norm(pre + ".ln", H)
        attn(pre + ".attn")
        lin(pre + ".mlp_in", H, 2 * cfg.mlp_units)
        lin(pre + ".mlp_out", cfg.mlp_units, H)
        lin(pre + ".merge", 2 * H, H)
    norm("enc.final_ln", H)
    lin("ctc", H, V)
    p.add("dec.embed", rng.normal(0.0, 1.0, size=(V, H)), dtype)
    for i in range(cfg.decoder_layers):
        pre = f"dec.layer{i + 1}"
        norm(pre + ".ln1", H)
        attn(pre + ".self")
        norm(pre + ".ln2", H)
        attn(pre + ".src")
        norm(pre + ".ln3", H)
        lin(pre + ".ff1", H, cfg.decoder_ffn)
        lin(pre + ".ff2", cfg.decoder_ffn, H)
    norm("dec.final_ln", H)
    lin("dec.out", H, V)
    # taps last, so adding one leaves every shared weight unchanged
    for e in cfg.interctc_layers:
        norm(f"enc.tap{e}.ln", H)
        lin(f"enc.tap{e}.proj", V, H)
    return p


# ---------------------------------------------------------------- building blocks


def sinusoid_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : dim // 2])
    return out


def _lin(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.linear(x, p[name + ".w"], p[name + ".b"])


def _norm(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"])


def attention(p: ParamStore, name: str, q_in: Tensor, kv_in: Tensor, heads: int,
              bias: np.ndarray) -> Tensor:
    B, Lq, H = q_in.shape
    Lk = kv_in.shape[1]
    d = H // heads
    q = _lin(p, name + ".q", q_in).reshape(B, Lq, heads, d).transpose(0, 2, 1, 3)
    k = _lin(p, name + ".k", kv_in).reshape(B, Lk, heads, d).transpose(0, 2, 3, 1)
    v = _lin(p, name + ".v", kv_in).reshape(B, Lk, heads, d).transpose(0, 2, 1, 3)
    scores = ad.add(ad.mul(q @ k, 1.0 / math.sqrt(d)), bias)
    weights = ad.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, H)
    return _lin(p, name + ".o", ctx)


def key_mask_bias(lengths: Sequence[int], max_len: int) -> np.ndarray:
    valid = np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]


def causal_bias(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)[None, None]


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, L', H)
    lengths: np.ndarray  # (B,)
    interctc_lattices: Dict[int, Tensor]  # layer -> (B, L', V) log posteriors


def pad_features(feats: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    D = feats[0].shape[1]
    out = np.zeros((len(feats), int(lengths.max()), D))
    for b, f in enumerate(feats):
        out[b, : f.shape[0]] = f
    return out, lengths


def subsampled_lengths(lengths, factor: int) -> np.ndarray:
    return -(-np.asarray(lengths) // factor)


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise NaNDetected(f"{bad} non-finite values in {where}")


def encode(features, params: ParamStore, cfg: ModelConfig,
           lengths: Optional[Sequence[int]] = None) -> EncoderOutput:
    """Encode one (L, D) matrix, a list of them, or a padded (B, L, D) batch."""
    if isinstance(features, np.ndarray) and features.ndim == 2:
        x, lengths = pad_features([features])
    elif isinstance(features, np.ndarray) and features.ndim == 3:
        x = features
        lengths = np.full(len(x), x.shape[1]) if lengths is None else np.asarray(lengths)
    else:
        x, lengths = pad_features(list(features))
    B, L, D = x.shape
    s = cfg.subsample
    if s > 1:
        pad = (-L) % s
        if pad:
            x = np.concatenate([x, np.zeros((B, pad, D))], axis=1)
        x = x.reshape(B, (L + pad) // s, s * D)
    out_lengths = subsampled_lengths(lengths, s)
    Lp = x.shape[1]
    h = ad.add(_lin(params, "enc.input", Tensor(x)), sinusoid_positions(Lp, cfg.hidden))
    bias = key_mask_bias(out_lengths, Lp)
    taps = set(cfg.interctc_layers)
    lattices: Dict[int, Tensor] = {}
    for i in range(1, cfg.num_layers + 1):
        pre = f"enc.block{i}"
        y = _norm(params, pre + ".ln", h)
        att = attention(params, pre + ".attn", y, y, cfg.heads, bias)
        z = _lin(params, pre + ".mlp_in", y)
        U = cfg.mlp_units
        gated = ad.mul(z[..., :U], ad.gelu(z[..., U:]))
        mlp = _lin(params, pre + ".mlp_out", gated)
        h = ad.add(h, _lin(params, pre + ".merge", ad.concat([att, mlp], axis=-1)))
        if i in taps:
            norm = {"g": params[f"enc.tap{i}.ln.g"], "b": params[f"enc.tap{i}.ln.b"]}
            normed = ad.layer_norm(h, norm["g"], norm["b"])
            lattice = ad.log_softmax(_lin(params, "ctc", normed))
            lattices[i] = lattice
            if cfg.interctc_condition:
                proj = {"w": params[f"enc.tap{i}.proj.w"], "b": params[f"enc.tap{i}.proj.b"]}
                h = ctclib.interctc_condition(h, lattice, norm, proj)
    hidden = _norm(params, "enc.final_ln", h)
    _check_finite(hidden, "encoder output")
    return EncoderOutput(hidden, out_lengths, lattices)


def ctc_lattice(enc: EncoderOutput, params: ParamStore) -> Tensor:
    return ad.log_softmax(_lin(params, "ctc", enc.hidden))


# ---------------------------------------------------------------- decoder


def decoder_forward(params: ParamStore, cfg: ModelConfig, memory: Tensor, memory_lengths,
                    inputs: np.ndarray) -> Tensor:
    """Log distributions (B, K, V) for each position of the teacher inputs."""
    inputs = np.asarray(inputs, dtype=np.int64)
    B, K = inputs.shape
    if memory.shape[0] != B:
        raise ModelError("memory batch does not match decoder inputs")
    x = ad.add(ad.embedding(params["dec.embed"], inputs), sinusoid_positions(K, cfg.hidden))
    self_bias = causal_bias(K)
    src_bias = key_mask_bias(memory_lengths, memory.shape[1])
    for i in range(1, cfg.decoder_layers + 1):
        pre = f"dec.layer{i}"
        y = _norm(params, pre + ".ln1", x)
        x = ad.add(x, attention(params, pre + ".self", y, y, cfg.heads, self_bias))
        y = _norm(params, pre + ".ln2", x)
        x = ad.add(x, attention(params, pre + ".src", y, memory, cfg.heads, src_bias))
        y = _norm(params, pre + ".ln3", x)
        x = ad.add(x, _lin(params, pre + ".ff2", ad.gelu(_lin(params, pre + ".ff1", y))))
    x = _norm(params, "dec.final_ln", x)
    return ad.log_softmax(_lin(params, "dec.out", x))


def decode_step(hidden, prefix: Sequence[int], params: ParamStore, cfg: ModelConfig,
                sos: Optional[int] = None) -> np.ndarray:
    """Next-token log distribution given encoder states and a sos-initial prefix."""
    h = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
    if h.ndim == 2:
        h = h[None]
    if sos is not None and (not prefix or prefix[0] != sos):
        raise ModelError("prefix must begin with sos")
    logp = decoder_forward(params, cfg, Tensor(h), [h.shape[1]], np.asarray([list(prefix)]))
    return logp.data[0, -1]


def decode_step_batch(hidden: np.ndarray, length: int, prefixes: Sequence[Sequence[int]],
                      params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Batched :func:`decode_step` for equal-length prefixes sharing one utterance."""
    h = np.broadcast_to(hidden, (len(prefixes),) + hidden.shape)
    logp = decoder_forward(params, cfg, Tensor(h), np.full(len(prefixes), length),
                           np.asarray([list(p) for p in prefixes]))
    return logp.data[:, -1]


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    l_ctc: float
    l_dec: float
    l_total: float
    l_inter: Optional[float] = None
    l_inter_layers: Dict[int, float] = field(default_factory=dict)
    ctc_weight: float = 0.3
    interctc_weight: float = 0.3
    n_infeasible: int = 0
    dec_correct: int = 0
    dec_tokens: int = 0
    graph: Optional[Tensor] = field(default=None, repr=False)

    @property
    def accuracy(self) -> float:
        return self.dec_correct / self.dec_tokens if self.dec_tokens else 0.0

    def as_dict(self) -> dict:
        d = {"l_ctc": self.l_ctc, "l_dec": self.l_dec, "l_total": self.l_total}
        if self.l_inter is not None:
            d["l_inter"] = self.l_inter
            d.update({f"l_inter_{e}": v for e, v in self.l_inter_layers.items()})
        return d


def combine_losses(l_ctc, l_dec, l_inter=None, ctc_weight: float = 0.3, interctc_weight: float = 0.3):
    """``lam * ctc' + (1 - lam) * dec`` with ``ctc' = a * inter + (1 - a) * ctc``.

    Works on floats and on tensors alike. Without InterCTC, ``ctc' = ctc``.
    """
    lam, a = ctc_weight, interctc_weight
    ctc_term = l_ctc if l_inter is None else a * l_inter + (1.0 - a) * l_ctc
    return lam * ctc_term + (1.0 - lam) * l_dec


@dataclass
class Example:
    utt_id: str
    features: np.ndarray
    tokens: List[str]
    aphasia: bool
    speaker_id: str = ""
    severity: str = ""


def build_targets(ex: Example, vocab: Vocabulary, cfg: ModelConfig
                  ) -> Tuple[List[int], Dict[int, List[int]]]:
    tagged = insert_tags(ex.tokens, ex.aphasia, cfg.tag_mode, vocab.tag_strings)
    main = vocab.encode(tagged)
    plain = vocab.encode(ex.tokens)
    tag_id = vocab.aph if ex.aphasia else vocab.nonaph
    inter = {}
    for e, kind in zip(cfg.interctc_layers, cfg.interctc_targets):
        inter[e] = [tag_id] + plain if kind == "tag_prefixed_tokens" else list(plain)
    return main, inter


def _masked_mean(per_utt: Tensor, mask: np.ndarray) -> Tensor:
    n = max(int(mask.sum()), 1)
    return ad.mul(ad.tsum(ad.mul(per_utt, mask.astype(np.float64))), 1.0 / n)


def compute_loss(batch: Sequence[Example], params: ParamStore, cfg: ModelConfig,
                 vocab: Vocabulary) -> LossBreakdown:
    """Multi-task loss over a batch; per-utterance sums averaged over the batch."""
    feats, lengths = pad_features([ex.features for ex in batch])
    enc = encode(feats, params, cfg, lengths)
    targets, inter_targets = zip(*(build_targets(ex, vocab, cfg) for ex in batch))

    lattice = ctc_lattice(enc, params)
    ctc_per, feasible = ctclib.ctc_loss_batch(lattice, enc.lengths, targets)
    n_infeasible = int((~feasible).sum())
    l_ctc = _masked_mean(ctc_per, feasible)

    inter_losses: Dict[int, Tensor] = {}
    for e, lat in enc.interctc_lattices.items():
        per, ok = ctclib.ctc_loss_batch(lat, enc.lengths, [t[e] for t in inter_targets])
        n_infeasible += int((~ok).sum())
        inter_losses[e] = _masked_mean(per, ok)
    l_inter = ctclib.interctc_loss_total(list(inter_losses.values())) if inter_losses else None

    K = max(len(t) for t in targets) + 1
    B = len(batch)
    dec_in = np.full((B, K), vocab.eos, dtype=np.int64)
    dec_out = np.full((B, K), vocab.eos, dtype=np.int64)
    weights = np.zeros((B, K))
    for b, t in enumerate(targets):
        dec_in[b, 1: len(t) + 1] = t
        dec_out[b, : len(t)] = t
        weights[b, : len(t) + 1] = 1.0
    logp = decoder_forward(params, cfg, enc.hidden, enc.lengths, dec_in)
    l_dec = ad.mul(ad.softmax_cross_entropy(logp, dec_out, weights, cfg.label_smoothing), 1.0 / B)
    pred = logp.data.argmax(-1)
    correct = int(((pred == dec_out) * weights).sum())

    total = combine_losses(l_ctc, l_dec, l_inter, cfg.ctc_weight, cfg.interctc_weight)
    if not np.isfinite(total.data):
        raise NaNDetected("loss is not finite")
    return LossBreakdown(
        l_ctc=float(l_ctc.data), l_dec=float(l_dec.data), l_total=float(total.data),
        l_inter=None if l_inter is None else float(l_inter.data),
        l_inter_layers={e: float(v.data) for e, v in inter_losses.items()},
        ctc_weight=cfg.ctc_weight, interctc_weight=cfg.interctc_weight,
        n_infeasible=n_infeasible, dec_correct=correct, dec_tokens=int(weights.sum()), graph=total)


# ---------------------------------------------------------------- model bundle


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocabulary
    params: ParamStore

    def metadata(self) -> bytes:
        return json.dumps({"config": self.config.to_dict(), "vocab": self.vocab.to_dict()},
                          sort_keys=True).encode("utf-8")

    def save(self, path) -> None:
        ad.save_checkpoint(self.params, path, self.metadata())

    @classmethod
    def load(cls, path) -> "Model":
        params, meta = ad.load_checkpoint(path)
        if not meta:
            raise ad.CorruptPayload(f"{path}: checkpoint carries no model metadata")
        d = json.loads(meta.decode("utf-8"))
        return cls(ModelConfig.from_dict(d["config"]), Vocabulary.from_dict(d["vocab"]), params)
