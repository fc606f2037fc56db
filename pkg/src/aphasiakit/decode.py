"""Joint CTC/attention beam search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .ctc import BLANK, CtcPrefixScorer, PrefixState
from .model import Model, ModelConfig, Vocabulary, ctc_lattice, decode_step_batch, encode
from .autodiff import ParamStore

log = logging.getLogger(__name__)


class NoFinishedHypothesis(RuntimeError):
    pass


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    joint_score: float
    dec_score: float
    ctc_score: float
    finished: bool = False
    state: Optional[PrefixState] = field(default=None, repr=False, compare=False)


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: List[Hypothesis]
    fallback: bool = False


def joint_beam_search(hidden: np.ndarray, length: int, lattice: np.ndarray, params: ParamStore,
                      cfg: ModelConfig, vocab: Vocabulary, beam: int = 10,
                      decode_weight: Optional[float] = None, max_len: Optional[int] = None,
                      nbest: int = 1) -> BeamResult:
    """Label-synchronous beam search over ``w * log p_dec + (1 - w) * log p_ctc_prefix``.

    ``hidden`` is the (L', H) encoder output of one utterance and ``lattice`` its
    final (L', V) CTC log posteriors. ``decode_weight`` defaults to
    ``1 - cfg.ctc_weight``. Ties are broken toward the earlier hypothesis and
    the lower token id. Extensions never raise a score, so the search stops as
    soon as the best finished hypothesis beats every live one.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    w = 1.0 - cfg.ctc_weight if decode_weight is None else float(decode_weight)
    hidden = np.asarray(hidden)[:length]
    scorer = CtcPrefixScorer(np.asarray(lattice)[:length])
    if max_len is None:
        max_len = length
    eos = vocab.eos
    allowed = np.array([c for c in range(len(vocab)) if c != BLANK and c != eos])

    live = [Hypothesis((), 0.0, 0.0, 0.0, state=scorer.initial_state())]
    finished: List[Hypothesis] = []
    for step in range(max_len + 1):
        dec_logp = decode_step_batch(hidden, length, [(vocab.sos,) + h.tokens for h in live],
                                     params, cfg)
        cands = []
        for j, hyp in enumerate(live):
            dec_eos = hyp.dec_score + float(dec_logp[j, eos])
            ctc_eos = hyp.state.full_score
            cands.append((w * dec_eos + (1.0 - w) * ctc_eos, j, eos, dec_eos, ctc_eos, None))
            if step == max_len:
                continue
            psi, rl, rb = scorer.extend(hyp.state, allowed)
            dec = hyp.dec_score + dec_logp[j, allowed]
            joint = w * dec + (1.0 - w) * psi
            for k, c in enumerate(allowed):
                cands.append((float(joint[k]), j, int(c), float(dec[k]), float(psi[k]),
                              (rl[k], rb[k])))
        cands.sort(key=lambda x: (-x[0], x[1], x[2]))
        next_live = []
        for joint, j, c, dec, ctc_s, r in cands[:beam]:
            parent = live[j]
            if c == eos:
                finished.append(Hypothesis(parent.tokens, joint, dec, ctc_s, finished=True))
            else:
                toks = parent.tokens + (c,)
                st = PrefixState(toks, r[0], r[1], ctc_s)
                next_live.append(Hypothesis(toks, joint, dec, ctc_s, state=st))
        live = next_live
        if not live:
            break
        if finished and max(h.joint_score for h in finished) >= live[0].joint_score:
            break

    if not finished:
        best = max(live, key=lambda h: (len(h.tokens), h.joint_score))
        log.warning("no finished hypothesis; falling back to the longest partial one")
        return BeamResult(best, [best], fallback=True)
    ranked = sorted(finished, key=lambda h: -h.joint_score)
    return BeamResult(ranked[0], ranked[:nbest])


@dataclass
class Decoded:
    tokens: List[str]
    nbest: List[Tuple[float, List[str]]]
    interctc: dict  # layer -> greedy token strings
    fallback: bool = False


def recognize(model: Model, features: np.ndarray, beam: int = 10,
              decode_weight: Optional[float] = None, nbest: int = 1) -> Decoded:
    """Encode one utterance, run joint beam search and InterCTC greedy decoding."""
    from .ctc import ctc_greedy

    enc = encode(features, model.params, model.config)
    lattice = ctc_lattice(enc, model.params).data[0]
    T = int(enc.lengths[0])
    res = joint_beam_search(enc.hidden.data[0], T, lattice, model.params, model.config,
                            model.vocab, beam=beam, decode_weight=decode_weight, nbest=nbest)
    inter = {e: model.vocab.decode(ctc_greedy(lat.data[0, :T]))
             for e, lat in enc.interctc_lattices.items()}
    return Decoded(model.vocab.decode(res.best.tokens),
                   [(h.joint_score, model.vocab.decode(h.tokens)) for h in res.nbest],
                   inter, res.fallback)
