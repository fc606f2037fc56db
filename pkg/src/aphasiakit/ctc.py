"""CTC loss, greedy decoding, prefix scoring and InterCTC self-conditioning.

Everything here works on a single (T, V) log-probability lattice with the blank
at index 0. Zero probability is represented by ``NEG`` rather than ``-inf`` so
that ``logaddexp`` never produces NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad

BLANK = 0
NEG = -1e30


class InfeasibleTarget(ValueError):
    pass


@dataclass
class CtcResult:
    neg_log_likelihood: float
    grad_logp: np.ndarray
    feasible: bool = True


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def _lse(*xs: np.ndarray) -> np.ndarray:
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return np.maximum(out, NEG)


def ctc_loss(logp: np.ndarray, target: Sequence[int]) -> CtcResult:
    """-log P(target | lattice) and its gradient with respect to ``logp``.

    ``logp`` entries are treated as free variables, so the gradient is minus the
    state-occupancy posterior summed per token.
    """
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    target = [int(t) for t in target]
    if any(t <= BLANK or t >= V for t in target):
        raise ValueError(f"target tokens must lie in [1, {V - 1}]")
    if T < min_frames(target):
        return CtcResult(float("inf"), np.zeros_like(logp), feasible=False)

    ext = _extend(target)
    S = len(ext)
    emit = np.maximum(logp[:, ext], NEG)  # (T, S)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_s = np.full(S, NEG)
    alpha = np.full((T, S), NEG)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.concatenate(([NEG], prev[:-1]))
        s2 = np.where(skip, np.concatenate(([NEG, NEG], prev[:-2]))[:S], neg_s)
        alpha[t] = _lse(prev, s1, s2) + emit[t]

    # beta[t, s]: probability of finishing from state s at t, not counting frame t
    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        n1 = np.concatenate((nxt[1:], [NEG]))
        n2 = np.where(skip_next, np.concatenate((nxt[2:], [NEG, NEG]))[:S], neg_s)
        beta[t] = _lse(nxt, n1, n2)

    if S > 1:
        log_p = float(np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    else:
        log_p = float(alpha[T - 1, 0])
    if log_p <= NEG / 2:
        return CtcResult(float("inf"), np.zeros_like(logp), feasible=False)

    post = np.exp(alpha + beta - log_p)  # (T, S)
    grad = np.zeros_like(logp)
    for s in range(S):
        grad[:, ext[s]] -= post[:, s]
    return CtcResult(-log_p, grad)


def ctc_greedy(logp: np.ndarray) -> List[int]:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    best = np.argmax(np.asarray(logp), axis=-1)
    out: List[int] = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


# ---------------------------------------------------------------- prefix scoring


@dataclass
class PrefixState:
    """Forward variables of one prefix: mass ending in a label / in a blank."""

    prefix: Tuple[int, ...]
    r_label: np.ndarray  # (T,)
    r_blank: np.ndarray  # (T,)
    score: float  # log P(prefix as a prefix of the labelling)

    @property
    def full_score(self) -> float:
        """log P(labelling == prefix)."""
        return float(np.logaddexp(self.r_label[-1], self.r_blank[-1]))


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities for label-synchronous search."""

    def __init__(self, logp: np.ndarray):
        self.logp = np.maximum(np.asarray(logp, dtype=np.float64), NEG)
        self.T, self.V = self.logp.shape

    def initial_state(self) -> PrefixState:
        r_blank = np.maximum(np.cumsum(self.logp[:, BLANK]), NEG)
        r_label = np.full(self.T, NEG)
        return PrefixState((), r_label, r_blank, 0.0)

    def extend(self, state: PrefixState, tokens: Optional[Sequence[int]] = None
               ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Score ``state.prefix + (c,)`` for each candidate ``c``.

        Returns (psi, r_label, r_blank) with shapes (C,), (C, T), (C, T).
        """
        x = self.logp
        T = self.T
        cands = np.arange(self.V) if tokens is None else np.asarray(tokens, dtype=np.int64)
        C = len(cands)
        xc = x[:, cands].T  # (C, T)
        xb = x[:, BLANK]
        last = state.prefix[-1] if state.prefix else None
        # phi[c, t]: mass at t from which c can be emitted at t + 1
        phi = np.tile(np.logaddexp(state.r_blank, state.r_label), (C, 1))
        if last is not None:
            same = cands == last
            phi[same] = state.r_blank
        r_label = np.full((C, T), NEG)
        r_blank = np.full((C, T), NEG)
        if not state.prefix:
            r_label[:, 0] = xc[:, 0]
        psi = r_label[:, 0].copy()
        for t in range(1, T):
            r_label[:, t] = _lse(r_label[:, t - 1], phi[:, t - 1]) + xc[:, t]
            r_blank[:, t] = _lse(r_blank[:, t - 1], r_label[:, t - 1]) + xb[t]
            psi = _lse(psi, phi[:, t - 1] + xc[:, t])
        blank_rows = cands == BLANK
        psi[blank_rows] = NEG
        return psi, r_label, r_blank

    def advance(self, state: PrefixState, token: int) -> PrefixState:
        psi, rl, rb = self.extend(state, [token])
        return PrefixState(state.prefix + (int(token),), rl[0], rb[0], float(psi[0]))

    def state_for(self, prefix: Sequence[int]) -> PrefixState:
        st = self.initial_state()
        for tok in prefix:
            st = self.advance(st, tok)
        return st


def ctc_prefix_score(logp: np.ndarray, prefix: Sequence[int]) -> Tuple[float, np.ndarray, float]:
    """Prefix log-probability of ``prefix`` and of each one-token extension.

    Returns ``(prefix_score, next_scores, full_score)`` where ``next_scores[c]``
    is the prefix score of ``prefix + [c]`` (``NEG`` for the blank) and
    ``full_score`` is log P(labelling == prefix).
    """
    prefix = [int(t) for t in prefix]
    if len(np.asarray(logp)) < min_frames(prefix):
        raise InfeasibleTarget(f"prefix of length {len(prefix)} does not fit in {len(logp)} frames")
    scorer = CtcPrefixScorer(logp)
    st = scorer.state_for(prefix)
    psi, _, _ = scorer.extend(st)
    return st.score, psi, st.full_score


# ---------------------------------------------------------------- autodiff glue


def ctc_loss_batch(logp: ad.Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]
                   ) -> Tuple[ad.Tensor, np.ndarray]:
    """Per-utterance CTC loss over a padded (B, T, V) lattice tensor.

    Frames past each utterance's length are ignored. Infeasible targets give a
    zero loss entry with zero gradient; the returned mask marks feasible rows.
    """
    data = logp.data
    B = data.shape[0]
    nll = np.zeros(B)
    feasible = np.zeros(B, dtype=bool)
    grads = np.zeros_like(data, dtype=np.float64)
    for b in range(B):
        T = int(lengths[b])
        res = ctc_loss(data[b, :T], targets[b])
        if res.feasible:
            nll[b] = res.neg_log_likelihood
            grads[b, :T] = res.grad_logp
            feasible[b] = True

    def _bw(g):
        logp._accumulate(grads * g[:, None, None])

    return ad._make(nll, (logp,), _bw), feasible


def interctc_condition(h: ad.Tensor, lattice: ad.Tensor, norm: Dict[str, ad.Tensor],
                       proj: Dict[str, ad.Tensor]) -> ad.Tensor:
    """``Norm(h) + Linear(posteriors)`` feeding the layers above an InterCTC tap.

    ``lattice`` holds log posteriors over the CTC vocabulary; the frame-wise
    posteriors (not sampled paths) are what gets projected back.
    """
    if h.shape[:-1] != lattice.shape[:-1]:
        raise ad.ShapeMismatch(f"hidden {h.shape} vs lattice {lattice.shape}")
    if proj["w"].shape != (lattice.shape[-1], h.shape[-1]):
        raise ad.ShapeMismatch(f"projection {proj['w'].shape} does not map "
                               f"{lattice.shape[-1]} -> {h.shape[-1]}")
    normed = ad.layer_norm(h, norm["g"], norm["b"])
    post = ad.exp(lattice)
    return ad.add(normed, ad.linear(post, proj["w"], proj["b"]))


def interctc_loss_total(losses: Sequence[float]):
    """Mean of the per-layer InterCTC losses."""
    if len(losses) == 0:
        raise ValueError("at least one InterCTC layer is required")
    if all(isinstance(x, ad.Tensor) for x in losses):
        total = losses[0]
        for x in losses[1:]:
            total = ad.add(total, x)
        return ad.mul(total, 1.0 / len(losses))
    return float(sum(float(x) for x in losses) / len(losses))
