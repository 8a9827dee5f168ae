"""Greedy and beam-search decoding with optional trigram blocking.

Decoders drive a *stepper*: any object with ``initial_state()`` and
``step(prev_ids, states) -> (logprobs, new_states, extras)``, where
``logprobs`` is a ``(k, vocab)`` array for ``k`` live hypotheses. The model
stepper wraps a parameter snapshot and one encoded source; tests plug in toy
steppers with hand-made distributions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import model as M
from .autodiff import Tensor, no_grad
from .data import BOS, EOS, ExtendedExample

log = logging.getLogger(__name__)


class Stepper(Protocol):
    def initial_state(self) -> Any: ...

    def step(self, prev_ids: Sequence[int], states: Sequence[Any]) -> tuple[np.ndarray, list, list]: ...


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    state: Any = field(repr=False, compare=False)
    trigrams: frozenset = frozenset()
    finished: bool = False
    step_logprobs: tuple[float, ...] = ()
    extras: tuple = field(default=(), repr=False, compare=False)

    @property
    def output(self) -> list[int]:
        """Tokens without the closing EOS."""
        toks = list(self.tokens)
        return toks[:-1] if toks and toks[-1] == EOS else toks

    @property
    def score(self) -> float:
        """Length-normalised log-probability (EOS counts as a token)."""
        return self.logprob / max(len(self.tokens), 1)

    def extend(self, token: int, logprob: float, state, extra=None, finished=False) -> "Hypothesis":
        toks = self.tokens + (token,)
        tri = self.trigrams | {toks[-3:]} if len(toks) >= 3 else self.trigrams
        return Hypothesis(
            tokens=toks,
            logprob=self.logprob + logprob,
            state=state,
            trigrams=tri,
            finished=finished,
            step_logprobs=self.step_logprobs + (logprob,),
            extras=self.extras + ((extra,) if extra is not None else ()),
        )


def trigram_blocked(hyp: Hypothesis | Sequence[int], candidate: int) -> bool:
    """True if appending ``candidate`` would repeat a trigram already in ``hyp``."""
    if isinstance(hyp, Hypothesis):
        tokens, trigrams = hyp.tokens, hyp.trigrams
    else:
        tokens = tuple(hyp)
        trigrams = {tokens[i : i + 3] for i in range(len(tokens) - 2)}
    if len(tokens) < 2:
        return False
    return (tokens[-2], tokens[-1], candidate) in trigrams


def _blocked_ids(hyp: Hypothesis) -> list[int]:
    if len(hyp.tokens) < 2:
        return []
    a, b = hyp.tokens[-2:]
    return [t[2] for t in hyp.trigrams if t[0] == a and t[1] == b]


@dataclass
class BeamResult:
    best: Hypothesis
    finished: list[Hypothesis]
    diagnostics: list[str]


def _candidate_scores(hyps, logprobs, block_trigrams):
    scores = logprobs.copy()
    if block_trigrams:
        for k, h in enumerate(hyps):
            scores[k, _blocked_ids(h)] = -np.inf
    return scores


def beam_search(
    stepper: Stepper,
    beam_size: int,
    max_length: int,
    block_trigrams: bool = False,
    eos: int = EOS,
    bos: int = BOS,
) -> BeamResult:
    """Beam search; the winner maximises log-probability divided by length.

    Each step ranks every extension of the live hypotheses by cumulative
    log-probability. Walking down that ranking, EOS extensions are set aside
    as finished until ``beam_size`` live ones are kept (at most ``2 * beam_size``
    extensions are examined); hypotheses reaching
    ``max_length`` finish too. Search stops once ``beam_size`` hypotheses have
    finished or none is live. The greedy path is stepped alongside in the same
    call and always competes in the final ranking, so the result never scores
    below greedy decoding.
    """
    if beam_size < 1 or max_length < 1:
        raise ValueError("beam_size and max_length must be >= 1")
    root = Hypothesis((), 0.0, stepper.initial_state())
    live = [root]
    anchor = root if beam_size > 1 else None
    anchor_done = None
    finished: list[Hypothesis] = []
    diagnostics: list[str] = []
    for t in range(max_length):
        searching = bool(live) and len(finished) < beam_size
        if not searching and anchor is None:
            break
        group = (live if searching else []) + ([anchor] if anchor is not None else [])
        prev = [h.tokens[-1] if h.tokens else bos for h in group]
        logprobs, states, extras = stepper.step(prev, [h.state for h in group])
        logprobs = np.array(logprobs, dtype=np.float64)
        scores = _candidate_scores(group, logprobs, block_trigrams)
        last = t == max_length - 1

        def grow(k, tok):
            done = tok == eos or last
            return group[k].extend(tok, float(logprobs[k, tok]), states[k], extras[k] if extras else None, done)

        def fallback(k):
            tok = int(np.argmax(logprobs[k]))
            diagnostics.append(f"step {t}: all candidates blocked; fell back to token {tok}")
            log.debug(diagnostics[-1])
            return tok

        if anchor is not None:
            k = len(group) - 1
            row = scores[k]
            tok = int(np.argmax(row)) if np.isfinite(row).any() else fallback(k)
            anchor = grow(k, tok)
            if anchor.finished:
                # kept apart so a duplicate of a beam entry cannot end the search early
                anchor_done = anchor
                anchor = None
        if not searching:
            continue
        n_live = len(live)
        flat = scores[:n_live].ravel()
        V = scores.shape[1]
        if not np.isfinite(flat).any():
            k = int(np.argmax(logprobs[:n_live].max(axis=1)))
            picks = [(k, fallback(k))]
        else:
            # stable sort: equal scores resolve to the lower (hypothesis, token) index
            # only the best 2B extensions are considered, as in the usual formulation
            order = np.argsort(-flat, kind="stable")[: 2 * beam_size]
            picks = [(int(i) // V, int(i) % V) for i in order if np.isfinite(flat[i])]
        live_next = []
        for k, tok in picks:
            h = grow(k, tok)
            if h.finished:
                finished.append(h)
            else:
                live_next.append(h)
                if len(live_next) == beam_size:
                    break
        live = live_next
    finished.extend(h for h in live if h.finished)
    if not finished:
        # the beam stopped with live hypotheses only; rank them as they stand
        finished = list(live)
    if anchor_done is not None and anchor_done.tokens not in {h.tokens for h in finished}:
        finished.append(anchor_done)
    best = max(finished, key=lambda h: h.score)
    return BeamResult(best, finished, diagnostics)


def greedy_decode(stepper: Stepper, max_length: int, eos: int = EOS, bos: int = BOS) -> list[int]:
    """Per-step argmax (lowest id on ties) until EOS or ``max_length``; EOS is dropped."""
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    state = stepper.initial_state()
    prev = bos
    out: list[int] = []
    for _ in range(max_length):
        logprobs, states, _ = stepper.step([prev], [state])
        tok = int(np.argmax(logprobs[0]))
        if tok == eos:
            break
        out.append(tok)
        prev, state = tok, states[0]
    return out


class ModelStepper:
    """Adapts a parameter snapshot and one source example to the stepper protocol.

    ``extras`` carries each step's (raw, gate, refined) attention rows.
    """

    def __init__(self, params: M.ModelParams, example: ExtendedExample):
        self.params = params
        self.example = example
        with no_grad():
            self.enc = M.encode(
                params,
                np.asarray(example.source_ids),
                source_ext=np.asarray(example.source_ext),
                n_oov=len(example.oovs),
            )
        h0, c0 = self.enc.init_state
        self._init = (h0.data[0], c0.data[0])

    def initial_state(self):
        return self._init

    def step(self, prev_ids, states):
        h = Tensor(np.stack([s[0] for s in states]))
        c = Tensor(np.stack([s[1] for s in states]))
        with no_grad():
            out = M.decode_step(self.params, np.asarray(prev_ids), (h, c), self.enc)
        with np.errstate(divide="ignore"):
            logprobs = np.log(out.final_dist.data)
        hd, cd = out.state[0].data, out.state[1].data
        att = out.attention
        new_states = [(hd[k], cd[k]) for k in range(len(states))]
        extras = [(att.raw.data[k], att.gate.data[k], att.refined.data[k]) for k in range(len(states))]
        return logprobs, new_states, extras
