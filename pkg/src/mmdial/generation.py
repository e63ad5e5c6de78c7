"""Response scoring and greedy / beam / nucleus decoding over a fixed context."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .batch import Builder, SequenceBatch, collate
from .corpus import DialogueSample
from .model import ModelParams, forward
from .text import CAP_ID, EOS_ID, USER2_ID, Vocab, decode
from .trainer import clm_context, rlm_context


class NextTokenModel(Protocol):
    vocab_size: int

    def next_log_probs(self, prefixes: list[list[int]]) -> np.ndarray:
        """Log-probabilities ``[len(prefixes), V]`` of the token after each prefix."""


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64) - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


class ContextScorer:
    """The transformer as a next-token model continuing a fixed context.

    Generated tokens are appended as text slots under ``segment``.
    """

    def __init__(self, params: ModelParams, context: Builder | SequenceBatch, segment: int = USER2_ID):
        if isinstance(context, Builder):
            context = context.build("rlm")
        self.params = params
        self.context = context
        self.segment = segment
        self.vocab_size = params.config.vocab_size

    def extend(self, tokens) -> SequenceBatch:
        c, k = self.context, len(tokens)
        n = len(c) + k
        f = c.features.shape[-1]
        return SequenceBatch(
            token_ids=np.concatenate([c.token_ids, np.asarray(tokens, dtype=np.int64)]),
            segment_ids=np.concatenate([c.segment_ids, np.full(k, self.segment, dtype=np.int64)]),
            is_feature=np.concatenate([c.is_feature, np.zeros(k, dtype=bool)]),
            features=np.concatenate([c.features, np.zeros((k, f))]),
            positions=np.arange(n, dtype=np.int64),
            lm_targets=np.zeros(n, dtype=np.int64), lm_mask=np.zeros(n, dtype=bool),
            feature_targets=np.zeros((n, f)), feature_mask=np.zeros(n, dtype=bool),
            task=c.task,
        )

    def next_log_probs(self, prefixes: list[list[int]]) -> np.ndarray:
        batch = collate([self.extend(p) for p in prefixes])
        logits, _ = forward(batch, self.params, "eval")
        last = np.array([len(self.context) + len(p) - 1 for p in prefixes])
        return _log_softmax(logits.data[np.arange(len(prefixes)), last])


@dataclass
class DecodeConfig:
    method: str = "beam"
    beam_size: int = 5
    max_length: int = 20
    length_penalty: float = 0.3
    nucleus_p: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("greedy", "beam", "nucleus"):
            raise ValueError(f"unknown decoding method {self.method!r}")
        if self.beam_size < 1 or self.max_length < 1:
            raise ValueError("beam_size and max_length must be >= 1")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must lie in (0, 1]")


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False
    score: float = 0.0

    def penalized(self, alpha: float) -> float:
        return length_penalized(self.logprob, len(self.tokens), alpha)

    @property
    def ends_with_eos(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID


def length_penalized(logprob: float, length: int, alpha: float) -> float:
    return logprob / (max(length, 1) ** alpha)


def _finish(h: Hypothesis, alpha: float) -> Hypothesis:
    h.finished = True
    h.score = h.penalized(alpha)
    return h


def greedy_decode(model: NextTokenModel, config: DecodeConfig) -> Hypothesis:
    """Stepwise argmax; ties go to the lowest token id."""
    h = Hypothesis()
    while True:
        lp = model.next_log_probs([h.tokens])[0]
        tok = int(np.argmax(lp))
        h.tokens.append(tok)
        h.logprob += float(lp[tok])
        if tok == EOS_ID or len(h.tokens) >= config.max_length:
            return _finish(h, config.length_penalty)


def beam_search_decode(model: NextTokenModel, config: DecodeConfig, top_k: int = 1):
    """Prune on raw log-prob; rank finished hypotheses by ``logprob / len**alpha``.

    Returns the best :class:`Hypothesis`, or the ``top_k`` best as a list when
    ``top_k > 1``. No early stopping: search runs until no live hypothesis is left.
    """
    alpha = config.length_penalty
    live = [Hypothesis()]
    pool: list[Hypothesis] = []
    while live:
        lps = model.next_log_probs([h.tokens for h in live])
        v = lps.shape[1]
        cum = np.array([h.logprob for h in live])[:, None] + lps
        parents = np.repeat(np.arange(len(live)), v)
        toks = np.tile(np.arange(v), len(live))
        flat = cum.reshape(-1)
        order = np.lexsort((toks, parents, -flat))[:config.beam_size]
        nxt = []
        for k in order:
            parent = live[parents[k]]
            h = Hypothesis(parent.tokens + [int(toks[k])], parent.logprob + float(lps[parents[k], toks[k]]))
            if toks[k] == EOS_ID or len(h.tokens) >= config.max_length:
                pool.append(_finish(h, alpha))
            else:
                nxt.append(h)
        live = nxt
    pool.sort(key=lambda h: (-h.score, h.tokens))
    return pool[0] if top_k == 1 else pool[:top_k]


def nucleus_filter(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted token set with mass >= p, renormalized.

    Returns ``(token_ids, probabilities)``; ties in probability keep the lower id first.
    """
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = min(int(np.searchsorted(cum, p * cum[-1] * (1 - 1e-12), side="left")) + 1, len(order))
    kept = order[:k]
    w = probs[kept]
    return kept, w / w.sum()


def sample_nucleus(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    kept, w = nucleus_filter(probs, p)
    u = rng.random()
    idx = min(int(np.searchsorted(np.cumsum(w), u, side="right")), len(kept) - 1)
    return int(kept[idx])


def nucleus_sample(model: NextTokenModel, config: DecodeConfig) -> Hypothesis:
    rng = np.random.default_rng(config.seed)
    h = Hypothesis()
    while True:
        lp = model.next_log_probs([h.tokens])[0]
        tok = sample_nucleus(np.exp(lp), config.nucleus_p, rng)
        h.tokens.append(tok)
        h.logprob += float(lp[tok])
        if tok == EOS_ID or len(h.tokens) >= config.max_length:
            return _finish(h, config.length_penalty)


def run_decoder(model: NextTokenModel, config: DecodeConfig) -> Hypothesis:
    config.validate()
    if config.method == "greedy":
        return greedy_decode(model, config)
    if config.method == "beam":
        return beam_search_decode(model, config)
    return nucleus_sample(model, config)


def sequence_log_prob(context: Builder | SequenceBatch, response: list[int], params: ModelParams,
                      segment: int = USER2_ID, add_eos: bool = True) -> float:
    """``log P(response [+ EOS] | context)`` from a single teacher-forced pass.

    A response already ending in EOS is not extended.
    """
    scorer = ContextScorer(params, context, segment)
    targets = list(response)
    if add_eos and (not targets or targets[-1] != EOS_ID):
        targets.append(EOS_ID)
    if not targets:
        raise ValueError("nothing to score")
    batch = scorer.extend(targets[:-1])
    logits, _ = forward(batch, params, "eval")
    start = len(scorer.context) - 1
    lp = _log_softmax(logits.data[0, start:start + len(targets)])
    return float(lp[np.arange(len(targets)), targets].sum())


def stepwise_log_prob(model: NextTokenModel, tokens: list[int]) -> float:
    """Chain-rule sum using one next-token query per step."""
    return float(sum(model.next_log_probs([tokens[:j]])[0][t] for j, t in enumerate(tokens)))


# ------------------------------------------------------------ dialogue API

@dataclass
class Setting:
    include_video: bool = True
    include_caption: bool = True
    recaption: bool = False
    max_history: int = 3


def respond(sample: DialogueSample, turn_index: int, params: ModelParams, vocab: Vocab,
            setting: Setting, config: DecodeConfig, caption: list[str] | None = None) -> Hypothesis:
    ctx = rlm_context(sample, turn_index, setting.max_history, setting.include_video,
                      setting.include_caption or caption is not None, vocab, params.config,
                      caption=caption, reserve=config.max_length)
    return run_decoder(ContextScorer(params, ctx, USER2_ID), config)


def generate_caption(sample: DialogueSample, params: ModelParams, vocab: Vocab,
                     config: DecodeConfig) -> list[str]:
    scorer = ContextScorer(params, clm_context(sample, params.config), CAP_ID)
    h = run_decoder(scorer, config)
    return decode(h.tokens, vocab).split()


def recaption_respond(sample: DialogueSample, turn_index: int, params: ModelParams, vocab: Vocab,
                      setting: Setting, config: DecodeConfig,
                      caption_config: DecodeConfig | None = None) -> tuple[list[str], Hypothesis]:
    """Decode a caption from the video alone, then respond conditioned on it."""
    caption = generate_caption(sample, params, vocab, caption_config or config)
    return caption, respond(sample, turn_index, params, vocab, setting, config, caption=caption)


def decode_record(sample: DialogueSample, turn_index: int, h: Hypothesis, vocab: Vocab,
                  method: str, caption: list[str] | None = None) -> dict:
    rec = {
        "dialogue_id": sample.video_id,
        "turn": turn_index,
        "method": method,
        "text": decode(h.tokens, vocab),
        "logprob": h.logprob,
        "score": h.score,
    }
    if caption is not None:
        rec["caption"] = " ".join(caption)
    return rec

