"""Sequence assembly for the three tasks, their losses, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .batch import Builder, SequenceBatch, as_batched, collate
from .corpus import DialogueSample
from .model import ModelConfig, ModelParams, forward, load_checkpoint, save_checkpoint
from .text import BOS_ID, CAP_ID, EOS_ID, USER1_ID, USER2_ID, VIDEO_ID, Vocab, encode

log = logging.getLogger(__name__)


class SkipSample(Exception):
    """The sample has no target for this task (e.g. a single feature row)."""


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------- assembly

def _turn_ids(sample: DialogueSample, vocab: Vocab) -> list[tuple[list[int], list[int]]]:
    return [(encode(q, vocab), encode(r, vocab)) for q, r in sample.turns]


def _turn_len(q, r) -> int:
    return 2 + len(q) + len(r)


def rlm_context(sample: DialogueSample, turn_index: int, max_history: int, include_video: bool,
                include_caption: bool, vocab: Vocab, config: ModelConfig,
                caption: list[str] | None = None, reserve: int = 0) -> Builder:
    """Slots up to and including the ``[user2]`` marker that opens response ``turn_index``.

    Oldest history turns are dropped first when the layout would not fit in
    ``max_positions - reserve``.
    """
    n = turn_index
    if not 1 <= n <= sample.n_turns:
        raise AssemblyError(f"turn index {n} outside 1..{sample.n_turns}")
    turns = _turn_ids(sample, vocab)
    cap = encode(caption if caption is not None else sample.caption, vocab) if include_caption else None
    history = turns[max(0, n - 1 - max_history):n - 1] if max_history > 0 else []
    q_n = turns[n - 1][0]

    def length(hist):
        size = 1 + (len(sample.features) if include_video else 0)
        size += 1 + len(cap) if cap is not None else 0
        size += sum(_turn_len(q, r) for q, r in hist) + 2 + len(q_n)
        return size

    budget = config.max_positions - reserve
    while length(history) > budget and history:
        history = history[1:]
    if length(history) > budget:
        raise AssemblyError(f"context of {length(history)} slots exceeds budget {budget}")
    b = Builder(config.feature_dim)
    first = VIDEO_ID if include_video else CAP_ID if cap is not None else USER1_ID
    b.text([BOS_ID], first)
    if include_video:
        b.video(sample.features)
    if cap is not None:
        b.text([CAP_ID] + cap, CAP_ID)
    for q, r in history:
        b.text([USER1_ID] + q, USER1_ID)
        b.text([USER2_ID] + r, USER2_ID)
    b.text([USER1_ID] + q_n, USER1_ID)
    b.text([USER2_ID], USER2_ID)
    return b


def assemble_rlm(sample: DialogueSample, turn_index: int, max_history: int, include_video: bool,
                 include_caption: bool, vocab: Vocab, config: ModelConfig,
                 caption: list[str] | None = None) -> SequenceBatch:
    """``[BOS] video [cap] caption history [user1] Q_n [user2] R_n [EOS]``; targets over R_n + EOS."""
    if not 1 <= turn_index <= sample.n_turns:
        raise AssemblyError(f"turn index {turn_index} outside 1..{sample.n_turns}")
    response = encode(sample.turns[turn_index - 1][1], vocab)
    b = rlm_context(sample, turn_index, max_history, include_video, include_caption, vocab,
                    config, caption=caption, reserve=len(response) + 1)
    start = len(b) - 1
    b.text(response + [EOS_ID], USER2_ID)
    targets = {start + j: t for j, t in enumerate(response + [EOS_ID])}
    return b.build("rlm", lm_targets=targets)


def assemble_vasm(sample: DialogueSample, max_history: int, vocab: Vocab, config: ModelConfig,
                  include_caption: bool = True) -> SequenceBatch:
    """``[BOS] [cap] caption dialogue VA_1..VA_T``; the slot holding VA_t predicts VA_{t+1}.

    Video comes last so every prediction conditions on caption, dialogue and
    the rows up to t under the causal mask.
    """
    rows = sample.features
    if len(rows) < 2:
        raise SkipSample(f"{sample.video_id}: fewer than two feature rows")
    turns = _turn_ids(sample, vocab)
    turns = turns[max(0, len(turns) - max_history):] if max_history > 0 else []
    cap = encode(sample.caption, vocab) if include_caption else None
    fixed = 1 + len(rows) + (1 + len(cap) if cap is not None else 0)
    while turns and fixed + sum(_turn_len(q, r) for q, r in turns) > config.max_positions:
        turns = turns[1:]
    if fixed > config.max_positions:
        raise AssemblyError(f"{sample.video_id}: VASM layout exceeds max_positions")
    b = Builder(config.feature_dim)
    b.text([BOS_ID], CAP_ID if cap is not None else USER1_ID if turns else VIDEO_ID)
    if cap is not None:
        b.text([CAP_ID] + cap, CAP_ID)
    for q, r in turns:
        b.text([USER1_ID] + q, USER1_ID)
        b.text([USER2_ID] + r, USER2_ID)
    start, _ = b.video(rows)
    targets = {start + t: rows[t + 1] for t in range(len(rows) - 1)}
    return b.build("vasm", feature_targets=targets)


def clm_context(sample: DialogueSample, config: ModelConfig) -> Builder:
    b = Builder(config.feature_dim)
    b.text([BOS_ID], VIDEO_ID)
    b.video(sample.features)
    b.text([CAP_ID], CAP_ID)
    return b


def assemble_clm(sample: DialogueSample, vocab: Vocab, config: ModelConfig) -> SequenceBatch:
    """``[BOS] video [cap] caption [EOS]``; targets over caption + EOS."""
    cap = encode(sample.caption, vocab)
    if not cap:
        raise SkipSample(f"{sample.video_id}: empty caption")
    b = clm_context(sample, config)
    if len(b) + len(cap) + 1 > config.max_positions:
        raise AssemblyError(f"{sample.video_id}: CLM layout exceeds max_positions")
    start = len(b) - 1
    b.text(cap + [EOS_ID], CAP_ID)
    return b.build("clm", lm_targets={start + j: t for j, t in enumerate(cap + [EOS_ID])})


# ------------------------------------------------------------------ losses

def _lm_loss(lm_logits: Tensor, batch: SequenceBatch, task: str) -> Tensor:
    if batch.task != task:
        raise ValueError(f"expected a {task} batch, got {batch.task}")
    if lm_logits.data.ndim == 3:
        batch = as_batched(batch)
    return ad.softmax_cross_entropy(lm_logits, batch.lm_targets, batch.lm_mask)


def rlm_loss(lm_logits: Tensor, batch: SequenceBatch) -> Tensor:
    return _lm_loss(lm_logits, batch, "rlm")


def clm_loss(lm_logits: Tensor, batch: SequenceBatch) -> Tensor:
    return _lm_loss(lm_logits, batch, "clm")


def vasm_loss(feature_preds: Tensor, batch: SequenceBatch) -> Tensor:
    if batch.task != "vasm":
        raise ValueError(f"expected a vasm batch, got {batch.task}")
    if feature_preds.data.ndim == 3:
        batch = as_batched(batch)
    return ad.squared_error(feature_preds, batch.feature_targets, batch.feature_mask)


def task_loss(task: str, logits: Tensor, preds: Tensor, batch: SequenceBatch) -> Tensor:
    if task == "vasm":
        return vasm_loss(preds, batch)
    return rlm_loss(logits, batch) if task == "rlm" else clm_loss(logits, batch)


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    @classmethod
    def restore(cls, hyper: dict, tensors: dict[str, np.ndarray]) -> "AdamState":
        st = cls(**hyper)
        for key, arr in tensors.items():
            kind, name = key[len("adam."):].split(".", 1)
            getattr(st, kind)[name] = arr
        return st


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam step, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"no gradient for parameter {name}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# -------------------------------------------------------------- train step

@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    total: float
    grad_norm: float
    skipped: bool = False

    def log_line(self) -> str:
        cols = [str(self.step)] + [f"{self.losses.get(t, math.nan):.6f}" for t in ("rlm", "vasm", "clm")]
        return "\t".join(cols + [f"{self.total:.6f}", f"{self.grad_norm:.6f}"])


def train_step(batches: dict[str, SequenceBatch], params: ModelParams, adam: AdamState,
               weights: dict[str, float], rng: np.random.Generator | None = None,
               clip: float | None = 1.0, step: int = 0, mode: str = "train") -> StepReport:
    """Weighted multi-task loss, one backward pass, one Adam update."""
    active = {t: b for t, b in batches.items() if weights.get(t, 0.0) != 0.0}
    if not active:
        raise ValueError("train_step needs at least one active task")
    losses: dict[str, Tensor] = {}
    with Tape() as tape:
        total = None
        for task, batch in active.items():
            logits, preds = forward(batch, params, mode, rng)
            losses[task] = task_loss(task, logits, preds, batch)
            term = ad.scale(losses[task], weights[task])
            total = term if total is None else ad.add(total, term)
    values = {t: float(l.data) for t, l in losses.items()}
    if not np.isfinite(total.data):
        tape.reset()
        log.warning("step %d: non-finite loss %s, update skipped", step, values)
        return StepReport(step, values, float(total.data), math.nan, skipped=True)
    params.zero_grad()
    tape.backward(total)
    tape.reset()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if clip is not None and norm > clip:
        factor = clip / (norm + 1e-12)
        grads = {n: g * factor for n, g in grads.items()}
    adam_update(params, grads, adam)
    params.zero_grad()
    return StepReport(step, values, float(total.data), norm)


# ----------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    tasks: tuple[str, ...] = ("rlm", "vasm", "clm")
    weights: dict[str, float] = field(default_factory=lambda: {"rlm": 1.0, "vasm": 1.0, "clm": 1.0})
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    max_history: int = 3
    include_video: bool = True
    include_caption: bool = True
    clip: float = 1.0
    mixing: str = "sum"
    log_every: int = 50
    val_every: int = 0
    ckpt_every: int = 0
    ckpt_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)


class Trainer:
    """Deterministic multi-task training over a fixed sample list.

    Batch ``k`` of each task is a pure function of ``(seed, k)``, and dropout
    draws come from a generator seeded by ``(seed, step)``, so a resumed run
    repeats the uninterrupted one exactly.
    """

    def __init__(self, params: ModelParams, vocab: Vocab, samples: list[DialogueSample],
                 config: TrainConfig, adam: AdamState | None = None, step: int = 0,
                 log_path=None):
        self.params = params
        self.vocab = vocab
        self.samples = samples
        self.config = config
        self.adam = adam or AdamState(lr=config.lr)
        self.step_count = step
        self.log_path = Path(log_path) if log_path else None
        self.history: list[StepReport] = []
        mc = params.config
        self._pools = {
            "rlm": [(i, n) for i, s in enumerate(samples) for n in range(1, s.n_turns + 1)],
            "vasm": [i for i, s in enumerate(samples) if len(s.features) >= 2],
            "clm": [i for i, s in enumerate(samples) if s.caption],
        }
        self._perms: dict[tuple[str, int], np.ndarray] = {}
        self._mc = mc

    def _assemble(self, task: str, item) -> SequenceBatch:
        c = self.config
        if task == "rlm":
            i, n = item
            b = assemble_rlm(self.samples[i], n, c.max_history, c.include_video, c.include_caption,
                             self.vocab, self._mc)
        elif task == "vasm":
            b = assemble_vasm(self.samples[item], c.max_history, self.vocab, self._mc,
                              include_caption=c.include_caption)
        else:
            b = assemble_clm(self.samples[item], self.vocab, self._mc)
        return b

    def batch_items(self, task: str, step: int) -> list:
        pool = self._pools[task]
        n, bs = len(pool), self.config.batch_size
        if n == 0:
            raise ValueError(f"no trainable samples for task {task}")
        out = []
        for p in range(step * bs, (step + 1) * bs):
            epoch = p // n
            perm = self._perms.get((task, epoch))
            if perm is None:
                tag = ("rlm", "vasm", "clm").index(task)
                perm = np.random.default_rng([self.config.seed, tag, epoch]).permutation(n)
                self._perms[(task, epoch)] = perm
            out.append(pool[perm[p % n]])
        return out

    def batches_for(self, step: int, rng: np.random.Generator) -> dict[str, SequenceBatch]:
        tasks = [t for t in self.config.tasks if self.config.weights.get(t, 0.0) != 0.0]
        if self.config.mixing == "sample":
            tasks = [tasks[int(rng.integers(len(tasks)))]]
        return {t: collate([self._assemble(t, it) for it in self.batch_items(t, step)]) for t in tasks}

    def step(self) -> StepReport:
        s = self.step_count
        rng = np.random.default_rng([self.config.seed, 7919, s])
        batches = self.batches_for(s, rng)
        report = train_step(batches, self.params, self.adam, self.config.weights, rng=rng,
                            clip=self.config.clip, step=s + 1)
        self.step_count += 1
        self.history.append(report)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(report.log_line() + "\n")
        return report

    def run(self, steps: int | None = None, val_samples: list[DialogueSample] | None = None):
        c = self.config
        target = self.step_count + (c.steps if steps is None else steps)
        while self.step_count < target:
            r = self.step()
            if c.log_every and r.step % c.log_every == 0:
                log.info("step %d total %.4f %s", r.step, r.total,
                         " ".join(f"{k}={v:.4f}" for k, v in r.losses.items()))
            if c.val_every and val_samples and r.step % c.val_every == 0:
                val = evaluate_losses(self.params, self.vocab, val_samples, c)
                log.info("step %d validation %s", r.step, val)
            if c.ckpt_every and c.ckpt_dir and r.step % c.ckpt_every == 0:
                self.save(Path(c.ckpt_dir) / f"step{r.step:06d}.mmdf")
        return self.history

    def save(self, path) -> None:
        meta = {"step": self.step_count, "train": self.config.to_dict(), "adam": self.adam.hyper(),
                "vocab": self.vocab.itos}
        save_checkpoint(path, self.params, extra=self.adam.tensors(), meta=meta)

    @classmethod
    def resume(cls, path, samples: list[DialogueSample], log_path=None,
               config: TrainConfig | None = None) -> "Trainer":
        params, extra, meta = load_checkpoint(path)
        adam = AdamState.restore(meta["adam"], {k: v.astype(params.dtype) for k, v in extra.items()})
        cfg = config or TrainConfig.from_dict(meta["train"])
        return cls(params, Vocab(meta["vocab"]), samples, cfg, adam=adam, step=meta["step"],
                   log_path=log_path)


# -------------------------------------------------------------- evaluation

def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate_losses(params: ModelParams, vocab: Vocab, samples: list[DialogueSample],
                    config: TrainConfig, batch_size: int = 64) -> dict[str, float]:
    """Eval-mode mean loss per active task (position-weighted)."""
    out = {}
    mc = params.config
    for task in config.tasks:
        built = []
        for i, s in enumerate(samples):
            try:
                if task == "rlm":
                    built += [assemble_rlm(s, n, config.max_history, config.include_video,
                                           config.include_caption, vocab, mc)
                              for n in range(1, s.n_turns + 1)]
                elif task == "vasm":
                    built.append(assemble_vasm(s, config.max_history, vocab, mc, config.include_caption))
                else:
                    built.append(assemble_clm(s, vocab, mc))
            except SkipSample:
                continue
        num = den = 0.0
        for chunk in _chunks(built, batch_size):
            b = collate(chunk)
            logits, preds = forward(b, params, "eval")
            count = (b.feature_mask if task == "vasm" else b.lm_mask).sum()
            num += float(task_loss(task, logits, preds, b).data) * count
            den += count
        out[task] = num / den if den else math.nan
    return out


def response_token_accuracy(params: ModelParams, vocab: Vocab, samples: list[DialogueSample],
                            max_history: int = 3, include_video: bool = True,
                            include_caption: bool = True, batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over response tokens plus EOS."""
    built = [assemble_rlm(s, n, max_history, include_video, include_caption, vocab, params.config)
             for s in samples for n in range(1, s.n_turns + 1)]
    hit = total = 0
    for chunk in _chunks(built, batch_size):
        b = collate(chunk)
        logits, _ = forward(b, params, "eval")
        pred = logits.data.argmax(axis=-1)
        hit += int(((pred == b.lm_targets) & b.lm_mask).sum())
        total += int(b.lm_mask.sum())
    return hit / total


def next_feature_mse(params: ModelParams, vocab: Vocab, samples: list[DialogueSample],
                     max_history: int = 3, include_caption: bool = True, batch_size: int = 64) -> float:
    """Mean squared Euclidean error of next-row predictions over all VASM targets."""
    built = []
    for s in samples:
        try:
            built.append(assemble_vasm(s, max_history, vocab, params.config, include_caption))
        except SkipSample:
            continue
    num = den = 0.0
    for chunk in _chunks(built, batch_size):
        b = collate(chunk)
        _, preds = forward(b, params, "eval")
        err = ((preds.data.astype(np.float64) - b.feature_targets) ** 2).sum(axis=-1)
        num += float(err[b.feature_mask].sum())
        den += int(b.feature_mask.sum())
    return num / den


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
