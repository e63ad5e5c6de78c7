"""Assembled model inputs: one sequence, or several padded into a minibatch."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .text import PAD_ID, VIDEO_ID

TASKS = ("rlm", "vasm", "clm")


@dataclass
class SequenceBatch:
    """Slot layout with prediction targets.

    A slot is textual (``token_ids[i]`` with segment ``segment_ids[i]``) or a
    feature row (``is_feature[i]``, row in ``features[i]``). Arrays are 1-D per
    sequence; :func:`collate` stacks several into 2-D arrays with right padding.
    The target at slot ``i`` is what slot ``i`` predicts.
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray
    is_feature: np.ndarray
    features: np.ndarray
    positions: np.ndarray
    lm_targets: np.ndarray
    lm_mask: np.ndarray
    feature_targets: np.ndarray
    feature_mask: np.ndarray
    task: str = "rlm"
    valid: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.token_ids.shape[-1]

    @property
    def batched(self) -> bool:
        return self.token_ids.ndim == 2

    def slots(self):
        """Yield ``("text", token, segment, pos)`` or ``("feature", row, pos)``."""
        if self.batched:
            raise ValueError("slots() is defined for a single sequence")
        for i in range(len(self)):
            if self.is_feature[i]:
                yield ("feature", self.features[i], int(self.positions[i]))
            else:
                yield ("text", int(self.token_ids[i]), int(self.segment_ids[i]), int(self.positions[i]))


class Builder:
    """Appends slots left to right and produces a :class:`SequenceBatch`."""

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.tokens: list[int] = []
        self.segments: list[int] = []
        self.is_feature: list[bool] = []
        self.rows: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self, ids, segment: int) -> tuple[int, int]:
        start = len(self.tokens)
        for t in ids:
            self.tokens.append(int(t))
            self.segments.append(segment)
            self.is_feature.append(False)
        return start, len(self.tokens)

    def video(self, rows: np.ndarray) -> tuple[int, int]:
        start = len(self.tokens)
        for r in rows:
            self.rows[len(self.tokens)] = r
            self.tokens.append(VIDEO_ID)
            self.segments.append(VIDEO_ID)
            self.is_feature.append(True)
        return start, len(self.tokens)

    def build(self, task: str, lm_targets: dict[int, int] | None = None,
              feature_targets: dict[int, np.ndarray] | None = None) -> SequenceBatch:
        n = len(self.tokens)
        feats = np.zeros((n, self.feature_dim))
        for i, r in self.rows.items():
            feats[i] = r
        lm_t = np.zeros(n, dtype=np.int64)
        lm_m = np.zeros(n, dtype=bool)
        for i, t in (lm_targets or {}).items():
            lm_t[i], lm_m[i] = t, True
        f_t = np.zeros((n, self.feature_dim))
        f_m = np.zeros(n, dtype=bool)
        for i, r in (feature_targets or {}).items():
            f_t[i], f_m[i] = r, True
        return SequenceBatch(
            token_ids=np.array(self.tokens, dtype=np.int64),
            segment_ids=np.array(self.segments, dtype=np.int64),
            is_feature=np.array(self.is_feature, dtype=bool),
            features=feats,
            positions=np.arange(n, dtype=np.int64),
            lm_targets=lm_t, lm_mask=lm_m,
            feature_targets=f_t, feature_mask=f_m,
            task=task,
        )


def collate(batches: list[SequenceBatch]) -> SequenceBatch:
    """Right-pad single sequences into one ``[B, L]`` batch (pads carry no targets)."""
    if not batches:
        raise ValueError("nothing to collate")
    if len({b.task for b in batches}) != 1:
        raise ValueError("cannot collate batches of different tasks")
    b_n, l_n = len(batches), max(len(b) for b in batches)
    f = batches[0].features.shape[-1]
    out = SequenceBatch(
        token_ids=np.full((b_n, l_n), PAD_ID, dtype=np.int64),
        segment_ids=np.full((b_n, l_n), PAD_ID, dtype=np.int64),
        is_feature=np.zeros((b_n, l_n), dtype=bool),
        features=np.zeros((b_n, l_n, f)),
        positions=np.zeros((b_n, l_n), dtype=np.int64),
        lm_targets=np.zeros((b_n, l_n), dtype=np.int64),
        lm_mask=np.zeros((b_n, l_n), dtype=bool),
        feature_targets=np.zeros((b_n, l_n, f)),
        feature_mask=np.zeros((b_n, l_n), dtype=bool),
        task=batches[0].task,
        valid=np.zeros((b_n, l_n), dtype=bool),
    )
    for i, b in enumerate(batches):
        n = len(b)
        for name in ("token_ids", "segment_ids", "is_feature", "features", "positions",
                     "lm_targets", "lm_mask", "feature_targets", "feature_mask"):
            getattr(out, name)[i, :n] = getattr(b, name)
        out.valid[i, :n] = True
    return out


def as_batched(batch: SequenceBatch) -> SequenceBatch:
    return batch if batch.batched else collate([batch])
