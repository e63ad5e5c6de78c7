"""Dialogue samples, AVSD-style ingestion, feature files and a synthetic generator.

The synthetic world: each video has a latent activity and a latent count. Its
feature rows are ``prototype(activity) + count * count_step * e_c +
t * drift_step * e_d + noise``, so the next row is predictable from the latents
and the current row. Captions and answers are templated from the latents, and
one question type ("what did i just ask about ?") can only be answered from the
previous turn.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .text import tokenize


class DatasetError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass
class DialogueSample:
    video_id: str
    caption: list[str]
    turns: list[tuple[list[str], list[str]]]
    features: np.ndarray
    latents: dict | None = field(default=None, repr=False)

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def texts(self):
        yield " ".join(self.caption)
        for q, r in self.turns:
            yield " ".join(q)
            yield " ".join(r)


# ------------------------------------------------------------ feature files

VAFT_MAGIC = b"VAFT"
VAFT_VERSION = 1


def write_features(path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FeatureFileError(f"features must be a non-empty T x dim array, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise FeatureFileError("features contain non-finite values")
    header = VAFT_MAGIC + struct.pack("<III", VAFT_VERSION, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_features(path, expected_dim: int | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != VAFT_MAGIC:
        raise FeatureFileError(f"{path}: bad magic")
    version, t, dim = struct.unpack_from("<III", buf, 4)
    if version != VAFT_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if t == 0:
        raise FeatureFileError(f"{path}: zero-length feature sequence")
    if expected_dim is not None and dim != expected_dim:
        raise FeatureFileError(f"{path}: feature dim {dim} != configured {expected_dim}")
    if len(buf) != 16 + 4 * t * dim:
        raise FeatureFileError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(t, dim).astype(np.float32)


# --------------------------------------------------------------- ingestion

def _parse_records(path: Path):
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        if not path.suffix == ".jsonl":
            raise DatasetError(f"{path}:{err.lineno}: {err.msg}") from None
        doc = None
    if isinstance(doc, dict):
        return [(f"record {i}", r) for i, r in enumerate(doc.get("dialogs", []))]
    if isinstance(doc, list):
        return [(f"record {i}", r) for i, r in enumerate(doc)]
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append((f"line {lineno}", json.loads(line)))
        except json.JSONDecodeError as err:
            raise DatasetError(f"{path}:{lineno}: {err.msg}") from None
    return out


def load_dataset(dialog_path, feature_dir, expected_dim: int | None = None) -> list[DialogueSample]:
    """Read AVSD-layout dialogues and attach ``<video_id>.vaft`` features.

    Caption is the summary followed by the caption; a missing summary is empty.
    """
    dialog_path, feature_dir = Path(dialog_path), Path(feature_dir)
    samples = []
    missing = []
    for where, rec in _parse_records(dialog_path):
        try:
            vid = str(rec.get("video_id", rec.get("image_id")))
            if vid == "None":
                raise KeyError("image_id")
            caption = tokenize(rec.get("summary") or "") + tokenize(rec["caption"])
            turns = [(tokenize(t["question"]), tokenize(t["answer"])) for t in rec["dialog"]]
        except (KeyError, TypeError, AttributeError) as err:
            raise DatasetError(f"{dialog_path}: {where}: malformed record ({err})") from None
        if not turns:
            raise DatasetError(f"{dialog_path}: {where}: dialogue has no turns")
        fpath = feature_dir / f"{vid}.vaft"
        if not fpath.exists():
            missing.append(vid)
            continue
        samples.append(DialogueSample(vid, caption, turns, read_features(fpath, expected_dim)))
    if missing:
        raise DatasetError(f"missing feature files for video_id(s): {', '.join(missing)}")
    return samples


def read_split(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def write_split(path, video_ids) -> None:
    Path(path).write_text("".join(v + "\n" for v in video_ids))


# --------------------------------------------------------------- synthetic

ACTIVITIES = ("cooking", "cleaning", "reading", "dancing", "singing", "painting", "typing", "jumping")
COUNTS = ("one", "two", "three", "four", "five")
TOPIC = {"act": "activity", "act_yn": "activity", "cnt": "count", "cnt_yn": "count"}


def _question(kind: str, probe: str | None = None) -> str:
    return {
        "act": "what is the person doing ?",
        "cnt": "how many times do they do it ?",
        "act_yn": f"is the person {probe} ?",
        "cnt_yn": f"do they do it {probe} times ?",
        "prev": "what did i just ask about ?",
    }[kind]


def _answer(kind: str, activity: str, count: str, probe: str | None, prev_kind: str | None) -> str:
    if kind == "act":
        return f"the person is {activity} ."
    if kind == "cnt":
        return f"they do it {count} times ."
    if kind == "act_yn":
        return f"{'yes' if probe == activity else 'no'} , the person is {activity} ."
    if kind == "cnt_yn":
        return f"{'yes' if probe == count else 'no'} , {count} times ."
    return f"you asked about the {TOPIC.get(prev_kind, 'activity')} ."


def _caption(activity: str, count: str) -> tuple[str, str]:
    return f"a person is {activity} in the video .", f"they do it {count} times ."


def _question_kind(q_tokens: list[str]) -> tuple[str, str | None]:
    q = " ".join(q_tokens)
    if q == _question("act"):
        return "act", None
    if q == _question("cnt"):
        return "cnt", None
    if q == _question("prev"):
        return "prev", None
    if q.startswith("is the person "):
        return "act_yn", q_tokens[3]
    return "cnt_yn", q_tokens[4]


@dataclass
class SyntheticSpec:
    n_activities: int = 4
    noise_std: float = 0.05
    n_dialogues: int = 2000
    turns_per_dialogue: int = 10
    d_v: int = 16
    d_a: int = 8
    n_counts: int = 3
    min_segments: int = 4
    max_segments: int = 8
    activity_scale: float = 1.0
    count_step: float = 0.5
    drift_step: float = 0.25
    prev_prob: float = 0.25
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return 2 * self.d_v + self.d_a

    @property
    def noise_floor(self) -> float:
        """Expected squared error of the exact next-row mean: sigma^2 * dim."""
        return self.noise_std ** 2 * self.feature_dim

    def validate(self) -> None:
        if not 1 <= self.n_activities <= len(ACTIVITIES):
            raise ValueError(f"n_activities must be in 1..{len(ACTIVITIES)}")
        if not 1 <= self.n_counts <= len(COUNTS):
            raise ValueError(f"n_counts must be in 1..{len(COUNTS)}")
        if self.feature_dim < self.n_activities + 2:
            raise ValueError("feature_dim too small for the latent directions")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValueError("need 1 <= min_segments <= max_segments")
        if self.turns_per_dialogue < 1 or self.n_dialogues < 0:
            raise ValueError("need at least one turn per dialogue")
        seps = []
        if self.n_activities > 1:
            seps.append(self.activity_scale * np.sqrt(2.0))
        if self.n_counts > 1:
            seps.append(self.count_step)
        if seps and min(seps) < 6 * self.noise_std:
            raise ValueError(f"prototype separation {min(seps):.4g} < 6 * noise_std = {6 * self.noise_std:.4g}")

    def template_tokens(self) -> set[str]:
        """Every word type the templates can emit for this spec."""
        acts, counts = ACTIVITIES[:self.n_activities], COUNTS[:self.n_counts]
        words = set()
        for a in acts:
            for c in counts:
                for s in _caption(a, c):
                    words.update(tokenize(s))
                for kind in ("act", "cnt", "prev"):
                    words.update(tokenize(_question(kind)))
                words.update(tokenize(_question("act_yn", a)))
                words.update(tokenize(_question("cnt_yn", c)))
                for kind, probe in (("act_yn", a), ("act_yn", None), ("cnt_yn", c), ("cnt_yn", None)):
                    words.update(tokenize(_answer(kind, a, c, probe, None)))
                words.update(tokenize(_answer("act", a, c, None, None)))
                words.update(tokenize(_answer("cnt", a, c, None, None)))
                for prev in ("act", "cnt"):
                    words.update(tokenize(_answer("prev", a, c, None, prev)))
        return words


class SyntheticOracle:
    """Ground truth of a generated corpus and the Bayes-optimal predictors."""

    def __init__(self, spec: SyntheticSpec, basis: np.ndarray, latents: dict[str, dict]):
        self.spec = spec
        self.basis = basis
        self.latents = latents
        self.bayes_accuracy = float("nan")
        self.oracle_mse = float("nan")

    @property
    def activity_dirs(self) -> np.ndarray:
        return self.basis[:, :self.spec.n_activities]

    @property
    def count_dir(self) -> np.ndarray:
        return self.basis[:, self.spec.n_activities]

    @property
    def drift_dir(self) -> np.ndarray:
        return self.basis[:, self.spec.n_activities + 1]

    def mean_rows(self, activity: int, count: int, n_rows: int) -> np.ndarray:
        s = self.spec
        base = s.activity_scale * self.activity_dirs[:, activity] + (count + 1) * s.count_step * self.count_dir
        t = np.arange(n_rows)[:, None]
        return base[None, :] + t * s.drift_step * self.drift_dir[None, :]

    def next_feature_means(self, sample: DialogueSample) -> np.ndarray:
        """Optimal predictions for rows 2..T given the latents: shape [T-1, dim]."""
        lat = self.latents[sample.video_id]
        return self.mean_rows(lat["activity"], lat["count"], len(sample.features))[1:]

    def infer_latents(self, features: np.ndarray) -> tuple[int, int]:
        """Nearest-prototype activity and count from the drift-removed row mean."""
        s = self.spec
        x = np.asarray(features, dtype=np.float64)
        t = np.arange(len(x))[:, None]
        centered = (x - t * s.drift_step * self.drift_dir[None, :]).mean(axis=0)
        activity = int(np.argmax(centered @ self.activity_dirs))
        count = int(np.clip(np.rint(centered @ self.count_dir / s.count_step) - 1, 0, s.n_counts - 1))
        return activity, count

    def bayes_answer(self, sample: DialogueSample, turn: int, max_history: int = 3) -> list[str]:
        """Answer to turn ``turn`` (1-based) from features and the visible history only."""
        a, c = self.infer_latents(sample.features)
        kind, probe = _question_kind(sample.turns[turn - 1][0])
        prev_kind = None
        if kind == "prev" and max_history >= 1 and turn >= 2:
            prev_kind = _question_kind(sample.turns[turn - 2][0])[0]
        return tokenize(_answer(kind, ACTIVITIES[a], COUNTS[c], probe, prev_kind))

    def token_accuracy(self, samples: list[DialogueSample], max_history: int = 3) -> float:
        """Positionwise accuracy over response tokens plus the terminal EOS."""
        hit = total = 0
        for s in samples:
            for n in range(1, s.n_turns + 1):
                gold = s.turns[n - 1][1] + ["<eos>"]
                pred = self.bayes_answer(s, n, max_history) + ["<eos>"]
                hit += sum(g == p for g, p in zip(gold, pred))
                total += len(gold)
        return hit / total if total else float("nan")

    def next_feature_mse(self, samples: list[DialogueSample]) -> float:
        errs = []
        for s in samples:
            if len(s.features) < 2:
                continue
            diff = self.next_feature_means(s) - s.features[1:].astype(np.float64)
            errs.append((diff ** 2).sum(axis=1))
        return float(np.concatenate(errs).mean()) if errs else float("nan")

    def record(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "basis": self.basis.tolist(),
            "latents": self.latents,
            "bayes_accuracy": self.bayes_accuracy,
            "oracle_next_feature_mse": self.oracle_mse,
            "noise_floor": self.spec.noise_floor,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticOracle":
        o = cls(SyntheticSpec(**rec["spec"]), np.array(rec["basis"]), rec["latents"])
        o.bayes_accuracy = rec["bayes_accuracy"]
        o.oracle_mse = rec["oracle_next_feature_mse"]
        return o


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[DialogueSample], SyntheticOracle]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    oracle = SyntheticOracle(spec, basis, {})
    kinds = ("act", "cnt", "act_yn", "cnt_yn")
    samples = []
    for i in range(spec.n_dialogues):
        vid = f"syn{i:05d}"
        a = int(rng.integers(spec.n_activities))
        c = int(rng.integers(spec.n_counts))
        act, cnt = ACTIVITIES[a], COUNTS[c]
        n_rows = int(rng.integers(spec.min_segments, spec.max_segments + 1))
        feats = oracle.mean_rows(a, c, n_rows) + spec.noise_std * rng.normal(size=(n_rows, dim))
        feats = feats.astype(np.float32)
        summary, cap = _caption(act, cnt)
        turns = []
        prev_kind = None
        for n in range(spec.turns_per_dialogue):
            if n > 0 and prev_kind != "prev" and rng.random() < spec.prev_prob:
                kind = "prev"
            else:
                kind = kinds[int(rng.integers(len(kinds)))]
            probe = None
            if kind == "act_yn":
                probe = ACTIVITIES[int(rng.integers(spec.n_activities))]
            elif kind == "cnt_yn":
                probe = COUNTS[int(rng.integers(spec.n_counts))]
            turns.append((tokenize(_question(kind, probe)),
                          tokenize(_answer(kind, act, cnt, probe, prev_kind))))
            prev_kind = kind
        oracle.latents[vid] = {"activity": a, "count": c}
        samples.append(DialogueSample(vid, tokenize(summary) + tokenize(cap), turns, feats,
                                      latents={"activity": a, "count": c,
                                               "summary": summary, "caption": cap}))
    oracle.bayes_accuracy = oracle.token_accuracy(samples)
    oracle.oracle_mse = oracle.next_feature_mse(samples)
    return samples, oracle


def split_samples(samples: list[DialogueSample], n_val: int, n_test: int):
    """Deterministic contiguous split into (train, val, test); disjoint by video_id."""
    if n_val + n_test > len(samples):
        raise ValueError("split sizes exceed the dataset")
    n_train = len(samples) - n_val - n_test
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]


def save_synthetic(root, samples: list[DialogueSample], oracle: SyntheticOracle,
                   n_val: int = 0, n_test: int = 0) -> None:
    """Write ``dialogs.json``, ``features/*.vaft``, split manifests, ``oracle.json``."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    dialogs = []
    for s in samples:
        lat = s.latents or {}
        dialogs.append({
            "image_id": s.video_id,
            "summary": lat.get("summary", ""),
            "caption": lat.get("caption", " ".join(s.caption)),
            "dialog": [{"question": " ".join(q), "answer": " ".join(r)} for q, r in s.turns],
        })
        write_features(root / "features" / f"{s.video_id}.vaft", s.features)
    (root / "dialogs.json").write_text(json.dumps({"dialogs": dialogs}, indent=1))
    train, val, test = split_samples(samples, n_val, n_test)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_split(root / f"{name}.txt", [s.video_id for s in part])
    (root / "oracle.json").write_text(json.dumps(oracle.record()))
