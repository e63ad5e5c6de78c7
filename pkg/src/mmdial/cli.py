"""Command-line entry point: make-synthetic, train, generate, eval, ablate, chat."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import corpus, metrics
from .autodiff import NumericalError
from .corpus import DatasetError, DialogueSample, FeatureFileError, SyntheticSpec
from .generation import DecodeConfig, Setting, decode_record, recaption_respond, respond
from .model import (CapacityError, CheckpointError, ConfigError, ModelConfig, init_params,
                    load_checkpoint)
from .text import Vocab, build_vocab, tokenize
from .trainer import AssemblyError, TrainConfig, Trainer, evaluate_losses

log = logging.getLogger("mmdial")

DATA_ENV = "MMDIAL_DATA_ROOT"
SETTINGS = ("text-only", "text+video", "text+video-no-caption")
HISTORY_AXIS = (0, 1, 2, 3, 5, 9)
DECODING_AXIS = ("greedy", "nucleus", "beam")


@dataclass
class RunConfig:
    """Flat run configuration; every field is also a config-file key."""

    data: str | None = None
    split: str = "test"
    out: str = "runs/default"
    checkpoint: str | None = None
    resume: str | None = None
    setting: str = "text+video"
    recaption: bool = False
    tasks: str | None = None
    weights: str = "1,1,1"
    mixing: str = "sum"
    max_history: int = 3
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    clip: float = 1.0
    seed: int = 0
    precision: int = 32
    log_every: int = 50
    val_every: int = 0
    ckpt_every: int = 0
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    max_positions: int = 256
    d_v: int = 16
    d_a: int = 8
    dropout: float = 0.1
    decode: str = "beam"
    beam_size: int = 5
    max_length: int = 20
    length_penalty: float = 0.3
    nucleus_p: float = 0.9
    limit: int = 0

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {', '.join(SETTINGS)}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        tasks = self.task_list()
        bad = set(tasks) - {"rlm", "vasm", "clm"}
        if bad:
            raise ConfigError(f"unknown task(s): {', '.join(sorted(bad))}")
        if self.setting == "text-only" and set(tasks) - {"rlm"}:
            raise ConfigError("text-only setting trains RLM only; VASM/CLM need video")

    def task_list(self) -> list[str]:
        if self.tasks:
            return [t.strip() for t in self.tasks.split(",") if t.strip()]
        if self.setting == "text-only":
            return ["rlm"]
        if self.setting == "text+video-no-caption" and not self.recaption:
            return ["rlm", "vasm"]
        return ["rlm", "vasm", "clm"]

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(n_layers=self.layers, hidden=self.hidden, n_heads=self.heads,
                           vocab_size=vocab_size, max_positions=self.max_positions,
                           d_v=self.d_v, d_a=self.d_a, dropout=self.dropout)

    def train_config(self) -> TrainConfig:
        w = [float(x) for x in self.weights.split(",")]
        weights = dict(zip(("rlm", "vasm", "clm"), w + [1.0] * (3 - len(w))))
        tasks = tuple(self.task_list())
        weights = {t: (weights[t] if t in tasks else 0.0) for t in ("rlm", "vasm", "clm")}
        return TrainConfig(tasks=tasks, weights=weights, lr=self.lr, batch_size=self.batch_size,
                           steps=self.steps, seed=self.seed, max_history=self.max_history,
                           include_video=self.setting != "text-only",
                           include_caption=self.setting != "text+video-no-caption" or self.recaption,
                           clip=self.clip, mixing=self.mixing, log_every=self.log_every,
                           val_every=self.val_every, ckpt_every=self.ckpt_every,
                           ckpt_dir=str(Path(self.out) / "checkpoints") if self.ckpt_every else None)

    def decode_config(self, method: str | None = None) -> DecodeConfig:
        return DecodeConfig(method=method or self.decode, beam_size=self.beam_size,
                            max_length=self.max_length, length_penalty=self.length_penalty,
                            nucleus_p=self.nucleus_p, seed=self.seed)

    def generation_setting(self, max_history: int | None = None) -> Setting:
        return Setting(include_video=self.setting != "text-only",
                       include_caption=self.setting != "text+video-no-caption",
                       recaption=self.setting == "text+video-no-caption" and self.recaption,
                       max_history=self.max_history if max_history is None else max_history)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        return str(value).lower() in ("1", "true", "yes", "on")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def build_run_config(file_values: dict[str, str], cli_values: dict) -> RunConfig:
    """Defaults, then config-file values, then explicit flags (flags win)."""
    cfg = RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for k, v in file_values.items():
        if k not in kinds:
            raise ConfigError(f"unknown config key {k!r}")
        typ = kinds[k]
        base = typ.split("|")[0].strip() if isinstance(typ, str) else typ
        updates[k] = None if v.lower() == "none" else _coerce(v, base)
    updates.update({k: v for k, v in cli_values.items() if v is not None and k in kinds})
    if cfg.data is None and "data" not in updates and os.environ.get(DATA_ENV):
        updates["data"] = os.environ[DATA_ENV]
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- data io

def load_split(data_root, split: str | None, expected_dim: int | None = None) -> list[DialogueSample]:
    if data_root is None:
        raise ConfigError(f"no data root: pass --data or set {DATA_ENV}")
    root = Path(data_root)
    samples = corpus.load_dataset(root / "dialogs.json", root / "features", expected_dim)
    if split is None:
        return samples
    manifest = root / f"{split}.txt"
    if not manifest.exists():
        raise DatasetError(f"split manifest {manifest} not found")
    wanted = corpus.read_split(manifest)
    by_id = {s.video_id: s for s in samples}
    orphans = [v for v in wanted if v not in by_id]
    if orphans:
        raise DatasetError(f"split {split} lists unknown video_id(s): {', '.join(orphans[:10])}")
    return [by_id[v] for v in wanted]


def reference_records(samples: list[DialogueSample]) -> list[dict]:
    return [{"dialogue_id": s.video_id, "turn": n, "texts": [" ".join(s.turns[n - 1][1])]}
            for s in samples for n in range(1, s.n_turns + 1)]


def load_model(path, dtype=None):
    params, _, meta = load_checkpoint(path, dtype=dtype)
    if "vocab" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no vocabulary")
    return params, Vocab(meta["vocab"]), meta


# ------------------------------------------------------------- operations

def run_make_synthetic(out, spec: SyntheticSpec, n_val: int, n_test: int) -> dict:
    samples, oracle = corpus.generate_synthetic(spec)
    corpus.save_synthetic(out, samples, oracle, n_val=n_val, n_test=n_test)
    _, _, test = corpus.split_samples(samples, n_val, n_test)
    metrics.write_jsonl(Path(out) / "test_refs.jsonl", reference_records(test))
    return {"dialogues": len(samples), "bayes_accuracy": oracle.bayes_accuracy,
            "oracle_next_feature_mse": oracle.oracle_mse, "noise_floor": spec.noise_floor}


def run_train(cfg: RunConfig) -> tuple[Path, Path]:
    """Train (or resume) and write ``final.mmdf``, ``vocab.txt`` and ``train.log`` under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    train = load_split(cfg.data, "train", 2 * cfg.d_v + cfg.d_a)
    if cfg.limit:
        train = train[:cfg.limit]
    try:
        val = load_split(cfg.data, "val", 2 * cfg.d_v + cfg.d_a)
    except DatasetError:
        val = []
    tc = cfg.train_config()
    if cfg.resume:
        trainer = Trainer.resume(cfg.resume, train, log_path=log_path, config=tc)
        if trainer.params.dtype != cfg.dtype:
            raise ConfigError(f"resume checkpoint precision {trainer.params.dtype} != requested {cfg.precision}")
        remaining = max(cfg.steps - trainer.step_count, 0)
    else:
        vocab = build_vocab(t for s in train for t in s.texts())
        params = init_params(cfg.model_config(len(vocab)), seed=cfg.seed, dtype=cfg.dtype)
        trainer = Trainer(params, vocab, train, tc, log_path=log_path)
        log_path.write_text("step\tL_RLM\tL_VASM\tL_CLM\ttotal\tgrad_norm\n")
        remaining = cfg.steps
    trainer.run(remaining, val_samples=val)
    final = out / "final.mmdf"
    trainer.save(final)
    trainer.vocab.save(out / "vocab.txt")
    if val:
        log.info("final validation loss %s", evaluate_losses(trainer.params, trainer.vocab, val, tc))
    return final, log_path


def run_generate(cfg: RunConfig, samples: list[DialogueSample] | None = None,
                 max_history: int | None = None, method: str | None = None,
                 model=None) -> list[dict]:
    """One prediction per (dialogue, turn), each conditioned on the gold history."""
    params, vocab, _ = model or load_model(cfg.checkpoint)
    if samples is None:
        samples = load_split(cfg.data, cfg.split, params.config.feature_dim)
        if cfg.limit:
            samples = samples[:cfg.limit]
    setting = cfg.generation_setting(max_history)
    dc = cfg.decode_config(method)
    records = []
    for s in samples:
        caption = None
        for n in range(1, s.n_turns + 1):
            if setting.recaption:
                if caption is None:
                    caption, h = recaption_respond(s, n, params, vocab, setting, dc)
                else:
                    h = respond(s, n, params, vocab, setting, dc, caption=caption)
            else:
                h = respond(s, n, params, vocab, setting, dc)
            records.append(decode_record(s, n, h, vocab, dc.method, caption))
    return records


def run_eval(pred_path, ref_path) -> dict[str, float]:
    return metrics.evaluate_corpus(pred_path, ref_path)


def answer_accuracy(records: list[dict], samples: list[DialogueSample]) -> float:
    gold = {(s.video_id, n): " ".join(s.turns[n - 1][1]) for s in samples for n in range(1, s.n_turns + 1)}
    hits = sum(" ".join(tokenize(r["text"])) == gold[(r["dialogue_id"], r["turn"])] for r in records)
    return hits / len(records)


def run_ablation(cfg: RunConfig, axis: str, samples: list[DialogueSample] | None = None) -> dict:
    """Sweep history length or decoding method; one metric row per axis value."""
    model = load_model(cfg.checkpoint)
    if samples is None:
        samples = load_split(cfg.data, cfg.split, model[0].config.feature_dim)
        if cfg.limit:
            samples = samples[:cfg.limit]
    refs = reference_records(samples)
    if axis == "history":
        cells = [(str(k), dict(max_history=k)) for k in HISTORY_AXIS]
    elif axis == "decoding":
        cells = [(m, dict(method=m)) for m in DECODING_AXIS]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    rows = []
    for label, kw in cells:
        recs = run_generate(cfg, samples, model=model, **kw)
        report = metrics.score_all(metrics.align(recs, refs))
        report["answer_acc"] = answer_accuracy(recs, samples)
        rows.append((label, report))
    return {"axis": axis, "rows": rows}


def format_ablation(result: dict) -> str:
    cols = list(metrics.METRICS) + ["answer_acc"]
    head = ["history" if result["axis"] == "history" else "decoding"] + cols
    body = [[label] + [f"{r[c]:.4f}" for c in cols] for label, r in result["rows"]]
    return metrics.format_table(head, body)


def run_chat(cfg: RunConfig, video_id: str, stdin=None, stdout=None) -> int:
    """Interactive loop: one line per question; ``/reset``, ``/history k``, ``/quit``."""
    stdin, stdout = stdin or sys.stdin, stdout or sys.stdout
    params, vocab, _ = load_model(cfg.checkpoint)
    samples = {s.video_id: s for s in load_split(cfg.data, None, params.config.feature_dim)}
    if video_id not in samples:
        raise DatasetError(f"unknown video_id {video_id!r}")
    base = samples[video_id]
    setting = cfg.generation_setting()
    dc = cfg.decode_config()
    history: list[tuple[list[str], list[str]]] = []
    caption = None
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            history.clear()
            print("history cleared", file=stdout)
            continue
        if line.startswith("/history"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                print("usage: /history k", file=stdout)
                continue
            setting = replace(setting, max_history=int(parts[1]))
            print(f"history window {setting.max_history}", file=stdout)
            continue
        turns = history + [(tokenize(line), [])]
        sample = DialogueSample(base.video_id, base.caption, turns, base.features)
        if setting.recaption and caption is None:
            caption, h = recaption_respond(sample, len(turns), params, vocab, setting, dc)
        else:
            h = respond(sample, len(turns), params, vocab, setting, dc, caption=caption)
        answer = [vocab.itos[t] for t in h.tokens if t >= 8]
        history.append((tokenize(line), answer))
        print(" ".join(answer), file=stdout, flush=True)
    return 0


# ------------------------------------------------------------------ parser

_ERROR_CODES = [
    (ConfigError, 2, "config"),
    (DatasetError, 3, "data"),
    (FeatureFileError, 3, "features"),
    (AssemblyError, 3, "assembly"),
    (CheckpointError, 4, "checkpoint"),
    (metrics.AlignmentError, 5, "alignment"),
    (CapacityError, 6, "capacity"),
    (NumericalError, 7, "numerical"),
    (FileNotFoundError, 3, "missing-file"),
]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--data", help=f"data root (default ${DATA_ENV})")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--recaption", action="store_const", const=True)
    p.add_argument("--tasks", help="comma list of rlm,vasm,clm")
    p.add_argument("--weights", help="comma list of task weights (rlm,vasm,clm)")
    p.add_argument("--mixing", choices=("sum", "sample"))
    p.add_argument("--max-history", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--decode", choices=DECODING_AXIS)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-length", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--nucleus-p", type=float)
    p.add_argument("--limit", type=int, help="use only the first N dialogues")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdial", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic AVSD-style corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--dialogues", type=int, default=2000)
    p.add_argument("--activities", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--turns", type=int, default=10)
    p.add_argument("--d-v", type=int, default=16)
    p.add_argument("--d-a", type=int, default=8)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="multi-task training")
    _add_common(p)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-positions", type=int)
    p.add_argument("--d-v", type=int)
    p.add_argument("--d-a", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--val-every", type=int)
    p.add_argument("--ckpt-every", type=int)

    p = sub.add_parser("generate", help="decode one response per dialogue turn")
    _add_common(p)
    p.add_argument("--refs-out", help="also write the gold references for the split")

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--json", help="also write the report as JSON lines")

    p = sub.add_parser("ablate", help="history-length or decoding-method sweep")
    p.add_argument("axis", choices=("history", "decoding"))
    _add_common(p)

    p = sub.add_parser("chat", help="terminal chat about one video")
    _add_common(p)
    p.add_argument("--video-id", required=True)
    return parser


def _run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    return build_run_config(file_values, vars(args))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except tuple(e for e, _, _ in _ERROR_CODES) as err:
        for exc, status, code in _ERROR_CODES:
            if isinstance(err, exc):
                msg = str(err).replace("\n", " ")
                print(f"error: {code}: {msg}", file=sys.stderr)
                return status
        raise


def _dispatch(args) -> int:
    if args.command == "make-synthetic":
        spec = SyntheticSpec(n_activities=args.activities, noise_std=args.noise,
                             n_dialogues=args.dialogues, turns_per_dialogue=args.turns,
                             d_v=args.d_v, d_a=args.d_a, seed=args.seed)
        try:
            spec.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        summary = run_make_synthetic(args.out, spec, args.val, args.test)
        print("  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
        return 0
    if args.command == "eval":
        report = run_eval(args.pred, args.ref)
        print(metrics.format_report(report))
        if args.json:
            metrics.write_jsonl(args.json, [{"metric": k, "value": v} for k, v in report.items()])
        return 0
    cfg = _run_config(args)
    if args.command == "train":
        final, log_path = run_train(cfg)
        print(f"checkpoint {final}\nlog {log_path}")
        return 0
    if cfg.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    if args.command == "generate":
        records = run_generate(cfg)
        out = Path(cfg.out if cfg.out.endswith(".jsonl") else Path(cfg.out) / f"{cfg.split}_pred.jsonl")
        out.parent.mkdir(parents=True, exist_ok=True)
        metrics.write_jsonl(out, records)
        if args.refs_out:
            params, _, _ = load_model(cfg.checkpoint)
            samples = load_split(cfg.data, cfg.split, params.config.feature_dim)
            if cfg.limit:
                samples = samples[:cfg.limit]
            metrics.write_jsonl(args.refs_out, reference_records(samples))
        print(f"{len(records)} predictions -> {out}")
        return 0
    if args.command == "ablate":
        print(format_ablation(run_ablation(cfg, args.axis)))
        return 0
    if args.command == "chat":
        return run_chat(cfg, args.video_id)
    raise ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
