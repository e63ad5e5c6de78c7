"""Corpus BLEU-1..4, ROUGE-L and CIDEr with multiple references."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .text import tokenize

METRICS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr")


class AlignmentError(ValueError):
    pass


@dataclass
class EvalCase:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("an evaluation case needs at least one reference")


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(cases: list[EvalCase], n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU-n: clipped precisions pooled over cases, closest-reference brevity penalty.

    With ``smooth`` a zero-match order counts as one match in add-one fashion;
    by default a zero precision gives a score of 0.
    """
    if not cases:
        raise ValueError("BLEU of an empty corpus")
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    matched = [0] * n
    possible = [0] * n
    cand_len = ref_len = 0
    for case in cases:
        c = case.candidate
        cand_len += len(c)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in case.references)[1]
        for k in range(1, n + 1):
            counts = ngrams(c, k)
            max_ref: Counter = Counter()
            for r in case.references:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
            possible[k - 1] += max(len(c) - k + 1, 0)
    log_p = 0.0
    for k in range(n):
        m, p = matched[k], possible[k]
        if smooth and k > 0:
            m, p = m + 1, p + 1
        if m == 0 or p == 0:
            return 0.0
        log_p += math.log(m / p)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / n)


def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_case(candidate: list[str], references: list[list[str]], beta: float = 1.2) -> float:
    best = 0.0
    for ref in references:
        if not candidate or not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(cases: list[EvalCase], beta: float = 1.2) -> float:
    """Mean over cases of the best LCS F-measure against any reference."""
    if not cases:
        raise ValueError("ROUGE-L of an empty corpus")
    return sum(rouge_l_case(c.candidate, c.references, beta) for c in cases) / len(cases)


def _tfidf(tokens: list[str], n: int, df: Counter, log_n: float) -> tuple[dict, float]:
    vec = {g: cnt * (log_n - math.log(df[g])) if df[g] else 0.0 for g, cnt in ngrams(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider(cases: list[EvalCase], max_n: int = 4) -> float:
    """TF-IDF n-gram cosine, averaged over references and orders 1..4, times 10.

    Document frequency counts the cases whose reference set contains an n-gram.
    """
    if not cases:
        raise ValueError("CIDEr of an empty corpus")
    df: Counter = Counter()
    for case in cases:
        seen = set()
        for r in case.references:
            for k in range(1, max_n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_n = math.log(len(cases))
    scores = []
    for case in cases:
        per_order = []
        for k in range(1, max_n + 1):
            cv, cn = _tfidf(case.candidate, k, df, log_n)
            sims = []
            for r in case.references:
                rv, rn = _tfidf(r, k, df, log_n)
                dot = sum(v * rv.get(g, 0.0) for g, v in cv.items())
                sims.append(dot / (cn * rn) if cn > 0 and rn > 0 else 0.0)
            per_order.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_order) / max_n)
    return sum(scores) / len(scores)


def score_all(cases: list[EvalCase]) -> dict[str, float]:
    out = {f"BLEU-{n}": bleu(cases, n) for n in range(1, 5)}
    out["ROUGE-L"] = rouge_l(cases)
    out["CIDEr"] = cider(cases)
    return out


# ------------------------------------------------------------------- files

def read_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: {err.msg}") from None
    return out


def write_jsonl(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def align(predictions: list[dict], references: list[dict]) -> list[EvalCase]:
    """Pair prediction and reference records on ``(dialogue_id, turn)``."""
    preds = {(str(r["dialogue_id"]), int(r["turn"])): r["text"] for r in predictions}
    refs = {(str(r["dialogue_id"]), int(r["turn"])): r["texts"] for r in references}
    if not preds:
        raise AlignmentError("empty prediction set")
    orphans = sorted(set(preds) ^ set(refs))
    if orphans:
        shown = ", ".join(f"{d}#{t}" for d, t in orphans[:10])
        more = f" (+{len(orphans) - 10} more)" if len(orphans) > 10 else ""
        raise AlignmentError(f"unaligned records: {shown}{more}")
    return [EvalCase(tokenize(preds[k]), [tokenize(t) for t in refs[k]]) for k in sorted(preds)]


def evaluate_corpus(pred_path, ref_path) -> dict[str, float]:
    return score_all(align(read_jsonl(pred_path), read_jsonl(ref_path)))


def format_report(report: dict[str, float], label: str | None = None) -> str:
    head = ([""] if label is not None else []) + list(METRICS)
    row = ([label] if label is not None else []) + [f"{report[m]:.4f}" for m in METRICS]
    return format_table(head, [row])


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(w) for x, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines)
