"""Independent reference implementations used to check the package.

Written as plain loops over Python floats and numpy rows. Nothing here calls
into the code under test except for data containers.
"""
import math

import numpy as np

EOS = 2
VIDEO = 4


# ------------------------------------------------------------- softmaxes

def softmax_row(x):
    m = max(x)
    e = [math.exp(v - m) for v in x]
    z = sum(e)
    return [v / z for v in e]


def log_softmax_row(x):
    m = max(x)
    lz = m + math.log(sum(math.exp(v - m) for v in x))
    return [v - lz for v in x]


# ---------------------------------------------------------- model forward

def _ln(v, g, b, eps):
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return (v - mu) / math.sqrt(var + eps) * g + b


def _gelu(v):
    return 0.5 * v * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def ref_forward(batch, p, cfg):
    """Position-by-position forward of one unbatched sequence.

    ``p`` maps parameter names to float64 arrays. Returns (logits [L,V], preds [L,F]).
    """
    n = len(batch.token_ids)
    hd = cfg.hidden // cfg.n_heads
    xs = []
    for i in range(n):
        if batch.is_feature[i]:
            e = np.asarray(batch.features[i], dtype=np.float64) @ p["video.w"] + p["video.b"] + p["wte"][VIDEO]
        else:
            e = p["wte"][batch.token_ids[i]] + p["wte"][batch.segment_ids[i]]
        xs.append(e + p["wpe"][batch.positions[i]])
    for layer in range(cfg.n_layers):
        pre = f"h{layer}."
        normed = [_ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps) for x in xs]
        qkv = [v @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"] for v in normed]
        new = []
        for i in range(n):
            parts = []
            for h in range(cfg.n_heads):
                q = qkv[i][h * hd:(h + 1) * hd]
                scores = []
                for j in range(i + 1):
                    k = qkv[j][cfg.hidden + h * hd:cfg.hidden + (h + 1) * hd]
                    scores.append(float(q @ k) / math.sqrt(hd))
                w = softmax_row(scores)
                acc = np.zeros(hd)
                for j in range(i + 1):
                    acc = acc + w[j] * qkv[j][2 * cfg.hidden + h * hd:2 * cfg.hidden + (h + 1) * hd]
                parts.append(acc)
            a = np.concatenate(parts) @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"]
            new.append(xs[i] + a)
        xs = []
        for x in new:
            m = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps)
            m = _gelu(m @ p[pre + "mlp.w_in"] + p[pre + "mlp.b_in"]) @ p[pre + "mlp.w_out"] + p[pre + "mlp.b_out"]
            xs.append(x + m)
    final = [_ln(x, p["ln_f.g"], p["ln_f.b"], cfg.ln_eps) for x in xs]
    logits = np.array([h @ p["wte"].T for h in final])
    preds = np.array([h @ p["reg.w"] + p["reg.b"] for h in final])
    return logits, preds


def ref_cross_entropy(logits, targets, mask):
    total, count = 0.0, 0
    for row, t, m in zip(logits, targets, mask):
        if m:
            total -= log_softmax_row(list(map(float, row)))[t]
            count += 1
    return total / count


def ref_squared_error(preds, targets, mask):
    total, count = 0.0, 0
    for pr, t, m in zip(preds, targets, mask):
        if m:
            total += sum((float(a) - float(b)) ** 2 for a, b in zip(pr, t))
            count += 1
    return total / count


# ---------------------------------------------------------------- decoding

def exhaustive_best(next_log_probs, max_length, alpha):
    """Best complete sequence by ``logprob / len**alpha`` over the whole tree.

    ``next_log_probs(prefix) -> list of floats``. Ties prefer the lexicographically
    smaller token sequence.
    """
    best = None

    def visit(prefix, lp):
        nonlocal best
        row = next_log_probs(prefix)
        for tok, l in enumerate(row):
            seq, s = prefix + [tok], lp + float(l)
            if tok == EOS or len(seq) == max_length:
                score = s / len(seq) ** alpha
                if best is None or score > best[0] or (score == best[0] and seq < best[1]):
                    best = (score, seq, s)
            else:
                visit(seq, s)

    visit([], 0.0)
    return best


# ----------------------------------------------------------------- metrics

def _grams(toks, n):
    out = {}
    for i in range(len(toks) - n + 1):
        g = " ".join(toks[i:i + n])
        out[g] = out.get(g, 0) + 1
    return out


def oracle_bleu(cases, n):
    """cases: list of (candidate tokens, [reference tokens])."""
    num = [0] * n
    den = [0] * n
    c_total = 0
    r_total = 0
    for cand, refs in cases:
        c_total += len(cand)
        best = None
        for r in refs:
            d = abs(len(r) - len(cand))
            if best is None or d < best[0] or (d == best[0] and len(r) < best[1]):
                best = (d, len(r))
        r_total += best[1]
        for k in range(1, n + 1):
            cg = _grams(cand, k)
            for g, cnt in cg.items():
                ref_max = 0
                for r in refs:
                    ref_max = max(ref_max, _grams(r, k).get(g, 0))
                num[k - 1] += min(cnt, ref_max)
            den[k - 1] += sum(cg.values())
    if c_total == 0 or 0 in num or 0 in den:
        return 0.0
    geo = 1.0
    for k in range(n):
        geo *= num[k] / den[k]
    geo = geo ** (1.0 / n)
    bp = 1.0 if c_total > r_total else math.exp(1 - r_total / c_total)
    return bp * geo


def _lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) - 1, -1, -1):
        for j in range(len(b) - 1, -1, -1):
            if a[i] == b[j]:
                table[i][j] = 1 + table[i + 1][j + 1]
            else:
                table[i][j] = max(table[i + 1][j], table[i][j + 1])
    return table[0][0]


def oracle_rouge_l(cases, beta=1.2):
    scores = []
    for cand, refs in cases:
        f = 0.0
        for r in refs:
            l = _lcs(cand, r)
            if l:
                prec, rec = l / len(cand), l / len(r)
                f = max(f, (1 + beta * beta) * prec * rec / (rec + beta * beta * prec))
        scores.append(f)
    return sum(scores) / len(scores)


def oracle_cider(cases):
    n_docs = len(cases)
    df = {}
    for _, refs in cases:
        present = set()
        for r in refs:
            for k in range(1, 5):
                present.update((k, g) for g in _grams(r, k))
        for key in present:
            df[key] = df.get(key, 0) + 1

    def vec(toks, k):
        return {g: c * (math.log(n_docs) - math.log(df[(k, g)])) if (k, g) in df else 0.0
                for g, c in _grams(toks, k).items()}

    def cos(u, v):
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0 or nv == 0:
            return 0.0
        return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)

    total = 0.0
    for cand, refs in cases:
        s = 0.0
        for k in range(1, 5):
            cv = vec(cand, k)
            s += sum(cos(cv, vec(r, k)) for r in refs) / len(refs)
        total += 10.0 * s / 4
    return total / n_docs


def oracle_all(cases):
    out = {f"BLEU-{n}": oracle_bleu(cases, n) for n in range(1, 5)}
    out["ROUGE-L"] = oracle_rouge_l(cases)
    out["CIDEr"] = oracle_cider(cases)
    return out
