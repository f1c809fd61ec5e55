"""Deliberately naive caption metrics used only to produce frozen fixtures.

Written independently of ``dsct.metrics``: n-grams are joined strings,
counts come from ``list.count``, LCS is a memoized recursion, and CIDEr-D
document frequencies are recomputed from scratch with nested loops.

Run as a script to regenerate ``tests/fixtures/metric_golden.json``.
"""

import json
import math
import sys
from functools import lru_cache
from pathlib import Path


def grams(words, n):
    return [" ".join(words[i:i + n]) for i in range(len(words) - n + 1)]


def bleu(hyp, refs, max_n):
    if not hyp:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        h = grams(hyp, n)
        if not h:
            return 0.0
        hit = 0
        for g in set(h):
            best = 0
            for r in refs:
                best = max(best, grams(r, n).count(g))
            hit += min(h.count(g), best)
        if hit == 0:
            return 0.0
        logs += math.log(hit / len(h))
    c = len(hyp)
    r = sorted((abs(len(x) - c), len(x)) for x in refs)[0][1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(logs / max_n)


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge(hyp, refs, beta=1.2):
    best = 0.0
    for r in refs:
        m = lcs(hyp, r)
        if m == 0 or not hyp:
            continue
        p = m / len(hyp)
        q = m / len(r)
        f = (1 + beta ** 2) * p * q / (q + beta ** 2 * p)
        best = max(best, f)
    return best


def cider(hyps, refs_all, sigma=6.0):
    n_docs = len(refs_all)
    df = {}
    for refs in refs_all:
        seen = []
        for r in refs:
            for n in range(1, 5):
                for g in grams(r, n):
                    key = (n, g)
                    if key not in seen:
                        seen.append(key)
        for key in seen:
            df[key] = df.get(key, 0) + 1

    def vec(words):
        out = [{} for _ in range(4)]
        for n in range(1, 5):
            gs = grams(words, n)
            for g in set(gs):
                idf = math.log(n_docs) - math.log(max(1, df.get((n, g), 0)))
                out[n - 1][g] = gs.count(g) * idf
        return out

    scores = []
    for hyp, refs in zip(hyps, refs_all):
        vh = vec(hyp)
        total = 0.0
        for r in refs:
            vr = vec(r)
            pen = math.exp(-((len(hyp) - len(r)) ** 2) / (2 * sigma ** 2))
            for n in range(4):
                num = 0.0
                for g, w in vh[n].items():
                    num += min(w, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0)
                nh = math.sqrt(sum(w * w for w in vh[n].values()))
                nr = math.sqrt(sum(w * w for w in vr[n].values()))
                if nh > 0 and nr > 0:
                    num /= nh * nr
                total += num * pen
        scores.append(10.0 * total / (4 * len(refs)))
    return scores


CORPUS = [
    ("a red cube left of a blue sphere",
     ["a red cube left of a blue sphere", "a red box left of a blue ball", "one red cube left of a blue sphere"]),
    ("a green cone",
     ["a green cone", "a green spike", "one green cone"]),
    ("a black star above a white ring",
     ["a black star above a white ring", "a black star over a white ring", "one black spark over a white loop"]),
    ("a yellow disk next to a red cube",
     ["a yellow disk next to a purple cube", "a yellow plate near a purple box", "one yellow disk next to one purple cube"]),
    ("a orange pyramid",
     ["a orange pyramid left of a green ring", "a orange wedge left of a green loop"]),
    ("a a a",
     ["a b", "a c d"]),
    ("a b c d",
     ["a c d", "b d"]),
    ("blue blue sphere sphere",
     ["a blue sphere", "a blue ball above a red cube"]),
    ("a purple cylinder above a",
     ["a purple cylinder above a black cone", "a purple can over a black spike"]),
    ("one white ring near one red star",
     ["a white ring next to a red star", "one white loop near one red spark", "a white ring near a red star"]),
]


def build():
    hyps = [h.split() for h, _ in CORPUS]
    refs = [[r.split() for r in rs] for _, rs in CORPUS]
    rows = []
    for h, rs in zip(hyps, refs):
        rows.append({
            "hyp": " ".join(h),
            "refs": [" ".join(r) for r in rs],
            "bleu1": bleu(h, rs, 1),
            "bleu2": bleu(h, rs, 2),
            "bleu3": bleu(h, rs, 3),
            "bleu4": bleu(h, rs, 4),
            "rougeL": rouge(h, rs),
        })
    for row, c in zip(rows, cider(hyps, refs)):
        row["ciderD"] = c

    # two-image corpus: each hypothesis equals one of its own references,
    # plus every single-token hypothesis for comparison
    two = [
        ["a red cube left of a blue sphere", "a red box left of a blue ball", "one red cube left of a blue sphere"],
        ["a green cone above a white ring", "a green spike over a white loop", "one green cone above a white ring"],
    ]
    two_refs = [[r.split() for r in rs] for rs in two]
    own = cider([rs[0] for rs in two_refs], two_refs)
    vocab = sorted({w for rs in two_refs for r in rs for w in r})
    single = {w: cider([[w], [w]], two_refs) for w in vocab}
    return {"corpus": rows, "two_image": {"refs": two, "own_scores": own, "single_token_scores": single}}


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "fixtures" / "metric_golden.json"
    out.write_text(json.dumps(build(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}")
