"""BLEU@N, ROUGE-L and CIDEr-D over pre-tokenized captions.

Tokens may be strings or ids; the metrics only compare them for equality.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

from dsct.tensor import ContractError

Tokens = Sequence[Hashable]

CIDER_N = 4
CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu_n(hyp: Tokens, refs: Sequence[Tokens], n: int = 4) -> float:
    """Sentence BLEU: clipped n-gram precisions, geometric mean, brevity penalty. No smoothing."""
    if n < 1:
        raise ContractError("BLEU order must be >= 1")
    if not refs:
        raise ContractError("BLEU needs at least one reference")
    if not hyp:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        h = ngram_counts(hyp, k)
        total = sum(h.values())
        if total == 0:
            return 0.0
        best: Counter = Counter()
        for r in refs:
            best |= ngram_counts(r, k)
        hit = sum(min(c, best[g]) for g, c in h.items())
        if hit == 0:
            return 0.0
        log_sum += math.log(hit / total)
    c = len(hyp)
    r = _closest_ref_length(c, refs)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """Corpus BLEU: clipped counts and lengths pooled over all images before combining."""
    if len(hyps) != len(refs):
        raise ContractError("hypotheses and reference sets differ in count")
    hits = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, rs in zip(hyps, refs):
        if not rs:
            raise ContractError("BLEU needs at least one reference per image")
        hyp_len += len(hyp)
        ref_len += _closest_ref_length(len(hyp), rs)
        for k in range(1, n + 1):
            h = ngram_counts(hyp, k)
            best: Counter = Counter()
            for r in rs:
                best |= ngram_counts(r, k)
            hits[k - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[k - 1] += sum(h.values())
    if hyp_len == 0 or min(hits) == 0:
        return 0.0
    log_p = sum(math.log(h / t) for h, t in zip(hits, totals)) / n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, refs: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, best over references."""
    if not refs:
        raise ContractError("ROUGE-L needs at least one reference")
    best = 0.0
    for r in refs:
        m = lcs_length(hyp, r)
        if m == 0:
            continue
        prec, rec = m / len(hyp), m / len(r)
        best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
    return best


@dataclass
class IdfTable:
    """Document frequency of every n-gram (n = 1..4) over a reference corpus.

    One document is the union of one image's references.
    """

    df: Counter = field(default_factory=Counter)
    num_docs: int = 0

    @classmethod
    def from_references(cls, refs: Sequence[Sequence[Tokens]]) -> "IdfTable":
        table = cls()
        for rs in refs:
            grams = set()
            for r in rs:
                for k in range(1, CIDER_N + 1):
                    grams.update(ngram_counts(r, k))
            table.df.update(grams)
        table.num_docs = len(refs)
        return table

    def idf(self, gram) -> float:
        # unseen n-grams count as df = 1
        return math.log(self.num_docs) - math.log(max(1, self.df.get(gram, 0)))


def _tfidf(tokens: Tokens, idf: IdfTable):
    vecs, norms = [], []
    for k in range(1, CIDER_N + 1):
        v = {g: c * idf.idf(g) for g, c in ngram_counts(tokens, k).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(w * w for w in v.values())))
    return vecs, norms


def cider_d(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], idf: IdfTable | None,
            sigma: float = CIDER_SIGMA) -> tuple[float, list[float]]:
    """CIDEr-D: clipped tf-idf cosine with a Gaussian length penalty, x10.

    Returns ``(mean, per_image)``.
    """
    if idf is None or idf.num_docs <= 0:
        raise ContractError("CIDEr-D needs an idf table built from a reference corpus")
    if len(hyps) != len(refs):
        raise ContractError("hypotheses and reference sets differ in count")
    scores = []
    for hyp, rs in zip(hyps, refs):
        if not rs:
            raise ContractError("CIDEr-D needs at least one reference per image")
        vh, nh = _tfidf(hyp, idf)
        acc = 0.0
        for r in rs:
            vr, nr = _tfidf(r, idf)
            penalty = math.exp(-((len(hyp) - len(r)) ** 2) / (2 * sigma ** 2))
            for k in range(CIDER_N):
                dot = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] > 0 and nr[k] > 0:
                    dot /= nh[k] * nr[k]
                acc += dot * penalty
        scores.append(10.0 * acc / (CIDER_N * len(rs)))
    mean = sum(scores) / len(scores) if scores else 0.0
    return mean, scores


REPORT_KEYS = ("bleu1", "bleu4", "rougeL", "ciderD")


def score_captions(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]],
                   idf: IdfTable | None = None) -> dict:
    """Corpus-level report plus per-image rows."""
    if idf is None:
        idf = IdfTable.from_references(refs)
    cider_mean, cider_rows = cider_d(hyps, refs, idf)
    rows = []
    for i, (h, rs) in enumerate(zip(hyps, refs)):
        rows.append({
            "index": i,
            "bleu1": bleu_n(h, rs, 1),
            "bleu4": bleu_n(h, rs, 4),
            "rougeL": rouge_l(h, rs),
            "ciderD": cider_rows[i],
        })
    summary = {
        "bleu1": corpus_bleu(hyps, refs, 1),
        "bleu4": corpus_bleu(hyps, refs, 4),
        "rougeL": sum(r["rougeL"] for r in rows) / max(1, len(rows)),
        "ciderD": cider_mean,
    }
    return {"summary": summary, "images": rows}


def format_report(summary: dict) -> str:
    return " ".join(f"{k}={summary[k]:.6f}" for k in REPORT_KEYS)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
