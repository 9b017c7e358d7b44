"""Corpus text metrics for generated responses.

All functions take pre-tokenized sequences. BLEU and ROUGE-L score one
candidate against its references; the tf-idf corpus metric needs the
whole corpus at once because inverse document frequencies come from the
reference pool. METEOR is intentionally not implemented (it depends on an
external synonym inventory); reports print "n/a" in its column.
"""

from __future__ import annotations

import math
from collections import Counter

from .errors import ContractError

METEOR_NOTE = "n/a"

CIDER_MAX_ORDER = 4
CIDER_SIGMA = 6.0


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu_n(candidate, references, n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions with a brevity penalty.

    Candidate counts are clipped to the best single-reference count per
    n-gram. The penalty compares against the reference length closest to
    the candidate's (shorter wins ties). Any order with zero matches sends
    the whole score to 0.0.
    """
    if n < 1:
        raise ContractError(f"n-gram order must be positive, got {n}")
    if not references or any(len(r) == 0 for r in references):
        raise ContractError("references must be non-empty")
    c = len(candidate)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand_counts = _ngrams(candidate, order)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        matched = 0
        for gram, count in cand_counts.items():
            best = max(_ngrams(ref, order).get(gram, 0) for ref in references)
            matched += min(count, best)
        if matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
    geo = math.exp(log_sum / n)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * geo


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a, b) -> int:
    # one-row DP; quadratic time, linear space
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    """Longest-common-subsequence F-measure, recall-weighted, best reference."""
    if not references or any(len(r) == 0 for r in references):
        raise ContractError("references must be non-empty")
    if len(candidate) == 0:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0:
            continue
        recall = lcs / len(ref)
        precision = lcs / len(candidate)
        f = (1 + beta ** 2) * recall * precision / (recall + beta ** 2 * precision)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# tf-idf consensus metric (CIDEr, corpus-level)


def _tfidf_vector(tokens, order: int, doc_freq: Counter, log_corpus: float):
    counts = _ngrams(tokens, order)
    vec = {}
    norm_sq = 0.0
    for gram, count in counts.items():
        idf = log_corpus - math.log(max(doc_freq.get(gram, 0), 1))
        w = count * idf
        vec[gram] = w
        norm_sq += w * w
    return vec, math.sqrt(norm_sq)


def cider_scores(candidates, reference_lists,
                     max_order: int = CIDER_MAX_ORDER,
                     sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-item tf-idf cosine agreement with references, averaged over
    n-gram orders 1..max_order and scaled by 10.

    Document frequency counts, per n-gram, the number of corpus items
    whose reference set mentions it; a Gaussian penalty on the length gap
    discounts each candidate-reference comparison.
    """
    if len(candidates) != len(reference_lists):
        raise ContractError(
            f"{len(candidates)} candidates vs {len(reference_lists)} reference sets"
        )
    if not candidates:
        raise ContractError("corpus metric needs at least one item")
    for refs in reference_lists:
        if not refs or any(len(r) == 0 for r in refs):
            raise ContractError("references must be non-empty")
    n_items = len(reference_lists)
    log_corpus = math.log(n_items)
    doc_freq = [Counter() for _ in range(max_order)]
    for refs in reference_lists:
        for order in range(1, max_order + 1):
            grams = set()
            for ref in refs:
                grams.update(_ngrams(ref, order))
            for gram in grams:
                doc_freq[order - 1][gram] += 1

    scores = []
    for cand, refs in zip(candidates, reference_lists):
        total = 0.0
        for order in range(1, max_order + 1):
            c_vec, c_norm = _tfidf_vector(cand, order, doc_freq[order - 1], log_corpus)
            sim_sum = 0.0
            for ref in refs:
                r_vec, r_norm = _tfidf_vector(ref, order, doc_freq[order - 1], log_corpus)
                if c_norm > 0 and r_norm > 0:
                    dot = sum(w * r_vec.get(g, 0.0) for g, w in c_vec.items())
                    sim = dot / (c_norm * r_norm)
                else:
                    sim = 0.0
                gap = len(cand) - len(ref)
                sim *= math.exp(-(gap ** 2) / (2 * sigma ** 2))
                sim_sum += sim
            total += sim_sum / len(refs)
        scores.append(10.0 * total / max_order)
    return scores


def cider(candidates, reference_lists, **kw) -> float:
    scores = cider_scores(candidates, reference_lists, **kw)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# report assembly

REPORT_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider")


def corpus_report(candidates, reference_lists) -> dict:
    """All metric columns for a generated corpus, in report order."""
    n = len(candidates)
    if n == 0 or n != len(reference_lists):
        raise ContractError("report needs matched, non-empty candidate/reference lists")
    report: dict = {}
    for order in range(1, 5):
        vals = [bleu_n(c, r, n=order) for c, r in zip(candidates, reference_lists)]
        report[f"bleu{order}"] = sum(vals) / n
    report["meteor"] = METEOR_NOTE
    rl = [rouge_l(c, r) for c, r in zip(candidates, reference_lists)]
    report["rouge_l"] = sum(rl) / n
    report["cider"] = cider(candidates, reference_lists)
    return report
