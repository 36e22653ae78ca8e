"""ROUGE-1/2/L F1 on a casefolded alphanumeric tokenization."""
from __future__ import annotations

import re
from collections import Counter

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Casefold, then keep maximal runs of alphanumeric characters."""
    return _TOKEN_RE.findall(text.casefold())


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, n_pred: int, n_gold: int) -> float:
    if overlap == 0 or n_pred == 0 or n_gold == 0:
        return 0.0
    p = overlap / n_pred
    r = overlap / n_gold
    return 2 * p * r / (p + r)


def rouge_n_tokens(pred: list[str], gold: list[str], n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    p, g = ngrams(pred, n), ngrams(gold, n)
    overlap = sum((p & g).values())
    return _f1(overlap, sum(p.values()), sum(g.values()))


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_tokens(pred: list[str], gold: list[str]) -> float:
    return _f1(lcs_length(pred, gold), len(pred), len(gold))


def rouge_n(pred: str, gold: str, n: int) -> float:
    return rouge_n_tokens(tokenize(pred), tokenize(gold), n)


def rouge_l(pred: str, gold: str) -> float:
    return rouge_l_tokens(tokenize(pred), tokenize(gold))


def mean_rouge(pred: str, gold: str) -> float:
    p, g = tokenize(pred), tokenize(gold)
    return (rouge_n_tokens(p, g, 1) + rouge_n_tokens(p, g, 2) + rouge_l_tokens(p, g)) / 3.0
