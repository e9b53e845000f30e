"""Sentence-level text overlap metrics: BLEU-4, a METEOR variant, ROUGE-L.

All three operate on token lists produced by :func:`tokenize`. Box tokens
are kept whole, so a hypothesis only gets n-gram credit for coordinates it
reproduces exactly.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "NlgScores",
    "bleu4",
    "lcs_length",
    "meteor_lite",
    "rouge_l",
    "score_text",
    "stem",
    "tokenize",
]

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9  # Fmean = PR / (alpha P + (1 - alpha) R) == 10PR / (R + 9P)
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0

_TOKEN_RE = re.compile(r"<box>.*?</box>|\S+", re.IGNORECASE | re.DOTALL)
_TRAILING_PUNCT_RE = re.compile(r"^(.*?)([.,;:!?]+)$", re.DOTALL)
_PUNCT = frozenset(".,;:!?")


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, box spans atomic, trailing punctuation split off.

    >>> tokenize("Interval worsening of pneumothorax.")
    ['interval', 'worsening', 'of', 'pneumothorax', '.']
    """
    out: list[str] = []
    append = out.append
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok[-1] not in _PUNCT or tok.startswith("<box>"):
            append(tok)
            continue
        p = _TRAILING_PUNCT_RE.match(tok)
        if p.group(1):
            append(p.group(1))
        out.extend(p.group(2))
    return out


def _clipped(hyp: Sequence[str], ref: Sequence[str], n: int, distinct: bool) -> int:
    """Hypothesis n-grams matched against reference n-grams, each used at most once.

    ``distinct`` promises that hyp or ref has no repeated n-gram, in which
    case every shared n-gram clips to exactly one match.
    """
    hg = zip(*(hyp[i:] for i in range(n)))
    rg = zip(*(ref[i:] for i in range(n)))
    if distinct:
        return len(set(hg).intersection(rg))
    avail: dict[tuple, int] = {}
    for g in rg:
        avail[g] = avail.get(g, 0) + 1
    hits = 0
    for g in hg:
        k = avail.get(g)
        if k:
            hits += 1
            avail[g] = k - 1
    return hits


def bleu4(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Smoothed sentence BLEU with uniform weights over 1..4-grams.

    A zero clipped count (or an order the hypothesis is too short to have)
    contributes precision ``1e-9`` instead of zero.
    """
    if not hyp:
        return 0.0
    if list(hyp) == list(ref):
        # all precisions 1, BP 1
        return 1.0 if len(hyp) >= 4 else _bleu_core(hyp, ref)
    return _bleu_core(hyp, ref)


def _clipped_unique(hyp: Sequence[str], ref: Sequence[str]) -> list[int]:
    """Clipped 1..4-gram counts when neither sequence repeats a token.

    Each hyp token then maps to at most one ref position, and the n-gram
    starting at hyp[i] matches iff the following n-1 tokens continue the run
    of consecutive ref positions.
    """
    pos = {t: j for j, t in enumerate(ref)}
    counts = [0, 0, 0, 0]
    run = 0
    nxt = -1
    for i in range(len(hyp) - 1, -1, -1):
        j = pos.get(hyp[i], -1)
        if j < 0:
            run = 0
        elif nxt == j + 1 and run:
            run += 1
        else:
            run = 1
        nxt = j
        for n in range(run if run < 4 else 4):
            counts[n] += 1
    return counts


def _bleu_core(hyp: Sequence[str], ref: Sequence[str]) -> float:
    hyp_unique = len(set(hyp)) == len(hyp)
    ref_unique = len(set(ref)) == len(ref)
    if hyp_unique and ref_unique:
        clipped_by_order = _clipped_unique(hyp, ref)
    else:
        # a repeated n-gram implies a repeated unigram, so one check covers all orders
        distinct = hyp_unique or ref_unique
        clipped_by_order = [_clipped(hyp, ref, n, distinct) for n in range(1, 5)]
    log_sum = 0.0
    for n in range(1, 5):
        total = len(hyp) - n + 1
        if total <= 0:
            log_sum += math.log(BLEU_EPSILON)
            continue
        clipped = clipped_by_order[n - 1]
        log_sum += math.log(clipped / total if clipped else BLEU_EPSILON / total)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_sum / 4.0)


_SUFFIXES = (
    "ements", "ement", "ments", "ment", "ations", "ation", "ness", "ities", "ity",
    "ings", "ing", "edly", "ed", "ies", "es", "ly", "s",
)


@functools.lru_cache(maxsize=1 << 16)
def stem(token: str) -> str:
    """Crude suffix-stripping stemmer; keeps stems of at least three characters.

    >>> stem("worsening") == stem("worsened")
    True
    >>> stem("improvement") == stem("improved")
    True
    """
    if not token.isalpha():
        return token
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            token = token[: -len(suf)]
            break
    if token.endswith("e") and len(token) > 3:
        token = token[:-1]
    return token


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy two-stage unigram alignment (exact, then stem).

    Each hypothesis token takes the reference position right after its
    predecessor's match when that position is free and matches, otherwise the
    leftmost free matching position.
    """
    ref_of = [-1] * len(hyp)
    free = [True] * len(ref)
    todo = range(len(hyp))
    for key in (None, stem):
        positions: dict[str, list[int]] = {}
        for j, t in enumerate(ref):
            if free[j]:
                positions.setdefault(key(t) if key else t, []).append(j)
        left = []
        for i in todo:
            cands = positions.get(key(hyp[i]) if key else hyp[i])
            if not cands:
                left.append(i)
                continue
            after = ref_of[i - 1] + 1 if i and ref_of[i - 1] >= 0 else -1
            j = after if after in cands else cands[0]
            cands.remove(j)
            free[j] = False
            ref_of[i] = j
        todo = left
        if not todo or True not in free:
            break
    return [(i, j) for i, j in enumerate(ref_of) if j >= 0]


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor_lite(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """METEOR without synonym matching.

    ``Fmean = 10PR / (R + 9P)``, fragmentation penalty
    ``0.5 * (chunks / matches) ** 3``.
    """
    if not hyp or not ref:
        return 0.0
    pairs = _align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, bit-parallel over ``b``.

    Runs in O(len(a)) big-integer operations (Allison-Dix / Hyyro).
    """
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for j, tok in enumerate(b):
        masks[tok] = masks.get(tok, 0) | (1 << j)
    full = (1 << len(b)) - 1
    v = full
    for tok in a:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(b) - bin(v).count("1")


def rouge_l(hyp: Sequence[str], ref: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    r = lcs / len(ref)
    p = lcs / len(hyp)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


@dataclass(frozen=True, slots=True)
class NlgScores:
    bleu4: float = 0.0
    meteor: float = 0.0
    rouge_l: float = 0.0


def score_text(hyp_text: str, ref_text: str) -> NlgScores:
    hyp = tokenize(hyp_text)
    ref = tokenize(ref_text)
    return NlgScores(bleu4(hyp, ref), meteor_lite(hyp, ref), rouge_l(hyp, ref))
