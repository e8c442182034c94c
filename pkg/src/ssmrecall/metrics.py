"""Reconstruction fidelity measures.

All functions are pure.  Sequences are lists of token ids (or any hashable
items); ROUGE is computed over model tokens, not detokenized words.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ReconstructionRecord:
    input: list[int]
    reconstruction: list[int]
    labels: list[str | None] | None = None
    source: str | None = None
    pair_id: str | None = None
    variant: str | None = None
    perplexity: float | None = None
    f1: float = field(init=False)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.input):
            raise ValueError("labels must align with input tokens")
        self.f1 = rouge1_f1(self.input, self.reconstruction)

    @property
    def length(self) -> int:
        return len(self.input)

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "reconstruction": self.reconstruction,
            "labels": self.labels,
            "source": self.source,
            "pair_id": self.pair_id,
            "variant": self.variant,
            "perplexity": self.perplexity,
            "f1": self.f1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReconstructionRecord:
        return cls(
            d["input"], d["reconstruction"], d.get("labels"), d.get("source"),
            d.get("pair_id"), d.get("variant"), d.get("perplexity"),
        )


def omission_rate(f_in: int, f_rec: int) -> float:
    """``1 - f_rec / f_in`` clamped to [0, 1]."""
    if f_in < 1:
        raise ValueError("omission rate is undefined for a token absent from the input")
    return 1.0 - min(f_rec / f_in, 1.0)


def matched_counts(inp, rec) -> dict:
    """Per token: (count in input, count reproduced, clipped at the input count)."""
    cin, crec = Counter(inp), Counter(rec)
    return {t: (n, min(n, crec[t])) for t, n in cin.items()}


def omission_incidents(inp, rec) -> int:
    return sum(n - m for n, m in matched_counts(inp, rec).values())


def sequence_omission_rate(inp, rec) -> float:
    if not inp:
        raise ValueError("empty input")
    return omission_incidents(inp, rec) / len(inp)


def rouge1_f1(reference, hypothesis) -> float:
    """Unigram ROUGE F1 with count clipping, on a 0-100 scale."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    if len(hypothesis) == 0:
        return 0.0
    overlap = sum((Counter(reference) & Counter(hypothesis)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(hypothesis)
    r = overlap / len(reference)
    return 200.0 * p * r / (p + r)


def levenshtein(a, b) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _edit_alignment(a, b) -> list[tuple[int, int]]:
    """Index pairs (i, j) with a[i] == b[j] kept by a minimum edit script.

    On ties the backtrace drops from ``a`` first, which leaves the later of
    two interchangeable input occurrences unaligned.
    """
    n, m = len(a), len(b)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        ai, up = a[i - 1], d[i - 1]
        row = [i]
        for j in range(1, m + 1):
            row.append(min(up[j] + 1, row[j - 1] + 1, up[j - 1] + (ai != b[j - 1])))
        d.append(row)
    pairs = []
    i, j = n, m
    while i > 0 and j > 0:
        if d[i][j] == d[i - 1][j] + 1:
            i -= 1
        elif d[i][j] == d[i - 1][j - 1] + (a[i - 1] != b[j - 1]):
            if a[i - 1] == b[j - 1]:
                pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


def _nearest_order_matching(src: list[int], dst: list[int]) -> set[int]:
    """Order-preserving min-cost matching of all of ``dst`` into ``src``.

    Returns the indices into ``src`` left unmatched (later ones on ties).
    Requires ``len(dst) <= len(src)``.
    """
    n, m = len(src), len(dst)
    if m == 0:
        return set(range(n))
    inf = float("inf")
    cost = [[0.0] + [inf] * m for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, min(i, m) + 1):
            cost[i][j] = min(cost[i - 1][j], cost[i - 1][j - 1] + abs(src[i - 1] - dst[j - 1]))
    unmatched = set()
    i, j = n, m
    while i > 0:
        if j == 0 or cost[i][j] == cost[i - 1][j]:
            unmatched.add(i - 1)
        else:
            j -= 1
        i -= 1
    return unmatched


def error_positions(inp, rec) -> list[bool]:
    """Flag which input positions count as omitted.

    Input and reconstruction are aligned by a minimum edit script.  Input
    occurrences of a token left unaligned may still be credited to an
    unaligned occurrence of the same token in the reconstruction (a moved
    token), nearest index first.  The remaining ones are errors, so the
    number of flags equals :func:`omission_incidents`.
    """
    aligned = _edit_alignment(inp, rec)
    used_in = {i for i, _ in aligned}
    used_rec = {j for _, j in aligned}
    loose_in: dict = {}
    loose_rec: dict = {}
    for i, t in enumerate(inp):
        if i not in used_in:
            loose_in.setdefault(t, []).append(i)
    for j, t in enumerate(rec):
        if j not in used_rec:
            loose_rec.setdefault(t, []).append(j)
    flags = [False] * len(inp)
    for t, positions in loose_in.items():
        spare = loose_rec.get(t, [])
        if len(spare) >= len(positions):
            continue
        for k in _nearest_order_matching(positions, spare):
            flags[positions[k]] = True
    return flags


def position_errors(records, length: int | None = None) -> np.ndarray:
    """Per-position error counts summed over records that share one length."""
    records = list(records)
    if not records:
        return np.zeros(length or 0, dtype=np.int64)
    lengths = {len(r.input) for r in records}
    if len(lengths) != 1 or (length is not None and lengths != {length}):
        raise ValueError(f"position_errors needs records of a single length, got {sorted(lengths)}")
    counts = np.zeros(lengths.pop(), dtype=np.int64)
    for r in records:
        counts += np.asarray(error_positions(r.input, r.reconstruction), dtype=np.int64)
    return counts


NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


def extract_numbers(text: str) -> list[str]:
    return NUMBER_RE.findall(text)


def mape_numeric(references, generated) -> float:
    """Mean of ``|gen - ref| / |ref|`` as a ratio; zero references are skipped."""
    pairs = [(float(r), float(g)) for r, g in zip(references, generated)]
    if len(references) != len(generated):
        raise ValueError("reference and generated numbers must be aligned")
    kept = [(r, g) for r, g in pairs if r != 0]
    if len(kept) < len(pairs):
        log.info("mape: skipped %d zero references", len(pairs) - len(kept))
    if not kept:
        raise ValueError("no usable reference numbers")
    return float(np.mean([abs(g - r) / abs(r) for r, g in kept]))


@dataclass
class NumericDeviation:
    pairs: list[tuple[str, str]]
    dropped_unpaired: int
    zero_refs: int

    @property
    def edit_distances(self) -> list[int]:
        return [levenshtein(r, g) for r, g in self.pairs]

    @property
    def ref_lengths(self) -> list[int]:
        return [len(r) for r, _ in self.pairs]

    def mape(self) -> float | None:
        nonzero = [(r, g) for r, g in self.pairs if float(r) != 0]
        if not nonzero:
            return None
        return mape_numeric([r for r, _ in nonzero], [g for _, g in nonzero])


def numeric_deviation(pairs_of_text) -> NumericDeviation:
    """Pair numbers in order of occurrence and keep the mismatching pairs.

    ``pairs_of_text`` yields (reference text, reconstructed text).
    """
    wrong, dropped, zeros = [], 0, 0
    for ref_text, gen_text in pairs_of_text:
        refs, gens = extract_numbers(ref_text), extract_numbers(gen_text)
        dropped += abs(len(refs) - len(gens))
        for r, g in zip(refs, gens):
            if r != g:
                wrong.append((r, g))
                zeros += float(r) == 0
    if dropped:
        log.info("numeric deviation: %d unpaired numbers dropped", dropped)
    return NumericDeviation(wrong, dropped, zeros)
