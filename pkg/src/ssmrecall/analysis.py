"""Token-, category- and sequence-level views over reconstruction records."""
from __future__ import annotations

import itertools
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .latent import DEFAULT_MAX_TOKENS
from .metrics import ReconstructionRecord, error_positions, matched_counts, rouge1_f1, sequence_omission_rate
from .tokenizer import DIGIT_IDS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OmissionRow:
    key: object
    f_in: int
    f_rec: int

    @property
    def rate(self) -> float:
        return 1.0 - self.f_rec / self.f_in


def omission_table(records: Iterable[ReconstructionRecord]) -> dict:
    """Token -> OmissionRow, with reproduced counts clipped per sequence before summing."""
    f_in: Counter = Counter()
    f_rec: Counter = Counter()
    for r in records:
        for t, (n, m) in matched_counts(r.input, r.reconstruction).items():
            f_in[t] += n
            f_rec[t] += m
    return {t: OmissionRow(t, f_in[t], f_rec[t]) for t in f_in}


def top_omitted(records, min_frequency: int = 100) -> list[OmissionRow]:
    """Tokens seen at least ``min_frequency`` times, most omitted first."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    rows = [row for row in omission_table(records).values() if row.f_in >= min_frequency]
    return sorted(rows, key=lambda r: (-r.rate, -r.f_in, str(r.key)))


@dataclass
class CategoryOmission:
    rows: dict  # category -> OmissionRow over labelled positions
    samples: dict  # category -> per-sequence omission rates


def category_omission(records: Iterable[ReconstructionRecord]) -> CategoryOmission:
    """Omission per label, using the per-position error assignment.

    Unlabelled (``None``) positions are ignored.
    """
    f_in: Counter = Counter()
    errors: Counter = Counter()
    samples = defaultdict(list)
    for r in records:
        if r.labels is None:
            raise ValueError("record carries no category labels")
        if len(r.labels) != len(r.input):
            raise ValueError("labels are not aligned with the input")
        flags = error_positions(r.input, r.reconstruction)
        seq_in: Counter = Counter()
        seq_err: Counter = Counter()
        for lab, bad in zip(r.labels, flags):
            if lab is None:
                continue
            seq_in[lab] += 1
            seq_err[lab] += bad
        for lab, n in seq_in.items():
            f_in[lab] += n
            errors[lab] += seq_err[lab]
            samples[lab].append(seq_err[lab] / n)
    rows = {c: OmissionRow(c, f_in[c], f_in[c] - errors[c]) for c in sorted(f_in)}
    return CategoryOmission(rows, {c: samples[c] for c in sorted(samples)})


@dataclass(frozen=True)
class PairwiseTestResult:
    category_a: str
    category_b: str
    t_statistic: float
    p_value: float
    p_adjusted: float
    significant: bool


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test; equal constant samples give (0, 1)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.var() == 0 and b.var() == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return (np.inf if a.mean() > b.mean() else -np.inf), 0.0
    with warnings.catch_warnings():
        # near-constant samples trip scipy's precision-loss warning; the result is still usable
        warnings.simplefilter("ignore", RuntimeWarning)
        res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def pairwise_ttests(samples: Mapping[str, Sequence[float]], alpha: float = 0.05) -> list[PairwiseTestResult]:
    """Welch t-test for every unordered pair, Bonferroni-adjusted over all pairs."""
    cats = list(samples)
    for c in cats:
        if len(samples[c]) < 2:
            raise ValueError(f"category {c!r} has fewer than two samples")
    pairs = list(itertools.combinations(cats, 2))
    out = []
    for a, b in pairs:
        t, p = welch_t(samples[a], samples[b])
        adj = min(1.0, p * len(pairs))
        out.append(PairwiseTestResult(a, b, t, p, adj, adj < alpha))
    return out


def supported_samples(omission: CategoryOmission, min_support: int = 100) -> dict:
    """Per-sequence samples of categories with at least ``min_support`` labelled tokens."""
    return {
        c: s for c, s in omission.samples.items()
        if omission.rows[c].f_in >= min_support and len(s) >= 2
    }


def per_source_f1(records: Iterable[ReconstructionRecord]) -> dict:
    """(source, length) -> (n records, mean F1)."""
    cells = defaultdict(list)
    for r in records:
        if r.source is None:
            raise ValueError("record has no source tag")
        cells[(r.source, r.length)].append(r.f1)
    return {k: (len(v), float(np.mean(v))) for k, v in sorted(cells.items())}


class PairingError(ValueError):
    pass


def paired_comparison(records: Iterable[ReconstructionRecord], variant_a: str, variant_b: str) -> dict:
    """length -> (n pairs, mean F1 of A, mean F1 of B, A - B)."""
    by_key = {}
    for r in records:
        if r.pair_id is None or r.variant not in (variant_a, variant_b):
            raise PairingError(f"record without a usable pair id / variant: {r.pair_id!r} {r.variant!r}")
        key = (r.length, r.pair_id, r.variant)
        if key in by_key:
            raise PairingError(f"duplicate record for pair {r.pair_id} variant {r.variant} at length {r.length}")
        by_key[key] = r
    out = {}
    for L in sorted({k[0] for k in by_key}):
        ids = sorted({k[1] for k in by_key if k[0] == L})
        fa, fb = [], []
        for pid in ids:
            a, b = by_key.get((L, pid, variant_a)), by_key.get((L, pid, variant_b))
            if a is None or b is None:
                raise PairingError(f"pair {pid} at length {L} is missing a variant")
            fa.append(a.f1)
            fb.append(b.f1)
        ma, mb = float(np.mean(fa)), float(np.mean(fb))
        out[L] = (len(ids), ma, mb, ma - mb)
    return out


def _reconstruct_many(encoder, decoder, seqs, max_tokens):
    from .training import reconstruct_chunks
    return reconstruct_chunks(encoder, decoder, seqs, max_tokens)


def synthetic_numeric_sequences(length: int, n: int, seed: int, alphabet=DIGIT_IDS) -> list[list[int]]:
    if not alphabet:
        raise ValueError("numeric alphabet is empty")
    rng = np.random.default_rng([seed, length])
    return rng.choice(np.asarray(alphabet), size=(n, length)).tolist()


def synthetic_numeric_eval(encoder, decoders: Mapping[int, object], n_per_length: int, seed: int,
                           alphabet=DIGIT_IDS, max_tokens: int = DEFAULT_MAX_TOKENS) -> dict:
    """length -> records for uniform-random sequences over ``alphabet``."""
    out = {}
    for L, dec in sorted(decoders.items()):
        seqs = synthetic_numeric_sequences(L, n_per_length, seed, alphabet)
        recs = _reconstruct_many(encoder, dec, seqs, max_tokens)
        out[L] = [ReconstructionRecord(s, r, source="synthetic_numeric") for s, r in zip(seqs, recs)]
    return out


def repeat_summary(token_seqs: Sequence[tuple[int, list[int]]]) -> tuple[float, int]:
    """(percent of outputs containing the token, modal count of it among those outputs).

    The smallest count wins a tie for the mode; the mode is 0 when no output
    contains the token.
    """
    counts = [rec.count(tok) for tok, rec in token_seqs]
    present = [c for c in counts if c > 0]
    pct = 100.0 * len(present) / len(counts) if counts else 0.0
    if not present:
        return pct, 0
    freq = Counter(present)
    top = max(freq.values())
    return pct, min(c for c, f in freq.items() if f == top)


def repeated_token_eval(encoder, decoders: Mapping[int, object], n_samples: int, alphabet: Sequence[int],
                        seed: int, max_tokens: int = DEFAULT_MAX_TOKENS) -> dict:
    """length -> (present %, repeat mode, records) for inputs of one token repeated ``length`` times."""
    out = {}
    for L, dec in sorted(decoders.items()):
        rng = np.random.default_rng([seed, L])
        toks = rng.choice(np.asarray(alphabet), size=n_samples).tolist()
        seqs = [[t] * L for t in toks]
        recs = _reconstruct_many(encoder, dec, seqs, max_tokens)
        pct, mode = repeat_summary(list(zip(toks, recs)))
        out[L] = (pct, mode, [ReconstructionRecord(s, r, source="repeated_token") for s, r in zip(seqs, recs)])
    return out


@dataclass
class PerplexityCorrelation:
    spearman: float
    bins: list  # (bin index, n, mean perplexity, mean omission)
    ties_note: str = ""


def perplexity_omission_correlation(records: Sequence[ReconstructionRecord], n_bins: int = 10) -> PerplexityCorrelation:
    """Spearman rank correlation of input perplexity with sequence omission rate."""
    if len(records) < 3:
        raise ValueError("need at least three records")
    if any(r.perplexity is None for r in records):
        raise ValueError("every record needs an input perplexity")
    ppl = np.array([r.perplexity for r in records], float)
    om = np.array([sequence_omission_rate(r.input, r.reconstruction) for r in records], float)
    note = ""
    if np.all(om == om[0]) or np.all(ppl == ppl[0]):
        rho, note = 0.0, "constant input; correlation reported as 0"
        log.info("perplexity correlation: %s", note)
    else:
        rho = float(stats.spearmanr(ppl, om).statistic)
    order = np.argsort(ppl, kind="stable")
    bins = []
    for k, idx in enumerate(np.array_split(order, min(n_bins, len(records)))):
        bins.append((k, len(idx), float(ppl[idx].mean()), float(om[idx].mean())))
    return PerplexityCorrelation(rho, bins, note)


@dataclass(frozen=True)
class FrequencyRow:
    category: str
    total: int
    unique: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.total, self.unique)


def corpus_frequency(items: Iterable[tuple[object, str | None]]) -> list[FrequencyRow]:
    """Per category: occurrences, distinct items, and their ratio; highest ratio first."""
    total: Counter = Counter()
    distinct = defaultdict(set)
    for item, cat in items:
        if cat is None:
            continue
        total[cat] += 1
        distinct[cat].add(item)
    rows = [FrequencyRow(c, total[c], len(distinct[c])) for c in total]
    return sorted(rows, key=lambda r: (-r.ratio, r.category))


def frequency_group_omission(records, train_counts: Mapping[int, int], n_groups: int = 10) -> list[tuple]:
    """Omission per training-frequency group of the tokens that occur in ``records``.

    Distinct input tokens are sorted by training count (ascending, ties by
    id) and split into ``n_groups`` near-equal groups.  Returns
    ``(group, tokens, f_in, f_rec, rate)`` from rarest to most frequent.
    """
    table = omission_table(records)
    toks = sorted(table, key=lambda t: (train_counts.get(t, 0), t))
    out = []
    for g, grp in enumerate(np.array_split(np.asarray(toks, dtype=object), n_groups)):
        grp = list(grp)
        if not grp:
            continue
        fi = sum(table[t].f_in for t in grp)
        fr = sum(table[t].f_rec for t in grp)
        out.append((g, grp, fi, fr, 1.0 - fr / fi))
    return out


def f1_by_length(records) -> dict:
    """length -> (n, mean F1, median F1)."""
    cells = defaultdict(list)
    for r in records:
        cells[r.length].append(r.f1)
    return {L: (len(v), float(np.mean(v)), float(np.median(v))) for L, v in sorted(cells.items())}


def mean_f1(records) -> float:
    return float(np.mean([rouge1_f1(r.input, r.reconstruction) for r in records]))
