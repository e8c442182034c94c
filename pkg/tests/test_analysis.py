import math

import mpmath
import numpy as np
import pytest

from ssmrecall.analysis import (
    PairingError,
    category_omission,
    corpus_frequency,
    f1_by_length,
    frequency_group_omission,
    paired_comparison,
    pairwise_ttests,
    per_source_f1,
    perplexity_omission_correlation,
    repeat_summary,
    synthetic_numeric_sequences,
    supported_samples,
    top_omitted,
    welch_t,
)
from ssmrecall.metrics import ReconstructionRecord
from ssmrecall.tokenizer import DIGIT_IDS


def welch_oracle(a, b):
    a, b = [mpmath.mpf(x) for x in a], [mpmath.mpf(x) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / mpmath.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t ** 2), regularized=True)
    return float(t), float(p)


def rank(xs):
    """1-based ranks with ties sharing their mean rank."""
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    r = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        for k in range(i, j + 1):
            r[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return r


def spearman_oracle(x, y):
    rx, ry = rank(x), rank(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))


# --- token omission -----------------------------------------------------------

def test_top_omitted_all_perfect_has_no_positive_rate():
    recs = [ReconstructionRecord([1, 2, 3], [1, 2, 3])] * 3
    assert all(r.rate == 0 for r in top_omitted(recs, 1))


def test_top_omitted_hand_ranking():
    # a: 4 in, 1 out; b: 4 in, 3 out; c: 4 in, 4 out
    recs = [
        ReconstructionRecord([1, 2, 3], [2, 3]),
        ReconstructionRecord([1, 2, 3], [3]),
        ReconstructionRecord([1, 2, 3], [1, 2, 3]),
        ReconstructionRecord([1, 2, 3], [2, 3]),
    ]
    ranked = top_omitted(recs, 1)
    assert [(r.key, r.rate) for r in ranked] == [(1, 0.75), (2, 0.25), (3, 0.0)]
    assert top_omitted(recs, 5) == []
    with pytest.raises(ValueError):
        top_omitted(recs, 0)


# --- categories -------------------------------------------------------------------

def test_category_single_category_no_omission():
    om = category_omission([ReconstructionRecord([1, 2], [1, 2], ["X", "X"])])
    assert om.rows["X"].rate == 0.0


def test_category_two_category_planted():
    recs = [
        ReconstructionRecord([1, 2, 3, 4], [1, 3, 4], ["N", "V", "N", "V"]),
        ReconstructionRecord([1, 2, 3, 4], [2, 4], ["N", "V", "N", "V"]),
    ]
    om = category_omission(recs)
    assert om.rows["N"].rate == pytest.approx(2 / 4)
    assert om.rows["V"].rate == pytest.approx(1 / 4)
    assert om.samples == {"N": [0.0, 1.0], "V": [0.5, 0.0]}


def test_category_ignores_unlabelled_and_checks_alignment():
    om = category_omission([ReconstructionRecord([1, 2], [], ["X", None])])
    assert list(om.rows) == ["X"]
    r = ReconstructionRecord([1, 2], [1, 2])
    with pytest.raises(ValueError):
        category_omission([r])


# --- t-tests ------------------------------------------------------------------------

def test_welch_matches_independent_formula():
    t, p = welch_t([1, 2, 3], [2, 3, 4])
    t_ref, p_ref = welch_oracle([1, 2, 3], [2, 3, 4])
    assert abs(t - t_ref) <= 1e-6 and abs(p - p_ref) <= 1e-6
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 17), rng.normal(0.4, 2, 9)
    t, p = welch_t(a, b)
    t_ref, p_ref = welch_oracle(a, b)
    assert abs(t - t_ref) <= 1e-6 and abs(p - p_ref) <= 1e-6


def test_identical_samples_and_degenerate_variance():
    res = pairwise_ttests({"a": [1.0, 2.0, 3.0], "b": [1.0, 2.0, 3.0]})[0]
    assert res.t_statistic == 0.0 and res.p_adjusted == 1.0 and not res.significant
    assert welch_t([0.5, 0.5], [0.5, 0.5]) == (0.0, 1.0)


def test_bonferroni_multiplies_by_pair_count():
    rng = np.random.default_rng(1)
    samples = {f"c{i}": rng.normal(i * 0.05, 1, 30) for i in range(4)}  # 6 pairs
    for res in pairwise_ttests(samples):
        assert res.p_adjusted == pytest.approx(min(1.0, 6 * res.p_value))
    assert min(1.0, 0.01 * 12) == pytest.approx(0.12)


def test_ttest_needs_two_samples():
    with pytest.raises(ValueError):
        pairwise_ttests({"a": [1.0], "b": [1.0, 2.0]})


def test_supported_samples_filter():
    recs = [ReconstructionRecord([1, 2], [1], ["A", "B"]) for _ in range(3)]
    om = category_omission(recs)
    assert set(supported_samples(om, 3)) == {"A", "B"}
    assert supported_samples(om, 4) == {}


# --- sources, pairs, synthetic ---------------------------------------------------------

def test_per_source_planted_error_rates():
    recs = [ReconstructionRecord([1, 2, 3, 4], [1, 2, 3], source="A") for _ in range(3)]
    recs += [ReconstructionRecord([1, 2, 3, 4], [1, 2, 3, 4], source="B") for _ in range(2)]
    recs += [ReconstructionRecord([5, 6], [5, 6], source="B")]
    table = per_source_f1(recs)
    # P = 1, R = 3/4
    assert table[("A", 4)] == (3, pytest.approx(100 * 2 * 0.75 / 1.75))
    assert table[("B", 4)] == (2, 100.0)
    assert table[("B", 2)] == (1, 100.0)
    with pytest.raises(ValueError):
        per_source_f1([ReconstructionRecord([1], [1])])


def _pair(pid, variant, inp, rec):
    return ReconstructionRecord(inp, rec, source=variant, pair_id=pid, variant=variant)


def test_paired_gap():
    same = [_pair(str(i), v, [1, 2], [1, 2]) for i in range(3) for v in ("a", "b")]
    assert paired_comparison(same, "a", "b")[2][3] == 0.0
    noisy = [_pair(str(i), "a", [1, 2, 3, 4], [1, 2, 3, 4]) for i in range(4)]
    noisy += [_pair(str(i), "b", [1, 2, 3, 4], [1, 2, 3, 9]) for i in range(4)]
    n, fa, fb, gap = paired_comparison(noisy, "a", "b")[4]
    assert (n, fa, fb) == (4, 100.0, 75.0) and gap == pytest.approx(25.0)


def test_paired_errors():
    with pytest.raises(PairingError):
        paired_comparison([_pair("1", "a", [1], [1])], "a", "b")
    with pytest.raises(PairingError):
        paired_comparison([ReconstructionRecord([1], [1], variant="a")], "a", "b")
    dup = [_pair("1", "a", [1], [1]), _pair("1", "a", [1], [1])]
    with pytest.raises(PairingError):
        paired_comparison(dup, "a", "b")


def test_synthetic_numeric_sequences():
    a = synthetic_numeric_sequences(6, 20, seed=3)
    assert a == synthetic_numeric_sequences(6, 20, seed=3)
    assert all(len(s) == 6 and set(s) <= set(DIGIT_IDS) for s in a)
    one = synthetic_numeric_sequences(1, 5, seed=0, alphabet=(ord("7"),))
    assert all(rouge == 100.0 for rouge in (ReconstructionRecord(s, s).f1 for s in one))
    with pytest.raises(ValueError):
        synthetic_numeric_sequences(4, 2, 0, alphabet=())


def test_repeat_summary():
    assert repeat_summary([(65, [65] * 4)] * 5) == (100.0, 4)
    assert repeat_summary([(65, [65] * 300), (66, [66] * 300)]) == (100.0, 300)
    pct, mode = repeat_summary([(65, [65, 65]), (65, [1]), (65, [65, 65, 65]), (65, [65, 65])])
    assert (pct, mode) == (75.0, 2)
    assert repeat_summary([(65, [])]) == (0.0, 0)


# --- perplexity correlation ----------------------------------------------------------

def test_correlation_constant_omission_is_zero():
    recs = [ReconstructionRecord([1, 2], [1, 2], perplexity=p) for p in (2.0, 3.0, 4.0)]
    res = perplexity_omission_correlation(recs)
    assert res.spearman == 0.0 and res.ties_note


def test_correlation_monotone_is_one():
    recs = [ReconstructionRecord([1, 2, 3, 4], [1, 2, 3, 4][: 4 - k], perplexity=1.0 + k) for k in range(5)]
    assert perplexity_omission_correlation(recs).spearman == pytest.approx(1.0)


def test_correlation_matches_rank_oracle():
    ppl = [3.1, 1.2, 8.8, 4.4, 4.4, 2.0, 9.9, 5.5, 7.0, 6.1]
    kept = [4, 1, 0, 2, 3, 4, 0, 2, 1, 3]
    recs = [ReconstructionRecord([1, 2, 3, 4], [1, 2, 3, 4][:k], perplexity=p) for p, k in zip(ppl, kept)]
    om = [1 - k / 4 for k in kept]
    res = perplexity_omission_correlation(recs, n_bins=5)
    assert abs(res.spearman - spearman_oracle(ppl, om)) <= 1e-9
    assert [b[1] for b in res.bins] == [2] * 5
    with pytest.raises(ValueError):
        perplexity_omission_correlation(recs[:2])


# --- corpus frequency --------------------------------------------------------------------

def test_corpus_frequency_single_token():
    (row,) = corpus_frequency([("the", "DET")] * 5)
    assert (row.total, row.unique, row.ratio) == (5, 1, 5)


def test_corpus_frequency_hand_counted():
    words = ("the cat saw a dog and the dog saw 3 cats or 42 dogs the end a cat ran 3".split())
    tags = "D N V D N C D N V M N C M N D N D N V M".split()
    assert len(words) == len(tags) == 20
    rows = {r.category: (r.total, r.unique) for r in corpus_frequency(zip(words, tags))}
    assert rows == {"D": (5, 2), "N": (7, 5), "V": (3, 2), "C": (2, 2), "M": (3, 2)}
    order = [r.category for r in corpus_frequency(zip(words, tags))]
    assert order == ["D", "M", "V", "N", "C"]  # 2.5, 1.5, 1.5 (tie by name), 1.4, 1.0


def test_frequency_groups_split_rare_to_common():
    recs = [ReconstructionRecord([1, 2, 3, 4], [3, 4])]
    groups = frequency_group_omission(recs, {1: 1, 2: 5, 3: 50, 4: 500}, n_groups=2)
    assert [(g, toks, fi, fr) for g, toks, fi, fr, _ in groups] == [(0, [1, 2], 2, 0), (1, [3, 4], 2, 2)]
    assert [g[4] for g in groups] == [1.0, 0.0]


def test_f1_by_length():
    recs = [ReconstructionRecord([1, 2], [1, 2]), ReconstructionRecord([1, 2], []), ReconstructionRecord([1], [1])]
    assert f1_by_length(recs) == {1: (1, 100.0, 100.0), 2: (2, 50.0, 50.0)}
