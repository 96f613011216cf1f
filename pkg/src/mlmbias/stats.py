"""Paired nonparametric statistics over association records.

Provides the Wilcoxon signed-rank test (exact distribution or normal
approximation with tie correction and continuity correction), the
``r = Z / sqrt(N)`` effect size, per-group aggregation of pre/post score
records, and the three hypothesis sign checks:

* H1 (pro-typical): positive pre-association that decreases after mitigation,
* H2 (anti-typical): negative pre-association that increases after mitigation,
* H3 (balanced): near-zero pre-association that stays put.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Gender, ProfessionGroup
from .errors import DegenerateSample, KeyMismatch, MissingCell, NonPositiveN
from .scoring import AssociationRecord

# At and below this effective sample size the exact distribution is used even
# in approximate mode: the normal approximation is too coarse there (its
# worst-case two-sided error against the exact tail exceeds the advertised
# 0.02 agreement for n <= 8 and drops to 0.019 at n = 9).
SMALL_SAMPLE_EXACT_CUTOFF = 8

# auto mode switches from exact to the normal approximation above this size.
AUTO_EXACT_LIMIT = 25


@dataclass(frozen=True)
class PairedSample:
    """Aligned score pairs sharing instance keys; differences are y - x."""

    keys: tuple
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if len(self.keys) != len(self.x) or len(self.x) != len(self.y):
            raise ValueError("keys, x and y must have equal lengths")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("sample keys must be unique")

    @property
    def diffs(self) -> np.ndarray:
        return self.y - self.x


@dataclass(frozen=True)
class WilcoxonResult:
    w: float            # min(w_plus, w_minus), the conventional report statistic
    w_plus: float
    w_minus: float
    z: float            # signed normal-approximation statistic for w_plus
    p: float            # two-sided
    p_greater: float    # one-sided: evidence that differences are positive
    p_less: float
    n_effective: int
    exact: bool
    method: str


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_distribution(double_ranks: Sequence[int]) -> np.ndarray:
    """Counts over the support of 2*W+ across all 2^n sign assignments.

    Ranks with ties are multiples of one half, so doubling makes them
    integers; the polynomial product below counts every subset sum, which is
    exactly the enumeration of all sign assignments.
    """
    total = int(sum(double_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    upper = 0
    for r in double_ranks:
        r = int(r)
        shifted = counts[: upper + 1].copy()
        counts[r : upper + r + 1] += shifted
        upper += r
    return counts


def _exact_pvalues(double_ranks: Sequence[int], w_plus: float) -> tuple[float, float, float]:
    counts = _exact_distribution(double_ranks)
    total = counts.sum()
    dw = int(round(2 * w_plus))
    p_greater = counts[dw:].sum() / total
    p_less = counts[:dw + 1].sum() / total
    p_two = min(1.0, 2.0 * min(p_greater, p_less))
    return p_two, p_greater, p_less


def _normal_pvalues(ranks: np.ndarray, w_plus: float) -> tuple[float, float, float, float]:
    """Tie-corrected normal approximation with continuity correction.

    Uses the exact null moments of W+ = sum(r_i * B_i) with fair Bernoulli
    signs: mean = sum(r)/2 and var = sum(r^2)/4. On untied ranks 1..n these
    reduce to the textbook n(n+1)/4 and n(n+1)(2n+1)/24; with average ranks
    the variance matches the classical tie correction, and zero-inflated
    ranks (the pratt zero method) are centred correctly as well.
    """
    mean = float(ranks.sum()) / 2.0
    var = float((ranks * ranks).sum()) / 4.0
    if var <= 0:
        raise DegenerateSample("zero variance in signed-rank statistic")
    sd = math.sqrt(var)
    centered = w_plus - mean
    cc = 0.5 * (1 if centered > 0 else -1 if centered < 0 else 0)
    z = (centered - cc) / sd
    p_greater = 0.5 * math.erfc((w_plus - mean - 0.5) / (sd * math.sqrt(2)))
    p_less = 0.5 * math.erfc((mean - w_plus - 0.5) / (sd * math.sqrt(2)))
    p_two = min(1.0, math.erfc(abs(z) / math.sqrt(2)))
    return z, p_two, p_greater, p_less


def wilcoxon_signed_rank(
    sample: PairedSample | Sequence[float] | np.ndarray,
    mode: str = "auto",
    zero_method: str = "wilcox",
) -> WilcoxonResult:
    """Wilcoxon signed-rank test over paired differences.

    ``sample`` may be a PairedSample (differences y - x) or raw differences.
    ``mode`` is "exact", "approximate" or "auto" (exact when the effective
    sample size is at most 25). ``zero_method`` "wilcox" drops zero
    differences; "pratt" ranks them but removes their rank contribution.
    The exact path computes the full distribution of the statistic over all
    2^n sign assignments; ties get average ranks in both paths.
    """
    if mode not in ("exact", "approximate", "auto"):
        raise ValueError(f"unknown mode {mode!r}")
    if zero_method not in ("wilcox", "pratt"):
        raise ValueError(f"unknown zero_method {zero_method!r}")
    diffs = sample.diffs if isinstance(sample, PairedSample) else np.asarray(
        sample, dtype=np.float64
    )
    if diffs.size == 0 or not np.any(diffs != 0):
        raise DegenerateSample("all differences are zero")

    if zero_method == "wilcox":
        nonzero = diffs[diffs != 0]
        ranks = _average_ranks(np.abs(nonzero))
        signs = np.sign(nonzero)
    else:  # pratt: rank with zeros included, then drop the zeros' ranks
        ranks_all = _average_ranks(np.abs(diffs))
        keep = diffs != 0
        ranks = ranks_all[keep]
        signs = np.sign(diffs[keep])
    n_eff = len(ranks)
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())

    z, p_two_n, p_greater_n, p_less_n = _normal_pvalues(ranks, w_plus)

    use_exact = mode == "exact" or (mode == "auto" and n_eff <= AUTO_EXACT_LIMIT)
    calibrated = mode == "approximate" and n_eff <= SMALL_SAMPLE_EXACT_CUTOFF
    if use_exact or calibrated:
        double_ranks = np.rint(2 * ranks).astype(int)
        p_two, p_greater, p_less = _exact_pvalues(double_ranks, w_plus)
        exact = True
        method = "exact" if use_exact else "exact (small-sample calibration)"
    else:
        p_two, p_greater, p_less = p_two_n, p_greater_n, p_less_n
        exact = False
        method = "normal approximation (tie + continuity corrected)"

    return WilcoxonResult(
        w=min(w_plus, w_minus), w_plus=w_plus, w_minus=w_minus, z=z,
        p=p_two, p_greater=p_greater, p_less=p_less,
        n_effective=n_eff, exact=exact, method=method,
    )


def effect_size_r(z: float, n: int) -> float:
    """Rosenthal's r: the Z statistic over the square root of the sample size."""
    if n <= 0:
        raise NonPositiveN(f"n must be positive, got {n}")
    return z / math.sqrt(n)


@dataclass(frozen=True)
class GroupStats:
    """Aggregate for one (profession group x person gender) cell or one of the
    labelled per-group test variants (pooled over genders, female vs male)."""

    group: ProfessionGroup
    gender: Gender | None
    variant: str                 # "pre_vs_post", "pre_vs_post_pooled", "f_vs_m_pre", ...
    n: int
    mean_pre: float
    sd_pre: float
    mean_post: float | None = None
    sd_post: float | None = None
    mean_diff: float | None = None
    wilcoxon: WilcoxonResult | None = None
    r: float | None = None
    note: str = ""


@dataclass(frozen=True)
class AggregateResult:
    cells: list[GroupStats]      # one per (group, gender), ordered
    pooled: list[GroupStats]     # one per group over both genders (post runs)
    f_vs_m: list[GroupStats]     # one per group and model state

    def all_rows(self) -> list[GroupStats]:
        return [*self.cells, *self.pooled, *self.f_vs_m]

    def cell(self, group: ProfessionGroup, gender: Gender) -> GroupStats:
        for c in self.cells:
            if c.group is group and c.gender is gender:
                return c
        raise MissingCell(f"no cell for group {group.value}, gender {gender.value}")


_PERSON_INDEX_RE = re.compile(r"-p(\d+)-")


def _person_index(instance_id: str) -> int | None:
    m = _PERSON_INDEX_RE.search(instance_id)
    return int(m.group(1)) if m else None


def _tested(keys, x, y, mode: str) -> tuple[WilcoxonResult | None, float | None, str]:
    sample = PairedSample(tuple(keys), np.asarray(x), np.asarray(y))
    try:
        result = wilcoxon_signed_rank(sample, mode=mode)
    except DegenerateSample:
        return None, None, "degenerate sample (all differences zero); no test"
    return result, effect_size_r(result.z, result.n_effective), ""


def aggregate(
    records_pre: Sequence[AssociationRecord],
    records_post: Sequence[AssociationRecord] | None = None,
    mode: str = "auto",
) -> AggregateResult:
    """Aggregate association records into per-cell and per-group statistics.

    With post records, each (group, gender) cell gets a paired pre-vs-post
    test plus a per-group test pooled over both genders. In every case a
    female-vs-male paired test is computed per group (pairing the i-th female
    person word with the i-th male one on the same template and profession,
    using the person index encoded in the instance id). Input order never
    matters; record sets must cover identical instance keys.
    """
    pre_by_key = {r.instance_id: r for r in records_pre}
    if len(pre_by_key) != len(records_pre):
        raise KeyMismatch("duplicate instance ids in pre records")
    post_by_key: dict[str, AssociationRecord] | None = None
    if records_post is not None:
        post_by_key = {r.instance_id: r for r in records_post}
        if len(post_by_key) != len(records_post):
            raise KeyMismatch("duplicate instance ids in post records")
        if set(post_by_key) != set(pre_by_key):
            only_pre = sorted(set(pre_by_key) - set(post_by_key))[:3]
            only_post = sorted(set(post_by_key) - set(pre_by_key))[:3]
            raise KeyMismatch(
                f"pre/post instance keys differ (pre-only {only_pre}, "
                f"post-only {only_post})"
            )

    by_cell: dict[tuple[ProfessionGroup, Gender], list[str]] = defaultdict(list)
    for key in sorted(pre_by_key):
        r = pre_by_key[key]
        by_cell[(r.group, r.gender)].append(key)

    cells: list[GroupStats] = []
    pooled: list[GroupStats] = []
    groups = [g for g in ProfessionGroup
              if any(cg is g for cg, _ in by_cell)]

    for group in groups:
        for gender in Gender:
            keys = by_cell.get((group, gender))
            if not keys:
                continue
            pre = np.array([pre_by_key[k].score for k in keys])
            row = {
                "group": group, "gender": gender, "variant": "pre_vs_post",
                "n": len(keys), "mean_pre": float(pre.mean()),
                "sd_pre": float(pre.std(ddof=1)) if len(pre) > 1 else 0.0,
            }
            if post_by_key is not None:
                post = np.array([post_by_key[k].score for k in keys])
                test, r_eff, note = _tested(keys, pre, post, mode)
                row.update(
                    mean_post=float(post.mean()),
                    sd_post=float(post.std(ddof=1)) if len(post) > 1 else 0.0,
                    mean_diff=float((post - pre).mean()),
                    wilcoxon=test, r=r_eff, note=note,
                )
            else:
                row["variant"] = "pre_only"
            cells.append(GroupStats(**row))

        if post_by_key is not None:
            keys = [k for gender in Gender for k in by_cell.get((group, gender), [])]
            pre = np.array([pre_by_key[k].score for k in keys])
            post = np.array([post_by_key[k].score for k in keys])
            test, r_eff, note = _tested(keys, pre, post, mode)
            pooled.append(GroupStats(
                group=group, gender=None, variant="pre_vs_post_pooled",
                n=len(keys), mean_pre=float(pre.mean()),
                sd_pre=float(pre.std(ddof=1)) if len(pre) > 1 else 0.0,
                mean_post=float(post.mean()),
                sd_post=float(post.std(ddof=1)) if len(post) > 1 else 0.0,
                mean_diff=float((post - pre).mean()),
                wilcoxon=test, r=r_eff, note=note,
            ))

    f_vs_m = []
    states: list[tuple[str, Mapping[str, AssociationRecord]]] = [("pre", pre_by_key)]
    if post_by_key is not None:
        states.append(("post", post_by_key))
    for state, table in states:
        for group in groups:
            rows = _female_male_pairs(table, group)
            if rows is None:
                continue
            keys, f_scores, m_scores = rows
            test, r_eff, note = _tested(keys, m_scores, f_scores, mode)
            both = np.concatenate([f_scores, m_scores])
            f_vs_m.append(GroupStats(
                group=group, gender=None, variant=f"f_vs_m_{state}",
                n=len(keys),
                mean_pre=float(f_scores.mean()),   # female side
                sd_pre=float(f_scores.std(ddof=1)) if len(f_scores) > 1 else 0.0,
                mean_post=float(m_scores.mean()),  # male side
                sd_post=float(m_scores.std(ddof=1)) if len(m_scores) > 1 else 0.0,
                mean_diff=float((f_scores - m_scores).mean()),
                wilcoxon=test, r=r_eff,
                note=note or "mean_pre/mean_post hold the female/male side means "
                             f"of the {state} scores",
            ))
    return AggregateResult(cells=cells, pooled=pooled, f_vs_m=f_vs_m)


def _female_male_pairs(table: Mapping[str, AssociationRecord],
                       group: ProfessionGroup):
    """Pair female and male records of a group by (template, profession,
    person pair slot); the slot is the person's rank within its gender."""
    females: dict[tuple, AssociationRecord] = {}
    males: dict[tuple, AssociationRecord] = {}
    gender_indices: dict[Gender, set[int]] = {g: set() for g in Gender}
    for rec in table.values():
        if rec.group is not group:
            continue
        idx = _person_index(rec.instance_id)
        if idx is None:
            return None
        gender_indices[rec.gender].add(idx)
    ranks = {
        gender: {idx: slot for slot, idx in enumerate(sorted(indices))}
        for gender, indices in gender_indices.items()
    }
    for rec in table.values():
        if rec.group is not group:
            continue
        idx = _person_index(rec.instance_id)
        slot = ranks[rec.gender][idx]
        pair_key = (rec.template_id, rec.profession_label, slot)
        target = females if rec.gender is Gender.FEMALE else males
        if pair_key in target:
            return None
        target[pair_key] = rec
    shared = sorted(set(females) & set(males))
    if not shared:
        return None
    f_scores = np.array([females[k].score for k in shared])
    m_scores = np.array([males[k].score for k in shared])
    keys = [(*k, "f_vs_m") for k in shared]
    return keys, f_scores, m_scores


@dataclass(frozen=True)
class HypothesisVerdict:
    hypothesis: str              # H1, H2 or H3
    setting: str                 # pro-typical, anti-typical or balanced
    group: ProfessionGroup
    gender: Gender
    expected: str
    observed: str
    passed: bool


_H1_CELLS = [(ProfessionGroup.FEMALE_DOMINATED, Gender.FEMALE),
             (ProfessionGroup.MALE_DOMINATED, Gender.MALE)]
_H2_CELLS = [(ProfessionGroup.MALE_DOMINATED, Gender.FEMALE),
             (ProfessionGroup.FEMALE_DOMINATED, Gender.MALE)]
_H3_CELLS = [(ProfessionGroup.BALANCED, Gender.FEMALE),
             (ProfessionGroup.BALANCED, Gender.MALE)]


def hypothesis_check(stats: AggregateResult | Iterable[GroupStats],
                     balance_threshold: float = 0.1) -> list[HypothesisVerdict]:
    """Evaluate the three association hypotheses against the six cells.

    H1: pro-typical cells show positive pre-association reduced by mitigation.
    H2: anti-typical cells show negative pre-association increased by it.
    H3: balanced cells sit near zero before and move little after
    (both |mean_pre| and |mean_diff| within ``balance_threshold``).
    """
    cells = stats.cells if isinstance(stats, AggregateResult) else list(stats)
    table: dict[tuple[ProfessionGroup, Gender], GroupStats] = {}
    for cell in cells:
        if cell.gender is not None and cell.variant.startswith("pre_vs_post"):
            table[(cell.group, cell.gender)] = cell
    verdicts = []
    for group, gender in [*_H1_CELLS, *_H2_CELLS, *_H3_CELLS]:
        cell = table.get((group, gender))
        if cell is None:
            raise MissingCell(f"missing cell ({group.value}, {gender.value})")
        if cell.mean_post is None or cell.mean_diff is None:
            raise MissingCell(
                f"cell ({group.value}, {gender.value}) has no post statistics"
            )
        observed = (f"mean_pre={cell.mean_pre:+.4f}, mean_post={cell.mean_post:+.4f}, "
                    f"mean_diff={cell.mean_diff:+.4f}")
        if (group, gender) in _H1_CELLS:
            verdicts.append(HypothesisVerdict(
                "H1", "pro-typical", group, gender,
                expected="mean_pre > 0 and mean_post < mean_pre",
                observed=observed,
                passed=cell.mean_pre > 0 and cell.mean_post < cell.mean_pre,
            ))
        elif (group, gender) in _H2_CELLS:
            verdicts.append(HypothesisVerdict(
                "H2", "anti-typical", group, gender,
                expected="mean_pre < 0 and mean_post > mean_pre",
                observed=observed,
                passed=cell.mean_pre < 0 and cell.mean_post > cell.mean_pre,
            ))
        else:
            verdicts.append(HypothesisVerdict(
                "H3", "balanced", group, gender,
                expected=(f"|mean_pre| <= {balance_threshold} and "
                          f"|mean_diff| <= {balance_threshold}"),
                observed=observed,
                passed=(abs(cell.mean_pre) <= balance_threshold
                        and abs(cell.mean_diff) <= balance_threshold),
            ))
    return verdicts
