"""Report tables and plot series derived from scored records.

The group table prints the stats module's numbers verbatim; only the
per-profession tables and plot series are computed here (simple means over
raw records). Per-profession rows are ordered by the largest absolute
pre-to-post change across genders, descending, with the profession name as
tiebreak.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Gender, ProfessionGroup
from .scoring import AssociationRecord
from .stats import AggregateResult, HypothesisVerdict

GROUP_TABLE_COLUMNS = [
    "group", "person", "variant", "N", "mean_pre", "sd_pre", "mean_post",
    "mean_diff", "W", "W_plus", "W_minus", "Z", "p", "r", "n_effective",
    "test_method", "note",
]


def _fmt(value, places: int = 6) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{places}g}"
    return str(value)


def group_table_rows(result: AggregateResult) -> list[dict[str, str]]:
    rows = []
    for cell in result.all_rows():
        wil = cell.wilcoxon
        rows.append({
            "group": cell.group.value,
            "person": cell.gender.value if cell.gender else "both",
            "variant": cell.variant,
            "N": str(cell.n),
            "mean_pre": _fmt(cell.mean_pre),
            "sd_pre": _fmt(cell.sd_pre),
            "mean_post": _fmt(cell.mean_post),
            "mean_diff": _fmt(cell.mean_diff),
            "W": _fmt(wil.w if wil else None),
            "W_plus": _fmt(wil.w_plus if wil else None),
            "W_minus": _fmt(wil.w_minus if wil else None),
            "Z": _fmt(wil.z if wil else None),
            "p": _fmt(wil.p if wil else None),
            "r": _fmt(cell.r),
            "n_effective": _fmt(wil.n_effective if wil else None),
            "test_method": wil.method if wil else "",
            "note": cell.note,
        })
    return rows


def write_group_table(path: str | Path, result: AggregateResult) -> None:
    _write_tsv(path, GROUP_TABLE_COLUMNS, group_table_rows(result))


@dataclass(frozen=True)
class ProfessionReportRow:
    profession: str
    mean_pre: dict[Gender, float]
    mean_post: dict[Gender, float]
    abs_diff: float


def profession_tables(
    records_pre: Sequence[AssociationRecord],
    records_post: Sequence[AssociationRecord],
) -> dict[ProfessionGroup, list[ProfessionReportRow]]:
    """Per-profession mean associations per gender and state, grouped and
    sorted by the largest |post - pre| over genders."""
    sums: dict[tuple, list[float]] = defaultdict(lambda: [0.0, 0])
    groups: dict[str, ProfessionGroup] = {}
    for state, records in (("pre", records_pre), ("post", records_post)):
        for rec in records:
            key = (state, rec.profession_label, rec.gender)
            cell = sums[key]
            cell[0] += rec.score
            cell[1] += 1
            groups[rec.profession_label] = rec.group

    def mean(state: str, profession: str, gender: Gender) -> float:
        total, count = sums.get((state, profession, gender), (0.0, 0))
        return total / count if count else float("nan")

    tables: dict[ProfessionGroup, list[ProfessionReportRow]] = {
        g: [] for g in ProfessionGroup
    }
    for profession, group in groups.items():
        pre = {g: mean("pre", profession, g) for g in Gender}
        post = {g: mean("post", profession, g) for g in Gender}
        abs_diff = max(abs(post[g] - pre[g]) for g in Gender)
        tables[group].append(ProfessionReportRow(profession, pre, post, abs_diff))
    for group in tables:
        tables[group].sort(key=lambda row: (-row.abs_diff, row.profession))
    return tables


def write_profession_table(path: str | Path,
                           rows: Sequence[ProfessionReportRow]) -> None:
    columns = ["profession", "mean_pre_female", "mean_pre_male",
               "mean_post_female", "mean_post_male", "abs_diff"]
    _write_tsv(path, columns, [{
        "profession": row.profession,
        "mean_pre_female": _fmt(row.mean_pre[Gender.FEMALE]),
        "mean_pre_male": _fmt(row.mean_pre[Gender.MALE]),
        "mean_post_female": _fmt(row.mean_post[Gender.FEMALE]),
        "mean_post_male": _fmt(row.mean_post[Gender.MALE]),
        "abs_diff": _fmt(row.abs_diff),
    } for row in rows])


def profession_pre_tables(
    records_pre: Sequence[AssociationRecord],
) -> dict[ProfessionGroup, list[dict[str, str]]]:
    """Scoring-only runs: per-profession pre means per gender, largest
    female-male gap first (name as tiebreak)."""
    sums: dict[tuple, list[float]] = defaultdict(lambda: [0.0, 0])
    groups: dict[str, ProfessionGroup] = {}
    for rec in records_pre:
        cell = sums[(rec.profession_label, rec.gender)]
        cell[0] += rec.score
        cell[1] += 1
        groups[rec.profession_label] = rec.group
    tables: dict[ProfessionGroup, list] = {g: [] for g in ProfessionGroup}
    for profession, group in groups.items():
        means = {}
        for gender in Gender:
            total, count = sums.get((profession, gender), (0.0, 0))
            means[gender] = total / count if count else float("nan")
        gap = abs(means[Gender.FEMALE] - means[Gender.MALE])
        tables[group].append((gap, profession, means))
    out: dict[ProfessionGroup, list[dict[str, str]]] = {}
    for group, rows in tables.items():
        rows.sort(key=lambda r: (-r[0], r[1]))
        out[group] = [{
            "profession": profession,
            "mean_pre_female": _fmt(means[Gender.FEMALE]),
            "mean_pre_male": _fmt(means[Gender.MALE]),
            "abs_gap": _fmt(gap),
        } for gap, profession, means in rows]
    return out


def write_profession_pre_table(path: str | Path,
                               rows: Sequence[dict[str, str]]) -> None:
    _write_tsv(path, ["profession", "mean_pre_female", "mean_pre_male",
                      "abs_gap"], rows)


def write_plot_series(path: str | Path,
                      tables: dict[ProfessionGroup, list[ProfessionReportRow]]) -> None:
    """Long-format series (group, profession, gender, state, mean association)
    ready for bar charts; rows keep the report ordering."""
    columns = ["group", "profession", "gender", "state", "mean_association"]
    rows = []
    for group, table in tables.items():
        for row in table:
            for state, means in (("pre", row.mean_pre), ("post", row.mean_post)):
                for gender in Gender:
                    rows.append({
                        "group": group.value,
                        "profession": row.profession,
                        "gender": gender.value,
                        "state": state,
                        "mean_association": _fmt(means[gender]),
                    })
    _write_tsv(path, columns, rows)


def write_verdicts(path: str | Path, verdicts: Sequence[HypothesisVerdict]) -> None:
    columns = ["hypothesis", "setting", "group", "person", "expected",
               "observed", "passed"]
    _write_tsv(path, columns, [{
        "hypothesis": v.hypothesis,
        "setting": v.setting,
        "group": v.group.value,
        "person": v.gender.value,
        "expected": v.expected,
        "observed": v.observed,
        "passed": str(v.passed),
    } for v in verdicts])


def render_charts(out_dir: str | Path,
                  tables: dict[ProfessionGroup, list[ProfessionReportRow]]) -> list[Path]:
    """Optional static bar charts (pre and post association per profession)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for group, rows in tables.items():
        if not rows:
            continue
        names = [r.profession for r in rows]
        x = range(len(rows))
        fig, axes = plt.subplots(2, 1, figsize=(max(8, len(rows) * 0.6), 7),
                                 sharex=True)
        for ax, state in zip(axes, ("pre", "post")):
            for offset, gender in ((-0.2, Gender.FEMALE), (0.2, Gender.MALE)):
                means = [getattr(r, f"mean_{state}")[gender] for r in rows]
                ax.bar([i + offset for i in x], means, width=0.4,
                       label=gender.value)
            ax.axhline(0.0, color="black", linewidth=0.8)
            ax.set_ylabel(f"{state} association")
            ax.legend()
        axes[1].set_xticks(list(x))
        axes[1].set_xticklabels(names, rotation=60, ha="right", fontsize=8)
        fig.suptitle(f"group {group.value}: association by profession")
        fig.tight_layout()
        path = Path(out_dir) / f"associations_{group.value}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def _write_tsv(path: str | Path, columns: Sequence[str],
               rows: Sequence[dict[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), delimiter="\t",
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
