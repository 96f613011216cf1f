"""BEC-Pro corpus construction: profession tables, person words, sentence
templates and their expansion into masked evaluation instances.

The corpus pairs a gender-denoting person phrase (the target) with a
profession term (the attribute) in short template sentences, in English and
German. Each instance carries three masked variants of its sentence:

* target-masked: the person phrase's head word replaced by one mask token,
* attribute-masked: every sub-token of the profession replaced by a mask,
* both-masked: the two composed; used as the prior when scoring.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .errors import (
    CorpusShapeError,
    GroupBoundsViolation,
    MalformedRow,
    MissingGermanForm,
    SlotNotFound,
    TargetNotSingleToken,
)

DEFAULT_MASK_TOKEN = "[MASK]"

PERSON_SLOT = "<person>"
PROFESSION_SLOT = "<profession>"
ARTICLE_SLOT = "<article>"


class Gender(str, Enum):
    FEMALE = "female"
    MALE = "male"


class Language(str, Enum):
    EN = "en"
    DE = "de"


class ProfessionGroup(str, Enum):
    FEMALE_DOMINATED = "F"
    MALE_DOMINATED = "M"
    BALANCED = "B"


# Female-participation percentage ranges that define the three groups.
GROUP_BOUNDS: dict[ProfessionGroup, tuple[float, float]] = {
    ProfessionGroup.FEMALE_DOMINATED: (88.3, 98.7),
    ProfessionGroup.MALE_DOMINATED: (0.7, 3.3),
    ProfessionGroup.BALANCED: (48.5, 53.3),
}

PROFESSIONS_PER_GROUP = 20
PERSONS_PER_GENDER = 9
TEMPLATES_PER_LANGUAGE = 5


@dataclass(frozen=True)
class ProfessionEntry:
    original_label: str
    short_en: str
    percent_female: float
    group: ProfessionGroup
    de_masculine: str
    de_feminine: str
    # True when the source table lists the same form for both genders.
    identical_de_forms: bool = False

    def form(self, language: Language, gender: Gender) -> str:
        """Surface form inserted into a template for the given language/gender."""
        if language is Language.EN:
            return self.short_en
        form = self.de_feminine if gender is Gender.FEMALE else self.de_masculine
        if not form:
            raise MissingGermanForm(
                f"profession {self.short_en!r} has no German {gender.value} form"
            )
        return form


@dataclass(frozen=True)
class PersonWord:
    surface_en: str
    surface_de: str
    gender: Gender
    head_en: str
    head_de: str
    de_article: str

    def surface(self, language: Language) -> str:
        return self.surface_en if language is Language.EN else self.surface_de

    def head(self, language: Language) -> str:
        return self.head_en if language is Language.EN else self.head_de


@dataclass(frozen=True)
class Template:
    id: int
    language: Language
    pattern: str

    def __post_init__(self) -> None:
        for slot in (PERSON_SLOT, PROFESSION_SLOT):
            if self.pattern.count(slot) != 1:
                raise MalformedRow(
                    f"template {self.id} ({self.language.value}): expected exactly "
                    f"one {slot} slot in {self.pattern!r}"
                )
        if self.pattern.count(ARTICLE_SLOT) > 1:
            raise MalformedRow(
                f"template {self.id}: at most one {ARTICLE_SLOT} slot allowed"
            )
        if self.pattern.index(PERSON_SLOT) > self.pattern.index(PROFESSION_SLOT):
            # Scoring locates the target as the first mask of the both-masked
            # variant, which requires the person phrase to precede the
            # profession in every template.
            raise MalformedRow(
                f"template {self.id}: person slot must precede profession slot"
            )

    @property
    def has_article_slot(self) -> bool:
        return ARTICLE_SLOT in self.pattern


@dataclass(frozen=True)
class SentenceInstance:
    """One expanded template sentence plus masking metadata.

    ``head_span``/``profession_span`` are character offsets into ``sentence``;
    ``head_word`` is the exact text at ``head_span`` (capitalised when the
    German sentence starts with it) and is the token whose probability is
    queried at scoring time.
    """

    instance_id: str
    language: Language
    template_id: int
    person_index: int
    person_surface: str
    head_word: str
    gender: Gender
    profession_index: int
    profession_label: str
    profession_form: str
    group: ProfessionGroup
    percent_female: float
    sentence: str
    head_span: tuple[int, int]
    profession_span: tuple[int, int]
    mask_token: str = DEFAULT_MASK_TOKEN
    variant_target_masked: str | None = None
    variant_attribute_masked: str | None = None
    variant_both_masked: str | None = None

    @property
    def is_masked(self) -> bool:
        return self.variant_target_masked is not None


def _open_default(name: str) -> TextIO:
    text = resources.files("mlmbias.data").joinpath(name).read_text("utf-8")
    return io.StringIO(text)


def _rows(source: str | Path | TextIO, required: Sequence[str], what: str):
    if isinstance(source, (str, Path)):
        handle: TextIO = open(source, encoding="utf-8", newline="")
        close = True
    else:
        handle, close = source, False
    try:
        lines = (line for line in handle if not line.startswith("#"))
        reader = csv.DictReader(lines, delimiter="\t")
        if reader.fieldnames is None:
            raise MalformedRow(f"{what}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise MalformedRow(f"{what}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if any(v is None for v in row.values()) or None in row:
                raise MalformedRow(f"{what}: wrong field count on data row {lineno}")
            yield row
    finally:
        if close:
            handle.close()


def load_professions(
    source: str | Path | TextIO | None = None, *, require_counts: bool = True
) -> list[ProfessionEntry]:
    """Load the profession table (tab-separated, header row, six columns).

    Raises GroupBoundsViolation when a row's female-participation percentage
    falls outside its group's range, and CorpusShapeError when the table does
    not contain 20 entries per group (disable with ``require_counts=False``
    for custom tables).
    """
    if source is None:
        source = _open_default("professions_en_de.tsv")
    required = ["original_label", "short_en", "percent_female", "group",
                "de_masculine", "de_feminine"]
    entries: list[ProfessionEntry] = []
    for row in _rows(source, required, "professions file"):
        try:
            percent = float(row["percent_female"])
            group = ProfessionGroup(row["group"].strip())
        except ValueError as e:
            raise MalformedRow(f"professions file: {e}") from e
        low, high = GROUP_BOUNDS[group]
        if not (low <= percent <= high):
            raise GroupBoundsViolation(
                f"{row['short_en']!r}: percent_female {percent} outside "
                f"[{low}, {high}] for group {group.value}"
            )
        if not row["short_en"].strip():
            raise MalformedRow("professions file: empty short_en")
        entries.append(
            ProfessionEntry(
                original_label=row["original_label"].strip(),
                short_en=row["short_en"].strip(),
                percent_female=percent,
                group=group,
                de_masculine=row["de_masculine"].strip(),
                de_feminine=row["de_feminine"].strip(),
                identical_de_forms=row["de_masculine"].strip() == row["de_feminine"].strip(),
            )
        )
    if require_counts:
        counts = {g: sum(1 for e in entries if e.group is g) for g in ProfessionGroup}
        if any(c != PROFESSIONS_PER_GROUP for c in counts.values()):
            raise CorpusShapeError(
                "expected 20 professions per group, got "
                + ", ".join(f"{g.value}={c}" for g, c in counts.items())
            )
    return entries


def load_person_words(source: str | Path | TextIO | None = None) -> list[PersonWord]:
    """Load the person-word list; equal counts per gender are enforced."""
    if source is None:
        source = _open_default("person_words.tsv")
    required = ["surface_en", "surface_de", "gender", "head_word_en",
                "head_word_de", "de_article"]
    persons: list[PersonWord] = []
    for row in _rows(source, required, "person-words file"):
        try:
            gender = Gender(row["gender"].strip())
        except ValueError as e:
            raise MalformedRow(f"person-words file: {e}") from e
        person = PersonWord(
            surface_en=row["surface_en"].strip(),
            surface_de=row["surface_de"].strip(),
            gender=gender,
            head_en=row["head_word_en"].strip(),
            head_de=row["head_word_de"].strip(),
            de_article=row["de_article"].strip(),
        )
        for lang in Language:
            if _find_head_span(person.surface(lang), person.head(lang)) is None:
                raise MalformedRow(
                    f"person-words file: head {person.head(lang)!r} not a word of "
                    f"{person.surface(lang)!r}"
                )
        persons.append(person)
    by_gender = {g: sum(1 for p in persons if p.gender is g) for g in Gender}
    if len(set(by_gender.values())) != 1:
        raise CorpusShapeError(f"unbalanced person-word list: {by_gender}")
    return persons


def load_templates(
    source: str | Path | TextIO | None = None, language: Language | None = None
) -> list[Template]:
    if source is None:
        source = _open_default("templates.tsv")
    templates: list[Template] = []
    for row in _rows(source, ["id", "language", "pattern"], "templates file"):
        try:
            tpl = Template(int(row["id"]), Language(row["language"].strip()), row["pattern"])
        except ValueError as e:
            raise MalformedRow(f"templates file: {e}") from e
        templates.append(tpl)
    if language is not None:
        templates = [t for t in templates if t.language is language]
        if len(templates) != TEMPLATES_PER_LANGUAGE:
            raise CorpusShapeError(
                f"expected {TEMPLATES_PER_LANGUAGE} templates for {language.value}, "
                f"got {len(templates)}"
            )
    return sorted(templates, key=lambda t: t.id)


def _find_head_span(surface: str, head: str) -> tuple[int, int] | None:
    m = re.search(rf"(?<!\w){re.escape(head)}(?!\w)", surface)
    return m.span() if m else None


def _render(template: Template, person: PersonWord, profession_form: str,
            language: Language) -> tuple[str, tuple[int, int], tuple[int, int], str]:
    """Fill a template; returns (sentence, head_span, profession_span, head_word)."""
    pattern = template.pattern
    if template.has_article_slot:
        pattern = pattern.replace(ARTICLE_SLOT, person.de_article)
    surface = person.surface(language)
    i_person = pattern.index(PERSON_SLOT)
    middle_start = i_person + len(PERSON_SLOT)
    i_prof = pattern.index(PROFESSION_SLOT)
    prefix = pattern[:i_person]
    middle = pattern[middle_start:i_prof]
    suffix = pattern[i_prof + len(PROFESSION_SLOT):]

    sentence = prefix + surface + middle + profession_form + suffix
    person_start = len(prefix)
    head_rel = _find_head_span(surface, person.head(language))
    if head_rel is None:
        raise SlotNotFound(f"head {person.head(language)!r} not found in {surface!r}")
    head_span = (person_start + head_rel[0], person_start + head_rel[1])
    prof_start = person_start + len(surface) + len(middle)
    profession_span = (prof_start, prof_start + len(profession_form))

    if language is Language.DE and sentence:
        # German orthography: capitalise the sentence-initial character. The
        # English corpus stays lowercase (scored with an uncased model).
        sentence = sentence[0].upper() + sentence[1:]
    head_word = sentence[head_span[0]:head_span[1]]
    return sentence, head_span, profession_span, head_word


def expand_templates(
    templates: Sequence[Template],
    persons: Sequence[PersonWord],
    professions: Sequence[ProfessionEntry],
    language: Language,
) -> list[SentenceInstance]:
    """Expand templates × person words × professions into sentence instances.

    Output order is deterministic: template id, then person index, then
    profession index. German instances pick the gendered profession form and
    the apposition article from the person word's gender.
    """
    templates = [t for t in templates if t.language is language]
    if len(templates) != TEMPLATES_PER_LANGUAGE:
        raise CorpusShapeError(
            f"expected {TEMPLATES_PER_LANGUAGE} {language.value} templates, got {len(templates)}"
        )
    if len(persons) != 2 * PERSONS_PER_GENDER:
        raise CorpusShapeError(f"expected {2 * PERSONS_PER_GENDER} person words")
    if len(professions) != 3 * PROFESSIONS_PER_GROUP:
        raise CorpusShapeError(f"expected {3 * PROFESSIONS_PER_GROUP} professions")
    return expand_templates_unchecked(templates, persons, professions, language)


def expand_templates_unchecked(
    templates: Sequence[Template],
    persons: Sequence[PersonWord],
    professions: Sequence[ProfessionEntry],
    language: Language,
) -> list[SentenceInstance]:
    """expand_templates without the full-corpus cardinality checks (fixtures)."""
    instances = []
    for template in sorted(templates, key=lambda t: t.id):
        for pi, person in enumerate(persons):
            for fi, prof in enumerate(professions):
                form = prof.form(language, person.gender)
                sentence, head_span, prof_span, head_word = _render(
                    template, person, form, language
                )
                instances.append(
                    SentenceInstance(
                        instance_id=f"{language.value}-t{template.id}-p{pi:02d}-o{fi:02d}",
                        language=language,
                        template_id=template.id,
                        person_index=pi,
                        person_surface=person.surface(language),
                        head_word=head_word,
                        gender=person.gender,
                        profession_index=fi,
                        profession_label=prof.short_en,
                        profession_form=form,
                        group=prof.group,
                        percent_female=prof.percent_female,
                        sentence=sentence,
                        head_span=head_span,
                        profession_span=prof_span,
                    )
                )
    return instances


def apply_masking(instance: SentenceInstance, scorer=None,
                  mask_token: str | None = None) -> SentenceInstance:
    """Fill the three masked variants of an instance.

    With a scorer, the attribute mask count equals the number of sub-tokens
    the scorer's tokenizer produces for the profession form, and the target
    head word must tokenize to a single sub-token (TargetNotSingleToken
    otherwise). Without one, each whitespace-separated word of the profession
    counts as one sub-token and the default mask token is used.
    """
    hs, he = instance.head_span
    ps, pe = instance.profession_span
    sentence = instance.sentence
    if not (0 <= hs < he <= ps < pe <= len(sentence)):
        raise SlotNotFound(
            f"{instance.instance_id}: invalid spans {instance.head_span} / "
            f"{instance.profession_span}"
        )
    prof_text = sentence[ps:pe]
    if scorer is not None:
        mask = scorer.mask_token
        head_tokens = scorer.tokenize(instance.head_word).ids
        if len(head_tokens) != 1:
            raise TargetNotSingleToken(
                f"{instance.instance_id}: target {instance.head_word!r} splits "
                f"into {len(head_tokens)} sub-tokens"
            )
        n_sub = len(scorer.tokenize(prof_text).ids)
    else:
        mask = mask_token or DEFAULT_MASK_TOKEN
        n_sub = len(prof_text.split())
    if n_sub < 1:
        raise SlotNotFound(f"{instance.instance_id}: empty profession span")

    attr_masks = " ".join([mask] * n_sub)
    t_masked = sentence[:hs] + mask + sentence[he:]
    a_masked = sentence[:ps] + attr_masks + sentence[pe:]
    both = sentence[:hs] + mask + sentence[he:ps] + attr_masks + sentence[pe:]
    return replace(
        instance,
        mask_token=mask,
        variant_target_masked=t_masked,
        variant_attribute_masked=a_masked,
        variant_both_masked=both,
    )


def build_corpus(
    language: Language,
    professions_path: str | Path | None = None,
    persons_path: str | Path | None = None,
    templates_path: str | Path | None = None,
    scorer=None,
) -> list[SentenceInstance]:
    """Build the full 5,400-instance corpus for one language, masks included."""
    professions = load_professions(professions_path)
    persons = load_person_words(persons_path)
    templates = load_templates(templates_path, language)
    instances = expand_templates(templates, persons, professions, language)
    return [apply_masking(inst, scorer) for inst in instances]


_CORPUS_COLUMNS = [
    "instance_id", "language", "template_id", "person_index", "person_surface",
    "head_word", "gender", "profession_index", "profession_label",
    "profession_form", "group", "percent_female", "sentence",
    "head_start", "head_end", "profession_start", "profession_end",
    "mask_token", "variant_target_masked", "variant_attribute_masked",
    "variant_both_masked",
]


def write_corpus(path: str | Path, instances: Iterable[SentenceInstance]) -> None:
    """Write instances as UTF-8 TSV with all variants and metadata columns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(_CORPUS_COLUMNS)
        for inst in instances:
            writer.writerow([
                inst.instance_id, inst.language.value, inst.template_id,
                inst.person_index, inst.person_surface, inst.head_word,
                inst.gender.value, inst.profession_index, inst.profession_label,
                inst.profession_form, inst.group.value,
                repr(inst.percent_female), inst.sentence,
                inst.head_span[0], inst.head_span[1],
                inst.profession_span[0], inst.profession_span[1],
                inst.mask_token,
                inst.variant_target_masked or "",
                inst.variant_attribute_masked or "",
                inst.variant_both_masked or "",
            ])


def read_corpus(path: str | Path) -> list[SentenceInstance]:
    instances = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = [c for c in _CORPUS_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRow(f"corpus file: missing column(s) {', '.join(missing)}")
        for row in reader:
            instances.append(SentenceInstance(
                instance_id=row["instance_id"],
                language=Language(row["language"]),
                template_id=int(row["template_id"]),
                person_index=int(row["person_index"]),
                person_surface=row["person_surface"],
                head_word=row["head_word"],
                gender=Gender(row["gender"]),
                profession_index=int(row["profession_index"]),
                profession_label=row["profession_label"],
                profession_form=row["profession_form"],
                group=ProfessionGroup(row["group"]),
                percent_female=float(row["percent_female"]),
                sentence=row["sentence"],
                head_span=(int(row["head_start"]), int(row["head_end"])),
                profession_span=(int(row["profession_start"]), int(row["profession_end"])),
                mask_token=row["mask_token"],
                variant_target_masked=row["variant_target_masked"] or None,
                variant_attribute_masked=row["variant_attribute_masked"] or None,
                variant_both_masked=row["variant_both_masked"] or None,
            ))
    return instances
