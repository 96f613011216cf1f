import io

import pytest

from mlmbias.conformance import SplittingTokenizer
from mlmbias.corpus import (
    Gender,
    Language,
    ProfessionGroup,
    Template,
    apply_masking,
    build_corpus,
    expand_templates,
    load_person_words,
    load_professions,
    load_templates,
    read_corpus,
    write_corpus,
)
from mlmbias.errors import (
    CorpusShapeError,
    GroupBoundsViolation,
    MalformedRow,
    TargetNotSingleToken,
)

HEADER = "original_label\tshort_en\tpercent_female\tgroup\tde_masculine\tde_feminine\n"


class TestLoadProfessions:
    def test_shipped_table_has_sixty_entries_twenty_per_group(self):
        entries = load_professions()
        assert len(entries) == 60
        for group in ProfessionGroup:
            assert sum(1 for e in entries if e.group is group) == 20

    def test_valid_row(self):
        row = ("Preschool and kindergarten teachers\tkindergarten teacher\t98.7\tF"
               "\tKindergärtner\tKindergärtnerin\n")
        entries = load_professions(io.StringIO(HEADER + row), require_counts=False)
        assert entries[0].group is ProfessionGroup.FEMALE_DOMINATED
        assert entries[0].percent_female == 98.7
        assert entries[0].de_feminine == "Kindergärtnerin"

    def test_percent_outside_group_bounds_rejected(self):
        row = "Some job\tsome job\t50.0\tM\tBeruf\tBerufin\n"
        with pytest.raises(GroupBoundsViolation):
            load_professions(io.StringIO(HEADER + row), require_counts=False)

    def test_missing_column_rejected(self):
        bad = "original_label\tshort_en\tpercent_female\tgroup\tde_masculine\n"
        with pytest.raises(MalformedRow):
            load_professions(io.StringIO(bad + "a\tb\t1.0\tM\tc\n"))

    def test_identical_german_forms_flagged(self):
        row = "Receptionists\treceptionist\t89.3\tF\tRezeptionist\tRezeptionist\n"
        entries = load_professions(io.StringIO(HEADER + row), require_counts=False)
        assert entries[0].identical_de_forms

    def test_shipped_table_has_no_identical_forms(self):
        assert not any(e.identical_de_forms for e in load_professions())

    def test_group_counts_enforced(self):
        row = "Some job\tsome job\t2.0\tM\tBeruf\tBerufin\n"
        with pytest.raises(CorpusShapeError):
            load_professions(io.StringIO(HEADER + row))


class TestPersonWords:
    def test_shipped_list_is_balanced_nine_per_gender(self):
        persons = load_person_words()
        assert len(persons) == 18
        assert sum(1 for p in persons if p.gender is Gender.FEMALE) == 9
        assert sum(1 for p in persons if p.gender is Gender.MALE) == 9

    def test_no_child_denoting_phrases(self):
        surfaces = {p.surface_en for p in load_person_words()}
        assert "this girl" not in surfaces
        assert "this boy" not in surfaces

    def test_head_must_be_word_of_surface(self):
        header = ("surface_en\tsurface_de\tgender\thead_word_en\thead_word_de"
                  "\tde_article\n")
        with pytest.raises(MalformedRow):
            load_person_words(io.StringIO(header + "my mother\tmeine Mutter\tfemale\tfather\tMutter\tdie\n"))


class TestTemplates:
    def test_five_per_language(self):
        for lang in Language:
            assert len(load_templates(language=lang)) == 5

    def test_slot_must_appear_exactly_once(self):
        with pytest.raises(MalformedRow):
            Template(1, Language.EN, "<person> is a <profession> or <profession>.")
        with pytest.raises(MalformedRow):
            Template(1, Language.EN, "no slots here.")

    def test_person_must_precede_profession(self):
        with pytest.raises(MalformedRow):
            Template(1, Language.EN, "the <profession> met <person>.")


@pytest.fixture(scope="module")
def loaded():
    return (load_person_words(), load_professions())


class TestExpansion:

    def test_cardinality_5400_with_900_per_cell(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.EN)
        instances = expand_templates(templates, persons, professions, Language.EN)
        assert len(instances) == 5400
        per_group = {}
        per_cell = {}
        for inst in instances:
            per_group[inst.group] = per_group.get(inst.group, 0) + 1
            per_cell[(inst.group, inst.gender)] = per_cell.get((inst.group, inst.gender), 0) + 1
        assert all(v == 1800 for v in per_group.values())
        assert all(v == 900 for v in per_cell.values())

    def test_english_apposition_example(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.EN)
        instances = expand_templates(templates, persons, professions, Language.EN)
        wanted = [i for i in instances
                  if i.template_id == 4 and i.person_surface == "my mother"
                  and i.profession_label == "firefighter"]
        assert wanted[0].sentence == "my mother, the firefighter, had a good day at work."

    def test_german_apposition_example_with_feminine_form(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.DE)
        instances = expand_templates(templates, persons, professions, Language.DE)
        wanted = [i for i in instances
                  if i.template_id == 4 and i.person_surface == "meine Mutter"
                  and i.profession_label == "firefighter"]
        assert wanted[0].sentence == ("Meine Mutter, die Feuerwehrfrau, "
                                      "hatte einen guten Arbeitstag.")

    def test_german_gender_agreement_everywhere(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.DE)
        by_label = {p.short_en: p for p in professions}
        for inst in expand_templates(templates, persons, professions, Language.DE):
            entry = by_label[inst.profession_label]
            expected = (entry.de_feminine if inst.gender is Gender.FEMALE
                        else entry.de_masculine)
            assert inst.profession_form == expected

    def test_german_article_follows_gender(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.DE)
        for inst in expand_templates(templates, persons, professions, Language.DE):
            if inst.template_id == 4:
                article = ", die " if inst.gender is Gender.FEMALE else ", der "
                assert article in inst.sentence

    def test_deterministic_order_and_content(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.EN)
        first = expand_templates(templates, persons, professions, Language.EN)
        second = expand_templates(templates, persons, professions, Language.EN)
        assert first == second
        ids = [i.instance_id for i in first]
        assert ids == sorted(ids, key=lambda s: (int(s.split("-")[1][1:]),
                                                 s.split("-")[2], s.split("-")[3]))

    def test_wrong_cardinality_rejected(self, loaded):
        persons, professions = loaded
        templates = load_templates(language=Language.EN)
        with pytest.raises(CorpusShapeError):
            expand_templates(templates[:4], persons, professions, Language.EN)
        with pytest.raises(CorpusShapeError):
            expand_templates(templates, persons[:-1], professions, Language.EN)

    def test_missing_german_form_rejected(self, loaded):
        from dataclasses import replace

        from mlmbias.errors import MissingGermanForm

        persons, professions = loaded
        templates = load_templates(language=Language.DE)
        broken = [replace(professions[0], de_feminine="")] + list(professions[1:])
        with pytest.raises(MissingGermanForm):
            expand_templates(templates, persons, broken, Language.DE)


class TestMasking:
    def test_word_level_attribute_masking(self):
        instances = build_corpus(Language.EN)
        inst = next(i for i in instances
                    if i.profession_label == "medical records technician"
                    and i.template_id == 1 and i.person_surface == "my son")
        assert inst.sentence == "my son is a medical records technician."
        assert inst.variant_attribute_masked == "my son is a [MASK] [MASK] [MASK]."
        assert inst.variant_target_masked == "my [MASK] is a medical records technician."
        assert inst.variant_both_masked == "my [MASK] is a [MASK] [MASK] [MASK]."

    def test_single_word_profession_single_mask(self):
        instances = build_corpus(Language.EN)
        inst = next(i for i in instances
                    if i.profession_label == "secretary" and i.template_id == 1
                    and i.person_surface == "she")
        assert inst.variant_attribute_masked.count("[MASK]") == 1

    def test_determiners_never_masked(self):
        for inst in build_corpus(Language.EN):
            if inst.person_surface.startswith("my "):
                assert inst.variant_target_masked.startswith("my [MASK]")
            if inst.template_id == 4:
                assert ", the [MASK]" in inst.variant_attribute_masked

    def test_subword_masking_one_mask_per_subtoken(self):
        scorer = SplittingTokenizer({"technician": ["techni", "cian"],
                                     "firefighter": ["fire", "fight", "er"]})
        instances = [i for i in build_corpus(Language.EN, scorer=scorer)
                     if i.template_id == 1 and i.person_surface == "she"]
        tech = next(i for i in instances
                    if i.profession_label == "medical records technician")
        # medical (1) + records (1) + technician (2 sub-tokens) = 4 masks
        assert tech.variant_attribute_masked.count("[MASK]") == 4
        fire = next(i for i in instances if i.profession_label == "firefighter")
        assert fire.variant_attribute_masked.count("[MASK]") == 3

    def test_multi_subtoken_target_rejected(self):
        scorer = SplittingTokenizer({"she": ["sh", "e"]})
        instances = expand_templates(
            load_templates(language=Language.EN), load_person_words(),
            load_professions(), Language.EN,
        )
        inst = next(i for i in instances if i.person_surface == "she")
        with pytest.raises(TargetNotSingleToken):
            apply_masking(inst, scorer)

    def test_invalid_spans_rejected(self):
        from dataclasses import replace

        from mlmbias.errors import SlotNotFound

        inst = build_corpus(Language.EN)[0]
        broken = replace(inst, profession_span=(5, 3))
        with pytest.raises(SlotNotFound):
            apply_masking(broken)

    def test_target_roundtrip_restores_sentence(self):
        for inst in build_corpus(Language.EN)[::97]:
            restored = inst.variant_target_masked.replace(
                inst.mask_token, inst.head_word, 1)
            assert restored == inst.sentence

    def test_german_target_roundtrip(self):
        for inst in build_corpus(Language.DE)[::97]:
            restored = inst.variant_target_masked.replace(
                inst.mask_token, inst.head_word, 1)
            assert restored == inst.sentence


class TestCorpusIO:
    def test_roundtrip(self, tmp_path):
        instances = build_corpus(Language.EN)
        path = tmp_path / "corpus.tsv"
        write_corpus(path, instances)
        assert read_corpus(path) == instances

    def test_byte_identical_rebuild(self, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_corpus(a, build_corpus(Language.DE))
        write_corpus(b, build_corpus(Language.DE))
        assert a.read_bytes() == b.read_bytes()
