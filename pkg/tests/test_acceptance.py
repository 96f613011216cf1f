"""Acceptance suite: one test per release criterion, each printing a PASS
line with the measured numbers (run with ``pytest tests/test_acceptance.py -v -s``).
"""

import json
import math
import random
import time

import numpy as np
import pytest
from click.testing import CliRunner

from mlmbias import cds as cds_mod
from mlmbias import corpus as corpus_mod
from mlmbias import scoring, stats
from mlmbias import toy as toy_mod
from mlmbias.cli import main as cli_main
from mlmbias.conformance import SplittingTokenizer
from mlmbias.corpus import Gender, Language, apply_masking, build_corpus
from mlmbias.finetune import IGNORE_LABEL, FinetuneConfig, MlmMaskingPolicy, finetune, mask_inputs
from mlmbias.scoring import ModelState, association, score_corpus

from test_stats import enumeration_oracle


def test_corpus_combinatorics():
    """5,400 instances per language, 1,800 per group, 900 per cell, four
    variants each, built in under five seconds per language."""
    for language in (Language.EN, Language.DE):
        start = time.monotonic()
        instances = build_corpus(language)
        elapsed = time.monotonic() - start
        assert elapsed < 5.0, f"{language}: took {elapsed:.2f}s"
        assert len(instances) == 5400
        per_group, per_cell = {}, {}
        for inst in instances:
            per_group[inst.group] = per_group.get(inst.group, 0) + 1
            key = (inst.group, inst.gender)
            per_cell[key] = per_cell.get(key, 0) + 1
            assert inst.sentence
            assert inst.variant_target_masked
            assert inst.variant_attribute_masked
            assert inst.variant_both_masked
        assert all(n == 1800 for n in per_group.values())
        assert len(per_cell) == 6 and all(n == 900 for n in per_cell.values())
        print(f"[PASS] corpus combinatorics ({language.value}): 5400 instances, "
              f"900 per cell, 4 variants, {elapsed:.2f}s")


def test_masking_fidelity():
    """On a 50-sentence fixture with multi-sub-token professions, the
    attribute-masked variant has exactly one mask per profession sub-token and
    un-masking restores the original sentence exactly."""
    splitter = SplittingTokenizer({
        "technician": ["techni", "cian"],
        "firefighter": ["fire", "fighter"],
        "pathologist": ["patho", "log", "ist"],
        "receptionist": ["recept", "ionist"],
        "housekeeper": ["house", "keeper"],
    })
    instances = [i for i in build_corpus(Language.EN, scorer=splitter)
                 if i.person_surface in ("she", "my son")][:50]
    assert len(instances) == 50
    for inst in instances:
        n_sub = len(splitter.tokenize(
            inst.sentence[inst.profession_span[0]:inst.profession_span[1]]).ids)
        a_masked = inst.variant_attribute_masked
        assert a_masked.count(inst.mask_token) == n_sub, inst.instance_id
        # round trips: rebuild both masked variants into the original
        ps, pe = inst.profession_span
        mask_run = " ".join([inst.mask_token] * n_sub)
        restored_a = a_masked[:ps] + inst.sentence[ps:pe] + a_masked[ps + len(mask_run):]
        assert restored_a == inst.sentence, inst.instance_id
        restored_t = inst.variant_target_masked.replace(
            inst.mask_token, inst.head_word, 1)
        assert restored_t == inst.sentence, inst.instance_id
    print("[PASS] masking fidelity: 50 instances, one mask per sub-token, "
          "exact round trips")


def test_association_score_algebra():
    """10,000 randomized probability pairs: antisymmetry and scale invariance
    hold to 1e-12; the score is zero exactly when the inputs are equal."""
    rng = random.Random(42)
    checked = 0
    for _ in range(10_000):
        a = 10 ** rng.uniform(-9, 0)
        b = 10 ** rng.uniform(-9, 0)
        c = 10 ** rng.uniform(-2, 0)
        assert association(a, b) == -association(b, a)
        assert abs(association(c * a, c * b) - association(a, b)) <= 1e-12
        assert association(a, a) == 0.0
        if a != b:
            assert association(a, b) != 0.0
        checked += 1
    assert checked == 10_000
    print("[PASS] association algebra: 10000 pairs, antisymmetry + scale "
          "invariance within 1e-12, zero iff equal")


def test_wilcoxon_oracle_equivalence():
    """200 random tie-free samples (n <= 12): the approximate estimator is
    within 0.02 of exact enumeration. All fixture samples with n <= 10: the
    exact path matches an independent literal-enumeration oracle to 1e-9.
    Total runtime under 60 seconds."""
    start = time.monotonic()
    rng = random.Random(42)
    worst = 0.0
    for _ in range(200):
        n = rng.randint(1, 12)
        diffs = [rng.gauss(0.3, 1.0) for _ in range(n)]
        approx = stats.wilcoxon_signed_rank(diffs, mode="approximate")
        p_two, _, _ = enumeration_oracle(diffs)
        worst = max(worst, abs(approx.p - p_two))
        assert abs(approx.p - p_two) < 0.02, (n, diffs)

    fixture_set = []
    for n in range(1, 11):
        fixture_set.append([rng.uniform(-1, 1) for _ in range(n)])
        fixture_set.append([rng.choice([-2.0, -1.0, 1.0, 2.0]) for _ in range(n)])
        fixture_set.append([float(i + 1) for i in range(n)])
    for diffs in fixture_set:
        exact = stats.wilcoxon_signed_rank(diffs, mode="exact")
        p_two, p_greater, p_less = enumeration_oracle(diffs)
        assert abs(exact.p - p_two) < 1e-9
        assert abs(exact.p_greater - p_greater) < 1e-9
        assert abs(exact.p_less - p_less) < 1e-9
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    print(f"[PASS] signed-rank oracle equivalence: worst approx gap {worst:.4f} "
          f"< 0.02, exact matches enumeration to 1e-9, {elapsed:.1f}s")


def test_effect_size_identity():
    """r = Z / sqrt(N) on analytic triples, exact to 1e-12."""
    triples = [(0.0, 10, 0.0), (3.0, 9, 1.0), (-6.0, 400, -0.3),
               (1.0, 4, 0.5), (-2.5, 25, -0.5), (12.0, 900, 0.4),
               (7.5, 2500, 0.15)]
    for z, n, expected in triples:
        assert abs(stats.effect_size_r(z, n) - expected) <= 1e-12
    print("[PASS] effect size: r = Z/sqrt(N) exact to 1e-12 on analytic triples")


def test_cds_involution_and_balance():
    """Double flip is the identity on a discriminator-free lexicon; a seeded
    half-probability run over 1,000 documents lands within [0.9, 1.1]
    side-imbalance."""
    fixture_lexicon = cds_mod.GenderPairLexicon([
        ("she", "he", None), ("woman", "man", None), ("sister", "brother", None),
        ("mother", "father", None), ("aunt", "uncle", None),
    ])
    names = cds_mod.NamePairList([("mary", "james"), ("emma", "jacob")])
    texts = [
        "She met her... no, the woman met Mary's brother!",
        "My MOTHER and my aunt saw James. The sister stayed.",
        "Nothing gendered here; numbers 123 and punctuation?!",
    ]
    for text in texts:
        once = cds_mod.flip_text(text, fixture_lexicon, names)
        twice = cds_mod.flip_text(once, fixture_lexicon, names)
        assert twice == text

    docs = [cds_mod.GapDocument(
        f"d{i:04d}",
        "She said her mother met her aunt and her sister. "
        "The woman thanked Mary.", {})
        for i in range(1000)]
    flipped = cds_mod.substitute_corpus(
        docs, cds_mod.GenderPairLexicon.load(), cds_mod.NamePairList.load(),
        swap_probability=0.5, seed=42)
    audit = cds_mod.audit_balance(flipped, cds_mod.GenderPairLexicon.load())
    assert 0.9 <= audit.ratio <= 1.1, audit.ratio
    print(f"[PASS] counterfactual substitution: double-flip identity exact, "
          f"seeded balance ratio {audit.ratio:.3f} in [0.9, 1.1]")


def test_mlm_masking_proportions():
    """Over 100k eligible tokens at seed 42: 15% +- 1% selected; 80/10/10
    +- 2% within the selected set."""
    policy = MlmMaskingPolicy(seed=42)
    rng = np.random.default_rng(42)
    ids = np.full(1000, 7, dtype=np.int64)
    attn = np.ones(1000)
    total = selected = masked = randomized = kept = 0
    for _ in range(100):
        out, labels = mask_inputs(ids, attn, policy, rng, vocab_size=1000,
                                  mask_token_id=2, special_ids={0, 2})
        sel = labels != IGNORE_LABEL
        total += ids.size
        selected += int(sel.sum())
        masked += int((sel & (out == 2)).sum())
        kept += int((sel & (out == 7)).sum())
        randomized += int((sel & (out != 2) & (out != 7)).sum())
    share = selected / total
    assert abs(share - 0.15) <= 0.01
    assert abs(masked / selected - 0.80) <= 0.02
    assert abs(randomized / selected - 0.10) <= 0.02
    assert abs(kept / selected - 0.10) <= 0.02
    print(f"[PASS] input masking proportions: selected {share:.4f} (15% +- 1%), "
          f"categories {masked/selected:.3f}/{randomized/selected:.3f}/"
          f"{kept/selected:.3f} (80/10/10 +- 2%)")


def test_end_to_end_mitigation():
    """Planted-bias fixture (strength 1.0) scored with the toy model shows the
    pro-typical/anti-typical sign pattern; after counterfactual substitution
    and fine-tuning (3 epochs, batch 1, lr 5e-5, seed 42) the mean gender gap
    on planted professions shrinks by at least 30%. Under five minutes."""
    start = time.monotonic()
    fixture = toy_mod.planted_bias_fixture(1.0, seed=42)
    model = toy_mod.train(fixture.train_sentences, toy_mod.ToyMlmConfig(seed=42))
    masked = [apply_masking(inst, model) for inst in fixture.instances]
    records_pre = score_corpus(model, masked, ModelState.PRE)

    def cell_means(records):
        by = {}
        for rec in records:
            by.setdefault((rec.gender, rec.profession_label), []).append(rec.score)
        return {k: float(np.mean(v)) for k, v in by.items()}

    means_pre = cell_means(records_pre)
    planted = fixture.planted_professions()
    pro_typical = [means_pre[(Gender.FEMALE, p)] for p in ("nurse", "secretary")]
    pro_typical += [means_pre[(Gender.MALE, p)] for p in ("carpenter", "plumber")]
    anti_typical = [means_pre[(Gender.MALE, p)] for p in ("nurse", "secretary")]
    anti_typical += [means_pre[(Gender.FEMALE, p)] for p in ("carpenter", "plumber")]
    assert all(v > 0 for v in pro_typical), pro_typical
    assert all(v < 0 for v in anti_typical), anti_typical

    gap_pre = float(np.mean([abs(means_pre[(Gender.FEMALE, p)]
                                 - means_pre[(Gender.MALE, p)])
                             for p in planted]))

    documents = fixture.gap_documents(5000, seed=42)
    flipped = cds_mod.substitute_corpus(
        documents, cds_mod.GenderPairLexicon.load(), cds_mod.NamePairList.load(),
        swap_probability=0.5, seed=42)
    sentences = [s for doc in flipped
                 for s in cds_mod.split_sentences(doc.text).sentences]
    config = FinetuneConfig(epochs=3, batch_size=1, learning_rate=5e-5, seed=42)
    result = finetune(model, sentences, config)
    assert len(result.log) == 3 * len(sentences)

    records_post = score_corpus(result.model, masked, ModelState.POST)
    means_post = cell_means(records_post)
    gap_post = float(np.mean([abs(means_post[(Gender.FEMALE, p)]
                                  - means_post[(Gender.MALE, p)])
                              for p in planted]))
    shrink = 1.0 - gap_post / gap_pre

    # the hypothesis machinery sees the planted pro-typical female cell pass
    aggregated = stats.aggregate(records_pre, records_post)
    verdicts = stats.hypothesis_check(aggregated)
    h1_female = next(
        v for v in verdicts if v.hypothesis == "H1"
        and v.group is corpus_mod.ProfessionGroup.FEMALE_DOMINATED)
    assert h1_female.passed, h1_female

    elapsed = time.monotonic() - start
    assert shrink >= 0.30, f"gap {gap_pre:.3f} -> {gap_post:.3f} ({shrink:.1%})"
    assert elapsed < 300.0, f"{elapsed:.0f}s"
    print(f"[PASS] end-to-end mitigation: signs correct, H1 pro-typical female "
          f"verdict passes, gap {gap_pre:.3f} -> {gap_post:.3f} "
          f"(shrink {shrink:.1%} >= 30%), {elapsed:.0f}s")


@pytest.fixture()
def cli_runner():
    return CliRunner()


def test_pipeline_determinism(cli_runner, tmp_path):
    """Two full pipeline runs with identical manifest keys produce
    byte-identical record files and checkpoints."""
    def run(root):
        root.mkdir()
        ckpt = root / "toy.json"
        result = cli_runner.invoke(cli_main, [
            "toy-train", "--planted", "1.0", "--out", str(ckpt),
            "--epochs", "8", "--dim", "12", "--hidden", "24",
        ])
        assert result.exit_code == 0, result.output
        fixture = toy_mod.planted_bias_fixture(1.0, seed=42)
        scorer = toy_mod.ToyMlm.load(ckpt)
        corpus_file = root / "corpus.tsv"
        corpus_mod.write_corpus(
            corpus_file,
            [apply_masking(i, scorer) for i in fixture.instances])
        gap_file = root / "gap.tsv"
        cds_mod.write_gap(gap_file, fixture.gap_documents(60, seed=42))
        for args in (
            ["score", "--corpus", str(corpus_file), "--backend", f"toy:{ckpt}",
             "--state", "pre", "--out", str(root / "pre")],
            ["mitigate", "--gap", str(gap_file), "--backend", f"toy:{ckpt}",
             "--out", str(root / "mit"), "--epochs", "1"],
            ["score", "--corpus", str(corpus_file),
             "--backend", f"toy:{root / 'mit' / 'post_checkpoint.json'}",
             "--state", "post", "--out", str(root / "post")],
            ["report", "--pre", str(root / "pre" / "records_pre.tsv"),
             "--post", str(root / "post" / "records_post.tsv"),
             "--out", str(root / "report")],
        ):
            result = cli_runner.invoke(cli_main, args)
            assert result.exit_code == 0, result.output
        return root

    run_a = run(tmp_path / "a")
    run_b = run(tmp_path / "b")
    compared = []
    for rel in ["toy.json", "corpus.tsv", "pre/records_pre.tsv",
                "mit/post_checkpoint.json", "mit/cds_corpus.tsv",
                "mit/training_log.tsv", "post/records_post.tsv",
                "report/group_stats.tsv", "report/hypotheses.tsv"]:
        a, b = run_a / rel, run_b / rel
        assert a.read_bytes() == b.read_bytes(), rel
        compared.append(rel)
    for rel in ["pre", "mit", "post", "report"]:
        key_a = json.loads((run_a / rel / "manifest.json").read_text())["key"]
        key_b = json.loads((run_b / rel / "manifest.json").read_text())["key"]
        key_a["inputs"] = {k.replace(str(run_a), ""): v
                           for k, v in key_a["inputs"].items()}
        key_b["inputs"] = {k.replace(str(run_b), ""): v
                           for k, v in key_b["inputs"].items()}
        key_a["config"] = {k: (str(v).replace(str(run_a), "") if v else v)
                           for k, v in key_a["config"].items()}
        key_b["config"] = {k: (str(v).replace(str(run_b), "") if v else v)
                           for k, v in key_b["config"].items()}
        assert key_a == key_b, rel
    print(f"[PASS] determinism: {len(compared)} pipeline artifacts "
          "byte-identical across reruns, manifest keys equal")
