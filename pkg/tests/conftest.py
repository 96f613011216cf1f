import numpy as np
import pytest

from mlmbias import corpus as corpus_mod
from mlmbias import scoring
from mlmbias import toy as toy_mod


@pytest.fixture(scope="session")
def planted_fixture():
    return toy_mod.planted_bias_fixture(1.0, seed=42)


@pytest.fixture(scope="session")
def trained_toy(planted_fixture):
    """One strongly trained toy model shared across the suite."""
    return toy_mod.train(planted_fixture.train_sentences,
                         toy_mod.ToyMlmConfig(seed=42))


@pytest.fixture(scope="session")
def small_toy():
    """Quick-to-train model on the minimal gender-planted corpus."""
    sentences = ["she is a nurse."] * 40 + ["he is a builder."] * 40
    config = toy_mod.ToyMlmConfig(dim=8, hidden=16, epochs=60,
                                  learning_rate=0.02, seed=42)
    return toy_mod.train(sentences, config)


@pytest.fixture(scope="session")
def masked_fixture_instances(planted_fixture, trained_toy):
    return [corpus_mod.apply_masking(inst, trained_toy)
            for inst in planted_fixture.instances]


def mean_scores_by_cell(records):
    by = {}
    for rec in records:
        by.setdefault((rec.gender, rec.profession_label), []).append(rec.score)
    return {k: float(np.mean(v)) for k, v in by.items()}


@pytest.fixture(scope="session")
def pre_records(trained_toy, masked_fixture_instances):
    return scoring.score_corpus(trained_toy, masked_fixture_instances,
                                scoring.ModelState.PRE)
