"""Measure and mitigate gender-association bias in masked language models.

The pipeline builds a template evaluation corpus (BEC-Pro), scores it with a
masked-LM backend via masked-token log-probability ratios, aggregates the
scores into nonparametric group statistics, and mitigates measured bias by
fine-tuning on a counterfactually gender-substituted corpus.
"""

from .corpus import (
    Gender,
    Language,
    PersonWord,
    ProfessionEntry,
    ProfessionGroup,
    SentenceInstance,
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
from .scoring import (
    AssociationRecord,
    EncodedBatch,
    MlmScorer,
    ModelState,
    Tokenization,
    association,
    encode_batch,
    fixed_length,
    read_records,
    score_corpus,
    target_probability,
    write_records,
)
from .stats import (
    AggregateResult,
    GroupStats,
    HypothesisVerdict,
    PairedSample,
    WilcoxonResult,
    aggregate,
    effect_size_r,
    hypothesis_check,
    wilcoxon_signed_rank,
)
from .toy import PlantedBiasFixture, ToyMlm, ToyMlmConfig, planted_bias_fixture, train
from .finetune import (
    FinetuneConfig,
    FinetuneResult,
    MlmMaskingPolicy,
    finetune,
    linear_schedule,
    mask_inputs,
)
from .cds import (
    BalanceAudit,
    GapDocument,
    GenderPairLexicon,
    NamePairList,
    audit_balance,
    parse_gap,
    split_sentences,
    substitute,
    substitute_corpus,
)
from .bridge_client import BridgeScorer
from .conformance import assert_scorer_conformance, check_scorer

__version__ = "0.1.0"
