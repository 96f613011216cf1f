"""Scorer contract, batch encoding and the log-ratio association score.

The association of a gendered target with a profession attribute is
``ln(p_target / p_prior)`` where ``p_target`` is the probability the model
assigns to the target word at its masked position with the attribute visible,
and ``p_prior`` is the same quantity with the attribute masked as well.
"""

from __future__ import annotations

import csv
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Gender, Language, ProfessionGroup, SentenceInstance
from .errors import (
    EmptyBatch,
    NonPositiveProbability,
    PositionNotMasked,
    ScoringError,
    TokenizationFailure,
    TokenNotInVocabulary,
)

# Probabilities are clamped at this floor before taking logarithms so that
# softmax underflow on large vocabularies can never produce -inf scores.
PROBABILITY_FLOOR = 1e-12


@dataclass(frozen=True)
class Tokenization:
    """Sub-token ids with their surface forms and sub-token -> word alignment."""

    ids: list[int]
    tokens: list[str]
    word_ids: list[int]


class MlmScorer(ABC):
    """What a masked-LM backend must provide to be scoreable.

    Implementations must be deterministic for fixed inputs and model state,
    and ``distribution`` must return a proper probability vector (sums to
    one within 1e-6). ``mlmbias.conformance.check_scorer`` verifies this.
    """

    mask_token: str
    pad_token: str
    mask_token_id: int
    pad_token_id: int
    vocab_size: int

    @abstractmethod
    def tokenize(self, text: str) -> Tokenization: ...

    @abstractmethod
    def vocab_index(self, token: str) -> int | None: ...

    @abstractmethod
    def distribution(self, ids: Sequence[int], position: int,
                     attention_mask: Sequence[int] | None = None) -> np.ndarray:
        """Probability vector over the vocabulary at ``position``."""

    def token_probability(self, ids: Sequence[int], position: int, token_index: int,
                          attention_mask: Sequence[int] | None = None) -> float:
        return float(self.distribution(ids, position, attention_mask)[token_index])

    def token_probabilities(self, ids: np.ndarray, attention_mask: np.ndarray,
                            positions: Sequence[int],
                            token_indices: Sequence[int]) -> np.ndarray:
        """Batched single-index probabilities; rows are padded sequences."""
        out = np.empty(len(positions), dtype=np.float64)
        for i, (pos, tok) in enumerate(zip(positions, token_indices)):
            out[i] = self.token_probability(ids[i], pos, tok, attention_mask[i])
        return out


class ModelState(str, Enum):
    PRE = "pre"
    POST = "post"


@dataclass(frozen=True)
class EncodedBatch:
    ids: np.ndarray              # (batch, fixed_length) int64
    attention_mask: np.ndarray   # same shape, 1 at non-pad positions
    mask_positions: list[list[int]]
    lengths: list[int]


def fixed_length(sequences: Sequence[Sequence[int]]) -> int:
    """Smallest power of two >= the longest sequence in the batch."""
    if not sequences:
        raise EmptyBatch("cannot size an empty batch")
    longest = max(len(s) for s in sequences)
    if longest <= 1:
        return 1
    return 1 << (longest - 1).bit_length()


def encode_batch(sentences: Sequence[str], scorer: MlmScorer) -> EncodedBatch:
    """Tokenize and pad to the batch's fixed length, building attention masks."""
    if not sentences:
        raise EmptyBatch("no sentences to encode")
    try:
        tokenized = [scorer.tokenize(s) for s in sentences]
    except Exception as e:  # noqa: BLE001 - scorer failures become TokenizationFailure
        raise TokenizationFailure(str(e)) from e
    seqs = [t.ids for t in tokenized]
    length = fixed_length(seqs)
    ids = np.full((len(seqs), length), scorer.pad_token_id, dtype=np.int64)
    attention = np.zeros((len(seqs), length), dtype=np.int64)
    mask_positions = []
    for i, seq in enumerate(seqs):
        ids[i, : len(seq)] = seq
        attention[i, : len(seq)] = 1
        mask_positions.append([j for j, t in enumerate(seq) if t == scorer.mask_token_id])
    return EncodedBatch(ids, attention, mask_positions, [len(s) for s in seqs])


def clamp_probability(p: float) -> tuple[float, bool]:
    """Apply the underflow floor; returns (value, was_clamped)."""
    if p < PROBABILITY_FLOOR:
        return PROBABILITY_FLOOR, True
    return p, False


def target_probability(scorer: MlmScorer, masked_sentence: str, target_token: str,
                       position: int | None = None) -> tuple[float, bool]:
    """Probability of ``target_token`` at a masked position of the sentence.

    ``position`` defaults to the first mask sub-token. Returns the clamped
    probability and whether clamping fired.
    """
    tok = scorer.tokenize(masked_sentence)
    if position is None:
        try:
            position = tok.ids.index(scorer.mask_token_id)
        except ValueError:
            raise PositionNotMasked(f"no {scorer.mask_token} in {masked_sentence!r}") from None
    elif not 0 <= position < len(tok.ids) or tok.ids[position] != scorer.mask_token_id:
        raise PositionNotMasked(f"position {position} of {masked_sentence!r} is not masked")
    index = scorer.vocab_index(target_token)
    if index is None:
        raise TokenNotInVocabulary(f"{target_token!r} not in scorer vocabulary")
    return clamp_probability(scorer.token_probability(tok.ids, position, index))


def association(p_target: float, p_prior: float) -> float:
    """ln(p_target) - ln(p_prior); both probabilities must be positive."""
    if p_target <= 0 or p_prior <= 0:
        raise NonPositiveProbability(f"p_target={p_target}, p_prior={p_prior}")
    return math.log(p_target) - math.log(p_prior)


@dataclass(frozen=True)
class AssociationRecord:
    instance_id: str
    template_id: int
    person_surface: str
    gender: Gender
    profession_label: str
    group: ProfessionGroup
    language: Language
    p_target: float
    p_prior: float
    score: float
    model_state: ModelState
    clamped: bool = False


def score_corpus(
    scorer: MlmScorer,
    instances: Sequence[SentenceInstance],
    model_state: ModelState,
    batch_size: int = 64,
) -> list[AssociationRecord]:
    """Score every instance: one association record per instance.

    ``p_target`` comes from the target-masked variant and ``p_prior`` from the
    both-masked variant, both read at the target's mask position (the first
    mask sub-token, since the person phrase precedes the profession in every
    template). Sequences are padded per batch to the fixed power-of-two
    length. Scorer errors are re-raised annotated with the instance id.
    """
    for inst in instances:
        if not inst.is_masked:
            raise ScoringError(f"{inst.instance_id}: masking variants not filled")

    records: list[AssociationRecord] = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        # Interleave target-masked and both-masked variants in one batch so
        # the pair shares the padding length.
        sentences: list[str] = []
        for inst in chunk:
            sentences.append(inst.variant_target_masked)  # type: ignore[arg-type]
            sentences.append(inst.variant_both_masked)    # type: ignore[arg-type]
        current = None
        try:
            batch = encode_batch(sentences, scorer)
            positions = []
            token_indices = []
            for i, inst in enumerate(chunk):
                current = inst
                for row in (2 * i, 2 * i + 1):
                    if not batch.mask_positions[row]:
                        raise PositionNotMasked(f"variant has no {scorer.mask_token}")
                    positions.append(batch.mask_positions[row][0])
                index = scorer.vocab_index(inst.head_word)
                if index is None:
                    raise TokenNotInVocabulary(f"target {inst.head_word!r} not in vocabulary")
                token_indices.extend([index, index])
            current = None
            probs = scorer.token_probabilities(
                batch.ids, batch.attention_mask, positions, token_indices
            )
        except Exception as e:  # noqa: BLE001 - annotate and propagate
            where = current.instance_id if current is not None else (
                f"batch of {chunk[0].instance_id}..{chunk[-1].instance_id}"
            )
            raise ScoringError(f"{where}: {e}") from e

        for i, inst in enumerate(chunk):
            p_t, clamped_t = clamp_probability(float(probs[2 * i]))
            p_p, clamped_p = clamp_probability(float(probs[2 * i + 1]))
            records.append(AssociationRecord(
                instance_id=inst.instance_id,
                template_id=inst.template_id,
                person_surface=inst.person_surface,
                gender=inst.gender,
                profession_label=inst.profession_label,
                group=inst.group,
                language=inst.language,
                p_target=p_t,
                p_prior=p_p,
                score=association(p_t, p_p),
                model_state=model_state,
                clamped=clamped_t or clamped_p,
            ))
    return records


_RECORD_COLUMNS = [
    "instance_id", "template_id", "person", "gender", "profession", "group",
    "language", "p_target", "p_prior", "score", "model_state", "clamped",
]


def write_records(path: str | Path, records: Iterable[AssociationRecord]) -> None:
    """Write records as TSV (default) or JSON lines when the path ends in .jsonl."""
    path = Path(path)
    rows = [{
        "instance_id": r.instance_id,
        "template_id": r.template_id,
        "person": r.person_surface,
        "gender": r.gender.value,
        "profession": r.profession_label,
        "group": r.group.value,
        "language": r.language.value,
        "p_target": repr(r.p_target),
        "p_prior": repr(r.p_prior),
        "score": repr(r.score),
        "model_state": r.model_state.value,
        "clamped": int(r.clamped),
    } for r in records]
    if path.suffix == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_RECORD_COLUMNS, delimiter="\t",
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_records(path: str | Path) -> list[AssociationRecord]:
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    else:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
    records = []
    for row in rows:
        records.append(AssociationRecord(
            instance_id=row["instance_id"],
            template_id=int(row["template_id"]),
            person_surface=row["person"],
            gender=Gender(row["gender"]),
            profession_label=row["profession"],
            group=ProfessionGroup(row["group"]),
            language=Language(row["language"]),
            p_target=float(row["p_target"]),
            p_prior=float(row["p_prior"]),
            score=float(row["score"]),
            model_state=ModelState(row["model_state"]),
            clamped=bool(int(row["clamped"])),
        ))
    return records
