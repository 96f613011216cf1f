"""Scorer-conformance checks that any masked-LM backend must pass, plus small
fixture scorers used in tests and the self-test command."""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from .scoring import MlmScorer, Tokenization

DEFAULT_PROBE_TEXTS = [
    "she is a nurse.",
    "my brother works as a carpenter.",
    "[MASK] wants to become a photographer.",
]


def check_scorer(scorer: MlmScorer, texts: Sequence[str] | None = None,
                 atol: float = 1e-6) -> list[str]:
    """Run the conformance checks; returns a list of failure descriptions.

    Checks: special-token sanity, deterministic tokenization, vocabulary
    round-trip, probability vectors that are non-negative, sum to one within
    ``atol`` and are bit-identical across repeated queries.
    """
    texts = list(texts) if texts is not None else list(DEFAULT_PROBE_TEXTS)
    failures: list[str] = []

    if scorer.mask_token == scorer.pad_token:
        failures.append("mask and pad tokens must differ")
    for name, token, token_id in (("mask", scorer.mask_token, scorer.mask_token_id),
                                  ("pad", scorer.pad_token, scorer.pad_token_id)):
        looked_up = scorer.vocab_index(token)
        if looked_up != token_id:
            failures.append(
                f"{name} token {token!r}: vocab_index gives {looked_up}, "
                f"declared id is {token_id}"
            )
    if scorer.vocab_size <= 0:
        failures.append(f"vocab_size must be positive, got {scorer.vocab_size}")

    for text in texts:
        first = scorer.tokenize(text)
        second = scorer.tokenize(text)
        if first.ids != second.ids or first.tokens != second.tokens:
            failures.append(f"tokenize({text!r}) is not deterministic")
            continue
        if not (len(first.ids) == len(first.tokens) == len(first.word_ids)):
            failures.append(f"tokenize({text!r}): ids/tokens/word_ids lengths differ")
        for token, token_id in zip(first.tokens, first.ids):
            back = scorer.vocab_index(token)
            if back is not None and back != token_id:
                failures.append(
                    f"vocab round-trip broken for {token!r}: {back} != {token_id}"
                )
                break
        if not first.ids:
            continue
        position = len(first.ids) // 2
        dist = scorer.distribution(first.ids, position)
        again = scorer.distribution(first.ids, position)
        if dist.shape != (scorer.vocab_size,):
            failures.append(
                f"distribution shape {dist.shape} != vocab size {scorer.vocab_size}"
            )
            continue
        if np.any(dist < 0):
            failures.append(f"negative probabilities for {text!r}")
        total = float(dist.sum())
        if abs(total - 1.0) > atol:
            failures.append(f"distribution for {text!r} sums to {total}, not 1")
        if not np.array_equal(dist, again):
            failures.append(f"distribution for {text!r} is not deterministic")
    return failures


def assert_scorer_conformance(scorer: MlmScorer,
                              texts: Sequence[str] | None = None,
                              atol: float = 1e-6) -> None:
    failures = check_scorer(scorer, texts, atol)
    if failures:
        raise AssertionError("scorer conformance failed:\n- " + "\n- ".join(failures))


_WORD_RE = re.compile(r"\[MASK\]|\[PAD\]|\[UNK\]|\w+|[^\w\s]", re.UNICODE)


class SplittingTokenizer(MlmScorer):
    """Fixture scorer whose tokenizer deterministically splits designated
    words into sub-tokens (continuations carry a ## prefix), for exercising
    multi-sub-token masking. Distributions are uniform."""

    def __init__(self, split_map: dict[str, list[str]], lowercase: bool = True):
        self.split_map = {k.lower(): v for k, v in split_map.items()}
        self.lowercase = lowercase
        self.mask_token = "[MASK]"
        self.pad_token = "[PAD]"
        vocab: list[str] = ["[PAD]", "[UNK]", "[MASK]"]
        self._index = {t: i for i, t in enumerate(vocab)}
        self._vocab = vocab
        self.pad_token_id = 0
        self.mask_token_id = 2

    def _intern(self, token: str) -> int:
        if token not in self._index:
            self._index[token] = len(self._vocab)
            self._vocab.append(token)
        return self._index[token]

    @property
    def vocab_size(self) -> int:  # type: ignore[override]
        return len(self._vocab)

    def tokenize(self, text: str) -> Tokenization:
        words = _WORD_RE.findall(text)
        if self.lowercase:
            words = [w if w in ("[MASK]", "[PAD]", "[UNK]") else w.lower()
                     for w in words]
        ids, tokens, word_ids = [], [], []
        for wi, word in enumerate(words):
            pieces = self.split_map.get(word, [word])
            for pi, piece in enumerate(pieces):
                surface = piece if pi == 0 else f"##{piece}"
                tokens.append(surface)
                ids.append(self._intern(surface))
                word_ids.append(wi)
        return Tokenization(ids=ids, tokens=tokens, word_ids=word_ids)

    def vocab_index(self, token: str) -> int | None:
        if self.lowercase and token not in ("[MASK]", "[PAD]", "[UNK]"):
            token = token.lower()
        return self._index.get(token)

    def distribution(self, ids, position, attention_mask=None) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


class UniformScorer(MlmScorer):
    """Whole-word scorer with a fixed vocabulary and uniform distributions."""

    def __init__(self, vocab: Sequence[str], lowercase: bool = True):
        base = ["[PAD]", "[UNK]", "[MASK]"]
        self._vocab = base + [w for w in vocab if w not in base]
        self._index = {t: i for i, t in enumerate(self._vocab)}
        self.lowercase = lowercase
        self.mask_token = "[MASK]"
        self.pad_token = "[PAD]"
        self.mask_token_id = 2
        self.pad_token_id = 0

    @property
    def vocab_size(self) -> int:  # type: ignore[override]
        return len(self._vocab)

    def tokenize(self, text: str) -> Tokenization:
        words = _WORD_RE.findall(text)
        if self.lowercase:
            words = [w if w in ("[MASK]", "[PAD]", "[UNK]") else w.lower()
                     for w in words]
        ids = [self._index.get(w, 1) for w in words]
        return Tokenization(ids=ids, tokens=words, word_ids=list(range(len(words))))

    def vocab_index(self, token: str) -> int | None:
        if self.lowercase and token not in ("[MASK]", "[PAD]", "[UNK]"):
            token = token.lower()
        return self._index.get(token)

    def distribution(self, ids, position, attention_mask=None) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)
