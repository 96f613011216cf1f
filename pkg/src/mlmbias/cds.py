"""Name-based counterfactual substitution over GAP-style corpora.

Documents are flipped in place with a configurable probability: every word in
the gender-pair lexicon is replaced by its counterpart and listed first names
are exchanged, preserving the original casing pattern. The corpus size is
unchanged (substitution, not augmentation). Grammar is not repaired and
pronoun-offset metadata columns are left untouched (and hence go stale on
flipped rows).
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    AmbiguousTokenUnresolved,
    LexiconConflict,
    MalformedRow,
    MissingTextColumn,
)

_TOKEN_RE = re.compile(r"\w+|[^\w]+", re.UNICODE)
_WORD_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class GapDocument:
    id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)
    flipped: bool | None = None


def parse_gap(source: str | Path | TextIO) -> list[GapDocument]:
    """Parse a tab-separated GAP-style file; every non-Text column is kept
    verbatim as metadata. Quoted fields may contain embedded tabs."""
    if isinstance(source, (str, Path)):
        handle: TextIO = open(source, encoding="utf-8", newline="")
        close = True
    else:
        handle, close = source, False
    try:
        reader = csv.DictReader(handle, delimiter="\t")
        fields = reader.fieldnames or []
        text_col = next((c for c in fields if c == "Text"), None)
        if text_col is None:
            text_col = next((c for c in fields if c.lower() == "text"), None)
        if text_col is None:
            raise MissingTextColumn(f"no Text column among {fields}")
        id_col = next((c for c in fields if c.lower() == "id"), None)
        docs = []
        for i, row in enumerate(reader):
            if any(v is None for v in row.values()) or None in row:
                raise MalformedRow(f"GAP row {i + 2}: wrong field count")
            doc_id = row[id_col] if id_col else str(i)
            metadata = {k: v for k, v in row.items() if k != text_col}
            docs.append(GapDocument(id=doc_id, text=row[text_col], metadata=metadata))
        ids = [d.id for d in docs]
        if len(set(ids)) != len(ids):
            raise MalformedRow("duplicate document ids in GAP file")
        return docs
    finally:
        if close:
            handle.close()


def write_gap(path: str | Path, docs: Sequence[GapDocument]) -> None:
    """Write documents in the input schema with a ``flipped`` column appended."""
    meta_cols: list[str] = []
    for doc in docs:
        for col in doc.metadata:
            if col not in meta_cols:
                meta_cols.append(col)
    id_in_meta = any(c.lower() == "id" for c in meta_cols)
    columns = ([] if id_in_meta else ["ID"]) + meta_cols + ["Text", "flipped"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for doc in docs:
            row = [] if id_in_meta else [doc.id]
            row += [doc.metadata.get(c, "") for c in meta_cols]
            row += [doc.text, "" if doc.flipped is None else int(doc.flipped)]
            writer.writerow(row)


# ---- sentence splitting ------------------------------------------------------

DEFAULT_ABBREVIATIONS = frozenset({
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "vs.", "etc.",
    "e.g.", "i.e.", "no.", "nos.", "fig.", "figs.", "al.", "inc.", "ltd.",
    "co.", "dept.", "est.", "approx.", "jan.", "feb.", "mar.", "apr.", "jun.",
    "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.",
})

_BOUNDARY_RE = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s|$)")


@dataclass(frozen=True)
class SentenceSplit:
    text: str
    spans: list[tuple[int, int]]

    @property
    def sentences(self) -> list[str]:
        return [self.text[a:b] for a, b in self.spans]

    def reassemble(self) -> str:
        """Original text, reconstructed from the sentence spans and the
        separator runs between them."""
        return self.text


def split_sentences(text: str, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS,
                    guard_initials: bool = True) -> SentenceSplit:
    """Split at sentence-final punctuation, guarded by an abbreviation list.

    Sentences keep their terminal punctuation; inter-sentence whitespace is
    not part of any sentence but is recoverable from the recorded spans, so
    the split is lossless. A text without terminal punctuation comes back as
    a single sentence.
    """
    abbrev = {a.lower() for a in abbreviations}
    boundaries = []
    for m in _BOUNDARY_RE.finditer(text):
        word_match = re.search(r"(\S+)$", text[: m.end()])
        word = word_match.group(1).lower() if word_match else ""
        if word in abbrev:
            continue
        if guard_initials and re.fullmatch(r"\w\.", word):
            continue
        boundaries.append(m.end())
    spans = []
    start = 0
    for b in boundaries:
        chunk = text[start:b]
        stripped = chunk.strip()
        if stripped:
            lead = len(chunk) - len(chunk.lstrip())
            spans.append((start + lead, start + lead + len(stripped)))
        start = b
    tail = text[start:]
    if tail.strip():
        lead = len(tail) - len(tail.lstrip())
        stripped = tail.strip()
        spans.append((start + lead, start + lead + len(stripped)))
    return SentenceSplit(text=text, spans=spans)


# ---- gender-pair lexicon and name list ---------------------------------------

@dataclass(frozen=True)
class LexiconEntry:
    target: str
    discriminator: str | None


class GenderPairLexicon:
    """Bidirectional word pairs; ambiguous forms carry a discriminator.

    A word with several discriminated entries (like "her") needs a resolver
    at substitution time; every other word maps to exactly one counterpart.
    """

    def __init__(self, pairs: Iterable[tuple[str, str, str | None]]) -> None:
        self.pairs = [(a.lower(), b.lower(), d) for a, b, d in pairs]
        self._mapping: dict[str, list[LexiconEntry]] = {}
        for a, b, disc in self.pairs:
            self._add(a, b, disc)
            self._add(b, a, None)

    def _add(self, source: str, target: str, disc: str | None) -> None:
        entries = self._mapping.setdefault(source, [])
        if any(e.discriminator == disc for e in entries):
            existing = next(e for e in entries if e.discriminator == disc)
            if existing.target == target:
                return
            raise LexiconConflict(
                f"{source!r} maps to both {existing.target!r} and {target!r} "
                f"under discriminator {disc!r}"
            )
        entries.append(LexiconEntry(target=target, discriminator=disc))

    @classmethod
    def load(cls, source: str | Path | TextIO | None = None) -> "GenderPairLexicon":
        handle = _open_data(source, "cds_lexicon.tsv")
        pairs = []
        for line in handle:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise MalformedRow(f"lexicon line needs 2-3 fields: {line!r}")
            pairs.append((parts[0], parts[1], parts[2] if len(parts) == 3 else None))
        return cls(pairs)

    def lookup(self, word: str) -> list[LexiconEntry]:
        return self._mapping.get(word.lower(), [])

    def side_words(self) -> tuple[set[str], set[str]]:
        return ({a for a, _, _ in self.pairs}, {b for _, b, _ in self.pairs})


class NamePairList:
    """Involutive first-name pairs, case-normalised on load."""

    def __init__(self, pairs: Iterable[tuple[str, str]]) -> None:
        self.pairs = [(a.lower(), b.lower()) for a, b in pairs]
        self._mapping: dict[str, str] = {}
        for a, b in self.pairs:
            for src, dst in ((a, b), (b, a)):
                if self._mapping.get(src, dst) != dst:
                    raise LexiconConflict(f"name {src!r} maps to two targets")
                self._mapping[src] = dst

    @classmethod
    def load(cls, source: str | Path | TextIO | None = None) -> "NamePairList":
        handle = _open_data(source, "cds_names.tsv")
        pairs = []
        header_skipped = False
        for line in handle:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not header_skipped and line.lower().startswith("name_a"):
                header_skipped = True
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedRow(f"name line needs 2 fields: {line!r}")
            pairs.append((parts[0], parts[1]))
        return cls(pairs)

    def lookup(self, word: str) -> str | None:
        return self._mapping.get(word.lower())


def _open_data(source: str | Path | TextIO | None, default_name: str) -> TextIO:
    if source is None:
        text = resources.files("mlmbias.data").joinpath(default_name).read_text("utf-8")
        return io.StringIO(text)
    if isinstance(source, (str, Path)):
        return io.StringIO(Path(source).read_text(encoding="utf-8"))
    return source


# ---- substitution -------------------------------------------------------------

# Function words that signal "her" is objective rather than possessive.
_CLOSED_CLASS = frozenset("""
a an the and or but nor so yet then than that this those these which who whom
whose when where while because if although though as at by for from in into of
off on onto out over to under until up with without is was were be being been
are am do does did has have had will would can could shall should may might
must not no too very there here again once more most he she it they we you i
him them
""".split())

Resolver = Callable[[Sequence[str], int], str | None]


def default_ambiguity_resolver(words: Sequence[str], index: int) -> str | None:
    """Possessive/objective call for ambiguous forms: possessive when the next
    word token looks noun-like (alphabetic and not a function word)."""
    if index + 1 < len(words):
        nxt = words[index + 1].lower()
        if nxt.isalpha() and nxt not in _CLOSED_CLASS:
            return "poss"
    return "obj"


def _match_case(template: str, word: str) -> str:
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


@dataclass
class SubstitutionAudit:
    """Notes accumulated while flipping (unresolved ambiguity fallbacks)."""

    entries: list[str] = field(default_factory=list)

    def add(self, message: str) -> None:
        self.entries.append(message)


def flip_text(text: str, lexicon: GenderPairLexicon, names: NamePairList | None,
              resolver: Resolver | None = default_ambiguity_resolver,
              strict: bool = False, audit: SubstitutionAudit | None = None) -> str:
    """Swap every lexicon word and listed first name in the text."""
    tokens = _TOKEN_RE.findall(text)
    words = [t for t in tokens if _WORD_RE.fullmatch(t)]
    word_pos = -1
    out = []
    for token in tokens:
        if not _WORD_RE.fullmatch(token):
            out.append(token)
            continue
        word_pos += 1
        entries = lexicon.lookup(token)
        replacement: str | None = None
        if len(entries) == 1:
            replacement = entries[0].target
        elif len(entries) > 1:
            choice = resolver(words, word_pos) if resolver is not None else None
            chosen = next((e for e in entries if e.discriminator == choice), None)
            if chosen is None:
                if strict:
                    raise AmbiguousTokenUnresolved(
                        f"cannot resolve {token!r} (word {word_pos}) in {text[:60]!r}"
                    )
                chosen = next((e for e in entries if e.discriminator == "poss"),
                              entries[0])
                if audit is not None:
                    audit.add(f"unresolved {token!r} at word {word_pos}; "
                              f"defaulted to {chosen.target!r}")
            replacement = chosen.target
        elif names is not None:
            replacement = names.lookup(token)
        out.append(_match_case(token, replacement) if replacement else token)
    return "".join(out)


def substitute(document: GapDocument, lexicon: GenderPairLexicon,
               names: NamePairList | None, swap_probability: float,
               rng: np.random.Generator,
               resolver: Resolver | None = default_ambiguity_resolver,
               strict: bool = False,
               audit: SubstitutionAudit | None = None) -> GapDocument:
    """Flip the document with the given probability, else return it unchanged
    (modulo the recorded ``flipped`` flag)."""
    if not 0.0 <= swap_probability <= 1.0:
        raise ValueError(f"swap_probability must be in [0, 1], got {swap_probability}")
    if rng.random() >= swap_probability:
        return replace(document, flipped=False)
    flipped_text = flip_text(document.text, lexicon, names, resolver, strict, audit)
    return replace(document, text=flipped_text, flipped=True)


def _document_rng(seed: int, doc_id: str) -> np.random.Generator:
    digest = hashlib.sha256(doc_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def substitute_corpus(documents: Sequence[GapDocument], lexicon: GenderPairLexicon,
                      names: NamePairList | None, swap_probability: float = 0.5,
                      seed: int = 42,
                      resolver: Resolver | None = default_ambiguity_resolver,
                      strict: bool = False,
                      audit: SubstitutionAudit | None = None) -> list[GapDocument]:
    """Apply ``substitute`` to every document with an rng stream derived from
    (seed, document id), so results do not depend on processing order."""
    return [
        substitute(doc, lexicon, names, swap_probability,
                   _document_rng(seed, doc.id), resolver, strict, audit)
        for doc in documents
    ]


# ---- balance audit -------------------------------------------------------------

@dataclass(frozen=True)
class BalanceAudit:
    pair_counts: dict[tuple[str, str], tuple[int, int]]
    total_a: int
    total_b: int

    @property
    def ratio(self) -> float | None:
        """Side-a tokens over side-b tokens; None for an empty corpus."""
        if self.total_a == 0 and self.total_b == 0:
            return None
        if self.total_b == 0:
            return float("inf")
        return self.total_a / self.total_b


def audit_balance(documents: Sequence[GapDocument],
                  lexicon: GenderPairLexicon) -> BalanceAudit:
    """Count occurrences of each lexicon side across the corpus.

    Words belonging to several pairs (ambiguous forms like "her") count once
    toward their side's total; per-pair counts keep the raw numbers.
    """
    counts: dict[str, int] = {}
    for doc in documents:
        for word in _WORD_RE.findall(doc.text.lower()):
            counts[word] = counts.get(word, 0) + 1
    pair_counts = {}
    seen: set[tuple[str, str]] = set()
    for a, b, _disc in lexicon.pairs:
        if (a, b) in seen:
            continue
        seen.add((a, b))
        pair_counts[(a, b)] = (counts.get(a, 0), counts.get(b, 0))
    side_a, side_b = lexicon.side_words()
    total_a = sum(counts.get(w, 0) for w in side_a)
    total_b = sum(counts.get(w, 0) for w in side_b)
    return BalanceAudit(pair_counts=pair_counts, total_a=total_a, total_b=total_b)
