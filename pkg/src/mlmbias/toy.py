"""A small trainable masked language model for desk-scale pipeline checks.

The model is deliberately tiny: token + position embeddings feed a single
mixing layer that combines each position's own embedding with the mean of all
other non-pad embeddings (a bag-of-context layer), followed by an output
projection and softmax. That is enough to learn which person words co-occur
with which professions, which is all the scoring and mitigation pipeline
needs from a fixture model. Training is plain numpy with hand-written
gradients (checked against finite differences in the test suite) and a
decoupled-weight-decay adaptive optimizer, so runs are bit-reproducible
under a fixed seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import corpus as corpus_mod
from .corpus import (
    Gender,
    Language,
    PersonWord,
    ProfessionEntry,
    ProfessionGroup,
    SentenceInstance,
    Template,
    expand_templates_unchecked,
    load_templates,
)
from .errors import CheckpointError, EmptyCorpus, SequenceTooLong
from .finetune import MlmMaskingPolicy, mask_inputs
from .scoring import MlmScorer, Tokenization, fixed_length

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN]

_WORD_RE = re.compile(r"\[MASK\]|\[PAD\]|\[UNK\]|\w+|[^\w\s]", re.UNICODE)

CHECKPOINT_FORMAT = "toy-mlm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ToyMlmConfig:
    vocab_cap: int = 2000
    dim: int = 24
    hidden: int = 96
    context_width: int = 64
    layers: int = 1
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 42
    lowercase: bool = True

    def __post_init__(self) -> None:
        numeric = {
            "vocab_cap": self.vocab_cap, "dim": self.dim, "hidden": self.hidden,
            "context_width": self.context_width, "learning_rate": self.learning_rate,
            "epochs": self.epochs, "batch_size": self.batch_size,
        }
        for name, value in numeric.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")


class ToyTokenizer:
    """Whole-word tokenizer with [PAD]/[UNK]/[MASK] specials, no sub-words."""

    def __init__(self, vocab: Sequence[str], lowercase: bool = True) -> None:
        if list(vocab[:3]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        self.vocab = list(vocab)
        self.lowercase = lowercase
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def from_corpus(cls, sentences: Iterable[str], vocab_cap: int = 2000,
                    lowercase: bool = True) -> "ToyTokenizer":
        counts: dict[str, int] = {}
        for sentence in sentences:
            for word in cls._words(sentence, lowercase):
                if word not in SPECIAL_TOKENS:
                    counts[word] = counts.get(word, 0) + 1
        budget = max(0, vocab_cap - len(SPECIAL_TOKENS))
        kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
        return cls(SPECIAL_TOKENS + [w for w, _ in kept], lowercase)

    @staticmethod
    def _words(text: str, lowercase: bool) -> list[str]:
        words = _WORD_RE.findall(text)
        if lowercase:
            words = [w if w in SPECIAL_TOKENS else w.lower() for w in words]
        return words

    def normalize(self, token: str) -> str:
        if self.lowercase and token not in SPECIAL_TOKENS:
            return token.lower()
        return token

    def tokenize(self, text: str) -> Tokenization:
        words = self._words(text, self.lowercase)
        ids = [self._index.get(w, self._index[UNK_TOKEN]) for w in words]
        return Tokenization(ids=ids, tokens=words, word_ids=list(range(len(words))))

    def vocab_index(self, token: str) -> int | None:
        return self._index.get(self.normalize(token))


def _init_params(config: ToyMlmConfig, vocab_size: int, rng: np.random.Generator):
    d, h, L = config.dim, config.hidden, config.context_width
    params = {
        "tok_emb": rng.normal(0.0, 0.1, size=(vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.1, size=(L, d)),
        "w_self": rng.normal(0.0, 0.1, size=(d, h)),
        "w_ctx": rng.normal(0.0, 0.1, size=(d, h)),
        "b_h": np.zeros(h),
        "w_out": rng.normal(0.0, 0.1, size=(h, vocab_size)),
        "b_out": np.zeros(vocab_size),
    }
    if config.layers == 2:
        params["w_mid"] = rng.normal(0.0, 0.1, size=(h, h))
        params["b_mid"] = np.zeros(h)
    return params


class AdamW:
    """Adam with decoupled weight decay (bias-corrected moments)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + weight_decay * p)


class ToyMlm(MlmScorer):
    """Trainable scorer over a whole-word vocabulary."""

    def __init__(self, tokenizer: ToyTokenizer, config: ToyMlmConfig,
                 params: dict[str, np.ndarray] | None = None) -> None:
        self.tokenizer = tokenizer
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params = params if params is not None else _init_params(
            config, len(tokenizer.vocab), rng
        )
        self.optimizer = AdamW()
        self.epoch_losses: list[float] = []

        self.mask_token = MASK_TOKEN
        self.pad_token = PAD_TOKEN
        self.mask_token_id = tokenizer.vocab_index(MASK_TOKEN)
        self.pad_token_id = tokenizer.vocab_index(PAD_TOKEN)

    @property
    def vocab_size(self) -> int:  # type: ignore[override]
        return len(self.tokenizer.vocab)

    # ---- scorer contract -------------------------------------------------

    def tokenize(self, text: str) -> Tokenization:
        return self.tokenizer.tokenize(text)

    def vocab_index(self, token: str) -> int | None:
        return self.tokenizer.vocab_index(token)

    def distribution(self, ids: Sequence[int], position: int,
                     attention_mask: Sequence[int] | None = None) -> np.ndarray:
        ids_arr = np.asarray(ids, dtype=np.int64)[None, :]
        if attention_mask is None:
            attn = (ids_arr != self.pad_token_id).astype(np.float64)
        else:
            attn = np.asarray(attention_mask, dtype=np.float64)[None, :]
        probs = self._forward(ids_arr, attn)["probs"]
        return probs[0, position].copy()

    def token_probabilities(self, ids: np.ndarray, attention_mask: np.ndarray,
                            positions: Sequence[int],
                            token_indices: Sequence[int]) -> np.ndarray:
        probs = self._forward(np.asarray(ids, dtype=np.int64),
                              np.asarray(attention_mask, dtype=np.float64))["probs"]
        rows = np.arange(len(positions))
        return probs[rows, np.asarray(positions), np.asarray(token_indices)]

    # ---- forward / backward ----------------------------------------------

    def _forward(self, ids: np.ndarray, attn: np.ndarray) -> dict[str, np.ndarray]:
        B, L = ids.shape
        if L > self.config.context_width:
            raise SequenceTooLong(
                f"sequence length {L} exceeds context width {self.config.context_width}"
            )
        p = self.params
        x = p["tok_emb"][ids] + p["pos_emb"][None, :L, :]
        m = attn[..., None]
        xm = x * m
        total = xm.sum(axis=1, keepdims=True)
        count = attn.sum(axis=1, keepdims=True)[..., None]
        denom = np.maximum(count - m, 1.0)
        ctx = (total - xm) / denom
        z = x @ p["w_self"] + ctx @ p["w_ctx"] + p["b_h"]
        hid = np.tanh(z)
        if self.config.layers == 2:
            z2 = hid @ p["w_mid"] + p["b_mid"]
            hid2 = np.tanh(z2)
        else:
            hid2 = hid
        logits = hid2 @ p["w_out"] + p["b_out"]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=-1, keepdims=True)
        return {"x": x, "m": m, "denom": denom, "ctx": ctx, "hid": hid,
                "hid2": hid2, "probs": probs, "ids": ids, "attn": attn}

    def loss_and_grads(self, ids: np.ndarray, attn: np.ndarray,
                       labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Cross-entropy at labeled positions (label -100 = ignore) + gradients."""
        cache = self._forward(np.asarray(ids, dtype=np.int64),
                              np.asarray(attn, dtype=np.float64))
        p = self.params
        probs, x, ctx, hid, hid2 = (cache[k] for k in ("probs", "x", "ctx", "hid", "hid2"))
        labels = np.asarray(labels)
        bi, li = np.nonzero(labels >= 0)
        if bi.size == 0:
            raise ValueError("no labeled positions")
        n_lab = bi.size
        picked = probs[bi, li, labels[bi, li]]
        loss = float(-np.log(np.maximum(picked, 1e-300)).mean())

        g_logits = np.zeros_like(probs)
        g_logits[bi, li] = probs[bi, li] / n_lab
        g_logits[bi, li, labels[bi, li]] -= 1.0 / n_lab

        grads = {}
        grads["w_out"] = np.einsum("blh,blv->hv", hid2, g_logits)
        grads["b_out"] = g_logits.sum(axis=(0, 1))
        g_hid2 = g_logits @ p["w_out"].T
        if self.config.layers == 2:
            g_z2 = g_hid2 * (1.0 - hid2 * hid2)
            grads["w_mid"] = np.einsum("blh,blk->hk", hid, g_z2)
            grads["b_mid"] = g_z2.sum(axis=(0, 1))
            g_hid = g_z2 @ p["w_mid"].T
        else:
            g_hid = g_hid2
        g_z = g_hid * (1.0 - hid * hid)
        grads["w_self"] = np.einsum("bld,blh->dh", x, g_z)
        grads["w_ctx"] = np.einsum("bld,blh->dh", ctx, g_z)
        grads["b_h"] = g_z.sum(axis=(0, 1))

        g_x = g_z @ p["w_self"].T
        g_ctx = g_z @ p["w_ctx"].T
        scaled = g_ctx / cache["denom"]
        g_total = scaled.sum(axis=1, keepdims=True)
        g_x += cache["m"] * (g_total - scaled)

        grads["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(grads["tok_emb"], cache["ids"], g_x)
        grads["pos_emb"] = np.zeros_like(p["pos_emb"])
        grads["pos_emb"][: ids.shape[1]] = g_x.sum(axis=0)
        return loss, grads

    # ---- training ----------------------------------------------------------

    def train_step(self, ids: np.ndarray, attn: np.ndarray, labels: np.ndarray,
                   lr: float, weight_decay: float = 0.0,
                   clip_norm: float | None = None) -> float:
        loss, grads = self.loss_and_grads(ids, attn, labels)
        if clip_norm is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > clip_norm:
                scale = clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.optimizer.step(self.params, grads, lr, weight_decay)
        return loss

    def encode_sentences(self, sentences: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Tokenize, truncate to the context width and pad to the batch's
        power-of-two fixed length."""
        seqs = [self.tokenize(s).ids[: self.config.context_width] for s in sentences]
        length = min(fixed_length(seqs), self.config.context_width)
        ids = np.full((len(seqs), length), self.pad_token_id, dtype=np.int64)
        attn = np.zeros((len(seqs), length), dtype=np.float64)
        for i, seq in enumerate(seqs):
            seq = seq[:length]
            ids[i, : len(seq)] = seq
            attn[i, : len(seq)] = 1.0
        return ids, attn

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        self.params = {k: v.copy() for k, v in snapshot.items()}
        self.optimizer = AdamW()

    def clone(self) -> "ToyMlm":
        twin = ToyMlm(self.tokenizer, self.config, params=self.snapshot())
        twin.epoch_losses = list(self.epoch_losses)
        return twin

    # ---- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": {
                "vocab_cap": self.config.vocab_cap,
                "dim": self.config.dim,
                "hidden": self.config.hidden,
                "context_width": self.config.context_width,
                "layers": self.config.layers,
                "learning_rate": self.config.learning_rate,
                "epochs": self.config.epochs,
                "batch_size": self.config.batch_size,
                "weight_decay": self.config.weight_decay,
                "seed": self.config.seed,
                "lowercase": self.config.lowercase,
            },
            "vocab": self.tokenizer.vocab,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyMlm":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        config = ToyMlmConfig(**payload["config"])
        tokenizer = ToyTokenizer(payload["vocab"], lowercase=config.lowercase)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in payload["params"].items()}
        return cls(tokenizer, config, params=params)


def train(sentences: Sequence[str], config: ToyMlmConfig | None = None) -> ToyMlm:
    """Train a toy MLM from scratch on the given sentences.

    The vocabulary is built from the corpus, inputs go through the standard
    MLM input-masking policy, and sentences are visited in a seeded random
    order each epoch. Deterministic for a fixed config.
    """
    config = config or ToyMlmConfig()
    sentences = [s for s in sentences if s.strip()]
    if not sentences:
        raise EmptyCorpus("cannot train on an empty corpus")
    tokenizer = ToyTokenizer.from_corpus(sentences, config.vocab_cap, config.lowercase)
    model = ToyMlm(tokenizer, config)
    policy = MlmMaskingPolicy(seed=config.seed)
    rng = np.random.default_rng(config.seed)
    special_ids = {model.pad_token_id, model.mask_token_id}

    for _ in range(config.epochs):
        order = rng.permutation(len(sentences))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch_sents = [sentences[i] for i in order[start:start + config.batch_size]]
            ids, attn = model.encode_sentences(batch_sents)
            masked = np.empty_like(ids)
            labels = np.empty_like(ids)
            for r in range(ids.shape[0]):
                masked[r], labels[r] = mask_inputs(
                    ids[r], attn[r], policy, rng,
                    vocab_size=model.vocab_size,
                    mask_token_id=model.mask_token_id,
                    special_ids=special_ids,
                )
            if not (labels >= 0).any():
                continue
            epoch_loss += model.train_step(masked, attn, labels,
                                           lr=config.learning_rate,
                                           weight_decay=config.weight_decay)
            batches += 1
        model.epoch_losses.append(epoch_loss / max(batches, 1))
    return model


# ---- planted-bias fixture ---------------------------------------------------

_FIXTURE_PERSON_ROWS = [
    ("she", "sie", Gender.FEMALE, "she", "sie", "die"),
    ("my mother", "meine Mutter", Gender.FEMALE, "mother", "Mutter", "die"),
    ("my sister", "meine Schwester", Gender.FEMALE, "sister", "Schwester", "die"),
    ("he", "er", Gender.MALE, "he", "er", "der"),
    ("my father", "mein Vater", Gender.MALE, "father", "Vater", "der"),
    ("my brother", "mein Bruder", Gender.MALE, "brother", "Bruder", "der"),
]

_FIXTURE_PROFESSIONS = [
    # (short_en, group, percent_female) - groups mirror the planted direction
    ("nurse", ProfessionGroup.FEMALE_DOMINATED, 95.0),
    ("secretary", ProfessionGroup.FEMALE_DOMINATED, 93.0),
    ("carpenter", ProfessionGroup.MALE_DOMINATED, 2.0),
    ("plumber", ProfessionGroup.MALE_DOMINATED, 2.5),
    ("clerk", ProfessionGroup.BALANCED, 50.0),
    ("photographer", ProfessionGroup.BALANCED, 49.5),
]


@dataclass(frozen=True)
class PlantedBiasFixture:
    """Synthetic mini corpus with analytically known association signs.

    ``strength`` is the probability that a planted profession co-occurs with
    its planted gender in the training sentences: 1.0 means exclusive
    co-occurrence, 0.5 means balanced. ``expected_signs`` maps
    (gender, profession) to +1/-1/0.
    """

    strength: float
    seed: int
    train_sentences: list[str]
    instances: list[SentenceInstance]
    expected_signs: dict[tuple[Gender, str], int]
    persons: list[PersonWord]
    professions: list[ProfessionEntry]
    templates: list[Template]

    def planted_professions(self) -> list[str]:
        return [p.short_en for p in self.professions
                if p.group is not ProfessionGroup.BALANCED]

    def gap_documents(self, n_docs: int, seed: int | None = None):
        """GAP-shaped documents drawn from the same biased distribution."""
        from .cds import GapDocument

        rng = np.random.default_rng(self.seed if seed is None else seed)
        docs = []
        for d in range(n_docs):
            n_sents = int(rng.integers(2, 5))
            sents = [self._sample_sentence(rng, d * 7 + k) for k in range(n_sents)]
            docs.append(GapDocument(id=f"fixture-{d:04d}", text=" ".join(sents),
                                    metadata={}))
        return docs

    def _sample_sentence(self, rng: np.random.Generator, tick: int) -> str:
        prof = self.professions[tick % len(self.professions)]
        female_prob = _female_probability(prof.group, self.strength)
        gender = Gender.FEMALE if rng.random() < female_prob else Gender.MALE
        pool = [p for p in self.persons if p.gender is gender]
        person = pool[tick % len(pool)]
        template = self.templates[tick % len(self.templates)]
        sentence, _, _, _ = corpus_mod._render(
            template, person, prof.form(Language.EN, gender), Language.EN
        )
        return sentence


def _female_probability(group: ProfessionGroup, strength: float) -> float:
    if group is ProfessionGroup.FEMALE_DOMINATED:
        return strength
    if group is ProfessionGroup.MALE_DOMINATED:
        return 1.0 - strength
    return 0.5


def planted_bias_fixture(strength: float, seed: int = 42,
                         sentences_per_profession: int = 80) -> PlantedBiasFixture:
    """Generate a mini evaluation corpus plus its expected association signs."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    rng = np.random.default_rng(seed)
    persons = [PersonWord(*row) for row in _FIXTURE_PERSON_ROWS]
    professions = [
        ProfessionEntry(
            original_label=short, short_en=short, percent_female=percent,
            group=group, de_masculine=short, de_feminine=short,
        )
        for short, group, percent in _FIXTURE_PROFESSIONS
    ]
    templates = load_templates(language=Language.EN)

    train_sentences = []
    for prof in professions:
        female_prob = _female_probability(prof.group, strength)
        for i in range(sentences_per_profession):
            gender = Gender.FEMALE if rng.random() < female_prob else Gender.MALE
            pool = [p for p in persons if p.gender is gender]
            person = pool[i % len(pool)]
            template = templates[i % len(templates)]
            sentence, _, _, _ = corpus_mod._render(
                template, person, prof.form(Language.EN, gender), Language.EN
            )
            train_sentences.append(sentence)

    expected: dict[tuple[Gender, str], int] = {}
    for prof in professions:
        female_prob = _female_probability(prof.group, strength)
        if abs(female_prob - 0.5) <= 0.05:
            female_sign = male_sign = 0
        else:
            female_sign = 1 if female_prob > 0.5 else -1
            male_sign = -female_sign
        expected[(Gender.FEMALE, prof.short_en)] = female_sign
        expected[(Gender.MALE, prof.short_en)] = male_sign

    instances = expand_templates_unchecked(templates, persons, professions, Language.EN)
    return PlantedBiasFixture(
        strength=strength, seed=seed, train_sentences=train_sentences,
        instances=instances, expected_signs=expected, persons=persons,
        professions=professions, templates=templates,
    )
