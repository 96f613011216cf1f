"""MLM input masking and the fine-tuning recipe that produces the post model.

The recipe follows the standard masked-language-modelling setup: roughly 15%
of eligible tokens are selected per sentence; of those, 80% become the mask
token, 10% a random vocabulary token and 10% stay unchanged, with the
original tokens as labels. Fine-tuning visits sentences in a seeded random
order, one sentence per optimizer step, under a linear learning-rate schedule
with optional warm-up that decays to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import DivergenceDetected, EmptyCorpus, NoEligiblePositions

IGNORE_LABEL = -100


@dataclass(frozen=True)
class MlmMaskingPolicy:
    select_fraction: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    seed: int = 42

    def __post_init__(self) -> None:
        if not 0.0 <= self.select_fraction <= 1.0:
            raise ValueError("select_fraction must be in [0, 1]")
        total = self.mask_fraction + self.random_fraction + self.keep_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mask+random+keep fractions must sum to 1, got {total}")


def mask_inputs(
    ids: np.ndarray,
    attention_mask: np.ndarray,
    policy: MlmMaskingPolicy,
    rng: np.random.Generator,
    *,
    vocab_size: int,
    mask_token_id: int,
    special_ids: set[int] | frozenset[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the MLM input-masking policy to one encoded sentence.

    Returns (masked_ids, labels); labels carry the original token at selected
    positions and IGNORE_LABEL everywhere else. Pad and special positions are
    never selected. Raises NoEligiblePositions when nothing can be selected.
    """
    ids = np.asarray(ids)
    attn = np.asarray(attention_mask)
    eligible = (attn > 0) & ~np.isin(ids, list(special_ids))
    if not eligible.any():
        raise NoEligiblePositions("sentence has no maskable positions")

    selected = eligible & (rng.random(ids.shape) < policy.select_fraction)
    labels = np.where(selected, ids, IGNORE_LABEL)
    masked = ids.copy()
    action = rng.random(ids.shape)
    randoms = rng.integers(0, vocab_size, size=ids.shape)
    to_mask = selected & (action < policy.mask_fraction)
    to_random = selected & (action >= policy.mask_fraction) & (
        action < policy.mask_fraction + policy.random_fraction
    )
    masked[to_mask] = mask_token_id
    masked[to_random] = randoms[to_random]
    return masked, labels


@runtime_checkable
class TrainableMlm(Protocol):
    """Scorer that can additionally take gradient steps and snapshot itself."""

    def encode_sentences(self, sentences: Sequence[str]) -> tuple[np.ndarray, np.ndarray]: ...

    def train_step(self, ids: np.ndarray, attn: np.ndarray, labels: np.ndarray,
                   lr: float, weight_decay: float = 0.0,
                   clip_norm: float | None = None) -> float: ...

    def snapshot(self) -> dict: ...

    def restore(self, snapshot: dict) -> None: ...

    def clone(self) -> "TrainableMlm": ...


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 1
    learning_rate: float = 5e-5
    warmup_steps: int = 0
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 42
    masking: MlmMaskingPolicy = field(default_factory=MlmMaskingPolicy)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size != 1:
            raise ValueError("the fine-tuning recipe uses batch size 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


def linear_schedule(step: int, total_steps: int, warmup_steps: int,
                    base_lr: float) -> float:
    """Learning rate for 0-indexed optimizer ``step``.

    Rises linearly over the warm-up, then decays linearly, reaching exactly
    zero at ``step == total_steps`` (one past the final step).
    """
    if total_steps <= 0:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * max(0, total_steps - step) / max(1, total_steps - warmup_steps)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class FinetuneResult:
    model: TrainableMlm          # post state
    pre_snapshot: dict           # parameters before any step
    log: list[StepRecord]


def finetune(model: TrainableMlm, sentences: Sequence[str],
             config: FinetuneConfig | None = None) -> FinetuneResult:
    """Fine-tune a copy of ``model`` on ``sentences``; the input is untouched.

    Sentences are visited in a seeded random order per epoch, one optimizer
    step each, so total steps = epochs x len(sentences). Empty sentences are
    dropped before counting.
    """
    config = config or FinetuneConfig()
    sentences = [s for s in sentences if s.strip()]
    if not sentences:
        raise EmptyCorpus("no sentences to fine-tune on")

    post = model.clone()
    pre_snapshot = model.snapshot()
    rng = np.random.default_rng(config.seed)
    total_steps = config.epochs * len(sentences)
    special_ids = {post.pad_token_id, post.mask_token_id}  # type: ignore[attr-defined]
    vocab_size = post.vocab_size  # type: ignore[attr-defined]

    log: list[StepRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(sentences))
        for idx in order:
            ids, attn = post.encode_sentences([sentences[idx]])
            try:
                masked, labels = mask_inputs(
                    ids[0], attn[0], config.masking, rng,
                    vocab_size=vocab_size,
                    mask_token_id=post.mask_token_id,  # type: ignore[attr-defined]
                    special_ids=special_ids,
                )
            except NoEligiblePositions:
                masked, labels = ids[0].copy(), np.full_like(ids[0], IGNORE_LABEL)
            lr = linear_schedule(step, total_steps, config.warmup_steps,
                                 config.learning_rate)
            if (labels >= 0).any():
                loss = post.train_step(masked[None, :], attn[:1], labels[None, :],
                                       lr=lr, weight_decay=config.weight_decay,
                                       clip_norm=config.clip_norm)
                if not math.isfinite(loss):
                    raise DivergenceDetected(f"non-finite loss {loss} at step {step}")
            else:
                # Nothing was selected this draw; the step is a no-op but still
                # consumes its slot in the schedule.
                loss = float("nan")
            log.append(StepRecord(step=step, epoch=epoch, lr=lr, loss=loss))
            step += 1
    return FinetuneResult(model=post, pre_snapshot=pre_snapshot, log=log)


def write_training_log(path, log: Sequence[StepRecord]) -> None:
    """One line per optimizer step: step, epoch, lr, loss (tab-separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tepoch\tlr\tloss\n")
        for rec in log:
            fh.write(f"{rec.step}\t{rec.epoch}\t{rec.lr!r}\t{rec.loss!r}\n")
