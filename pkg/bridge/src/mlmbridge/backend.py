"""Masked-LM backend wrapping a transformers checkpoint.

Sequences arriving over the wire are raw sub-token ids without special
tokens; this backend brackets them with the model's own special tokens before
the forward pass so that positions in requests always refer to the caller's
sequence.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


class ModelLoadFailure(Exception):
    pass


@dataclass(frozen=True)
class TokenizedText:
    ids: list[int]
    tokens: list[str]
    word_ids: list[int]


class HfMlmBackend:
    """Inference (and fine-tuning) over one pretrained masked-LM checkpoint."""

    def __init__(self, model_name_or_path: str, device: str = "cpu",
                 seed: int = 42) -> None:
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        self.name = str(model_name_or_path)
        self.device = torch.device(device)
        self.seed = seed
        torch.manual_seed(seed)
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_name_or_path)
            self.model = AutoModelForMaskedLM.from_pretrained(model_name_or_path)
        except Exception as e:  # noqa: BLE001 - report as a load failure
            raise ModelLoadFailure(f"cannot load {model_name_or_path}: {e}") from e
        self.model.to(self.device)
        self.model.eval()

    # ---- metadata -----------------------------------------------------------

    @property
    def mask_token(self) -> str:
        return self.tokenizer.mask_token

    @property
    def mask_token_id(self) -> int:
        return int(self.tokenizer.mask_token_id)

    @property
    def pad_token(self) -> str:
        return self.tokenizer.pad_token

    @property
    def pad_token_id(self) -> int:
        return int(self.tokenizer.pad_token_id)

    @property
    def vocab_size(self) -> int:
        return int(self.model.get_input_embeddings().num_embeddings)

    # ---- tokenization ---------------------------------------------------------

    def tokenize(self, text: str) -> TokenizedText:
        encoding = self.tokenizer(text, add_special_tokens=False)
        ids = list(encoding["input_ids"])
        tokens = self.tokenizer.convert_ids_to_tokens(ids)
        if hasattr(encoding, "word_ids"):
            raw = encoding.word_ids()
            word_ids = [w if w is not None else -1 for w in raw]
        else:  # slow tokenizer fallback: one word per sub-token run
            word_ids = list(range(len(ids)))
        return TokenizedText(ids=ids, tokens=tokens, word_ids=word_ids)

    def vocab_index(self, token: str) -> int | None:
        unk = self.tokenizer.unk_token_id
        direct = self.tokenizer.convert_tokens_to_ids(token)
        if direct is not None and direct != unk:
            return int(direct)
        pieces = self.tokenizer.tokenize(token)
        if len(pieces) == 1:
            piece_id = self.tokenizer.convert_tokens_to_ids(pieces[0])
            if piece_id is not None and piece_id != unk:
                return int(piece_id)
        return None

    # ---- inference -----------------------------------------------------------

    def _strip_padding(self, ids: Sequence[int],
                       attention_mask: Sequence[int] | None) -> list[int]:
        ids = [int(i) for i in ids]
        if attention_mask is not None:
            length = int(sum(1 for m in attention_mask if m))
            ids = ids[:length]
        return ids

    def _bracket(self, ids: list[int]) -> tuple[torch.Tensor, int]:
        """Surround with the model's bracketing special tokens; returns the
        offset the caller's positions must be shifted by."""
        cls_id = self.tokenizer.cls_token_id
        sep_id = self.tokenizer.sep_token_id
        wrapped = list(ids)
        offset = 0
        if cls_id is not None:
            wrapped = [cls_id] + wrapped
            offset = 1
        if sep_id is not None:
            wrapped = wrapped + [sep_id]
        return torch.tensor([wrapped], device=self.device), offset

    def distribution(self, ids: Sequence[int], position: int,
                     attention_mask: Sequence[int] | None = None) -> np.ndarray:
        ids = self._strip_padding(ids, attention_mask)
        if not 0 <= position < len(ids):
            raise ValueError(f"position {position} outside sequence of {len(ids)}")
        inputs, offset = self._bracket(ids)
        with torch.no_grad():
            logits = self.model(inputs).logits[0, position + offset]
            probabilities = torch.softmax(logits.double(), dim=-1)
        return probabilities.cpu().numpy()

    def probability(self, ids: Sequence[int], position: int, token_index: int,
                    attention_mask: Sequence[int] | None = None) -> float:
        if not 0 <= token_index < self.vocab_size:
            raise IndexError(f"token index {token_index} outside vocabulary")
        return float(self.distribution(ids, position, attention_mask)[token_index])

    # ---- fine-tuning ------------------------------------------------------------

    def clone_for_training(self) -> torch.nn.Module:
        import copy

        model = copy.deepcopy(self.model)
        model.train()
        return model

    def finetune(self, sentences: Sequence[str], config: dict,
                 output_dir: str | Path, progress=None) -> Path:
        """Standard MLM fine-tuning on a copy of the model; the serving model
        is untouched. Returns the directory of the saved post-state model."""
        epochs = int(config.get("epochs", 3))
        batch_size = int(config.get("batch_size", 1))
        if batch_size != 1:
            raise ValueError("the fine-tuning recipe uses batch size 1")
        lr = float(config.get("learning_rate", 5e-5))
        warmup = int(config.get("warmup_steps", 0))
        seed = int(config.get("seed", 42))

        sentences = [s for s in sentences if s.strip()]
        if not sentences:
            raise ValueError("no sentences to fine-tune on")
        torch.manual_seed(seed)
        rng = random.Random(seed)
        generator = torch.Generator().manual_seed(seed)

        max_model_len = min(int(self.tokenizer.model_max_length), 512)
        encoded = [
            self.tokenizer(s, truncation=True, max_length=max_model_len)["input_ids"]
            for s in sentences
        ]
        longest = max(len(e) for e in encoded)
        fixed = 1 if longest <= 1 else 1 << (longest - 1).bit_length()
        fixed = min(fixed, max_model_len)

        model = self.clone_for_training()
        optimizer = torch.optim.AdamW(model.parameters(), lr=lr,
                                      weight_decay=float(config.get("weight_decay", 0.0)))
        total_steps = epochs * len(encoded)

        def lr_factor(step: int) -> float:
            if warmup > 0 and step < warmup:
                return step / warmup
            return max(0, total_steps - step) / max(1, total_steps - warmup)

        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_factor)
        special_ids = set(self.tokenizer.all_special_ids)

        step = 0
        for _ in range(epochs):
            order = list(range(len(encoded)))
            rng.shuffle(order)
            for index in order:
                ids = list(encoded[index])[:fixed]
                input_ids = torch.full((1, fixed), self.pad_token_id,
                                       dtype=torch.long)
                attention = torch.zeros((1, fixed), dtype=torch.long)
                input_ids[0, : len(ids)] = torch.tensor(ids)
                attention[0, : len(ids)] = 1
                masked, labels = _mask_tokens(
                    input_ids, attention, special_ids, self.mask_token_id,
                    self.vocab_size, generator,
                )
                if (labels >= 0).any():
                    output = model(masked.to(self.device),
                                   attention_mask=attention.to(self.device),
                                   labels=labels.to(self.device))
                    loss = output.loss
                    loss_value = float(loss.detach())
                    if not math.isfinite(loss_value):
                        raise RuntimeError(f"non-finite loss at step {step}")
                    loss.backward()
                    optimizer.step()
                    optimizer.zero_grad()
                else:
                    loss_value = float("nan")
                scheduler.step()
                step += 1
                if progress is not None:
                    progress(step, total_steps, loss_value)

        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        model.eval()
        model.save_pretrained(output_dir)
        self.tokenizer.save_pretrained(output_dir)
        return output_dir


def _mask_tokens(input_ids: torch.Tensor, attention: torch.Tensor,
                 special_ids: set[int], mask_token_id: int, vocab_size: int,
                 generator: torch.Generator):
    """15% selection, then 80% mask / 10% random / 10% keep; labels carry the
    original ids at selected positions and -100 elsewhere."""
    labels = input_ids.clone()
    eligible = attention.bool()
    for special in special_ids:
        eligible &= input_ids != special
    probabilities = torch.full(input_ids.shape, 0.15)
    selected = torch.bernoulli(probabilities, generator=generator).bool() & eligible
    labels[~selected] = -100

    masked = input_ids.clone()
    roll = torch.rand(input_ids.shape, generator=generator)
    to_mask = selected & (roll < 0.8)
    to_random = selected & (roll >= 0.8) & (roll < 0.9)
    masked[to_mask] = mask_token_id
    randoms = torch.randint(0, vocab_size, input_ids.shape, generator=generator)
    masked[to_random] = randoms[to_random]
    return masked, labels
