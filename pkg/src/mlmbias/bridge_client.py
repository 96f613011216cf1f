"""HTTP client for a masked-LM bridge service (see PROTOCOL.md).

The bridge wraps a pretrained checkpoint behind a small JSON-over-HTTP
protocol; this client adapts it to the MlmScorer contract. Association math
needs exact single-token probabilities, so scoring goes through the dedicated
``/v1/prob`` (sequence, position, token index) query rather than shipping
full vocabulary distributions.
"""

from __future__ import annotations

from typing import Sequence

import httpx
import numpy as np

from .errors import (
    BackendUnavailable,
    BridgeProtocolError,
    PositionNotMasked,
    TokenNotInVocabulary,
)
from .scoring import MlmScorer, Tokenization

PROTOCOL_NAME = "mlmbias-bridge/1"

_ERROR_MAP = {
    "token_not_in_vocab": TokenNotInVocabulary,
    "position_not_masked": PositionNotMasked,
}


class BridgeScorer(MlmScorer):
    """Scorer backed by a bridge service at ``base_url``."""

    def __init__(self, base_url: str, timeout: float = 60.0,
                 client: httpx.Client | None = None) -> None:
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)
        try:
            info = self._get("/v1/health")
        except BridgeProtocolError as e:
            raise BackendUnavailable(f"bridge at {base_url} unhealthy: {e}") from e
        if info.get("protocol") != PROTOCOL_NAME:
            raise BackendUnavailable(
                f"bridge speaks {info.get('protocol')!r}, expected {PROTOCOL_NAME!r}"
            )
        self.model_name = info.get("model", "unknown")
        self.mask_token = info["mask_token"]
        self.pad_token = info["pad_token"]
        self.mask_token_id = int(info["mask_token_id"])
        self.pad_token_id = int(info["pad_token_id"])
        self.vocab_size = int(info["vocab_size"])

    # ---- transport ---------------------------------------------------------

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        try:
            response = self._client.request(method, self.base_url + path, json=payload)
        except httpx.HTTPError as e:
            raise BackendUnavailable(f"bridge unreachable at {self.base_url}: {e}") from e
        try:
            body = response.json()
        except ValueError as e:
            raise BridgeProtocolError(
                f"{path}: non-JSON response (status {response.status_code})"
            ) from e
        if response.status_code >= 400 or "error" in body:
            err = body.get("error") or {}
            code = err.get("code", f"http_{response.status_code}")
            message = err.get("message", "unknown bridge error")
            raise _ERROR_MAP.get(code, BridgeProtocolError)(f"{code}: {message}")
        return body

    def _get(self, path: str) -> dict:
        return self._request("GET", path)

    def _post(self, path: str, payload: dict) -> dict:
        return self._request("POST", path, payload)

    # ---- scorer contract -----------------------------------------------------

    def tokenize(self, text: str) -> Tokenization:
        body = self._post("/v1/tokenize", {"text": text})
        return Tokenization(ids=list(body["ids"]), tokens=list(body["tokens"]),
                            word_ids=list(body["word_ids"]))

    def vocab_index(self, token: str) -> int | None:
        body = self._post("/v1/vocab", {"token": token})
        index = body["index"]
        return None if index is None else int(index)

    def distribution(self, ids: Sequence[int], position: int,
                     attention_mask: Sequence[int] | None = None) -> np.ndarray:
        payload = {"ids": list(int(i) for i in ids), "position": int(position)}
        if attention_mask is not None:
            payload["attention_mask"] = [int(m) for m in attention_mask]
        body = self._post("/v1/distribution", payload)
        if "probabilities" not in body:
            raise BridgeProtocolError("distribution response lacks 'probabilities'")
        return np.asarray(body["probabilities"], dtype=np.float64)

    def token_probability(self, ids: Sequence[int], position: int, token_index: int,
                          attention_mask: Sequence[int] | None = None) -> float:
        payload = {
            "ids": [int(i) for i in ids],
            "position": int(position),
            "token_index": int(token_index),
        }
        if attention_mask is not None:
            payload["attention_mask"] = [int(m) for m in attention_mask]
        return float(self._post("/v1/prob", payload)["probability"])

    # ---- fine-tuning ------------------------------------------------------------

    def finetune_start(self, sentences: Sequence[str], config: dict) -> str:
        body = self._post("/v1/finetune", {"sentences": list(sentences),
                                           "config": config})
        return str(body["job_id"])

    def finetune_status(self, job_id: str) -> dict:
        return self._get(f"/v1/finetune/{job_id}")

    def close(self) -> None:
        self._client.close()
