"""HTTP chat-completion client with bounded exponential backoff, plus replay."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import requests

from ..core import InvalidInputError

log = logging.getLogger(__name__)


class OracleUnavailable(RuntimeError):
    """The backend could not produce a response within the retry budget."""


@dataclass(frozen=True)
class OracleClientConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-5.2"
    temperature: float = 1.0
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidInputError("temperature must lie in [0, 2]")
        if self.max_retries < 0:
            raise InvalidInputError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise InvalidInputError("timeout must be positive")

    def delays(self) -> list[float]:
        """Sleep before each retry: base, base*factor, ..."""
        return [self.backoff_base * self.backoff_factor ** i for i in range(self.max_retries)]


DECOMPOSITION_CONFIG = OracleClientConfig(model="gpt-4.1", temperature=0.2)
PLANNER_CONFIG = OracleClientConfig(model="gpt-5.2", temperature=1.0)


class ChatBackend(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


def _is_retryable(status: int) -> bool:
    return status == 429 or status >= 500


@dataclass
class HttpChatClient:
    """OpenAI-compatible ``/chat/completions`` client.

    ``session`` and ``sleep`` are injectable so tests can run without a
    network or real waiting.
    """

    config: OracleClientConfig
    session: Any = None
    sleep: Callable[[float], None] = time.sleep
    transcript_path: Path | None = None
    attempts: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if self.session is None:
            self.session = requests.Session()

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise OracleUnavailable(f"environment variable {self.config.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.config.model, "temperature": self.config.temperature, "messages": messages}
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        headers = self._headers()
        delays = self.config.delays()
        last_err = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            self.attempts += 1
            try:
                resp = self.session.post(url, json=payload, headers=headers, timeout=self.config.timeout)
                status = resp.status_code
                if status == 200:
                    text = resp.json()["choices"][0]["message"]["content"]
                    self._record(payload, text, attempt + 1)
                    return text
                last_err = f"HTTP {status}"
                if not _is_retryable(status):
                    break
            except (requests.RequestException, ValueError, KeyError, IndexError) as e:
                last_err = f"{type(e).__name__}: {e}"
            if attempt < len(delays):
                log.warning("oracle request failed (%s); retrying in %.1fs", last_err, delays[attempt])
                self.sleep(delays[attempt])
        self._record(payload, None, attempt + 1, error=last_err)
        raise OracleUnavailable(f"oracle request failed after {attempt + 1} attempts: {last_err}")

    def _record(self, request: dict, response: str | None, attempts: int, error: str | None = None) -> None:
        if self.transcript_path is None:
            return
        entry = {"request": request, "response": response, "attempts": attempts}
        if error is not None:
            entry["error"] = error
        with Path(self.transcript_path).open("a", encoding="utf-8") as f:
            f.write(json.dumps(entry, ensure_ascii=False) + "\n")


@dataclass
class ReplayClient:
    """Serve recorded responses from a transcript JSONL in order."""

    responses: list[str | None]
    position: int = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayClient":
        out = []
        with Path(path).open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    out.append(json.loads(line).get("response"))
        return cls(out)

    def complete(self, messages: list[dict]) -> str:
        if self.position >= len(self.responses):
            raise OracleUnavailable("replay transcript exhausted")
        text = self.responses[self.position]
        self.position += 1
        if text is None:
            raise OracleUnavailable("recorded request had failed")
        return text

