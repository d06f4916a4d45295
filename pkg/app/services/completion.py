import logging
import os
import random
import re
import time
from pathlib import Path
from typing import Optional, Protocol, Sequence, runtime_checkable

import httpx

from app.core.errors import BackendError, ProtocolError
from app.core.seeding import derive_seed, stable_hash
from app.schemas.layout import ImageFrame, caption_names

logger = logging.getLogger(__name__)

_QUERY_RE = re.compile(r"caption: '([^'\n]*)'\s*objects:\s*$")


@runtime_checkable
class CompletionBackend(Protocol):
    backend_id: str
    deterministic: bool

    def complete(self, prompt: str, max_tokens: int, temperature: float, seed: int) -> str:
        ...


def request_hash(prompt: str, seed: int) -> str:
    return stable_hash(prompt, seed)[:32]


class OpenAICompletionBackend:
    """Client for an OpenAI-compatible /completions endpoint (plain auto-completion, no chat format)."""

    deterministic = False

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "AUGMENT_LLM_API_KEY",
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 0.6,
        stop: Sequence[str] = ("\ncaption:",),
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.backend_id = f"openai-completions:{model}"
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.stop = list(stop)
        headers = {}
        api_key = os.getenv(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def complete(self, prompt: str, max_tokens: int, temperature: float, seed: int) -> str:
        body = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": temperature,
            "seed": seed,
            "stop": self.stop,
        }
        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(f"{self.base_url}/completions", json=body, headers=self._headers)
                if response.status_code == 429 or response.status_code >= 500:
                    raise BackendError(f"completion endpoint returned {response.status_code}")
                response.raise_for_status()
            except (httpx.TransportError, BackendError) as err:
                last_error = err
                logger.warning("completion attempt %d/%d failed: %s", attempt, self.max_attempts, err)
                if attempt < self.max_attempts:
                    time.sleep(self.backoff * attempt)
                continue
            except httpx.HTTPStatusError as err:
                raise BackendError(f"completion endpoint rejected the request: {err}") from err
            try:
                return response.json()["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as err:
                raise ProtocolError(f"unexpected completion payload: {response.text[:200]}") from err
        raise BackendError(f"completion endpoint unavailable after {self.max_attempts} attempts: {last_error}")


class MockCompletionBackend:
    """Deterministic stand-in for the language model.

    Canned responses are read from `response_dir/<request hash>.txt` when present;
    otherwise a layout for the query caption is drawn from a seeded generator.
    """

    deterministic = True
    backend_id = "mock-llm"

    def __init__(self, response_dir: Optional[Path] = None, canvas: ImageFrame = ImageFrame(width=512, height=512)):
        self.response_dir = Path(response_dir) if response_dir else None
        self.canvas = canvas

    def save_response(self, prompt: str, seed: int, text: str) -> Path:
        if self.response_dir is None:
            raise ValueError("no response directory configured")
        self.response_dir.mkdir(parents=True, exist_ok=True)
        path = self.response_dir / f"{request_hash(prompt, seed)}.txt"
        path.write_text(text, encoding="utf-8")
        return path

    def complete(self, prompt: str, max_tokens: int, temperature: float, seed: int) -> str:
        key = request_hash(prompt, seed)
        if self.response_dir is not None:
            canned = self.response_dir / f"{key}.txt"
            if canned.exists():
                return canned.read_text(encoding="utf-8")

        match = _QUERY_RE.search(prompt)
        if match is None:
            return ""
        rng = random.Random(derive_seed(seed, key))
        cw, ch = self.canvas.width, self.canvas.height
        entries = []
        for name in caption_names(match.group(1)):
            w = rng.randint(cw // 10, cw // 2)
            h = rng.randint(ch // 10, ch // 2)
            x = rng.randint(0, cw - w)
            y = rng.randint(0, ch - h)
            entries.append(f"'{name}', [{x}, {y}, {w}, {h}]")
        return f" [{', '.join(entries)}]\n"
