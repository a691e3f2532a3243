"""
External-service boundary: text generation, web search and sentence encoding.

Each service has a deterministic mock backed by a JSON fixture file and a
thin HTTP implementation. Mocks never touch the network and are read-only
after load, so one instance can serve every worker thread.
"""

import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence
from urllib.parse import urlparse

import httpx
import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .config import ClientConfig
from .errors import ConfigError, FatalClientError, RetryableClientError
from .utils import load_json

logger = logging.getLogger(__name__)

MAX_SNIPPETS = 10
SOURCES = ("wikipedia", "news", "other")

ENV_LM_ENDPOINT = "ROWCOMP_LM_ENDPOINT"
ENV_LM_API_KEY = "ROWCOMP_LM_API_KEY"
ENV_SEARCH_ENDPOINT = "ROWCOMP_SEARCH_ENDPOINT"
ENV_SEARCH_API_KEY = "ROWCOMP_SEARCH_API_KEY"


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    samples: int = 100
    temperature: float = 0.7
    max_sentences: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_sentences < 1:
            raise ValueError("max_sentences must be >= 1")


@dataclass(frozen=True)
class Generation:
    text: str
    score: Optional[float] = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("Generation text must be non-empty")


@dataclass(frozen=True)
class SearchSnippet:
    url: str
    description: str
    source: str = "other"

    def __post_init__(self):
        if not self.description:
            raise ValueError("Snippet description must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"Unknown snippet source {self.source!r}")

    def to_dict(self) -> Dict:
        return {"url": self.url, "description": self.description, "source": self.source}


class TextGenerator(Protocol):
    def generate(self, request: GenerationRequest) -> List[Generation]:
        ...


class SearchClient(Protocol):
    def search(self, keywords: Sequence[str], restrict: Optional[Sequence[str]] = None) -> List[SearchSnippet]:
        ...


class SentenceEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray:
        ...


def search_key(keywords: Sequence[str]) -> str:
    """Fixture key for a keyword multiset: sorted keywords joined by ' | '."""
    return " | ".join(sorted(str(k) for k in keywords))


def source_of_url(url: str) -> str:
    host = (urlparse(url).hostname or "").lower()
    if host == "wikipedia.org" or host.endswith(".wikipedia.org"):
        return "wikipedia"
    return "other"


class _CallCounter:
    """Thread-safe call counter shared by the mocks."""

    def __init__(self):
        self._calls = 0
        self._lock = threading.Lock()

    def _record_call(self):
        with self._lock:
            self._calls += 1

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls


def _read_fixture(path) -> Dict:
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: fixture must be a JSON object")
    return data


# ----------------------------------------------------------------------
# Mocks
# ----------------------------------------------------------------------

class MockTextGenerator(_CallCounter):
    """
    Prompt -> generations map.

    Fixture values are lists of strings or of {"text", "score"} objects.
    Unknown prompts yield no generations.
    """

    def __init__(self, outputs: Optional[Dict[str, list]] = None):
        super().__init__()
        self._outputs: Dict[str, List[Generation]] = {}
        for prompt, items in (outputs or {}).items():
            generations = []
            for item in items:
                if isinstance(item, str):
                    if item:
                        generations.append(Generation(item))
                elif isinstance(item, dict) and item.get("text"):
                    score = item.get("score")
                    generations.append(Generation(item["text"], None if score is None else float(score)))
                else:
                    raise ConfigError(f"Invalid generation fixture entry for prompt {prompt!r}: {item!r}")
            self._outputs[prompt] = generations

    @classmethod
    def from_file(cls, path) -> 'MockTextGenerator':
        return cls(_read_fixture(path))

    def generate(self, request: GenerationRequest) -> List[Generation]:
        self._record_call()
        return list(self._outputs.get(request.prompt, [])[:request.samples])


class MockSearchClient(_CallCounter):
    """
    Keyword set -> snippets map, keyed by `search_key`.

    Fixture entries carry `url`, `source` and either `description` or the
    raw `name` and `snippet` fields.
    """

    def __init__(self, results: Optional[Dict[str, list]] = None):
        super().__init__()
        self._results: Dict[str, List[SearchSnippet]] = {}
        for key, items in (results or {}).items():
            normalized = search_key(key.split(" | "))
            self._results[normalized] = [self._snippet(key, item) for item in items]

    @staticmethod
    def _snippet(key: str, item) -> SearchSnippet:
        if not isinstance(item, dict):
            raise ConfigError(f"Invalid search fixture entry for {key!r}: {item!r}")
        description = item.get("description")
        if description is None:
            description = f"{item.get('name', '')} {item.get('snippet', '')}".strip()
        url = item.get("url", "")
        return SearchSnippet(url=url, description=description, source=item.get("source") or source_of_url(url))

    @classmethod
    def from_file(cls, path) -> 'MockSearchClient':
        return cls(_read_fixture(path))

    def search(self, keywords: Sequence[str], restrict: Optional[Sequence[str]] = None) -> List[SearchSnippet]:
        if not keywords:
            raise ValueError("search requires at least one keyword")
        self._record_call()
        snippets = self._results.get(search_key(keywords), [])
        if restrict:
            allowed = set(restrict)
            snippets = [s for s in snippets if s.source in allowed]
        return snippets[:MAX_SNIPPETS]


# ----------------------------------------------------------------------
# HTTP
# ----------------------------------------------------------------------

IDEMPOTENT_METHODS = frozenset({"GET", "HEAD", "OPTIONS", "PUT", "DELETE"})


class _HttpClient:
    """
    Shared httpx plumbing with exponential-backoff retries.

    Idempotent requests retry on 429, 5xx and transport errors. Other
    requests (POST generation) retry only when the connection could not be
    opened, so a request the server may have processed is never resent.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout_s: float = 30.0,
                 max_attempts: int = 3, backoff_s: float = 1.0, transport: Optional[httpx.BaseTransport] = None):
        if not endpoint:
            raise ConfigError(f"{type(self).__name__} needs an endpoint")
        self.endpoint = endpoint
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=httpx.Timeout(timeout_s), headers=headers, transport=transport)

    def close(self):
        self._client.close()

    def _request(self, method: str, **kwargs) -> Dict:
        idempotent = method.upper() in IDEMPOTENT_METHODS
        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.request(method, self.endpoint, **kwargs)
            except (httpx.TimeoutException, httpx.TransportError) as e:
                last_error = RetryableClientError(f"{method} {self.endpoint} failed: {e}")
                if not idempotent and not isinstance(e, (httpx.ConnectError, httpx.ConnectTimeout)):
                    raise last_error from e
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise FatalClientError(f"{self.endpoint} returned invalid JSON: {e}")
                message = f"{self.endpoint} returned HTTP {response.status_code}"
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = RetryableClientError(message)
                    if not idempotent:
                        raise last_error
                else:
                    raise FatalClientError(message)

            if attempt < self.max_attempts:
                wait_time = self.backoff_s * (2 ** (attempt - 1))
                logger.warning("%s, retrying in %.1fs (attempt %d/%d)", last_error, wait_time, attempt, self.max_attempts)
                time.sleep(wait_time)
        raise last_error


class HttpTextGenerator(_HttpClient):
    """Completion-style JSON API; generation score is the mean token log-probability."""

    TOKENS_PER_SENTENCE = 32

    def generate(self, request: GenerationRequest) -> List[Generation]:
        payload = {
            "prompt": request.prompt,
            "n": request.samples,
            "temperature": request.temperature,
            "max_tokens": self.TOKENS_PER_SENTENCE * request.max_sentences,
            "logprobs": 1,
        }
        data = self._request("POST", json=payload)
        generations = []
        for choice in data.get("choices", [])[:request.samples]:
            text = (choice.get("text") or "").strip()
            if not text:
                continue
            logprobs = (choice.get("logprobs") or {}).get("token_logprobs") or []
            logprobs = [lp for lp in logprobs if lp is not None]
            score = float(np.mean(logprobs)) if logprobs else None
            generations.append(Generation(text, score))
        return generations


class HttpSearchClient(_HttpClient):
    """Bing-style web search API returning `webPages` and `news` results."""

    def search(self, keywords: Sequence[str], restrict: Optional[Sequence[str]] = None) -> List[SearchSnippet]:
        if not keywords:
            raise ValueError("search requires at least one keyword")
        data = self._request("GET", params={"q": " ".join(keywords), "count": MAX_SNIPPETS})

        snippets = []
        for item in (data.get("webPages") or {}).get("value", []):
            snippets.append(self._to_snippet(item, source_of_url(item.get("url", ""))))
        for item in (data.get("news") or {}).get("value", []):
            snippets.append(self._to_snippet(item, "news"))
        snippets = [s for s in snippets if s is not None]
        if restrict:
            allowed = set(restrict)
            snippets = [s for s in snippets if s.source in allowed]
        return snippets[:MAX_SNIPPETS]

    @staticmethod
    def _to_snippet(item: Dict, source: str) -> Optional[SearchSnippet]:
        description = f"{item.get('name', '')} {item.get('snippet') or item.get('description', '')}".strip()
        if not description:
            return None
        return SearchSnippet(url=item.get("url", ""), description=description, source=source)


# ----------------------------------------------------------------------
# Sentence encoding
# ----------------------------------------------------------------------

class HashingSentenceEncoder:
    """Token-level TF hashing into 256 dimensions, L2-normalized."""

    def __init__(self, dim: int = 256):
        self.dim = dim
        self._vectorizer = HashingVectorizer(
            analyzer="word",
            n_features=dim,
            alternate_sign=False,
            norm="l2",
            lowercase=True,
        )

    def encode(self, text: str) -> np.ndarray:
        return self._vectorizer.transform([text]).toarray()[0]

    def encode_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return self._vectorizer.transform(list(texts)).toarray()


@dataclass
class Clients:
    generator: TextGenerator
    search: SearchClient
    encoder: SentenceEncoder


def _mock_path(selection: str, base_dir: Optional[Path]) -> Path:
    path = Path(selection[len("mock:"):])
    if not path.is_absolute() and base_dir is not None and not path.exists():
        path = base_dir / path
    return path


def build_clients(config: ClientConfig, base_dir: Optional[Path] = None) -> Clients:
    """
    Instantiate the clients named in the config.

    Args:
        config: Client selection (`mock:<path>` or `http` per service)
        base_dir: Directory relative mock paths fall back to

    Returns:
        Clients bundle
    """
    if config.generator.startswith("mock:"):
        generator = MockTextGenerator.from_file(_mock_path(config.generator, base_dir))
    elif config.generator == "http":
        generator = HttpTextGenerator(
            os.environ.get(ENV_LM_ENDPOINT, ""), os.environ.get(ENV_LM_API_KEY),
            timeout_s=config.timeout_s, max_attempts=config.max_attempts,
        )
    else:
        raise ConfigError(f"Unknown generator client {config.generator!r}")

    if config.search.startswith("mock:"):
        search = MockSearchClient.from_file(_mock_path(config.search, base_dir))
    elif config.search == "http":
        search = HttpSearchClient(
            os.environ.get(ENV_SEARCH_ENDPOINT, ""), os.environ.get(ENV_SEARCH_API_KEY),
            timeout_s=config.timeout_s, max_attempts=config.max_attempts,
        )
    else:
        raise ConfigError(f"Unknown search client {config.search!r}")

    if config.encoder != "hashing":
        raise ConfigError(f"Unknown sentence encoder {config.encoder!r}")

    logger.info("Clients: generator=%s search=%s encoder=%s", config.generator, config.search, config.encoder)
    return Clients(generator=generator, search=search, encoder=HashingSentenceEncoder())
