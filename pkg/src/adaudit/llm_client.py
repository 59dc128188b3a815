"""Model backends, content-addressed response cache, retries and rate limits.

Every model call goes through :class:`LLMClient.call`.  Requests are keyed by
a SHA-256 digest over the template id, the rendered prompt, the bytes of any
attached images, the sampling settings and the subject the request is about.
Two requests share a cache entry only if those inputs are identical (modulo a
SHA-256 collision, which is assumed not to happen).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from .categories import ATTRIBUTES, PREDICTION_CLASSES

log = logging.getLogger(__name__)

ENV_URL = "AD_AUDIT_BACKEND_URL"
ENV_KEY = "AD_AUDIT_BACKEND_KEY"

# Sampling defaults: mild creativity for captions, deterministic for inference.
EXTRACTION_SETTINGS = {"temperature": 0.3, "max_output_tokens": 1024}
RECONSTRUCTION_SETTINGS = {"temperature": 0.0, "max_output_tokens": 1024}


class TransportError(RuntimeError):
    """The backend could not produce a response within the retry budget."""


@dataclass(frozen=True)
class BackendRequest:
    template_id: str
    prompt: str
    image_refs: tuple[str, ...] = ()
    settings: Mapping[str, float] = field(default_factory=dict)
    subject: str = ""

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.template_id, self.prompt, self.subject):
            b = part.encode("utf-8")
            h.update(len(b).to_bytes(8, "big"))
            h.update(b)
        for ref in self.image_refs:
            data = _image_bytes(ref)
            h.update(len(data).to_bytes(8, "big"))
            h.update(data)
        settings = json.dumps(dict(self.settings), sort_keys=True).encode()
        h.update(settings)
        return h.hexdigest()


def _image_bytes(ref: str) -> bytes:
    # remote refs (and missing files) contribute their reference string
    p = Path(ref)
    try:
        if p.is_file():
            return p.read_bytes()
    except OSError:
        pass
    return ("ref:" + ref).encode("utf-8")


@dataclass
class BackendResponse:
    text: str
    latency: float
    backend: str
    cached: bool = False
    request_hash: str = ""

    def payload(self):
        return parse_json_payload(self.text)


def parse_json_payload(text: str):
    """Parse a JSON object, tolerating a surrounding markdown code fence."""
    t = text.strip()
    if t.startswith("```"):
        t = t.split("\n", 1)[1] if "\n" in t else ""
        if t.rstrip().endswith("```"):
            t = t.rstrip()[:-3]
    obj = json.loads(t)
    if not isinstance(obj, dict):
        raise ValueError("structured response is not a JSON object")
    return obj


class Backend(Protocol):
    tag: str

    def complete(self, request: BackendRequest) -> str: ...


# ---------------------------------------------------------------------------
# Cache


class ResponseCache:
    """One JSON file per request hash under ``root/ab/cd/<hash>.json``."""

    def __init__(self, root):
        self.root = Path(root)
        self.quarantine = self.root / "quarantine"

    def path(self, key: str) -> Path:
        return self.root / key[:2] / key[2:4] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        p = self.path(key)
        try:
            raw = p.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            rec = json.loads(raw)
            if rec.get("hash") != key or not isinstance(rec.get("text"), str):
                raise ValueError("record does not match its key")
            return rec
        except (ValueError, AttributeError):
            self.quarantine.mkdir(parents=True, exist_ok=True)
            dest = self.quarantine / f"{key}.{time.time_ns()}.json"
            try:
                os.replace(p, dest)
            except FileNotFoundError:
                pass
            log.warning("quarantined corrupt cache entry %s", key)
            return None

    def put(self, key: str, record: dict) -> None:
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, p)


class MemoryCache:
    def __init__(self):
        self._d: dict[str, dict] = {}
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            return self._d.get(key)

    def put(self, key, record):
        with self._lock:
            self._d[key] = dict(record)


# ---------------------------------------------------------------------------
# Rate limiting


class TokenBucket:
    def __init__(self, per_minute: float, burst: int | None = None, clock=time.monotonic, sleep=time.sleep):
        if per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self.rate = per_minute / 60.0
        self.capacity = float(burst if burst is not None else max(1, int(per_minute // 60) or 1))
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a token is available; returns seconds waited."""
        waited = 0.0
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return waited
                need = (1.0 - self.tokens) / self.rate
            self.sleep(need)
            waited += need


# ---------------------------------------------------------------------------
# Client


class LLMClient:
    def __init__(
        self,
        backend: Backend,
        cache=None,
        max_attempts: int = 5,
        backoff_base: float = 0.5,
        backoff_cap: float = 30.0,
        rate_limiter: TokenBucket | None = None,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache = cache if cache is not None else MemoryCache()
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.rate_limiter = rate_limiter
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.network_calls = 0
        self._count_lock = threading.Lock()

    def call(self, request: BackendRequest) -> BackendResponse:
        key = request.hash
        hit = self.cache.get(key)
        if hit is not None:
            return BackendResponse(hit["text"], 0.0, hit.get("backend", ""), True, key)
        last_exc: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                delay = min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))
                self.sleep(delay)
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            t0 = time.perf_counter()
            try:
                with self._slots:
                    with self._count_lock:
                        self.network_calls += 1
                    text = self.backend.complete(request)
            except Exception as exc:  # noqa: BLE001 - every failure is retried
                last_exc = exc
                log.info("backend attempt %d failed: %s", attempt + 1, exc)
                continue
            if not text or not text.strip():
                last_exc = TransportError("empty response")
                continue
            latency = time.perf_counter() - t0
            self.cache.put(key, {"hash": key, "text": text, "backend": self.backend.tag,
                                 "template_id": request.template_id})
            return BackendResponse(text, latency, self.backend.tag, False, key)
        raise TransportError(
            f"backend {self.backend.tag!r} failed {self.max_attempts} times: {last_exc}"
        ) from last_exc


# ---------------------------------------------------------------------------
# HTTP backend (OpenAI-style chat completions)


class HttpBackend:
    tag = "http"

    def __init__(self, url: str | None = None, model: str = "", key_env: str = ENV_KEY,
                 timeout: float = 120.0, transport=None):
        import httpx

        self.url = url or os.environ.get(ENV_URL, "")
        if not self.url:
            raise ValueError(f"no backend URL; set {ENV_URL} or backend.url in the config")
        self.model = model
        key = os.environ.get(key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, request: BackendRequest) -> str:
        import base64

        content: list[dict] = [{"type": "text", "text": request.prompt}]
        for ref in request.image_refs:
            if ref.startswith(("http://", "https://")):
                content.append({"type": "image_url", "image_url": {"url": ref}})
            else:
                b64 = base64.b64encode(Path(ref).read_bytes()).decode()
                content.append({"type": "image_url",
                                "image_url": {"url": f"data:image/jpeg;base64,{b64}"}})
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.settings.get("temperature", 0.0),
            "max_tokens": int(request.settings.get("max_output_tokens", 1024)),
            "response_format": {"type": "json_object"},
        }
        resp = self._client.post(self.url, json=body)
        resp.raise_for_status()
        data = resp.json()
        return data["choices"][0]["message"]["content"]


# ---------------------------------------------------------------------------
# Deterministic mock


_SUMMARY_SENTENCES = (
    "The session mixes {a} promotions with {b} messaging.",
    "Most ads lean on a {style} tone.",
    "Recurring entities include {ents}.",
    "Offers are framed around discounts and limited-time calls to action.",
    "No single advertiser dominates the sequence.",
)


class MockBackend:
    """Schema-valid responses as a pure function of (seed, request).

    Feature requests: the IAB categories are the taxonomy names that appear in
    the ad text (falling back to a hash-chosen one).  Demographic requests:
    with probability ``truth_rate[attr]`` the injected truth for the subject's
    user is returned, otherwise a uniform draw over the attribute's classes.
    """

    tag = "mock"

    def __init__(self, seed: int = 0, taxonomy=None, truths=None,
                 truth_rate: float | Mapping[str, float] = 0.0):
        self.seed = int(seed)
        self.taxonomy = list(taxonomy) if taxonomy is not None else None
        self.truths = truths or {}
        if isinstance(truth_rate, Mapping):
            self.truth_rate = {a: float(truth_rate.get(a, 0.0)) for a in ATTRIBUTES}
        else:
            self.truth_rate = {a: float(truth_rate) for a in ATTRIBUTES}

    def _rng(self, request: BackendRequest) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}:{request.hash}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def complete(self, request: BackendRequest) -> str:
        rng = self._rng(request)
        if request.template_id == "features":
            return json.dumps(self._features(request, rng), sort_keys=True)
        return json.dumps(self._demographics(request, rng), sort_keys=True)

    def _features(self, request, rng):
        from .features import DEFAULT_TAXONOMY_PATH, load_taxonomy

        tax = self.taxonomy or load_taxonomy(DEFAULT_TAXONOMY_PATH).entries
        text = request.prompt
        marker = "The title of the advertisment(s) is:"
        ad_text = text[text.find(marker):] if marker in text else text
        # stop before the instructions that list every taxonomy entry
        end = ad_text.find("\nEnsure")
        ad_text = ad_text[:end] if end >= 0 else ad_text
        cats = [c for c in tax
                if re.search(r"(?<![A-Za-z])" + re.escape(c.lower()) + r"(?![A-Za-z])", ad_text.lower())]
        if not cats:
            cats = [tax[int(rng.integers(len(tax)))]]
        words = [w.strip(".,:;!?\"'()") for w in ad_text.split()]
        ents = []
        for w in words:
            if len(w) > 2 and w[:1].isupper() and w not in ents and w not in ("The", "Ensure"):
                ents.append(w)
        ents = ents[:5] or ["advertiser"]
        style = ["Promotional", "Informative", "Urgent", "Friendly", "Aspirational"]
        k = int(rng.integers(1, 3))
        picks = rng.choice(len(style), size=k, replace=False)
        return {
            "caption": f"An advertisement about {', '.join(cats).lower()} featuring {', '.join(ents[:3])}.",
            "descriptive_category": [style[i] for i in sorted(picks)],
            "iab_category_tier_1": cats,
            "key_entities_in_images_and_slogan": ents,
        }

    def _demographics(self, request, rng):
        user = request.subject.split("#", 1)[0]
        truth = self.truths.get(user)
        au = request.template_id == "user_au"
        out = {}
        for attr in ATTRIBUTES:
            classes = PREDICTION_CLASSES[attr]
            u = rng.random()
            pick = classes[int(rng.integers(len(classes)))]
            if truth is not None and u < self.truth_rate[attr]:
                t = truth.get(attr)
                if t in classes:
                    pick = t
            if attr == "party" and au and pick == "Liberal (National Coalition)":
                pick = "National" if rng.random() < 0.5 else "Liberal"
            out[attr] = pick
        if request.template_id == "session":
            out["summary"] = self._summary(request.prompt, rng)
        return out

    def _summary(self, prompt: str, rng) -> str:
        cats = []
        for line in prompt.splitlines():
            line = line.strip()
            if line.startswith("Category:"):
                for c in line[len("Category:"):].split(","):
                    c = c.strip()
                    if c and c not in cats:
                        cats.append(c)
        cats = cats or ["general"]
        a = cats[0]
        b = cats[1] if len(cats) > 1 else cats[0]
        n = int(rng.integers(3, 6))
        s = [
            _SUMMARY_SENTENCES[0].format(a=a, b=b),
            _SUMMARY_SENTENCES[1].format(style=["promotional", "informative", "urgent"][int(rng.integers(3))]),
            _SUMMARY_SENTENCES[2].format(ents=", ".join(cats[:3])),
            _SUMMARY_SENTENCES[3],
            _SUMMARY_SENTENCES[4],
        ]
        return " ".join(s[:n])


class ScriptedBackend:
    """Replays canned responses in order; an Exception item is raised."""

    tag = "scripted"

    def __init__(self, responses):
        self._responses = list(responses)
        self.requests: list[BackendRequest] = []
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.requests.append(request)
            if not self._responses:
                raise TransportError("script exhausted")
            item = self._responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def mock_backend(seed: int = 0, **kwargs) -> MockBackend:
    return MockBackend(seed=seed, **kwargs)
