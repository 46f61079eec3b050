"""VLM annotation of visual inconsistencies.

Each image is sent to a vision-language model with a fixed prompt asking
whether anything looks unrealistic. The reply is split into a verdict
(yes / no / somewhat) and a free-text description. Replies are cached on
disk by image content hash, so reruns only contact the provider for images
that have no cached answer.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import DatasetManifest
from .errors import ConfigurationError, InvalidInputError, RealmError

log = logging.getLogger(__name__)

DEFAULT_PROMPT = (
    "Is there anything unrealistic in this image — yes, no, or somewhat? If yes or somewhat, "
    "explain in at most 30 words what looks unrealistic, such as a distorted face, uneven object "
    "transitions, or any other feature."
)
SOFT_WORD_LIMIT = 30


class AnnotationError(RealmError):
    pass


class ProviderAuthError(AnnotationError):
    pass


class ProviderTimeoutError(AnnotationError):
    pass


class ResponseParseError(AnnotationError):
    def __init__(self, message, raw):
        super().__init__(f"{message}: {raw!r}")
        self.raw = raw


class PartialAnnotationFailure(AnnotationError):
    """Some records could not be annotated; ``manifest`` holds everything that succeeded."""

    def __init__(self, failures: dict[str, str], manifest: DatasetManifest):
        super().__init__(f"{len(failures)} record(s) failed: {', '.join(sorted(failures))}")
        self.failures = failures
        self.manifest = manifest


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_PROMPT
    version: str = "v1"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def build_prompt(template: PromptTemplate | None = None) -> str:
    return (template or PromptTemplate()).text


@dataclass
class AnnotationResult:
    verdict: str
    description: str
    raw_response: str
    provider: str
    latency_ms: float
    template_version: str = "v1"
    cached: bool = False


_VERDICT_RE = re.compile(r"^\s*\**\s*(yes|no|somewhat)\b[\s\*.,:;!\-—–]*(.*)$",
                         re.IGNORECASE | re.DOTALL)


def parse_response(raw: str) -> tuple[str, str]:
    """Split a reply into ``(verdict, description)``.

    The verdict is the leading yes/no/somewhat token, case-insensitive; the
    description is whatever follows once separating punctuation is dropped.
    """
    if not raw or not raw.strip():
        raise ResponseParseError("empty response", raw)
    m = _VERDICT_RE.match(raw)
    if not m:
        raise ResponseParseError("no yes/no/somewhat verdict", raw)
    verdict = m.group(1).lower()
    description = m.group(2).strip()
    if verdict != "no" and not description:
        raise ResponseParseError(f"verdict {verdict!r} without a description", raw)
    if len(description.split()) > SOFT_WORD_LIMIT:
        log.warning("description exceeds %d words (%d)", SOFT_WORD_LIMIT, len(description.split()))
    return verdict, description


@dataclass
class ProviderConfig:
    name: str = "stub"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4.1"
    api_key_env: str = "OPENAI_API_KEY"  # name of the variable, never the key itself
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 1.0
    temperature: float = 0.0
    cache_dir: str | None = None
    concurrency: int = 4
    min_interval_s: float = 0.0  # per-provider rate limit
    stub_responses: dict = field(default_factory=dict)  # content hash or file name -> reply

    def public_dict(self) -> dict:
        d = asdict(self)
        d.pop("stub_responses")
        return d


class Provider:
    name = "provider"

    def complete(self, image_bytes: bytes, media_type: str, prompt: str) -> str:
        raise NotImplementedError


class StubProvider(Provider):
    """Offline provider: canned replies looked up by image content hash.

    Unknown images get a deterministic reply chosen from the hash, so every
    image in a test manifest can be annotated without a network.
    """

    name = "stub"
    FALLBACK = (
        "No.",
        "Somewhat. Object edges blend unevenly into the background.",
        "Yes. The text on the sign does not form coherent words.",
    )

    def __init__(self, responses: dict | None = None):
        self.responses = dict(responses or {})
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, image_bytes, media_type, prompt):
        with self._lock:
            self.calls += 1
        digest = content_hash(image_bytes)
        if digest in self.responses:
            return self.responses[digest]
        return self.FALLBACK[int(digest[:8], 16) % len(self.FALLBACK)]


class OpenAIChatProvider(Provider):
    """OpenAI-compatible chat completions endpoint with an inline base64 image."""

    name = "openai"

    def __init__(self, config: ProviderConfig, client=None):
        import httpx

        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise ProviderAuthError(f"environment variable {self.config.api_key_env} is not set")
        return key

    def complete(self, image_bytes, media_type, prompt):
        import httpx

        url = f"data:{media_type};base64,{base64.b64encode(image_bytes).decode('ascii')}"
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ]}],
        }
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        try:
            resp = self._client.post(self.config.endpoint, json=body, headers=headers)
        except httpx.TimeoutException as exc:
            raise ProviderTimeoutError(f"{self.config.endpoint} timed out") from exc
        except httpx.HTTPError as exc:
            raise AnnotationError(f"request to {self.config.endpoint} failed: {type(exc).__name__}") from exc
        if resp.status_code in (401, 403):
            raise ProviderAuthError(f"provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderTimeoutError(f"provider unavailable (HTTP {resp.status_code})")
        if resp.status_code != 200:
            raise AnnotationError(f"provider returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ResponseParseError("unexpected response body", resp.text[:200]) from exc


def make_provider(config: ProviderConfig) -> Provider:
    if config.name == "stub":
        return StubProvider(config.stub_responses)
    if config.name == "openai":
        return OpenAIChatProvider(config)
    raise ConfigurationError(f"unknown annotation provider {config.name!r}")


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class AnnotationCache:
    """One JSON file per (provider, template version, image content hash)."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, provider, template_version, digest) -> Path:
        return self.root / provider / template_version / f"{digest}.json"

    def get(self, provider, template_version, digest) -> dict | None:
        p = self._path(provider, template_version, digest)
        if not p.exists():
            return None
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, provider, template_version, digest, payload: dict):
        p = self._path(provider, template_version, digest)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, p)


_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}


class Annotator:
    """Provider + cache + retry + rate limit, shared across worker threads."""

    def __init__(self, config: ProviderConfig, template: PromptTemplate | None = None,
                 provider: Provider | None = None, sleep=time.sleep):
        self.config = config
        self.template = template or PromptTemplate()
        self.provider = provider or make_provider(config)
        self.cache = AnnotationCache(config.cache_dir) if config.cache_dir else None
        self._sleep = sleep
        self._rate_lock = threading.Lock()
        self._last_request = 0.0

    def _throttle(self):
        if self.config.min_interval_s <= 0:
            return
        with self._rate_lock:
            wait = self._last_request + self.config.min_interval_s - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_request = time.monotonic()

    def _call(self, data: bytes, media_type: str) -> tuple[str, float]:
        prompt = build_prompt(self.template)
        for attempt in range(1, self.config.max_attempts + 1):
            self._throttle()
            t0 = time.perf_counter()
            try:
                raw = self.provider.complete(data, media_type, prompt)
                return raw, (time.perf_counter() - t0) * 1000.0
            except ProviderTimeoutError:
                if attempt == self.config.max_attempts:
                    raise
                self._sleep(self.config.backoff_s * 2 ** (attempt - 1))
        raise AssertionError("unreachable")

    def annotate_bytes(self, data: bytes, media_type: str = "image/png") -> AnnotationResult:
        digest = content_hash(data)
        pname = self.config.name
        if self.cache is not None:
            hit = self.cache.get(pname, self.template.version, digest)
            if hit is not None:
                return AnnotationResult(**{**hit, "cached": True})
        raw, latency = self._call(data, media_type)
        verdict, description = parse_response(raw)
        result = AnnotationResult(verdict, description, raw, pname, latency, self.template.version)
        if self.cache is not None:
            payload = asdict(result)
            payload.pop("cached")
            self.cache.put(pname, self.template.version, digest, payload)
        return result

    def annotate_image(self, image_ref) -> AnnotationResult:
        path = Path(image_ref)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise InvalidInputError(f"cannot read image {path}") from exc
        return self.annotate_bytes(data, _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream"))


def annotate_image(image_ref, provider_config: ProviderConfig,
                   template: PromptTemplate | None = None) -> AnnotationResult:
    return Annotator(provider_config, template).annotate_image(image_ref)


def annotate_manifest(manifest: DatasetManifest, provider_config: ProviderConfig,
                      template: PromptTemplate | None = None, force: bool = False,
                      annotator: Annotator | None = None) -> DatasetManifest:
    """Fill verdict + description for every record.

    Records that already carry a verdict are skipped unless ``force``. Up to
    ``provider_config.concurrency`` requests run at once. On partial failure
    raises :class:`PartialAnnotationFailure` carrying the updated manifest.
    """
    annotator = annotator or Annotator(provider_config, template)
    todo = [i for i, r in enumerate(manifest.records) if force or r.verdict == "unknown"]

    def work(i):
        rec = manifest.records[i]
        try:
            return i, annotator.annotate_image(manifest.image_path(rec)), None
        except (AnnotationError, InvalidInputError) as exc:
            return i, None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, provider_config.concurrency)) as pool:
        results = list(pool.map(work, todo))

    records = list(manifest.records)
    failures = {}
    for i, res, err in results:
        if err is not None:
            failures[records[i].id] = err
            continue
        records[i] = replace(records[i], verdict=res.verdict, description=res.description,
                             annotation={"provider": res.provider, "template_version": res.template_version})
    out = manifest.with_records(records)
    if failures:
        raise PartialAnnotationFailure(failures, out)
    return out
