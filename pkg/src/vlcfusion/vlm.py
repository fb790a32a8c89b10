"""Vision-language model backends behind one ``query`` call.

Three backends share the ``complete(request) -> raw text`` protocol:

* :class:`MockVLM` - deterministic, with optional per-question answer
  flips for consistency experiments and an injectable delay;
* :class:`HttpVlmBackend` - chat-completions style JSON over HTTP with
  base64 image parts, temperature 0 and a token-bucket rate limit.

:func:`query` times the call and validates the raw text against the
request's schema tag.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

SCHEMAS = ("caption", "condition_list", "boolean_map")


class VlmError(RuntimeError):
    pass


class VlmNetworkError(VlmError):
    pass


class VlmTimeoutError(VlmError):
    pass


class VlmSchemaError(VlmError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class ImageRef:
    """An image by reference; ``path`` is read only by backends that send pixels."""

    ref: str
    path: str | None = None


@dataclass(frozen=True)
class VlmRequest:
    system_prompt: str
    user_prompt: str
    images: tuple[ImageRef, ...] = ()
    schema: str = "caption"
    n_keys: int | None = None

    def __post_init__(self):
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown schema tag {self.schema!r}")
        if self.schema == "boolean_map" and (self.n_keys is None or self.n_keys < 1):
            raise ValueError("boolean_map requests need n_keys >= 1")

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.system_prompt, self.user_prompt, self.schema, str(self.n_keys)):
            h.update(part.encode("utf-8"))
            h.update(b"\0")
        for im in self.images:
            h.update(im.ref.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()


@dataclass
class VlmResponse:
    raw_text: str
    parsed: Any
    latency: float
    attempts: int = 1


@dataclass
class BackendProfile:
    name: str
    params_note: str
    seconds_per_image: float

    def __post_init__(self):
        if not self.seconds_per_image > 0:
            raise ValueError("seconds_per_image must be positive")


# Reported reference timings for real VLMs, for comparison tables only.
REFERENCE_PROFILES = (
    BackendProfile("gpt-4o", ">100B (public estimate)", 2.0),
    BackendProfile("moondream2", "1.9B", 0.7),
    BackendProfile("smolvlm-instruct", "2.2B", 1.0),
)


class Backend(Protocol):
    name: str

    def complete(self, request: VlmRequest) -> str: ...


# =============================================================================
# parsing
# =============================================================================

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.IGNORECASE)


def _load_json(raw: str) -> Any:
    text = _FENCE.sub("", raw.strip())
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    # tolerate Python-style literals, a common VLM slip
    fixed = re.sub(r"\bTrue\b", "true", re.sub(r"\bFalse\b", "false", text))
    try:
        return json.loads(fixed)
    except json.JSONDecodeError as exc:
        raise VlmSchemaError(f"response is not JSON: {exc}", raw) from None


def _as_bool(v: Any) -> bool | None:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("true", "false"):
        return v.strip().lower() == "true"
    return None


def parse_response(raw: str, schema: str, n_keys: int | None = None) -> Any:
    """Validate ``raw`` against a schema tag.

    * ``caption`` -> str from ``{"Conditions": "<description>"}``
    * ``condition_list`` -> list[str] from ``{"Conditions": [...]}``
    * ``boolean_map`` -> list[bool] of length ``n_keys`` from an object with
      exactly the keys "1".."n_keys"
    """
    obj = _load_json(raw)
    if schema in ("caption", "condition_list"):
        if not isinstance(obj, dict) or "Conditions" not in obj:
            raise VlmSchemaError('expected an object with key "Conditions"', raw)
        val = obj["Conditions"]
        if schema == "caption":
            if not isinstance(val, str) or not val.strip():
                raise VlmSchemaError('"Conditions" must be a non-empty string', raw)
            return val.strip()
        if not isinstance(val, list) or not all(isinstance(q, str) for q in val):
            raise VlmSchemaError('"Conditions" must be a list of strings', raw)
        return [q.strip() for q in val if q.strip()]
    if schema == "boolean_map":
        if not isinstance(obj, dict):
            raise VlmSchemaError("expected a JSON object", raw)
        want = {str(i) for i in range(1, n_keys + 1)}
        keys = set(obj)
        if keys != want:
            missing = sorted(want - keys, key=int)
            extra = sorted(keys - want)
            raise VlmSchemaError(f"key mismatch: missing={missing} extra={extra}", raw)
        out = []
        for i in range(1, n_keys + 1):
            b = _as_bool(obj[str(i)])
            if b is None:
                raise VlmSchemaError(f"key {i!r} is not a boolean: {obj[str(i)]!r}", raw)
            out.append(b)
        return out
    raise ValueError(f"unknown schema tag {schema!r}")


def query(request: VlmRequest, backend: Backend) -> VlmResponse:
    """One attempt: call the backend, time it, parse by schema.

    Raises :class:`VlmNetworkError`, :class:`VlmTimeoutError` or
    :class:`VlmSchemaError`.
    """
    t0 = time.perf_counter()
    raw = backend.complete(request)
    latency = time.perf_counter() - t0
    parsed = parse_response(raw, request.schema, request.n_keys)
    return VlmResponse(raw, parsed, latency)


# =============================================================================
# mock backend
# =============================================================================

QUESTION_LINE = re.compile(r"^\s*(\d+)\.\s+(.+?)\s*$", re.MULTILINE)


def parse_question_list(user_prompt: str) -> list[str]:
    """Recover the numbered question list ("1. ...") from a generation prompt."""
    found = QUESTION_LINE.findall(user_prompt)
    return [q for _, q in sorted(((int(i), q) for i, q in found), key=lambda t: t[0])]


class MockVLM:
    """Deterministic stand-in for a VLM.

    Parameters
    ----------
    captions : callable(ref) -> str
        Caption text per image reference.
    extracted : list of str
        Question list returned for every extraction request.
    answer : callable(ref, question) -> bool
        Ground-truth answer per image and question.
    flip : float, mapping question -> float, or callable(question) -> float
        Probability of flipping each answer. Draws come from a generator
        seeded by ``(seed, request digest, n-th occurrence of that request)``,
        so repeated identical requests see independent flips while the whole
        run stays reproducible.
    delay : float
        Seconds slept per call, for timing benchmarks.
    responder : callable(request, call_index) -> str, optional
        Replaces all of the above with a scripted raw reply.
    """

    def __init__(
        self,
        captions: Callable[[str], str] | None = None,
        extracted: Sequence[str] = (),
        answer: Callable[[str, str], bool] | None = None,
        flip: float | Mapping[str, float] | Callable[[str], float] = 0.0,
        seed: int = 0,
        delay: float = 0.0,
        responder: Callable[[VlmRequest, int], str] | None = None,
        name: str = "mock",
    ):
        self.captions = captions or (lambda ref: f"A scene ({ref}).")
        self.extracted = list(extracted)
        self.answer = answer or (lambda ref, q: False)
        self.flip = flip
        self.seed = seed
        self.delay = delay
        self.responder = responder
        self.name = name
        self._lock = threading.Lock()
        self._calls = 0
        self._seen: dict[str, int] = {}

    def _flip_prob(self, question: str) -> float:
        if callable(self.flip):
            return float(self.flip(question))
        if isinstance(self.flip, Mapping):
            return float(self.flip.get(question, 0.0))
        return float(self.flip)

    def complete(self, request: VlmRequest) -> str:
        digest = request.digest()
        with self._lock:
            call_index = self._calls
            self._calls += 1
            occurrence = self._seen.get(digest, 0)
            self._seen[digest] = occurrence + 1
        if self.delay:
            time.sleep(self.delay)
        if self.responder is not None:
            return self.responder(request, call_index)
        ref = request.images[0].ref if request.images else ""
        if request.schema == "caption":
            return json.dumps({"Conditions": self.captions(ref)})
        if request.schema == "condition_list":
            return json.dumps({"Conditions": list(self.extracted)})
        questions = parse_question_list(request.user_prompt)
        rng = np.random.default_rng([self.seed, int(digest[:15], 16), occurrence])
        out = {}
        for i, q in enumerate(questions, start=1):
            ans = bool(self.answer(ref, q))
            p = self._flip_prob(q)
            if p > 0 and rng.random() < p:
                ans = not ans
            out[str(i)] = ans
        return json.dumps(out)


# =============================================================================
# HTTP backend
# =============================================================================


class TokenBucket:
    """Blocking token bucket; ``rate`` tokens per second, burst ``capacity``."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class VlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    api_key: str = ""
    model: str = "gpt-4o"
    timeout: float = 60.0
    max_retries: int = 3
    rate_limit: float = 2.0

    ENV = {
        "endpoint": "VLCFUSION_VLM_ENDPOINT",
        "api_key": "VLCFUSION_VLM_API_KEY",
        "model": "VLCFUSION_VLM_MODEL",
        "timeout": "VLCFUSION_VLM_TIMEOUT",
        "max_retries": "VLCFUSION_VLM_MAX_RETRIES",
        "rate_limit": "VLCFUSION_VLM_RATE_LIMIT",
    }

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> "VlmConfig":
        environ = os.environ if environ is None else environ
        cfg = cls()
        for attr, key in cls.ENV.items():
            if key in environ:
                typ = type(getattr(cfg, attr))
                setattr(cfg, attr, typ(environ[key]))
        return cfg


def image_data_url(image: ImageRef) -> str:
    """Base64 data URL for an image file; ``.npz`` scenes are rendered to PNG."""
    if image.path is None:
        raise VlmError(f"image {image.ref!r} has no path to send")
    path = Path(image.path)
    if path.suffix == ".npz":
        from PIL import Image

        with np.load(path) as z:
            arr = np.asarray(z["modality_a"], dtype=np.float64)
        arr = np.moveaxis(arr[:3], 0, -1) if arr.shape[0] >= 3 else np.repeat(arr[0][..., None], 3, -1)
        lo, hi = float(arr.min()), float(arr.max())
        arr = ((arr - lo) / (hi - lo if hi > lo else 1.0) * 255).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        data, mime = buf.getvalue(), "image/png"
    else:
        data = path.read_bytes()
        mime = {".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}.get(path.suffix.lower(), "image/png")
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


class HttpVlmBackend:
    """Chat-completions style endpoint. Requests ``temperature: 0``."""

    def __init__(self, config: VlmConfig | None = None, client=None):
        import httpx

        self.config = config or VlmConfig.from_env()
        self.name = f"http:{self.config.model}"
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=self.config.timeout)
        self._bucket = TokenBucket(self.config.rate_limit)

    def build_payload(self, request: VlmRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.user_prompt}]
        for im in request.images:
            content.append({"type": "image_url", "image_url": {"url": image_data_url(im)}})
        return {
            "model": self.config.model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content},
            ],
        }

    def complete(self, request: VlmRequest) -> str:
        self._bucket.acquire()
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = self._client.post(self.config.endpoint, json=self.build_payload(request), headers=headers)
        except self._httpx.TimeoutException as exc:
            raise VlmTimeoutError(f"request timed out: {exc}") from exc
        except self._httpx.HTTPError as exc:
            raise VlmNetworkError(f"transport failure: {exc}") from exc
        if resp.status_code >= 400:
            raise VlmNetworkError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise VlmSchemaError(f"unexpected completion envelope: {exc}", resp.text) from exc


# =============================================================================
# timing
# =============================================================================


def benchmark_backend(backend: Backend, images: Sequence[ImageRef], system_prompt: str = "",
                      user_prompt: str = "Provide a description based on the following image.") -> BackendProfile:
    """Mean wall-clock seconds per image for captioning requests."""
    images = list(images)
    if not images:
        raise ValueError("benchmark_backend needs at least one image")
    t0 = time.perf_counter()
    for im in images:
        backend.complete(VlmRequest(system_prompt, user_prompt, (im,), "caption"))
    per_image = (time.perf_counter() - t0) / len(images)
    return BackendProfile(getattr(backend, "name", type(backend).__name__), "n/a", max(per_image, 1e-9))
