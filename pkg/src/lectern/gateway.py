"""Single access point to external services (LLM chat, TTS).

Every outbound call flows through :class:`Gateway`, which layers retries
with seeded exponential backoff, token-bucket rate limiting, and a
record/replay fixture store keyed by a hash of the canonical request.
Replay mode is a pure hash lookup: it never touches the transport, so a
run against fixtures provably performs zero network activity.

Schema validation of responses belongs to the calling modules; the
gateway is payload-agnostic.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from random import Random
from typing import Callable, Protocol

from .canonical import SchemaError, canonical_bytes, canonical_loads


class GatewayError(RuntimeError):
    pass


class ServiceError(GatewayError):
    """Retries exhausted (or service unconfigured) for the named purpose."""

    def __init__(self, purpose: str, detail: str = ""):
        super().__init__(f"service call failed for {purpose!r}" + (f": {detail}" if detail else ""))
        self.purpose = purpose


class FixtureMiss(GatewayError):
    """Replay-mode lookup found no recorded response for the request hash."""

    def __init__(self, purpose: str, digest: str):
        super().__init__(f"no fixture for {purpose}/{digest}")
        self.purpose = purpose
        self.digest = digest


class TransportError(GatewayError):
    """Transient transport failure; eligible for retry."""


class Service(str, Enum):
    LLM = "llm"
    TTS = "tts"


@dataclass(frozen=True)
class ServiceRequest:
    service: Service
    purpose: str
    payload: bytes  # canonical serialization, so hashing is stable


@dataclass(frozen=True)
class ServiceResponse:
    payload: bytes
    latency_ms: float
    attempt_count: int


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    jitter_frac: float = 0.1

    def delay_s(self, attempt: int, rng: Random) -> float:
        """Backoff before retry number `attempt` (1-based failed attempt)."""
        base = self.backoff_base_s * self.backoff_factor ** (attempt - 1)
        return base * (1.0 + self.jitter_frac * rng.random())


def request_hash(req: ServiceRequest) -> str:
    h = hashlib.sha256()
    h.update(req.service.value.encode("ascii"))
    h.update(b"\n")
    h.update(req.purpose.encode("utf-8"))
    h.update(b"\n")
    h.update(req.payload)
    return h.hexdigest()


class Mode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class Transport(Protocol):
    def send(self, req: ServiceRequest) -> bytes:
        """Response payload bytes; raises TransportError on transient failure."""
        ...


_ENV = {Service.LLM: "LECTERN_LLM", Service.TTS: "LECTERN_TTS"}


class HttpTransport:
    """Chat-completion style HTTPS transport configured from the environment.

    `LECTERN_LLM_ENDPOINT` / `LECTERN_LLM_MODEL` / `LECTERN_LLM_KEY` select
    the LLM backend; `LECTERN_TTS_*` analogously.  The request payload is
    posted as JSON with the configured model injected; the raw response
    body comes back for the caller to validate.
    """

    def __init__(self, timeout_s: float = 60.0):
        import httpx  # deferred so offline use never needs it

        self._client = httpx.Client(timeout=timeout_s)
        self._httpx = httpx

    def send(self, req: ServiceRequest) -> bytes:
        prefix = _ENV[req.service]
        endpoint = os.environ.get(f"{prefix}_ENDPOINT")
        if not endpoint:
            raise ServiceError(req.purpose, f"{prefix}_ENDPOINT is not set")
        body = canonical_loads(req.payload)
        model = os.environ.get(f"{prefix}_MODEL")
        if isinstance(body, dict) and model:
            body = {**body, "model": model}
        headers = {}
        key = os.environ.get(f"{prefix}_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(endpoint, json=body, headers=headers)
        except self._httpx.HTTPError as err:
            raise TransportError(str(err)) from err
        if resp.status_code >= 500:
            raise TransportError(f"status {resp.status_code}")
        if resp.status_code >= 400:
            raise ServiceError(req.purpose, f"status {resp.status_code}")
        return resp.content


class PoisonTransport:
    """Fails loudly if anything tries the network; used to prove replay purity."""

    def __init__(self):
        self.calls = 0

    def send(self, req: ServiceRequest) -> bytes:
        self.calls += 1
        raise AssertionError(f"network transport invoked in replay mode: {req.purpose}")


# ---------------------------------------------------------------------------
# Fixture store
# ---------------------------------------------------------------------------

class FixtureStore:
    """On-disk map: fixtures/<purpose>/<request hash> -> recorded envelope.

    Envelopes hold the decoded request and response payloads as canonical
    JSON, so fixtures are reviewable text.  Writes go through a temp file
    and atomic rename.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def path_for(self, purpose: str, digest: str) -> Path:
        return self.root / purpose / digest

    def load(self, purpose: str, digest: str) -> bytes | None:
        """Recorded response payload bytes, or None when absent."""
        path = self.path_for(purpose, digest)
        if not path.is_file():
            return None
        envelope = canonical_loads(path.read_bytes())
        return canonical_bytes(envelope["response"])

    def store(self, req: ServiceRequest, response_payload: bytes) -> None:
        digest = request_hash(req)
        envelope = {
            "request": {
                "payload": canonical_loads(req.payload),
                "purpose": req.purpose,
                "service": req.service.value,
            },
            "response": canonical_loads(response_payload),
        }
        path = self.path_for(req.purpose, digest)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(canonical_bytes(envelope))
            os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------

class RateLimiter:
    """Token bucket: capacity = one minute's quota, refilled continuously."""

    def __init__(self, per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleeper: Callable[[float], None] = time.sleep):
        if per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self.rate = per_minute / 60.0
        self.capacity = float(per_minute)
        self.tokens = float(per_minute)
        self.clock = clock
        self.sleeper = sleeper
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleeper(wait)


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

class Gateway:
    def __init__(self, transport: Transport | None, store: FixtureStore | None,
                 mode: Mode = Mode.PASSTHROUGH, policy: RetryPolicy = RetryPolicy(),
                 requests_per_minute: float = 6000.0, seed: int = 0,
                 clock: Callable[[], float] = time.monotonic,
                 sleeper: Callable[[float], None] = time.sleep):
        if mode in (Mode.RECORD, Mode.REPLAY) and store is None:
            raise ValueError(f"{mode.value} mode requires a fixture store")
        if mode is not Mode.REPLAY and transport is None:
            raise ValueError(f"{mode.value} mode requires a transport")
        self.transport = transport
        self.store = store
        self.mode = mode
        self.policy = policy
        self.limiter = RateLimiter(requests_per_minute, clock=clock, sleeper=sleeper)
        self.clock = clock
        self.sleeper = sleeper
        self._rng = Random(seed)
        self._rng_lock = threading.Lock()

    def call(self, req: ServiceRequest, policy: RetryPolicy | None = None) -> ServiceResponse:
        if self.mode is Mode.REPLAY:
            digest = request_hash(req)
            payload = self.store.load(req.purpose, digest)
            if payload is None:
                raise FixtureMiss(req.purpose, digest)
            return ServiceResponse(payload=payload, latency_ms=0.0, attempt_count=1)

        policy = policy or self.policy
        last_error: TransportError | None = None
        for attempt in range(1, policy.max_attempts + 1):
            self.limiter.acquire()
            started = self.clock()
            try:
                payload = self.transport.send(req)
            except TransportError as err:
                last_error = err
                if attempt < policy.max_attempts:
                    with self._rng_lock:
                        delay = policy.delay_s(attempt, self._rng)
                    self.sleeper(delay)
                continue
            latency_ms = (self.clock() - started) * 1000.0
            if self.mode is Mode.RECORD:
                self.store.store(req, payload)
            return ServiceResponse(payload=payload, latency_ms=latency_ms,
                                   attempt_count=attempt)
        raise ServiceError(req.purpose, str(last_error)) from last_error


def call_validated(gateway: Gateway, service: Service, purpose: str, payload: dict,
                   validate: Callable[[bytes], object], schema_retries: int = 2,
                   policy: RetryPolicy | None = None):
    """Call with schema-retry: re-ask (bumping the attempt field) on bad shape.

    The attempt number is part of the hashed payload, so a recorded
    bad-then-good exchange replays exactly.  Raises the last SchemaError
    once retries are spent; callers map it to their module's error type.
    """
    last: SchemaError | None = None
    for attempt in range(1, schema_retries + 2):
        body = canonical_bytes({**payload, "attempt": attempt})
        resp = gateway.call(ServiceRequest(service=service, purpose=purpose, payload=body),
                            policy)
        try:
            return validate(resp.payload)
        except SchemaError as err:
            err.raw_response = resp.payload
            last = err
    raise last
