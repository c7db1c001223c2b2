"""Prompt construction and concurrent dispatch to model backends.

Three backend kinds share one async ``invoke(payload) -> str`` contract:
live HTTP (one adapter per provider API family), replay (canned responses
keyed by backend and case) and mock (a seeded classifier with a fixed
sensitivity/specificity).
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Awaitable, Callable, Mapping, Optional, Protocol, Sequence, Union

from .core import CaseRecord, ModelOutput, ValidationError, Verdict, CxrFusionError
from .parser import parse_response

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Assume you are a radiology assistant. Based on given X-ray(s) and its clinical context, "
    "identify any possible or tentative diseases out of the following list (or none):\n"
    "Enlarged Cardiomediastinum, Cardiomegaly, Lung Opacity, Lung Lesion, Edema, Consolidation, "
    "Pneumonia, Atelectasis,\n"
    "Pneumothorax, Pleural Effusion, Pleural Other, Fracture, Support Devices. "
    'If you identify any, output a single digit "1," otherwise output "0."\n'
    "Note: For research use only. Do not use for clinical decisions.\n"
    "\n"
    "Context: {context}\n"
    "Question: {question}\n"
    "\n"
    "Respond in this format:\n"
    "POSSIBLE DIAGNOSES:\n"
    "<either 1 or 0>"
)

DEFAULT_QUESTION = "Does this chest X-ray show any of the listed abnormalities?"


def build_prompt(context: str, question: str) -> str:
    """Fill the fixed radiology-assistant template; ``question`` must be non-empty."""
    if not question or not question.strip():
        raise ValidationError("question must be non-empty")
    return PROMPT_TEMPLATE.replace("{context}", context or "").replace("{question}", question)


@dataclass(frozen=True)
class ImagePart:
    base64_text: str
    mime_type: str = "image/jpeg"


@dataclass(frozen=True)
class PromptPayload:
    case_id: str
    prompt_text: str
    images: tuple[ImagePart, ...]
    question: str
    context: str = ""

    def __post_init__(self) -> None:
        if not self.images:
            raise ValidationError(f"{self.case_id}: payload needs at least one image")

    @classmethod
    def build(cls, case_id: str, images: Sequence[ImagePart], question: str = DEFAULT_QUESTION, context: str = ""):
        return cls(case_id, build_prompt(context, question), tuple(images), question, context)

    def digest(self) -> str:
        h = hashlib.sha256(self.prompt_text.encode("utf-8"))
        for im in self.images:
            h.update(im.mime_type.encode())
            h.update(im.base64_text.encode("ascii"))
        return h.hexdigest()


# ---------------------------------------------------------------- errors


class BackendError(CxrFusionError):
    """A backend call failed and should not be retried."""

    kind = "backend_error"


class TransientBackendError(BackendError):
    kind = "transient"


class FixtureMiss(BackendError):
    kind = "fixture_miss"


class ConfigError(CxrFusionError, ValueError):
    pass


class DispatchError(CxrFusionError):
    """Every backend failed for a case; the case is unevaluable."""

    def __init__(self, case_id: str, outputs: Sequence[ModelOutput]):
        self.case_id = case_id
        self.outputs = list(outputs)
        super().__init__(f"{case_id}: all {len(outputs)} backends failed")


# ---------------------------------------------------------------- configuration


class BackendKind(str, Enum):
    LIVE_HTTP = "live_http"
    REPLAY = "replay"
    MOCK = "mock"


@dataclass(frozen=True)
class ErrorProfile:
    sensitivity: float
    specificity: float
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} {v} outside [0, 1]")


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: BackendKind
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    credential_env_var: Optional[str] = None
    adapter: Optional[str] = None
    timeout_ms: int = 60_000
    max_retries: int = 3
    backoff_initial_ms: int = 1_000
    fixture_path: Optional[str] = None
    error_profile: Optional[ErrorProfile] = None
    # simulated latency for replay/mock, used for fault-injection runs
    delay_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if not self.backend_id:
            raise ConfigError("backend_id must be non-empty")
        live = ("endpoint", "model_name", "credential_env_var")
        need = {
            BackendKind.LIVE_HTTP: live,
            BackendKind.REPLAY: ("fixture_path",),
            BackendKind.MOCK: ("error_profile",),
        }[self.kind]
        for name in need:
            if getattr(self, name) in (None, ""):
                raise ConfigError(f"backend {self.backend_id}: {self.kind.value} requires {name}")
        forbidden = set(live + ("fixture_path", "error_profile")) - set(need)
        for name in sorted(forbidden):
            if getattr(self, name) not in (None, ""):
                raise ConfigError(f"backend {self.backend_id}: {name} is not valid for {self.kind.value}")
        if self.timeout_ms <= 0 or self.max_retries < 0 or self.backoff_initial_ms < 0 or self.delay_ms < 0:
            raise ConfigError(f"backend {self.backend_id}: timing values must be non-negative")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendConfig":
        data = dict(data)
        backend_id = data.pop("id", None) or data.pop("backend_id", None)
        profile = data.pop("error_profile", None)
        if profile is None and "sensitivity" in data:
            profile = {k: data.pop(k) for k in ("sensitivity", "specificity", "seed") if k in data}
        aliases = {"fixture": "fixture_path", "model": "model_name", "credential_env": "credential_env_var"}
        for old, new in aliases.items():
            if old in data:
                data[new] = data.pop(old)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"backend {backend_id}: unknown keys {sorted(unknown)}")
        return cls(backend_id=backend_id, error_profile=ErrorProfile(**profile) if profile else None, **data)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        if self.error_profile:
            d["error_profile"] = {
                "sensitivity": self.error_profile.sensitivity,
                "specificity": self.error_profile.specificity,
                "seed": self.error_profile.seed,
            }
        return {k: v for k, v in d.items() if v is not None}


# ---------------------------------------------------------------- backends


class Backend(Protocol):
    backend_id: str
    config: BackendConfig

    async def invoke(self, payload: PromptPayload) -> str: ...


def load_fixture(path: Union[str, Path]) -> dict[tuple[str, str], str]:
    """Read ``{backend_id, case_id, raw_text}`` JSON lines into a lookup table."""
    table: dict[tuple[str, str], str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (rec["backend_id"], rec["case_id"])
                text = rec["raw_text"]
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad fixture record ({exc})") from exc
            if key in table and table[key] != text:
                raise ConfigError(f"{path}:{lineno}: conflicting entries for {key}")
            table[key] = text
    return table


def write_fixture(path: Union[str, Path], entries: Sequence[tuple[str, str, str]]) -> None:
    """Write (backend_id, case_id, raw_text) triples as a replay fixture."""
    with open(path, "w", encoding="utf-8") as fh:
        for backend_id, case_id, text in entries:
            fh.write(json.dumps({"backend_id": backend_id, "case_id": case_id, "raw_text": text}) + "\n")


class ReplayBackend:
    def __init__(self, config: BackendConfig, table: Optional[Mapping[tuple[str, str], str]] = None):
        self.config = config
        self.backend_id = config.backend_id
        self.table = dict(table) if table is not None else load_fixture(config.fixture_path)

    def lookup(self, case_id: str) -> str:
        try:
            return self.table[(self.backend_id, case_id)]
        except KeyError:
            raise FixtureMiss(f"no fixture entry for ({self.backend_id}, {case_id})") from None

    async def invoke(self, payload: PromptPayload) -> str:
        if self.config.delay_ms:
            await asyncio.sleep(self.config.delay_ms / 1000)
        return self.lookup(payload.case_id)


def mock_uniform(seed: int, case_id: str) -> float:
    """Uniform [0, 1) draw fixed by (seed, case_id): top 53 bits of BLAKE2b."""
    digest = hashlib.blake2b(f"{seed}\x1f{case_id}".encode("utf-8"), digest_size=8).digest()
    return (int.from_bytes(digest, "big") >> 11) / float(1 << 53)


def mock_verdict(profile: ErrorProfile, case_id: str, ground_truth: Verdict) -> Verdict:
    u = mock_uniform(profile.seed, case_id)
    if int(ground_truth) == 1:
        return Verdict.POSITIVE if u < profile.sensitivity else Verdict.NEGATIVE
    return Verdict.NEGATIVE if u < profile.specificity else Verdict.POSITIVE


def mock_invoke(payload: PromptPayload, profile: ErrorProfile, ground_truth: Verdict) -> str:
    return f"POSSIBLE DIAGNOSES:\n{int(mock_verdict(profile, payload.case_id, ground_truth))}"


class MockBackend:
    def __init__(self, config: BackendConfig, truths: Mapping[str, Verdict]):
        self.config = config
        self.backend_id = config.backend_id
        self.truths = truths

    async def invoke(self, payload: PromptPayload) -> str:
        if self.config.delay_ms:
            await asyncio.sleep(self.config.delay_ms / 1000)
        try:
            truth = self.truths[payload.case_id]
        except KeyError:
            raise BackendError(f"mock backend has no ground truth for {payload.case_id}") from None
        return mock_invoke(payload, self.config.error_profile, truth)


def _openai_request(cfg: BackendConfig, payload: PromptPayload, key: str) -> tuple[dict, dict]:
    content = [{"type": "text", "text": payload.prompt_text}]
    content += [
        {"type": "image_url", "image_url": {"url": f"data:{im.mime_type};base64,{im.base64_text}"}}
        for im in payload.images
    ]
    body = {"model": cfg.model_name, "temperature": 0, "messages": [{"role": "user", "content": content}]}
    return {"Authorization": f"Bearer {key}"}, body


def _openai_text(data: dict) -> str:
    return data["choices"][0]["message"]["content"]


def _anthropic_request(cfg: BackendConfig, payload: PromptPayload, key: str) -> tuple[dict, dict]:
    content = [
        {"type": "image", "source": {"type": "base64", "media_type": im.mime_type, "data": im.base64_text}}
        for im in payload.images
    ]
    content.append({"type": "text", "text": payload.prompt_text})
    body = {
        "model": cfg.model_name,
        "max_tokens": 64,
        "temperature": 0,
        "messages": [{"role": "user", "content": content}],
    }
    return {"x-api-key": key, "anthropic-version": "2023-06-01"}, body


def _anthropic_text(data: dict) -> str:
    return "".join(block.get("text", "") for block in data["content"] if block.get("type") == "text")


ADAPTERS = {
    "openai": (_openai_request, _openai_text),
    "anthropic": (_anthropic_request, _anthropic_text),
}


class HttpBackend:
    """Chat-completion style HTTP backend; the adapter fixes the wire format."""

    def __init__(self, config: BackendConfig, client=None, environ: Optional[Mapping[str, str]] = None):
        import httpx

        self.config = config
        self.backend_id = config.backend_id
        adapter = config.adapter or "openai"
        if adapter not in ADAPTERS:
            raise ConfigError(f"backend {config.backend_id}: unknown adapter {adapter!r}")
        self._build, self._extract = ADAPTERS[adapter]
        env = os.environ if environ is None else environ
        self._key = env.get(config.credential_env_var or "")
        if not self._key:
            raise ConfigError(f"backend {config.backend_id}: credential variable {config.credential_env_var} is not set")
        self._client = client or httpx.AsyncClient()
        self._httpx = httpx

    def __repr__(self) -> str:
        return f"HttpBackend({self.backend_id!r}, endpoint={self.config.endpoint!r})"

    async def invoke(self, payload: PromptPayload) -> str:
        headers, body = self._build(self.config, payload, self._key)
        httpx = self._httpx
        try:
            resp = await self._client.post(self.config.endpoint, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"network error: {type(exc).__name__}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}")
        try:
            return self._extract(resp.json())
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {exc}") from None


def make_backend(config: BackendConfig, truths: Optional[Mapping[str, Verdict]] = None, **http_kwargs) -> Backend:
    if config.kind is BackendKind.REPLAY:
        return ReplayBackend(config)
    if config.kind is BackendKind.MOCK:
        return MockBackend(config, truths or {})
    return HttpBackend(config, **http_kwargs)


# ---------------------------------------------------------------- dispatch


class RequestLog:
    """Append-only JSON-lines log of backend calls; never records credentials."""

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def record(self, case_id: str, backend_id: str, latency_ms: int, outcome: str) -> None:
        rec = {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            "case_id": case_id,
            "backend_id": backend_id,
            "latency_ms": latency_ms,
            "outcome": outcome,
        }
        self.records.append(rec)
        log.debug("invoke %s/%s %sms %s", backend_id, case_id, latency_ms, outcome)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


Sleep = Callable[[float], Awaitable[None]]


async def call_with_retry(backend: Backend, payload: PromptPayload, log_: RequestLog, sleep: Sleep = asyncio.sleep) -> ModelOutput:
    """Invoke one backend with per-attempt timeout and exponential backoff.

    Only timeouts and TransientBackendError are retried. Failures come back as
    a ModelOutput carrying ``error``; nothing is raised.
    """
    cfg = backend.config
    attempts = cfg.max_retries + 1
    start = time.monotonic()
    error = "unknown"
    for attempt in range(attempts):
        t0 = time.monotonic()
        try:
            text = await asyncio.wait_for(backend.invoke(payload), timeout=cfg.timeout_ms / 1000)
        except asyncio.TimeoutError:
            error, retry = f"timeout after {cfg.timeout_ms} ms", True
        except TransientBackendError as exc:
            error, retry = f"{exc.kind}: {exc}", True
        except BackendError as exc:
            error, retry = f"{exc.kind}: {exc}", False
        except Exception as exc:  # adapter bugs must not take the sibling backends down
            error, retry = f"backend_error: {type(exc).__name__}: {exc}", False
        else:
            latency = int((time.monotonic() - t0) * 1000)
            log_.record(payload.case_id, backend.backend_id, latency, "ok")
            parsed = parse_response(text)
            return ModelOutput(
                backend_id=backend.backend_id,
                case_id=payload.case_id,
                raw_text=text,
                verdict=parsed.verdict,
                latency_ms=int((time.monotonic() - start) * 1000),
                error=None if parsed.ok else f"parse: {parsed.failure_reason.value}",
            )
        log_.record(payload.case_id, backend.backend_id, int((time.monotonic() - t0) * 1000), error)
        if not retry or attempt == attempts - 1:
            break
        await sleep(cfg.backoff_initial_ms * (2**attempt) / 1000)
    return ModelOutput(
        backend_id=backend.backend_id,
        case_id=payload.case_id,
        raw_text=None,
        verdict=None,
        latency_ms=int((time.monotonic() - start) * 1000),
        error=error,
    )


async def dispatch_case(
    case: CaseRecord,
    payload: PromptPayload,
    backends: Sequence[Backend],
    request_log: Optional[RequestLog] = None,
    sleep: Sleep = asyncio.sleep,
) -> list[ModelOutput]:
    """Send the identical payload to every backend concurrently.

    Results are ordered by backend_id. Raises DispatchError when every backend
    failed; parse failures are not backend failures.
    """
    if len(backends) < 2:
        raise ConfigError(f"need at least two backends, got {len(backends)}")
    ids = [b.backend_id for b in backends]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate backend ids: {ids}")
    if payload.case_id != case.case_id:
        raise ValidationError("payload and case disagree on case_id")
    request_log = request_log or RequestLog()
    outputs = await asyncio.gather(*(call_with_retry(b, payload, request_log, sleep) for b in backends))
    outputs = sorted(outputs, key=lambda o: o.backend_id)
    if all(o.failed for o in outputs):
        raise DispatchError(case.case_id, outputs)
    return outputs


@dataclass
class CaseResult:
    case_id: str
    outputs: list[ModelOutput] = field(default_factory=list)
    unevaluable: bool = False


async def dispatch_all(
    items: Sequence[tuple[CaseRecord, PromptPayload]],
    backends: Sequence[Backend],
    concurrency: int = 4,
    request_log: Optional[RequestLog] = None,
    on_result: Optional[Callable[[CaseResult], None]] = None,
    sleep: Sleep = asyncio.sleep,
) -> list[CaseResult]:
    """Dispatch many cases with at most ``concurrency`` in flight; results sorted by case_id."""
    if concurrency < 1:
        raise ConfigError("concurrency must be at least 1")
    sem = asyncio.Semaphore(concurrency)
    request_log = request_log or RequestLog()

    async def one(case: CaseRecord, payload: PromptPayload) -> CaseResult:
        async with sem:
            try:
                res = CaseResult(case.case_id, await dispatch_case(case, payload, backends, request_log, sleep))
            except DispatchError as exc:
                res = CaseResult(case.case_id, exc.outputs, unevaluable=True)
        if on_result:
            on_result(res)
        return res

    results = await asyncio.gather(*(one(c, p) for c, p in items))
    return sorted(results, key=lambda r: r.case_id)
