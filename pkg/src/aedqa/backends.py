"""Model backends: chat, vision chat, embeddings and OCR.

Every backend speaks the same JSON wire shapes. :class:`Backend` builds the
request dict, hands it to ``_send`` and parses the response dict, so the HTTP
client, the in-process mocks and transcript replay only differ in ``_send``.

Chat/vision requests follow the chat-completions layout::

    {"model": ..., "messages": [{"role": ..., "content": ...}], "temperature": 0}

and the reply text is read from ``choices[0].message.content``. Embedding
requests are ``{"model", "input"}`` with the vector at ``data[0].embedding``.
OCR posts raw image bytes and gets back ``[{"text", "bbox", "score"}]``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import httpx

from .core import AgentProfile, nfc

log = logging.getLogger(__name__)

CHAT_ROLES = ("system", "user", "assistant")
MOCK_EMBED_DIM = 256

ENV_API_KEY = "AED_API_KEY"
ENV_CHAT_URL = "AED_CHAT_URL"
ENV_EMBED_URL = "AED_EMBED_URL"
ENV_OCR_URL = "AED_OCR_URL"


class BackendError(Exception):
    pass


class TransportError(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class MockMiss(MalformedResponse):
    pass


class MissingFixture(BackendError):
    pass


class EmptyInput(ValueError):
    pass


class InvalidRequest(ValueError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    profile: AgentProfile
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple((r, nfc(c)) for r, c in self.messages))
        if not self.messages:
            raise InvalidRequest("chat request has no messages")
        for role, _ in self.messages:
            if role not in CHAT_ROLES:
                raise InvalidRequest(f"invalid message role {role!r}")
        if self.temperature < 0:
            raise InvalidRequest("temperature must be >= 0")

    @property
    def user_content(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return self.messages[-1][1]


@dataclass(frozen=True)
class OcrToken:
    text: str
    bbox: tuple[tuple[float, float], ...]
    confidence: float

    def __post_init__(self) -> None:
        pts = tuple((float(x), float(y)) for x, y in self.bbox)
        if len(pts) != 4:
            raise ValueError(f"bbox needs 4 corner points, got {len(pts)}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise ValueError("bbox coordinates must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"OCR confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "bbox", pts)
        object.__setattr__(self, "text", nfc(self.text))

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> "OcrToken":
        return cls(text=str(d["text"]), bbox=tuple(tuple(p) for p in d["bbox"]), confidence=float(d["score"]))

    def to_wire(self) -> dict:
        return {"text": self.text, "bbox": [list(p) for p in self.bbox], "score": self.confidence}


Vector = tuple[float, ...]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch {len(a)} != {len(b)}")
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def image_mime(data: bytes) -> str:
    if data.startswith(b"\x89PNG"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if data[:6] in (b"GIF87a", b"GIF89a"):
        return "image/gif"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return "application/octet-stream"


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def wire_messages(req: ChatRequest, image: Optional[bytes] = None) -> list[dict]:
    msgs = [{"role": "system", "content": req.profile.system_prompt()}]
    msgs += [{"role": r, "content": c} for r, c in req.messages]
    if image is not None:
        # the image rides on the last user message as a content-parts array
        users = [i for i, m in enumerate(msgs) if m["role"] == "user"]
        idx = users[-1] if users else len(msgs) - 1
        url = f"data:{image_mime(image)};base64,{base64.b64encode(image).decode('ascii')}"
        msgs[idx] = {
            "role": msgs[idx]["role"],
            "content": [
                {"type": "text", "text": msgs[idx]["content"]},
                {"type": "image_url", "image_url": {"url": url}},
            ],
        }
    return msgs


def _content(resp: Any) -> str:
    try:
        content = resp["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no choices[0].message.content in response: {str(resp)[:200]}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    return content


class Backend:
    """Base client. Subclasses implement ``_send(op, request, payload)``.

    ``op`` is one of ``chat``, ``vision``, ``embed``, ``ocr``. ``payload`` carries
    the raw image bytes for OCR, whose JSON request only names the image hash.
    At most ``max_concurrency`` requests are in flight per backend.
    """

    def __init__(self, model: str = "", max_concurrency: int = 4):
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self.model = model
        self._limit = threading.BoundedSemaphore(max_concurrency)

    def send(self, op: str, request: dict, payload: Optional[bytes] = None) -> Any:
        with self._limit:
            return self._send(op, request, payload)

    def _send(self, op: str, request: dict, payload: Optional[bytes]) -> Any:
        raise NotImplementedError

    def chat(self, req: ChatRequest) -> str:
        body = {"model": self.model, "messages": wire_messages(req), "temperature": req.temperature}
        return _content(self.send("chat", body))

    def vision_chat(self, req: ChatRequest, image: bytes) -> str:
        if not image:
            raise EmptyInput("empty image")
        body = {"model": self.model, "messages": wire_messages(req, image), "temperature": req.temperature}
        return _content(self.send("vision", body))

    def embed(self, text: str) -> Vector:
        if not text:
            raise EmptyInput("cannot embed empty text")
        resp = self.send("embed", {"model": self.model, "input": nfc(text)})
        try:
            vec = resp["data"][0]["embedding"]
            return tuple(float(v) for v in vec)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse("no data[0].embedding in response") from exc

    def ocr(self, image: bytes) -> list[OcrToken]:
        if not image:
            raise EmptyInput("empty image")
        resp = self.send("ocr", {"image_sha256": sha256(image)}, image)
        if not isinstance(resp, list):
            raise MalformedResponse("OCR response must be a JSON array")
        return [OcrToken.from_wire(t) for t in resp]


# -- HTTP ---------------------------------------------------------------------


class HttpBackend(Backend):
    """Talks to real services. Transient failures are retried with exponential backoff."""

    def __init__(
        self,
        model: str = "",
        chat_url: Optional[str] = None,
        embed_url: Optional[str] = None,
        ocr_url: Optional[str] = None,
        *,
        api_key: Optional[str] = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        max_concurrency: int = 4,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(model, max_concurrency)
        self.urls = {
            "chat": chat_url or os.environ.get(ENV_CHAT_URL, ""),
            "vision": chat_url or os.environ.get(ENV_CHAT_URL, ""),
            "embed": embed_url or os.environ.get(ENV_EMBED_URL, ""),
            "ocr": ocr_url or os.environ.get(ENV_OCR_URL, ""),
        }
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=timeout)

    def _headers(self, content_type: str) -> dict:
        h = {"Content-Type": content_type}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h

    def _send(self, op: str, request: dict, payload: Optional[bytes]) -> Any:
        url = self.urls[op]
        if not url:
            raise TransportError(f"no endpoint configured for {op}")
        if op == "ocr":
            kwargs = {"content": payload, "headers": self._headers("application/octet-stream")}
        else:
            kwargs = {"content": json.dumps(request, ensure_ascii=False).encode("utf-8"),
                      "headers": self._headers("application/json")}
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(url, **kwargs)
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s %s attempt %d failed: %s", op, url, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                log.warning("%s %s attempt %d: HTTP %d", op, url, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"{op} {url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"{op} {url}: response is not JSON") from exc
        raise TransportError(f"{op} {url}: gave up after {self.retries + 1} attempts: {last}")


# -- mocks --------------------------------------------------------------------


@dataclass(frozen=True)
class MockCall:
    """What a scripted mock sees: the system prompt, the last user text, and any image."""

    op: str
    system: str
    user: str
    messages: tuple[dict, ...]
    image: Optional[bytes] = None


Script = Union[Mapping[str, str], Callable[[MockCall], Optional[str]]]


def _split_wire(messages: list[dict]) -> tuple[str, str, Optional[bytes]]:
    system, user, image = "", "", None
    for m in messages:
        content = m["content"]
        if isinstance(content, list):
            text = ""
            for part in content:
                if part.get("type") == "text":
                    text = part["text"]
                elif part.get("type") == "image_url":
                    url = part["image_url"]["url"]
                    image = base64.b64decode(url.split(",", 1)[1])
            content = text
        if m["role"] == "system":
            system = content
        elif m["role"] == "user":
            user = content
    return system, user, image


def trigrams(text: str) -> list[str]:
    text = nfc(text)
    if len(text) < 3:
        return [text]
    return [text[i:i + 3] for i in range(len(text) - 2)]


def trigram_bucket(gram: str, dim: int = MOCK_EMBED_DIM) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def trigram_embedding(text: str, dim: int = MOCK_EMBED_DIM) -> Vector:
    """Character trigrams hashed into ``dim`` buckets, counts L2-normalized."""
    counts = [0.0] * dim
    for g in trigrams(text):
        counts[trigram_bucket(g, dim)] += 1.0
    norm = math.sqrt(math.fsum(c * c for c in counts))
    return tuple(c / norm for c in counts)


class MockBackend(Backend):
    """Deterministic in-process backend.

    ``chat_script``/``vision_script`` are either a mapping from exact user
    content to reply, or a callable taking a :class:`MockCall` and returning
    the reply (``None`` means no match). Unmatched prompts raise
    :class:`MockMiss`. Embeddings are trigram hashes; OCR reads the
    ``{image_name}.ocr.json`` sidecar of whichever file under ``fixture_dirs``
    has the same bytes as the submitted image.
    """

    def __init__(
        self,
        chat_script: Optional[Script] = None,
        vision_script: Optional[Script] = None,
        fixture_dirs: Sequence[Path | str] = (),
        *,
        model: str = "mock",
        embed_dim: int = MOCK_EMBED_DIM,
        max_concurrency: int = 4,
    ):
        super().__init__(model, max_concurrency)
        self.chat_script = chat_script
        self.vision_script = vision_script
        self.fixture_dirs = [Path(d) for d in fixture_dirs]
        self.embed_dim = embed_dim
        self.calls: list[MockCall] = []
        self._lock = threading.Lock()
        self._ocr_index: dict[str, Path] = {}

    def count(self, op: Optional[str] = None) -> int:
        with self._lock:
            return sum(1 for c in self.calls if op is None or c.op == op)

    def _record(self, call: MockCall) -> None:
        with self._lock:
            self.calls.append(call)

    @staticmethod
    def _run(script: Optional[Script], call: MockCall) -> str:
        reply = None
        if callable(script):
            reply = script(call)
        elif script is not None:
            reply = script.get(call.user)
        if reply is None:
            raise MockMiss(f"no scripted {call.op} reply for prompt: {call.user[:300]!r}")
        return reply

    def _send(self, op: str, request: dict, payload: Optional[bytes]) -> Any:
        if op in ("chat", "vision"):
            system, user, image = _split_wire(request["messages"])
            call = MockCall(op, system, user, tuple(request["messages"]), image)
            self._record(call)
            reply = self._run(self.chat_script if op == "chat" else self.vision_script, call)
            return {"choices": [{"message": {"role": "assistant", "content": reply}}]}
        if op == "embed":
            self._record(MockCall(op, "", request["input"], ()))
            return {"data": [{"embedding": list(trigram_embedding(request["input"], self.embed_dim))}]}
        if op == "ocr":
            self._record(MockCall(op, "", request["image_sha256"], (), payload))
            sidecar = self._sidecar(request["image_sha256"])
            with open(sidecar, encoding="utf-8") as fh:
                return json.load(fh)
        raise ValueError(f"unknown op {op}")

    def _scan(self) -> None:
        index = {}
        for d in self.fixture_dirs:
            for side in sorted(d.rglob("*.ocr.json")):
                image = side.with_name(side.name[: -len(".ocr.json")])
                if image.is_file():
                    index.setdefault(sha256(image.read_bytes()), side)
        with self._lock:
            self._ocr_index = index

    def _sidecar(self, digest: str) -> Path:
        if digest not in self._ocr_index:
            self._scan()
        try:
            return self._ocr_index[digest]
        except KeyError:
            raise MissingFixture(f"no OCR sidecar for image sha256={digest[:12]}") from None


# -- transcripts ---------------------------------------------------------------


def _key(op: str, request: dict) -> str:
    return op + "\t" + json.dumps(request, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


class Transcript:
    """JSON Lines of ``{"op", "request", "response"}`` shared by capturing backends."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def append(self, op: str, request: dict, response: Any) -> None:
        line = json.dumps({"op": op, "request": request, "response": response}, ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(line + "\n")


class CapturingBackend(Backend):
    """Forwards to ``inner`` and appends every request/response pair to a transcript."""

    def __init__(self, inner: Backend, transcript: Transcript):
        super().__init__(inner.model, 1_000_000)
        self.inner = inner
        self.transcript = transcript

    def _send(self, op: str, request: dict, payload: Optional[bytes]) -> Any:
        response = self.inner.send(op, request, payload)
        self.transcript.append(op, request, response)
        return response


class ReplayBackend(Backend):
    """Answers from a captured transcript; unseen requests are a :class:`MockMiss`."""

    def __init__(self, path: Path | str, model: str = "", max_concurrency: int = 4):
        super().__init__(model, max_concurrency)
        self.responses: dict[str, Any] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self.responses.setdefault(_key(rec["op"], rec["request"]), rec["response"])

    def _send(self, op: str, request: dict, payload: Optional[bytes]) -> Any:
        try:
            return self.responses[_key(op, request)]
        except KeyError:
            raise MockMiss(f"request not in transcript ({op}, model={request.get('model')!r})") from None
