"""Scripted offline backends for fixtures and golden traces.

Scripts map a key to a response. Keys are tried in order: the request hash,
then the request's ``purpose`` (template name), then ``"*"``. A response may be

* a string (or bytes/path for the generator): returned every time,
* a list: consumed one entry per call, the last entry repeating once exhausted,
* a callable taking the request,
* an exception instance: raised.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Any, Mapping

from ..images import ImageStore, make_png
from .base import BackendError, ChatRequest, ChatResult, EditRequest, EditResult


class _Script:
    def __init__(self, script: Mapping[str, Any]):
        self.script = dict(script)
        self.cursor: dict[str, int] = {}
        self.lock = threading.Lock()

    def lookup(self, request, purpose: str | None):
        for key in (request.request_id, purpose, "*"):
            if key is not None and key in self.script:
                return self._take(key, request)
        return None

    def _take(self, key: str, request):
        value = self.script[key]
        if isinstance(value, list):
            with self.lock:
                i = self.cursor.get(key, 0)
                self.cursor[key] = i + 1
            value = value[min(i, len(value) - 1)]
        if isinstance(value, BaseException):
            raise value
        if callable(value):
            value = value(request)
        return value


class ScriptedReasoner:
    def __init__(self, script: Mapping[str, Any], latency_ms: int = 0):
        self._script = _Script(script)
        self.latency_ms = latency_ms
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def chat(self, request: ChatRequest) -> ChatResult:
        with self._lock:
            self.calls.append(request)
        text = self._script.lookup(request, request.purpose)
        if text is None:
            raise BackendError(f"no scripted response for purpose {request.purpose!r}", request.request_id)
        return ChatResult(text=str(text), usage={"prompt_tokens": 0, "completion_tokens": len(str(text).split())},
                          latency_ms=self.latency_ms)


class ScriptedGenerator:
    """Returns fixture images by request hash, or a synthesized PNG otherwise.

    The synthesized image is a pure function of the request, so unscripted
    runs stay deterministic.
    """

    def __init__(self, store: ImageStore, script: Mapping[str, Any] | None = None, latency_ms: int = 0):
        self.store = store
        self._script = _Script(script or {})
        self.latency_ms = latency_ms
        self.calls: list[EditRequest] = []

    def edit(self, request: EditRequest) -> EditResult:
        self.calls.append(request)
        value = self._script.lookup(request, None)
        if value is None:
            rid = request.request_id
            rgb = tuple(int(rid[i : i + 2], 16) for i in (0, 2, 4))
            value = make_png(rgb, {"reasonloop-scripted": rid})
        elif isinstance(value, (str, Path)):
            value = Path(value).read_bytes()
        if not isinstance(value, bytes):
            raise BackendError("scripted generator response must be image bytes or a path", request.request_id)
        return EditResult(image=self.store.put(value), latency_ms=self.latency_ms)
