"""Live backends speaking chat-completions style JSON over HTTP.

Reasoner wire format (POST ``endpoint``)::

    {"model": ..., "messages": [{"role": "user", "content": [
        {"type": "text", "text": ...},
        {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}],
     "temperature": ..., "max_tokens": ..., "seed": ...}

and the answer is read from ``choices[0].message.content``.

Generator wire format (POST ``endpoint``)::

    {"model": ..., "prompt": ..., "image": "data:image/png;base64,...",
     "seed": ..., "guidance_scale": ..., "num_inference_steps": ...}

answered by ``{"data": [{"b64_json": ...}]}``. A refusal is either HTTP 400
with ``error.code == "content_policy_violation"`` or a 200 body carrying a
``refusal`` field.
"""

from __future__ import annotations

import base64
import os
import time
from typing import Callable

import httpx

from ..images import ImageStore
from .base import (
    BackendHTTPError,
    BackendTimeout,
    BackendUnreachable,
    ChatRequest,
    ChatResult,
    ContentPolicyError,
    EditRequest,
    EditResult,
    ImagePart,
    MalformedResponse,
    PreconditionError,
    RetryPolicy,
    TextPart,
)

_MIME = {"png": "image/png", "jpeg": "image/jpeg"}


def data_url(data: bytes, media_type: str) -> str:
    return f"data:{_MIME[media_type]};base64,{base64.b64encode(data).decode('ascii')}"


class _HTTPBackend:
    def __init__(
        self,
        endpoint: str,
        model: str,
        store: ImageStore,
        api_key_env: str | None = None,
        retry: RetryPolicy | None = None,
        timeout_ms: int = 60_000,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.store = store
        self.api_key_env = api_key_env
        self.retry = retry or RetryPolicy()
        self.timeout_ms = timeout_ms
        self.client = client or httpx.Client()
        self.sleep = sleep
        self.attempts = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _image_url(self, ref, request_id: str) -> str:
        try:
            return data_url(self.store.read(ref), ref.media_type.value)
        except (OSError, ValueError) as exc:
            raise PreconditionError(f"image {ref.uri} is not resolvable to its recorded bytes: {exc}") from None

    def _post(self, payload: dict, request_id: str) -> dict:
        self.attempts += 1
        try:
            resp = self.client.post(
                self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout_ms / 1000.0
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"timed out after {self.timeout_ms} ms ({exc})", request_id) from None
        except httpx.TransportError as exc:
            raise BackendUnreachable(f"cannot reach {self.endpoint} ({exc})", request_id) from None
        if resp.status_code >= 400:
            body = _safe_json(resp)
            err = body.get("error") if isinstance(body, dict) else None
            code = err.get("code") if isinstance(err, dict) else None
            if code == "content_policy_violation":
                raise ContentPolicyError(str(err.get("message", "refused")), request_id)
            raise BackendHTTPError(resp.status_code, resp.text[:200], request_id)
        body = _safe_json(resp)
        if not isinstance(body, dict):
            raise MalformedResponse("response body is not a JSON object", request_id)
        return body


def _safe_json(resp: httpx.Response):
    try:
        return resp.json()
    except ValueError:
        return None


class HTTPReasoner(_HTTPBackend):
    def payload(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            content = []
            for part in m.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                elif isinstance(part, ImagePart):
                    url = self._image_url(part.image, request.request_id)
                    content.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": m.role, "content": content})
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def chat(self, request: ChatRequest) -> ChatResult:
        rid = request.request_id
        payload = self.payload(request)
        start = time.perf_counter()
        body, retries = self.retry.run(lambda: self._post(payload, rid), "reasoner", self.sleep)
        latency = int((time.perf_counter() - start) * 1000)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("missing choices[0].message.content", rid) from None
        if isinstance(text, list):  # some servers return content parts
            text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
        if not isinstance(text, str) or not text.strip():
            raise MalformedResponse("empty completion text", rid)
        usage = body.get("usage") or {}
        usage = {k: int(usage[k]) for k in ("prompt_tokens", "completion_tokens") if k in usage}
        return ChatResult(text=text, usage=usage, latency_ms=latency, retries=retries)


class HTTPGenerator(_HTTPBackend):
    def payload(self, request: EditRequest) -> dict:
        return {
            "model": self.model,
            "prompt": request.instruction.text,
            "image": self._image_url(request.reference, request.request_id),
            "seed": request.seed,
            "guidance_scale": request.guidance,
            "num_inference_steps": request.steps,
        }

    def edit(self, request: EditRequest) -> EditResult:
        rid = request.request_id
        payload = self.payload(request)
        start = time.perf_counter()
        body, retries = self.retry.run(lambda: self._post(payload, rid), "generator", self.sleep)
        latency = int((time.perf_counter() - start) * 1000)
        if body.get("refusal"):
            raise ContentPolicyError(str(body["refusal"]), rid)
        try:
            data = base64.b64decode(body["data"][0]["b64_json"], validate=True)
        except (KeyError, IndexError, TypeError, ValueError):
            raise MalformedResponse("missing or invalid data[0].b64_json", rid) from None
        try:
            image = self.store.put(data)
        except ValueError as exc:
            raise MalformedResponse(f"returned payload is not an image: {exc}", rid) from None
        return EditResult(image=image, latency_ms=latency, retries=retries)
