"""Image references by content digest, plus a small content-addressed store.

Images never travel inline through the engine. Everything downstream of a
backend holds an :class:`~reasonloop.types.ImageRef` (uri + media type +
sha256) and asks a store for the bytes when a wire request needs them.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import zlib
from pathlib import Path

import httpx

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
JPEG_MAGIC = b"\xff\xd8\xff"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sniff_media_type(data: bytes) -> str:
    """Return ``"png"`` or ``"jpeg"`` from magic bytes, else raise ValueError."""
    if data.startswith(PNG_MAGIC):
        return "png"
    if data.startswith(JPEG_MAGIC):
        return "jpeg"
    raise ValueError("payload is neither PNG nor JPEG (unrecognised magic bytes)")


def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def make_png(rgb: tuple[int, int, int] = (128, 128, 128), text: dict[str, str] | None = None) -> bytes:
    """Encode a valid 1x1 RGB PNG, optionally carrying tEXt chunks."""
    header = struct.pack(">IIBBBBB", 1, 1, 8, 2, 0, 0, 0)
    raw = b"\x00" + bytes(rgb)
    chunks = [_png_chunk(b"IHDR", header)]
    for key, value in sorted((text or {}).items()):
        chunks.append(_png_chunk(b"tEXt", key.encode("latin-1") + b"\x00" + value.encode("utf-8")))
    chunks.append(_png_chunk(b"IDAT", zlib.compress(raw, 9)))
    chunks.append(_png_chunk(b"IEND", b""))
    return PNG_MAGIC + b"".join(chunks)


def read_png_text(data: bytes) -> dict[str, str]:
    """Collect tEXt chunks from a PNG payload. Non-PNG input yields ``{}``."""
    if not data.startswith(PNG_MAGIC):
        return {}
    out: dict[str, str] = {}
    pos = len(PNG_MAGIC)
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        if kind == b"tEXt" and b"\x00" in payload:
            key, _, value = payload.partition(b"\x00")
            out[key.decode("latin-1")] = value.decode("utf-8")
        if kind == b"IEND":
            break
        pos += 12 + length
    return out


class ImageStore:
    """Content-addressed image storage.

    With ``root=None`` images live in memory under ``mem://<sha256>`` uris.
    With a root directory they are written to ``<root>/<subdir>/<digest16>.<ext>``
    and referenced by the *relative* uri ``<subdir>/<digest16>.<ext>``, so two
    runs into different output directories record identical traces.
    """

    def __init__(self, root: str | Path | None = None, subdir: str = "images"):
        self.root = Path(root) if root is not None else None
        self.subdir = subdir
        self._mem: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, data: bytes):
        from .types import ImageRef

        media_type = sniff_media_type(data)
        digest = sha256_hex(data)
        if self.root is None:
            uri = f"mem://{digest}"
            with self._lock:
                self._mem[uri] = data
        else:
            ext = "png" if media_type == "png" else "jpg"
            uri = f"{self.subdir}/{digest[:16]}.{ext}"
            path = self.root / uri
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                path.write_bytes(data)
        return ImageRef(uri=uri, media_type=media_type, sha256=digest)

    def add_file(self, path: str | Path):
        """Register an existing file under its given path (no copy)."""
        from .types import ImageRef

        data = Path(path).read_bytes()
        return ImageRef(uri=str(path), media_type=sniff_media_type(data), sha256=sha256_hex(data))

    def read(self, ref) -> bytes:
        """Resolve ``ref`` to bytes and check them against the recorded digest."""
        data = self._fetch(ref.uri)
        if sha256_hex(data) != ref.sha256:
            raise ValueError(f"digest mismatch for {ref.uri}: bytes changed since recording")
        return data

    def _fetch(self, uri: str) -> bytes:
        if uri.startswith("mem://"):
            with self._lock:
                if uri in self._mem:
                    return self._mem[uri]
            raise FileNotFoundError(uri)
        if uri.startswith(("http://", "https://")):
            resp = httpx.get(uri, timeout=30.0)
            resp.raise_for_status()
            return resp.content
        if uri.startswith("file://"):
            uri = uri[len("file://") :]
        path = Path(uri)
        if not path.is_absolute() and self.root is not None and (self.root / path).exists():
            path = self.root / path
        return path.read_bytes()
