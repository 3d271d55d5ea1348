"""Content-addressed off-chain blob store.

Blobs live one file per digest under a root directory.  URIs have the form
``aux://sha256/<hex digest>``; the URI alone is enough to check content.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import re
import tempfile
from pathlib import Path

from .canonical import b64d, b64e
from .errors import BlobNotFound, IntegrityFailure, StorageError, ValidationError

SCHEME = "aux://sha256/"
STREAM_SCHEME = "aux+stream://"  # reserved, not served
_URI = re.compile(r"^aux://sha256/([0-9a-f]{64})$")


def blob_uri(data: bytes) -> str:
    return SCHEME + hashlib.sha256(data).hexdigest()


def parse_uri(uri: str) -> str:
    """Return the hex digest named by *uri*."""
    if uri.startswith(STREAM_SCHEME):
        raise ValidationError("stream URIs are reserved and not served by this store")
    m = _URI.match(uri)
    if m is None:
        raise ValidationError(f"not a blob URI: {uri!r}")
    return m.group(1)


def verify_blob(uri: str, data: bytes) -> bool:
    try:
        digest = parse_uri(uri)
    except ValidationError:
        return False
    return hmac.compare_digest(hashlib.sha256(data).hexdigest(), digest)


class BlobStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.bytes_written = 0

    def path_for(self, uri: str) -> Path:
        return self.root / parse_uri(uri)

    def put(self, data: bytes) -> str:
        if not data:
            raise ValidationError("refusing to store an empty blob")
        uri = blob_uri(data)
        final = self.path_for(uri)
        if final.exists() and verify_blob(uri, final.read_bytes()):
            return uri
        try:
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".incoming-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, final)
        except OSError as exc:
            raise StorageError(f"cannot store blob: {exc}") from exc
        self.bytes_written += len(data)
        return uri

    def get(self, uri: str) -> bytes:
        path = self.path_for(uri)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise BlobNotFound(f"no blob {uri}") from None
        except OSError as exc:
            raise StorageError(f"cannot read blob: {exc}") from exc
        if not verify_blob(uri, data):
            raise IntegrityFailure(f"stored bytes for {uri} do not match their digest")
        return data

    def __contains__(self, uri: str) -> bool:
        return self.path_for(uri).exists()


# -- wire adapters -------------------------------------------------------------

async def handle(store: BlobStore, msg_type: str, payload: dict) -> dict:
    if msg_type == "AuxPut":
        return {"uri": store.put(b64d(payload["data"]))}
    if msg_type == "AuxGet":
        return {"data": b64e(store.get(str(payload["uri"])))}
    raise ValidationError(f"unexpected message {msg_type}")


class BlobClient:
    """Remote access over the framed protocol; every fetched blob is re-verified locally."""

    def __init__(self, rpc):
        self.rpc = rpc

    @classmethod
    async def open(cls, host: str, port: int, identity) -> "BlobClient":
        from .wire import RpcClient

        return cls(await RpcClient.open(host, port, identity))

    async def put(self, data: bytes) -> str:
        res = await self.rpc.call("AuxPut", {"data": b64e(data)}, timeout=30)
        uri = res["uri"]
        if uri != blob_uri(data):
            raise IntegrityFailure("store returned a URI that does not name the uploaded bytes")
        return uri

    async def get(self, uri: str) -> bytes:
        res = await self.rpc.call("AuxGet", {"uri": uri}, timeout=30)
        data = b64d(res["data"])
        if not verify_blob(uri, data):
            raise IntegrityFailure(f"fetched bytes for {uri} do not match their digest")
        return data

    async def close(self) -> None:
        await self.rpc.close()
