"""Scripted end-to-end lifecycle: register, discover, request, respond via aux storage, verify."""

from __future__ import annotations

import asyncio
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import canonical
from .auxstore import BlobClient, BlobStore, parse_uri, verify_blob
from .client import GatewayClient, TxResult
from .errors import IntegrityFailure, NotFound, PlatformError
from .identity import Identity, Role
from .network import NetworkInfo, is_revoked, issue, revoke

log = logging.getLogger(__name__)

SERVICE = "temp-read"
DEVICE_LABEL = "demo-device"
APP_LABEL = "demo-app"


@dataclass
class Step:
    name: str
    ok: bool
    tx_id: str = ""
    code: str = ""
    detail: str = ""

    def line(self) -> str:
        status = "ok" if self.ok else "FAILED"
        parts = [f"{self.name:<22}", f"{status:<6}", self.code or "-", self.tx_id or "-"]
        if self.detail:
            parts.append(self.detail)
        return "  ".join(parts)

    def to_dict(self) -> dict:
        return {"step": self.name, "ok": self.ok, "txId": self.tx_id, "code": self.code, "detail": self.detail}


@dataclass
class Transcript:
    steps: list[Step] = field(default_factory=list)
    request_id: str = ""
    blob_uri: str = ""
    blob_verified: bool = False
    corruption_detected: Optional[bool] = None

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.steps)

    @property
    def failed_step(self) -> Optional[str]:
        return next((s.name for s in self.steps if not s.ok), None)

    @property
    def all_valid(self) -> bool:
        codes = [s.code for s in self.steps if s.tx_id]
        return bool(codes) and all(c == "VALID" for c in codes)

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "requestId": self.request_id,
            "blobUri": self.blob_uri,
            "blobVerified": self.blob_verified,
            "corruptionDetected": self.corruption_detected,
            "ok": self.ok,
        }


class StepFailed(PlatformError):
    code = "DEMO_STEP_FAILED"


def _identity(info: NetworkInfo, org: str, label: str) -> Identity:
    """Reuse the wallet entry across runs unless it has been revoked."""
    full = f"{label}@{org}"
    wallet = info.wallet()
    if full in wallet:
        ident = wallet.get(full)
        if not is_revoked(info, ident):
            return ident
    return issue(info, org, label, Role.WRITER, label=full, overwrite=True)[1]


class Demo:
    def __init__(self, info: NetworkInfo, echo: Callable[[str], None] | None = None):
        self.info = info
        self.echo = echo or (lambda line: None)
        self.transcript = Transcript()

    def _record(self, step: Step) -> Step:
        self.transcript.steps.append(step)
        self.echo(step.line())
        return step

    def _tx(self, name: str, res: TxResult, detail: str = "") -> TxResult:
        step = self._record(Step(name, res.valid, res.tx_id, res.code.value, detail))
        if not step.ok:
            raise StepFailed(f"step {name!r} committed as {res.code.value}")
        return res

    def _fail(self, name: str, err: PlatformError):
        self._record(Step(name, False, code=err.code, detail=str(err)))
        raise StepFailed(f"step {name!r} failed: {err.code}: {err}") from err

    async def run(self, request_id: str | None = None, revoke_midway: bool = False,
                  corrupt: bool = True) -> Transcript:
        info = self.info
        orgs = sorted({p.org for p in info.peers})
        dev_org, app_org = orgs[0], orgs[-1]
        dev_ident = _identity(info, dev_org, DEVICE_LABEL)
        app_ident = _identity(info, app_org, APP_LABEL)
        device = await GatewayClient.connect(info.peers_of(dev_org)[0], dev_ident)
        app = await GatewayClient.connect(info.peers_of(app_org)[0], app_ident)
        try:
            await self._lifecycle(device, app, request_id, revoke_midway, corrupt)
        except StepFailed:
            pass
        finally:
            await asyncio.gather(device.close(), app.close(), return_exceptions=True)
        return self.transcript

    async def _lifecycle(self, device: GatewayClient, app: GatewayClient, request_id, revoke_midway, corrupt):
        t = self.transcript
        self._tx("register device", await device.register_device("demo thermometer", "room temperature sensor"))
        try:  # an aborted earlier run may have left the service behind
            version = (await device.get_service(device.org, device.device_id, SERVICE))["version"] + 1
        except NotFound:
            version = 1
        self._tx("register service", await device.register_service(SERVICE, version, "current temperature in celsius"))

        name = "query service"
        try:
            svc = await app.get_service(device.org, device.device_id, SERVICE)
        except PlatformError as err:
            self._fail(name, err)
        self._record(Step(name, True, detail=f"version {svc['version']}"))

        device_events = await device.subscribe_own()
        app_events = await app.subscribe(requester_id=app.device_id)
        try:
            name = "request service"
            try:
                rid, res = await app.request_service(device.org, device.device_id, SERVICE, "read",
                                                     ["unit=celsius"], request_id=request_id)
            except PlatformError as err:
                self._fail(name, err)
            t.request_id = rid
            self._tx(name, res, f"request {rid}")

            name = "device notified"
            try:
                ev = await _wait_for(device_events, lambda e: e["contractOp"] == "service-broker/request"
                                     and e["txId"] == res.tx_id)
            except PlatformError as err:
                self._fail(name, err)
            self._record(Step(name, True, detail=f"block {ev['blockNumber']}"))

            name = "store reading"
            reading = canonical.encode({"celsius": 21.5, "requestId": rid, "sensor": device.device_id})
            aux = self.info.aux
            try:
                blobs = await BlobClient.open(aux.host, aux.port, device.identity)
                try:
                    uri = await blobs.put(reading)
                finally:
                    await blobs.close()
            except PlatformError as err:
                self._fail(name, err)
            t.blob_uri = uri
            self._record(Step(name, True, detail=uri))

            if revoke_midway:
                revoke(self.info, device.org, device.identity.certificate.serial)
                self._record(Step("revoke device cert", True, detail=f"serial {device.identity.certificate.serial}"))
                await asyncio.sleep(1.0)  # nodes poll the CRL file

            name = "respond"
            pointer = canonical.encode({"uri": uri, "digest": parse_uri(uri)})
            try:
                res = await device.respond(rid, 200, pointer)
            except PlatformError as err:
                self._fail(name, err)
            self._tx(name, res)

            name = "app notified"
            try:
                await _wait_for(app_events, lambda e: e["contractOp"] == "service-broker/respond"
                                and e["txId"] == res.tx_id)
                response = await app.get_response(rid)
            except PlatformError as err:
                self._fail(name, err)
            self._record(Step(name, True, detail=f"status {response['statusCode']}"))
        finally:
            await asyncio.gather(device_events.close(), app_events.close(), return_exceptions=True)

        name = "fetch and verify blob"
        anchored = canonical.decode(canonical.b64d(response["returnValue"]))
        try:
            data = await _fetch(self.info, app.identity, anchored["uri"])
        except PlatformError as err:
            self._fail(name, err)
        # check the bytes against the URI and, separately, against the digest anchored on chain
        t.blob_verified = (verify_blob(anchored["uri"], data)
                           and hashlib.sha256(data).hexdigest() == anchored["digest"]
                           and data == reading)
        self._record(Step(name, t.blob_verified, detail=f"{len(data)} bytes"))
        if not t.blob_verified:
            raise StepFailed("blob does not match its anchored digest")

        if corrupt:
            t.corruption_detected = await self._corruption_check(app.identity, anchored["uri"], data)

        self._tx("deregister device", await device.deregister_device())

    async def _corruption_check(self, who: Identity, uri: str, original: bytes) -> bool:
        """Flip one byte of the stored blob, expect the consumer to reject it, then restore it."""
        path = BlobStore(self.info.layout.aux).path_for(uri)
        damaged = bytearray(original)
        damaged[0] ^= 0xFF
        path.write_bytes(bytes(damaged))
        try:
            await _fetch(self.info, who, uri)
            detected = False
        except IntegrityFailure:
            detected = True
        finally:
            path.write_bytes(original)
        self._record(Step("detect corruption", detected, code="INTEGRITY_FAILURE" if detected else "",
                          detail="tampered blob rejected" if detected else "tampered blob accepted"))
        if not detected:
            raise StepFailed("corrupted blob was not detected")
        return detected


async def _fetch(info: NetworkInfo, who: Identity, uri: str) -> bytes:
    blobs = await BlobClient.open(info.aux.host, info.aux.port, who)
    try:
        return await blobs.get(uri)
    finally:
        await blobs.close()


async def _wait_for(stream, pred, timeout: float = 30.0) -> dict:
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    while True:
        ev = await stream.next(max(0.01, deadline - loop.time()))
        if pred(ev):
            return ev


async def demo_run(info: NetworkInfo, request_id: str | None = None, revoke_midway: bool = False,
                   corrupt: bool = True, echo: Callable[[str], None] | None = None) -> Transcript:
    return await Demo(info, echo).run(request_id, revoke_midway, corrupt)
