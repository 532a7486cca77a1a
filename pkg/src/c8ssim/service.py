"""CDS endpoints over the simulated transport.

Every response is a status byte (0 ok, 1 error) followed by either the
canonical encoding of the result or ``text(error class) | text(message)``.
"""

from __future__ import annotations

from typing import Callable, Optional

from .cds import (
    AllowList,
    CdsCluster,
    CdsError,
    DepositService,
    MeshCertificate,
    Role,
)
from .network import Network
from .tee import evidence_from_bytes
from .wire import Malformed, Reader, Writer

ENDPOINTS = (
    "get-cds-report",
    "get-manifest",
    "challenge",
    "appraise-issue",
    "beacon",
    "allowlist-versions",
    "broker",
)

OK, ERROR = 0, 1


class EndpointError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind
        self.message = message


def ok(payload: bytes) -> bytes:
    return bytes([OK]) + payload


def error(kind: str, message: str) -> bytes:
    return bytes([ERROR]) + Writer().text(kind).text(message).getvalue()


def unwrap_response(data: bytes) -> bytes:
    if not data:
        raise EndpointError("Malformed", "empty response")
    if data[0] == OK:
        return data[1:]
    r = Reader(data[1:])
    raise EndpointError(r.text(), r.text())


class CdsService:
    """Dispatches endpoint calls to a live replica of the cluster."""

    def __init__(
        self,
        cluster: CdsCluster,
        deposit: Optional[DepositService] = None,
        network: Optional[Network] = None,
        debug: bool = False,
        address: str = "cds",
    ):
        self.cluster = cluster
        self.deposit = deposit
        self.network = network
        self.debug = debug
        self.address = address
        self.debug_log: list[str] = []
        self.calls: list[str] = []
        self._handlers: dict[str, Callable[[Reader], bytes]] = {
            "get-cds-report": self._report,
            "get-manifest": self._manifest,
            "challenge": self._challenge,
            "appraise-issue": self._appraise_issue,
            "beacon": self._beacon,
            "allowlist-versions": self._allowlist_versions,
            "broker": self._broker,
        }

    def handle(self, endpoint: str, body: bytes, caller: str = "client") -> bytes:
        self.calls.append(endpoint)
        if self.network is not None:
            self.network.transmit(caller, self.address, body, f"cds:{endpoint}")
        handler = self._handlers.get(endpoint)
        if handler is None:
            response = error("UnknownEndpoint", endpoint)
        else:
            try:
                r = Reader(body)
                response = ok(handler(r))
            except Malformed as exc:
                response = error("Malformed", str(exc))
            except CdsError as exc:
                response = error(type(exc).__name__, str(exc))
        if self.network is not None:
            self.network.transmit(self.address, caller, response, f"cds:{endpoint}")
        if self.debug:
            self.debug_log.append(render(endpoint, response))
        return response

    def transport(self, caller: str = "client") -> Callable[[str, bytes], bytes]:
        return lambda endpoint, body: self.handle(endpoint, body, caller)

    # each handler reads its request and returns the canonical payload
    def _report(self, r: Reader) -> bytes:
        nonce = r.blob()
        r.done()
        replica = self.cluster.pick()
        return Writer().blob(replica.own_report(nonce).to_bytes()).blob(replica.public_key).getvalue()

    def _manifest(self, r: Reader) -> bytes:
        now = r.u64()
        r.done()
        return self.cluster.pick().manifest(now).to_bytes()

    def _challenge(self, r: Reader) -> bytes:
        requester, now = r.text(), r.u64()
        r.done()
        # nonces live on the replica that issued them
        return self.cluster.primary().issue_challenge(requester, now)

    def _appraise_issue(self, r: Reader) -> bytes:
        evidence = evidence_from_bytes(r.blob())
        nonce, key, now = r.blob(), r.blob(), r.u64()
        role = Role(r.text())
        ns, uid, hint = r.text(), r.text(), r.text()
        r.done()
        cert = self.cluster.primary().attest_and_issue(evidence, nonce, key, now, role, (ns, uid), hint)
        return cert.to_bytes()

    def _beacon(self, r: Reader) -> bytes:
        now = r.u64()
        cert = MeshCertificate.from_bytes(r.blob())
        r.done()
        return self.cluster.pick().issue_beacon(now, cert).to_bytes()

    def _allowlist_versions(self, r: Reader) -> bytes:
        r.done()
        current, previous = self.cluster.pick().allowlist_versions()
        w = Writer().blob(current.to_bytes()).flag(previous is not None)
        if previous is not None:
            w.blob(previous.to_bytes())
        return w.getvalue()

    def _broker(self, r: Reader) -> bytes:
        secret_id = r.text()
        evidence = evidence_from_bytes(r.blob())
        requester_pub, nonce, now = r.blob(), r.blob(), r.u64()
        r.done()
        out = self.cluster.primary().broker_secret(
            secret_id, evidence, requester_pub, nonce, now, deposit=self.deposit
        )
        return out.to_bytes()


def appraise_issue_request(
    evidence: bytes, nonce: bytes, key: bytes, now: int, role: Role, subject: tuple[str, str], hint: str = ""
) -> bytes:
    w = Writer().blob(evidence).blob(nonce).blob(key).u64(now).text(Role(role).value)
    return w.text(subject[0]).text(subject[1]).text(hint).getvalue()


def decode_allowlist_versions(payload: bytes) -> tuple[AllowList, Optional[AllowList]]:
    r = Reader(payload)
    current = AllowList.from_bytes(r.blob())
    previous = AllowList.from_bytes(r.blob()) if r.flag() else None
    r.done()
    return current, previous


def render(endpoint: str, response: bytes) -> str:
    """Human-readable rendering of a response for debugging."""
    lines = [f"endpoint: {endpoint}"]
    try:
        payload = unwrap_response(response)
    except EndpointError as exc:
        lines += ["status: error", f"error: {exc.kind}", f"message: {exc.message}"]
        return "\n".join(lines)
    lines += ["status: ok", f"length: {len(payload)}", f"payload: {payload[:64].hex()}"
              + ("..." if len(payload) > 64 else "")]
    return "\n".join(lines)
