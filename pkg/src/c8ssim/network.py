"""Simulated untrusted network: every transmitted byte string is captured."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional


@dataclass(frozen=True)
class Capture:
    tick: int
    src: str
    dst: str
    kind: str
    data: bytes


class Network:
    def __init__(self, clock: Optional[Callable[[], int]] = None):
        self._clock = clock or (lambda: 0)
        self.captures: list[Capture] = []

    def transmit(self, src: str, dst: str, data: bytes, kind: str = "frame") -> bytes:
        self.captures.append(Capture(self._clock(), src, dst, kind, bytes(data)))
        return data

    def transcripts(self) -> dict[tuple[str, str], list[bytes]]:
        links: dict[tuple[str, str], list[bytes]] = {}
        for c in self.captures:
            links.setdefault((c.src, c.dst), []).append(c.data)
        return links

    def observed(self) -> bytes:
        return b"".join(c.data for c in self.captures)

    def contains(self, needle: bytes) -> bool:
        return any(needle in c.data for c in self.captures)
