"""Point-to-point delivery of protocol messages.

Wire format: a 4-byte big-endian length ``N`` followed by ``N`` bytes of
canonical JSON. The same framing carries peer messages over TCP and local
operations requests. :class:`SimNetwork` is a seeded, tick-driven stand-in
for the network used by the scenario harness.
"""

from __future__ import annotations

import asyncio
import enum
import json
import random
import struct
from collections import deque
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from travelrule.crypto import CanonicalizationError, KeyFormatError, canonical_bytes, sha256
from travelrule.datamodel import ValidationError
from travelrule.protocol import Message

MAX_FRAME = 1_048_576
_HEADER = struct.Struct(">I")


class FrameErrorKind(str, enum.Enum):
    OVERSIZE = "OVERSIZE"
    TRUNCATED = "TRUNCATED"
    MALFORMED = "MALFORMED"


class FrameError(ValueError):
    def __init__(self, kind: FrameErrorKind, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)


def encode_payload(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameError(FrameErrorKind.OVERSIZE, f"{len(payload)} bytes")
    return _HEADER.pack(len(payload)) + payload


def encode_frame(m: Message) -> bytes:
    return encode_payload(canonical_bytes(m.to_dict()))


def _strict_object_pairs(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out = dict(pairs)
    if len(out) != len(pairs):
        raise ValueError("duplicate key")
    return out


def _no_float(text: str) -> Any:
    raise ValueError("float literal")


def parse_canonical_json(payload: bytes) -> Any:
    """Parse ``payload`` and insist it is already in canonical form."""
    try:
        value = json.loads(
            payload.decode("utf-8"),
            object_pairs_hook=_strict_object_pairs,
            parse_float=_no_float,
            parse_constant=_no_float,
        )
        if canonical_bytes(value) != payload:
            raise FrameError(FrameErrorKind.MALFORMED, "payload is not canonical JSON")
    except FrameError:
        raise
    except (ValueError, RecursionError, CanonicalizationError) as exc:
        raise FrameError(FrameErrorKind.MALFORMED, type(exc).__name__) from None
    return value


def decode_payload(payload: bytes) -> Message:
    value = parse_canonical_json(payload)
    try:
        m = Message.from_dict(value)
    except (ValueError, KeyError, TypeError, ValidationError, KeyFormatError) as exc:
        raise FrameError(FrameErrorKind.MALFORMED, f"not a message: {type(exc).__name__}") from None
    return m


def _split(data: bytes) -> bytes:
    if len(data) < _HEADER.size:
        raise FrameError(FrameErrorKind.TRUNCATED, "incomplete length prefix")
    (n,) = _HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise FrameError(FrameErrorKind.OVERSIZE, f"declared length {n}")
    if len(data) < _HEADER.size + n:
        raise FrameError(FrameErrorKind.TRUNCATED, f"expected {n} payload bytes")
    if len(data) > _HEADER.size + n:
        raise FrameError(FrameErrorKind.MALFORMED, "trailing bytes after frame")
    return data[_HEADER.size :]


def decode_frame(data: bytes) -> Message:
    return decode_payload(_split(data))


def decode_raw_frame(data: bytes) -> Any:
    """Decode a frame carrying any canonical JSON value (used by the ops socket)."""
    return parse_canonical_json(_split(data))


async def read_payload(reader: asyncio.StreamReader) -> bytes | None:
    """Read one frame's payload; None on clean EOF between frames."""
    try:
        header = await reader.readexactly(_HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise FrameError(FrameErrorKind.TRUNCATED, "incomplete length prefix") from None
        return None
    (n,) = _HEADER.unpack(header)
    if n > MAX_FRAME:
        raise FrameError(FrameErrorKind.OVERSIZE, f"declared length {n}")
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError:
        raise FrameError(FrameErrorKind.TRUNCATED, f"expected {n} payload bytes") from None


async def write_payload(writer: asyncio.StreamWriter, payload: bytes) -> None:
    writer.write(encode_payload(payload))
    await writer.drain()


# --------------------------------------------------------------------------
# simulated network


@dataclass(frozen=True)
class LinkConfig:
    drop_probability: float = 0.0
    latency: tuple[int, int] = (1, 1)

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop probability must be in [0, 1]")
        lo, hi = self.latency
        if lo < 1 or hi < lo:
            raise ValueError("latency range must satisfy 1 <= min <= max")


@dataclass(frozen=True)
class Partition:
    """Cuts every link between different ``groups`` for ticks in ``[start, end)``."""

    start: int
    end: int
    groups: tuple[frozenset[str], ...]

    def cuts(self, tick: int, src: str, dst: str) -> bool:
        if not self.start <= tick < self.end:
            return False
        side = {v: i for i, g in enumerate(self.groups) for v in g}
        return src in side and dst in side and side[src] != side[dst]


@dataclass
class SimConfig:
    seed: int
    default_link: LinkConfig = field(default_factory=LinkConfig)
    links: dict[tuple[str, str], LinkConfig] = field(default_factory=dict)
    partitions: list[Partition] = field(default_factory=list)

    def link(self, src: str, dst: str) -> LinkConfig:
        return self.links.get((src, dst), self.default_link)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], seed: int) -> SimConfig:
        def link(d: Mapping[str, Any]) -> LinkConfig:
            return LinkConfig(
                drop_probability=float(d.get("drop_probability", "0")),
                latency=tuple(d.get("latency", [1, 1])),
            )

        links = {}
        for link_def in data.get("links", []):
            links[(link_def["from"], link_def["to"])] = link(link_def)
        parts = [
            Partition(p["start"], p["end"], tuple(frozenset(g) for g in p["groups"]))
            for p in data.get("partitions", [])
        ]
        return cls(seed=seed, default_link=link(data), links=links, partitions=parts)


@dataclass(frozen=True)
class Delivery:
    tick: int
    src: str
    dst: str
    frame: bytes


FrameMatcher = Callable[[bytes], bool]


@dataclass
class _Fault:
    src: str
    dst: str
    action: str  # "drop" | "duplicate" | "rewrite"
    match: FrameMatcher
    remaining: int
    rewrite: Callable[[bytes], bytes] | None = None


class SimNetwork:
    """Single-threaded network with per-link FIFO delivery, seeded loss and partitions."""

    def __init__(self, config: SimConfig, describe: Callable[[bytes], dict[str, Any]] | None = None):
        self.config = config
        self.describe = describe or (lambda frame: {})
        self.tick = 0
        self._rng = random.Random(config.seed)
        self._links: dict[tuple[str, str], deque[tuple[int, bytes]]] = {}
        self._last_at: dict[tuple[str, str], int] = {}
        self._faults: list[_Fault] = []
        self.log: list[dict[str, Any]] = []

    def add_fault(
        self,
        src: str,
        dst: str,
        action: str,
        match: FrameMatcher | None = None,
        count: int = 1,
        rewrite: Callable[[bytes], bytes] | None = None,
    ) -> None:
        if action not in ("drop", "duplicate", "rewrite"):
            raise ValueError(f"unknown fault action {action!r}")
        self._faults.append(_Fault(src, dst, action, match or (lambda f: True), count, rewrite))

    def _take_fault(self, src: str, dst: str, frame: bytes) -> _Fault | None:
        for fault in self._faults:
            if fault.remaining > 0 and (fault.src, fault.dst) == (src, dst) and fault.match(frame):
                fault.remaining -= 1
                return fault
        return None

    def _record(self, event: str, src: str, dst: str, frame: bytes, **extra: Any) -> None:
        self.log.append(
            {"tick": self.tick, "event": event, "src": src, "dst": dst,
             "frame": sha256(frame).hex()[:16], **self.describe(frame), **extra}
        )

    def send(self, src: str, dst: str, frame: bytes) -> None:
        link = self.config.link(src, dst)
        # draw both numbers unconditionally so the RNG stream never depends on outcomes
        roll = self._rng.random()
        latency = self._rng.randint(*link.latency)
        fault = self._take_fault(src, dst, frame)
        copies = [frame]
        if fault is not None:
            if fault.action == "drop":
                self._record("drop", src, dst, frame, cause="injected")
                return
            if fault.action == "duplicate":
                copies = [frame, frame]
            elif fault.action == "rewrite" and fault.rewrite is not None:
                copies = [fault.rewrite(frame)]
                self._record("rewrite", src, dst, frame)
        if roll < link.drop_probability:
            self._record("drop", src, dst, frame, cause="loss")
            return
        key = (src, dst)
        at = max(self.tick + latency, self._last_at.get(key, 0))
        self._last_at[key] = at
        queue = self._links.setdefault(key, deque())
        for copy in copies:
            queue.append((at, copy))
            self._record("send", src, dst, copy, deliver_at=at)

    def step(self) -> list[Delivery]:
        """Advance one tick and return what arrives, in deterministic link order."""
        self.tick += 1
        out: list[Delivery] = []
        for key in sorted(self._links):
            queue = self._links[key]
            while queue and queue[0][0] <= self.tick:
                _, frame = queue.popleft()
                src, dst = key
                if any(p.cuts(self.tick, src, dst) for p in self.config.partitions):
                    self._record("drop", src, dst, frame, cause="partition")
                    continue
                self._record("deliver", src, dst, frame)
                out.append(Delivery(self.tick, src, dst, frame))
        return out

    def idle(self) -> bool:
        return not any(self._links.values())

    def in_flight(self) -> Iterable[tuple[str, str, bytes]]:
        for (src, dst), queue in sorted(self._links.items()):
            for _, frame in queue:
                yield src, dst, frame
