"""The per-VASP node: protocol engine wired to ledger, registry, backend and chain.

:class:`VaspNode` is independent of the transport: it consumes frames and
hands outgoing frames to a ``send`` callback. :class:`NodeServer` runs a
VaspNode as an asyncio daemon with a TCP listener for peers and a loopback
operations socket for the CLI.
"""

from __future__ import annotations

import asyncio
import fcntl
import json
import logging
import os
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Protocol

from travelrule.crypto import KeyPair, canonical_bytes, digest_of, read_key_file
from travelrule.datamodel import (
    CustomerRecord,
    RealNameInfo,
    ReasonCode,
    TransactionInfo,
    VirtualAssetAddress,
    check_vasp_id,
)
from travelrule.ledger import LedgerError, LedgerStore
from travelrule.membership import Registry, verify_credential
from travelrule.protocol import (
    DEFAULT_TIMEOUT,
    DefaultPolicy,
    HandleResult,
    ProtocolEngine,
    ProtocolError,
    new_session_id,
)
from travelrule.transport import (
    FrameError,
    decode_frame,
    decode_payload,
    encode_frame,
    parse_canonical_json,
    read_payload,
    write_payload,
)

log = logging.getLogger(__name__)


class NodeError(Exception):
    pass


# --------------------------------------------------------------------------
# backend


class BackendAdapter(Protocol):
    def get_customer(self, customer_id: str) -> CustomerRecord | None: ...

    def lookup_customer_by_address(self, address: VirtualAssetAddress) -> CustomerRecord | None: ...

    def get_real_name(self, customer_id: str) -> RealNameInfo: ...


class InMemoryBackend:
    def __init__(self, customers: Iterable[CustomerRecord] = ()):
        self._by_id: dict[str, CustomerRecord] = {}
        for c in customers:
            if c.customer_id in self._by_id:
                raise ValueError(f"duplicate customer id {c.customer_id}")
            self._by_id[c.customer_id] = c

    def get_customer(self, customer_id: str) -> CustomerRecord | None:
        return self._by_id.get(customer_id)

    def customers(self) -> list[CustomerRecord]:
        return list(self._by_id.values())

    def lookup_customer_by_address(self, address: VirtualAssetAddress) -> CustomerRecord | None:
        for c in self._by_id.values():
            if address in c.addresses:
                return c
        return None

    def get_real_name(self, customer_id: str) -> RealNameInfo:
        return self._by_id[customer_id].real_name

    def remove(self, customer_id: str) -> None:
        self._by_id.pop(customer_id, None)


class JsonFileBackend(InMemoryBackend):
    """Backend fixture: ``{"customers": [CustomerRecord, ...]}``."""

    def __init__(self, path: str | os.PathLike[str]):
        data = json.loads(Path(path).read_text())
        super().__init__(CustomerRecord.from_dict(c) for c in data["customers"])


# --------------------------------------------------------------------------
# mock chain


class MockChain(Protocol):
    def execute_transfer(
        self,
        from_address: VirtualAssetAddress,
        to_address: VirtualAssetAddress,
        asset: str,
        amount: str,
        executed_at: datetime,
    ) -> TransactionInfo: ...

    def get_tx(self, tx_id: str) -> TransactionInfo | None: ...


def _tx_id(from_address, to_address, asset, amount, executed_at, nonce: int) -> str:
    return digest_of(
        {
            "from": from_address.to_dict(),
            "to": to_address.to_dict(),
            "asset": asset,
            "amount": amount,
            "executed_at": executed_at.isoformat(),
            "nonce": nonce,
        }
    ).hex()


class InMemoryChain:
    def __init__(self) -> None:
        self._txs: dict[str, TransactionInfo] = {}

    def execute_transfer(self, from_address, to_address, asset, amount, executed_at) -> TransactionInfo:
        tx = TransactionInfo(
            tx_id=_tx_id(from_address, to_address, asset, amount, executed_at, len(self._txs)),
            asset=asset,
            amount=amount,
            originator_address=from_address,
            beneficiary_address=to_address,
            executed_at=executed_at,
        )
        self._txs[tx.tx_id] = tx
        return tx

    def get_tx(self, tx_id: str) -> TransactionInfo | None:
        return self._txs.get(tx_id)

    def __len__(self) -> int:
        return len(self._txs)


class FileMockChain:
    """Chain shared by several node processes: one JSON line per executed transfer."""

    def __init__(self, path: str | os.PathLike[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def _read(self) -> list[TransactionInfo]:
        lines = self.path.read_bytes().splitlines()
        return [TransactionInfo.from_dict(json.loads(line)) for line in lines if line]

    def execute_transfer(self, from_address, to_address, asset, amount, executed_at) -> TransactionInfo:
        with open(self.path, "ab+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(0)
                nonce = sum(1 for line in fh if line.strip())
                tx = TransactionInfo(
                    tx_id=_tx_id(from_address, to_address, asset, amount, executed_at, nonce),
                    asset=asset,
                    amount=amount,
                    originator_address=from_address,
                    beneficiary_address=to_address,
                    executed_at=executed_at,
                )
                fh.write(canonical_bytes(tx.to_dict()) + b"\n")
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        return tx

    def get_tx(self, tx_id: str) -> TransactionInfo | None:
        return next((tx for tx in self._read() if tx.tx_id == tx_id), None)


# --------------------------------------------------------------------------
# config


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise NodeError(f"expected host:port, got {text!r}")
    return host, int(port)


@dataclass
class NodeConfig:
    vasp_id: str
    key_file: Path
    data_dir: Path
    listen: str
    ops_port: int
    peers: dict[str, str]
    routes: dict[tuple[str, str], str]
    registry_path: Path
    backend_path: Path
    chain_path: Path
    registry_refresh: timedelta = timedelta(seconds=60)
    timeout: timedelta = DEFAULT_TIMEOUT
    denylist_path: Path | None = None

    def __post_init__(self) -> None:
        check_vasp_id(self.vasp_id)
        if self.vasp_id in self.peers:
            raise NodeError("peer table must not contain the node itself")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path | None = None) -> NodeConfig:
        base = base or Path.cwd()

        def path(key: str) -> Path:
            p = Path(data[key])
            return p if p.is_absolute() else base / p

        routes = {(r["asset"], r["address"]): r["vasp"] for r in data.get("routes", [])}
        return cls(
            vasp_id=data["vasp_id"],
            key_file=path("key_file"),
            data_dir=path("data_dir"),
            listen=data["listen"],
            ops_port=int(data["ops_port"]),
            peers=dict(data.get("peers", {})),
            routes=routes,
            registry_path=path("registry_path"),
            backend_path=path("backend_path"),
            chain_path=path("chain_path"),
            registry_refresh=timedelta(seconds=float(data.get("registry_refresh_s", 60))),
            timeout=timedelta(seconds=float(data.get("timeout_s", 30))),
            denylist_path=path("denylist_path") if data.get("denylist_path") else None,
        )

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> NodeConfig:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base=path.parent)


def load_denylist(path: Path | None) -> list[str]:
    if path is None:
        return []
    names = json.loads(path.read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise NodeError("denylist must be a JSON list of names")
    return names


# --------------------------------------------------------------------------
# node core


@dataclass
class VaspNode:
    """One VASP's node. All calls must come from a single thread or event loop."""

    vasp_id: str
    key: KeyPair
    registry: Registry
    backend: BackendAdapter
    chain: MockChain
    routes: Mapping[tuple[str, str], str]
    send: Callable[[str, bytes], None]
    data_dir: Path | None = None
    denylist: Iterable[str] = ()
    clock: Callable[[], datetime] = field(default=lambda: datetime.now(timezone.utc))
    timeout: timedelta = DEFAULT_TIMEOUT
    session_ids: Callable[[], str] = new_session_id
    on_event: Callable[[dict[str, Any]], None] | None = None

    def __post_init__(self) -> None:
        cred = self.registry.credential(self.vasp_id)
        if cred is None:
            raise NodeError(f"missing credential for {self.vasp_id}")
        if cred.public_key != self.key.public_key:
            raise NodeError("credential public key does not match the node key")
        if not verify_credential(cred, self.registry, self.clock()):
            raise NodeError(f"own credential for {self.vasp_id} is revoked, expired or invalid")
        try:
            ledgers = LedgerStore(self.vasp_id, self.data_dir, self.registry)
        except LedgerError as exc:
            raise NodeError(f"corrupt ledger: {exc}") from exc
        self.engine = ProtocolEngine(
            vasp_id=self.vasp_id,
            key=self.key,
            registry=self.registry,
            ledgers=ledgers,
            backend=self.backend,
            chain=self.chain,
            routes=self.routes,
            policy=DefaultPolicy(self.denylist, self.chain),
            clock=self.clock,
            timeout=self.timeout,
            session_ids=self.session_ids,
            on_event=self.on_event,
        )

    @property
    def ledgers(self) -> LedgerStore:
        return self.engine.ledgers

    def set_registry(self, registry: Registry) -> None:
        self.registry = registry
        self.engine.registry = registry

    def _dispatch(self, res: HandleResult) -> HandleResult:
        for out in res.outbound:
            self.send(out.to, encode_frame(out.message))
        return res

    def receive(self, frame: bytes) -> HandleResult:
        try:
            m = decode_frame(frame)
        except FrameError as exc:
            log.warning("%s dropped undecodable frame: %s", self.vasp_id, exc.kind.value)
            return HandleResult(dropped=f"frame {exc.kind.value}")
        return self._dispatch(self.engine.handle_message(m))

    def receive_payload(self, payload: bytes) -> HandleResult:
        try:
            m = decode_payload(payload)
        except FrameError as exc:
            log.warning("%s dropped undecodable payload: %s", self.vasp_id, exc.kind.value)
            return HandleResult(dropped=f"frame {exc.kind.value}")
        return self._dispatch(self.engine.handle_message(m))

    def tick(self) -> HandleResult:
        return self._dispatch(self.engine.tick())

    def submit_transfer(
        self, customer_id: str, beneficiary_address: VirtualAssetAddress, asset: str, amount: str
    ) -> str:
        customer = self.backend.get_customer(customer_id)
        if customer is None:
            raise NodeError(f"unknown customer {customer_id}")
        own = customer.address_for(asset)
        if own is None:
            raise NodeError(f"customer {customer_id} holds no {asset} address")
        try:
            session, out = self.engine.initiate_transfer(
                customer.party_info(own), beneficiary_address, asset, amount
            )
        except ProtocolError as exc:
            raise NodeError(str(exc)) from exc
        self.send(out.to, encode_frame(out.message))
        return session.session_id

    def get_session_status(self, session_id: str) -> dict[str, Any]:
        try:
            return self.engine.get_session(session_id).status()
        except ProtocolError as exc:
            raise NodeError(str(exc)) from exc

    def flag_suspicious(self, entry_hash: bytes, reason: ReasonCode = ReasonCode.STR) -> str:
        try:
            session, out = self.engine.request_additional_info(entry_hash, reason)
        except ProtocolError as exc:
            raise NodeError(str(exc)) from exc
        self.send(out.to, encode_frame(out.message))
        return session.session_id

    def get_additional_info(self, session_id: str) -> RealNameInfo | None:
        try:
            return self.engine.additional_info(session_id)
        except ProtocolError as exc:
            raise NodeError(str(exc)) from exc


# --------------------------------------------------------------------------
# asyncio daemon


class NodeServer:
    """Runs a :class:`VaspNode` over TCP. Everything executes on one event loop."""

    def __init__(self, config: NodeConfig, clock: Callable[[], datetime] | None = None):
        self.config = config
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        key = read_key_file(config.key_file)
        registry = Registry.load(config.registry_path)
        self._registry_mtime = config.registry_path.stat().st_mtime_ns
        self.node = VaspNode(
            vasp_id=config.vasp_id,
            key=key,
            registry=registry,
            backend=JsonFileBackend(config.backend_path),
            chain=FileMockChain(config.chain_path),
            routes=config.routes,
            send=self._enqueue,
            data_dir=config.data_dir,
            denylist=load_denylist(config.denylist_path),
            clock=self.clock,
            timeout=config.timeout,
        )
        self._outboxes: dict[str, asyncio.Queue[bytes]] = {}
        self._writers: list[asyncio.Task[None]] = []
        self._servers: list[asyncio.AbstractServer] = []
        self._timer: asyncio.Task[None] | None = None
        self._last_refresh = self.clock()

    # -- outbound ------------------------------------------------------------

    def _enqueue(self, peer: str, frame: bytes) -> None:
        queue = self._outboxes.get(peer)
        if queue is None:
            queue = self._outboxes[peer] = asyncio.Queue()
            self._writers.append(asyncio.get_running_loop().create_task(self._writer(peer, queue)))
        queue.put_nowait(frame)

    async def _writer(self, peer: str, queue: asyncio.Queue[bytes]) -> None:
        # one writer per peer keeps per-link FIFO order
        writer: asyncio.StreamWriter | None = None
        while True:
            frame = await queue.get()
            address = self.config.peers.get(peer)
            if address is None:
                log.warning("%s has no address for peer %s; frame dropped", self.config.vasp_id, peer)
                continue
            try:
                if writer is None or writer.is_closing():
                    host, port = _host_port(address)
                    _, writer = await asyncio.open_connection(host, port)
                writer.write(frame)
                await writer.drain()
            except OSError as exc:
                log.warning("%s could not reach %s: %s", self.config.vasp_id, peer, type(exc).__name__)
                writer = None

    # -- inbound ---------------------------------------------------------------

    async def _handle_peer(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                payload = await read_payload(reader)
                if payload is None:
                    break
                self.node.receive_payload(payload)
        except FrameError as exc:
            log.warning("%s closing peer connection: %s", self.config.vasp_id, exc.kind.value)
        except ConnectionError:
            pass
        finally:
            writer.close()

    async def _handle_ops(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                payload = await read_payload(reader)
                if payload is None:
                    break
                try:
                    request = parse_canonical_json(payload)
                    response = {"ok": True, "result": self.handle_op(request)}
                except (FrameError, NodeError, KeyError, TypeError, ValueError) as exc:
                    response = {"ok": False, "error": str(exc)}
                await write_payload(writer, canonical_bytes(response))
        except (FrameError, ConnectionError):
            pass
        finally:
            writer.close()

    def handle_op(self, request: Mapping[str, Any]) -> Any:
        op = request.get("op")
        if op == "submit_transfer":
            sid = self.node.submit_transfer(
                request["customer_id"],
                VirtualAssetAddress.from_dict(request["beneficiary_address"]),
                request["asset"],
                request["amount"],
            )
            return {"session_id": sid}
        if op == "status":
            return self.node.get_session_status(request["session_id"])
        if op == "flag":
            sid = self.node.flag_suspicious(
                bytes.fromhex(request["entry_hash"]), ReasonCode(request.get("reason", "STR"))
            )
            return {"session_id": sid}
        if op == "additional_info":
            info = self.node.get_additional_info(request["session_id"])
            return info.to_dict() if info else None
        if op == "channels":
            return [
                {"channel": str(c.channel), "entries": len(c)} for c in self.node.ledgers.channels()
            ]
        raise NodeError(f"unknown op {op!r}")

    # -- timers ----------------------------------------------------------------

    def refresh_registry(self) -> bool:
        """Reload the registry snapshot if the file changed; returns True on swap."""
        try:
            mtime = self.config.registry_path.stat().st_mtime_ns
            if mtime == self._registry_mtime:
                return False
            registry = Registry.load(self.config.registry_path)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("%s kept old registry: %s", self.config.vasp_id, exc)
            return False
        self._registry_mtime = mtime
        self.node.set_registry(registry)
        log.info("%s registry refreshed", self.config.vasp_id)
        return True

    async def _timers(self, interval: float) -> None:
        while True:
            await asyncio.sleep(interval)
            self.node.tick()
            now = self.clock()
            if now - self._last_refresh >= self.config.registry_refresh:
                self._last_refresh = now
                self.refresh_registry()

    # -- lifecycle -------------------------------------------------------------

    async def start(self, tick_interval: float = 0.2) -> None:
        host, port = _host_port(self.config.listen)
        self._servers.append(await asyncio.start_server(self._handle_peer, host, port))
        self._servers.append(await asyncio.start_server(self._handle_ops, "127.0.0.1", self.config.ops_port))
        self._timer = asyncio.get_running_loop().create_task(self._timers(tick_interval))
        log.info("%s listening on %s (ops %d)", self.config.vasp_id, self.config.listen, self.config.ops_port)

    @property
    def peer_port(self) -> int:
        return self._servers[0].sockets[0].getsockname()[1]

    @property
    def ops_port(self) -> int:
        return self._servers[1].sockets[0].getsockname()[1]

    async def stop(self) -> None:
        for task in [*self._writers, *([self._timer] if self._timer else [])]:
            task.cancel()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        self._servers.clear()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()


def node_start(config: NodeConfig) -> NodeServer:
    """Validate config, credential and stored ledgers; return a server ready to start."""
    try:
        return NodeServer(config)
    except (OSError, ValueError, KeyError) as exc:
        raise NodeError(f"cannot start node: {exc}") from exc


async def ops_request(host: str, port: int, request: Mapping[str, Any]) -> Any:
    reader, writer = await asyncio.open_connection(host, port)
    try:
        await write_payload(writer, canonical_bytes(request))
        payload = await read_payload(reader)
    finally:
        writer.close()
    if payload is None:
        raise NodeError("operations socket closed without a response")
    return json.loads(payload)
