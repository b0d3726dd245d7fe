from __future__ import annotations

import asyncio
import json

import pytest
from conftest import BOB, T0, deploy, key_for, make_nodes

from travelrule.ledger import diff_ledger_bytes, verify_ledger_file
from travelrule.membership import Registry, revoke
from travelrule.node import (
    FileMockChain,
    JsonFileBackend,
    NodeConfig,
    NodeError,
    node_start,
    ops_request,
)

TERMINAL = {"COMPLETE", "REJECTED", "ABORTED", "TIMED_OUT"}


async def ops(server, request):
    return await ops_request("127.0.0.1", server.ops_port, request)


async def submit(server, customer="a-1", address="bc1q-bob", amount="0.25"):
    reply = await ops(server, {
        "op": "submit_transfer",
        "customer_id": customer,
        "beneficiary_address": {"asset": "BTC", "address": address},
        "asset": "BTC",
        "amount": amount,
    })
    assert reply["ok"], reply
    return reply["result"]["session_id"]


async def wait_terminal(server, sid, limit=10.0):
    loop = asyncio.get_running_loop()
    end = loop.time() + limit
    while loop.time() < end:
        reply = await ops(server, {"op": "status", "session_id": sid})
        if reply["ok"] and reply["result"]["state"] in TERMINAL:
            return reply["result"]
        await asyncio.sleep(0.05)
    raise AssertionError(f"session {sid} not terminal after {limit}s")


async def start_all(configs, names=None):
    servers = {}
    for vid in names or configs:
        servers[vid] = node_start(NodeConfig.load(configs[vid]))
        await servers[vid].start(tick_interval=0.05)
    return servers


async def stop_all(servers):
    for s in servers.values():
        await s.stop()


def test_two_nodes_over_tcp(tmp_path):
    configs = deploy(tmp_path)

    async def go():
        servers = await start_all(configs)
        try:
            sid = await submit(servers["alpha"])
            status = await wait_terminal(servers["alpha"], sid)
            for _ in range(100):
                if (await ops(servers["beta"], {"op": "status", "session_id": sid}))["result"]["state"] == "COMPLETE":
                    break
                await asyncio.sleep(0.05)
            channels = {v: (await ops(s, {"op": "channels"}))["result"] for v, s in servers.items()}
            return status, channels
        finally:
            await stop_all(servers)

    status, channels = asyncio.run(go())
    assert status["state"] == "COMPLETE"
    assert channels["alpha"] == channels["beta"] == [{"channel": "alpha__beta", "entries": 1}]
    a = (tmp_path / "alpha/data/channels/alpha__beta.jsonl").read_bytes()
    b = (tmp_path / "beta/data/channels/alpha__beta.jsonl").read_bytes()
    assert a == b and a.count(b"\n") == 1


def test_ops_errors_are_reported(tmp_path):
    configs = deploy(tmp_path)

    async def go():
        servers = await start_all(configs, ["alpha"])
        try:
            return [
                await ops(servers["alpha"], {"op": "nonsense"}),
                await ops(servers["alpha"], {"op": "status", "session_id": "0" * 32}),
                await ops(servers["alpha"], {"op": "submit_transfer", "customer_id": "a-1",
                                              "beneficiary_address": {"asset": "BTC", "address": "nowhere"},
                                              "asset": "BTC", "amount": "1"}),
            ]
        finally:
            await stop_all(servers)

    replies = asyncio.run(go())
    assert all(not r["ok"] for r in replies)
    assert "unknown op" in replies[0]["error"]
    assert "no route" in replies[2]["error"]


def test_unreachable_peer_times_out_without_entry(tmp_path):
    configs = deploy(tmp_path, timeout_s=0.5)

    async def go():
        servers = await start_all(configs, ["alpha"])
        try:
            sid = await submit(servers["alpha"])
            return await wait_terminal(servers["alpha"], sid), (await ops(servers["alpha"], {"op": "channels"}))
        finally:
            await stop_all(servers)

    status, channels = asyncio.run(go())
    assert status["state"] == "TIMED_OUT"
    assert channels["result"] == []


def test_fresh_data_dir_has_no_channels(tmp_path):
    configs = deploy(tmp_path)
    server = node_start(NodeConfig.load(configs["alpha"]))
    assert server.handle_op({"op": "channels"}) == []


def test_restart_reloads_ledger_and_rejects_tampering(tmp_path):
    configs = deploy(tmp_path)

    async def go():
        servers = await start_all(configs)
        try:
            sid = await submit(servers["alpha"])
            await wait_terminal(servers["alpha"], sid)
            await asyncio.sleep(0.2)
        finally:
            await stop_all(servers)

    asyncio.run(go())
    again = node_start(NodeConfig.load(configs["beta"]))
    assert again.handle_op({"op": "channels"}) == [{"channel": "alpha__beta", "entries": 1}]
    registry = Registry.load(tmp_path / "registry.json")
    replicas = [tmp_path / v / "data/channels/alpha__beta.jsonl" for v in ("alpha", "beta")]
    assert all(verify_ledger_file(r, registry).ok for r in replicas)
    assert diff_ledger_bytes(*(r.read_bytes() for r in replicas)).identical

    path = tmp_path / "beta/data/channels/alpha__beta.jsonl"
    raw = bytearray(path.read_bytes())
    raw[60] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(NodeError, match=r"corrupt ledger.*alpha__beta.*index 0"):
        node_start(NodeConfig.load(configs["beta"]))


def test_revoked_own_credential_refuses_start(tmp_path):
    configs = deploy(tmp_path)
    registry = Registry.load(tmp_path / "registry.json")
    revoke(key_for("authority"), registry, "beta")
    registry.save(tmp_path / "registry.json")
    with pytest.raises(NodeError, match="revoked"):
        node_start(NodeConfig.load(configs["beta"]))
    node_start(NodeConfig.load(configs["alpha"]))


def test_wrong_key_refuses_start(tmp_path):
    from travelrule.crypto import write_key_file

    configs = deploy(tmp_path)
    write_key_file(tmp_path / "beta/node.key", key_for("someone else"))
    with pytest.raises(NodeError, match="does not match"):
        node_start(NodeConfig.load(configs["beta"]))


def test_registry_file_refresh(tmp_path):
    configs = deploy(tmp_path)
    server = node_start(NodeConfig.load(configs["alpha"]))
    assert not server.refresh_registry()
    registry = Registry.load(tmp_path / "registry.json")
    revoke(key_for("authority"), registry, "beta")
    registry.save(tmp_path / "registry.json")
    assert server.refresh_registry()
    with pytest.raises(NodeError, match="not an authorized member"):
        server.handle_op({"op": "submit_transfer", "customer_id": "a-1",
                          "beneficiary_address": {"asset": "BTC", "address": "bc1q-bob"},
                          "asset": "BTC", "amount": "1"})


def test_config_rejects_self_peer(tmp_path):
    configs = deploy(tmp_path)
    data = json.loads(configs["alpha"].read_text())
    data["peers"]["alpha"] = "127.0.0.1:1"
    with pytest.raises(NodeError):
        NodeConfig.from_dict(data, base=configs["alpha"].parent)


def test_file_chain_shared_between_instances(tmp_path):
    a, b = FileMockChain(tmp_path / "chain.jsonl"), FileMockChain(tmp_path / "chain.jsonl")
    tx1 = a.execute_transfer(BOB.addresses[0], BOB.addresses[0], "BTC", "1", T0)
    tx2 = b.execute_transfer(BOB.addresses[0], BOB.addresses[0], "BTC", "1", T0)
    assert tx1.tx_id != tx2.tx_id
    assert b.get_tx(tx1.tx_id) == tx1 and a.get_tx(tx2.tx_id) == tx2


def test_json_backend_lookup(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"customers": [BOB.to_dict()]}))
    backend = JsonFileBackend(path)
    assert backend.get_customer("b-1") == BOB
    assert backend.lookup_customer_by_address(BOB.addresses[0]) == BOB
    assert backend.get_customer("nobody") is None


def test_in_process_nodes_complete_and_agree(tmp_path):
    wire, _, _, _ = make_nodes(tmp_path)
    alpha, beta = wire.nodes["alpha"], wire.nodes["beta"]
    sid = alpha.submit_transfer("a-1", BOB.addresses[0], "BTC", "2")
    wire.pump()
    assert alpha.get_session_status(sid)["state"] == beta.get_session_status(sid)["state"] == "COMPLETE"
    assert (tmp_path / "alpha/channels/alpha__beta.jsonl").read_bytes() == \
        (tmp_path / "beta/channels/alpha__beta.jsonl").read_bytes()
