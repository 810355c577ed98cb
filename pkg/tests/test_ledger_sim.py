from __future__ import annotations

import random

import pytest

from bpmnchain.errors import (ExecutionFailed, HashMismatch, NoExecutionContext, NotFound, UnknownHash,
                              ValidationError)
from bpmnchain.ledger_sim import (PROFILES, ActorIdentity, Chain, OffchainStore, build_chains, commit_block,
                                  load_profiles, read, verify_signature, write)
from bpmnchain.pipeline import data_path


def test_write_read_commit():
    ch = Chain("main")
    ctx = ch.begin("m")
    write(ch, "a", b"1", ctx)
    write(ch, "b", b"2", ctx)
    assert read(ch, "a", ctx) == b"1"
    with pytest.raises(NotFound):
        read(ch, "a")
    n = commit_block(ch, ctx)
    assert n == 1 and len(ch.blocks) == 1
    assert read(ch, "a") == b"1" and ch.version("a") == 1
    b = ch.blocks[0]
    assert (b.method, b.first, b.count) == ("m", 0, 2)


def test_versions_and_history():
    ch = Chain("main")
    for i in range(3):
        ctx = ch.begin(f"m{i}")
        ctx.put("k", str(i).encode())
        ch.commit_block(ctx)
    assert ch.version("k") == 3 and ch.version("missing") == 0
    assert [e.value for e in ch.history("k")] == [b"0", b"1", b"2"]
    assert [e.block for e in ch.history("k")] == [1, 2, 3]


def test_last_write_wins_within_one_block():
    ch = Chain("main")
    ctx = ch.begin("m")
    ctx.put("k", b"1")
    ctx.put("j", b"x")
    ctx.put("k", b"2")
    ch.commit_block(ctx)
    assert [(e.key, e.value) for e in ch.log] == [("j", b"x"), ("k", b"2")]


def test_abort_leaves_nothing():
    ch = Chain("main")
    ctx = ch.begin("m")
    ctx.put("k", b"v")
    ch.abort(ctx)
    assert ch.log == [] and ch.blocks == [] and ch.gas == 0
    with pytest.raises(ExecutionFailed):
        ch.commit_block(ctx)
    bad = ch.begin("m")
    bad.put("k", b"v")
    bad.failed = True
    with pytest.raises(ExecutionFailed):
        ch.commit_block(bad)
    assert ch.log == []


def test_writes_need_an_open_context():
    ch, other = Chain("a"), Chain("b")
    with pytest.raises(NoExecutionContext):
        write(ch, "k", b"v")
    with pytest.raises(NoExecutionContext):
        write(ch, "k", b"v", other.begin("m"))
    ctx = ch.begin("m")
    ch.commit_block(ctx)
    with pytest.raises(NoExecutionContext):
        ctx.put("k", b"v")


def test_gas_of_one_megabyte_write():
    ch = Chain("main", PROFILES["ethereum-like"])
    ctx = ch.begin("m")
    ctx.put("k", bytes(1024 * 1024))
    ch.commit_block(ctx)
    assert ch.blocks[0].gas == 62_054_400
    assert ch.gas == 62_054_400
    # block interval plus transfer time for 1024 KB
    assert ch.blocks[0].latency_ms == 12_000 + 1024 * 2.0


def test_gas_factor_block_gas_and_charges():
    side = Chain("q", PROFILES["quorum-like"])
    ctx = side.begin("m")
    ctx.put("k", bytes(2048))
    ctx.charge(1000)
    side.commit_block(ctx)
    assert side.blocks[0].gas == pytest.approx((2 * 60_600 + 1000) * 0.01)
    fab = Chain("f", PROFILES["fabric-channel"])
    ctx = fab.begin("m", metered=False)
    ctx.put("k", bytes(4096))
    fab.commit_block(ctx)
    assert fab.blocks[0].gas == 50_000
    main = Chain("main")
    ctx = main.begin("m")
    ctx.put("k", bytes(1024))
    ctx.put("meta", bytes(1024))
    ctx.free.add("meta")
    main.commit_block(ctx)
    assert main.blocks[0].gas == 60_600


def test_genesis_and_digests():
    ch = Chain("main")
    ch.genesis({"b": b"2", "a": b"1"})
    assert [e.key for e in ch.log] == ["a", "b"] and ch.blocks == []
    with pytest.raises(ExecutionFailed):
        ch.genesis({"c": b"3"})
    twin = Chain("main")
    twin.genesis({"a": b"1", "b": b"2"})
    assert ch.digest() == twin.digest() and ch.log_digest() == twin.log_digest()
    assert ch.digest(exclude=("b",)) != ch.digest()
    assert ch.snapshot("a") == {"a": b"1"}
    assert len(list(ch.dump_jsonl())) == 2


def test_offchain_store():
    store = OffchainStore()
    h = store.put(b"blob")
    assert store.put(b"blob") == h and len(store.blobs) == 1
    assert store.get(h) == b"blob"
    store.blobs[h] = b"tampered"
    with pytest.raises(HashMismatch):
        store.get(h)
    with pytest.raises(UnknownHash):
        store.get("0" * 64)


def test_signatures():
    a = ActorIdentity.derive("Buyer", 1)
    b = ActorIdentity.derive("Buyer", 2)
    sig = a.sign(b"vote:yes")
    assert a.verify(b"vote:yes", sig)
    assert not a.verify(b"vote:no", sig)
    assert not b.verify(b"vote:yes", sig)
    keys = {"Buyer": a}
    assert verify_signature(keys, "Buyer", b"vote:yes", sig)
    assert not verify_signature(keys, "Carrier", b"vote:yes", sig)
    assert ActorIdentity.derive("Buyer", 1) == a


def test_build_chains_and_profiles():
    chains = build_chains({"main": "ethereum-like", "side": "quorum-like"})
    assert chains["side"].profile.gas_factor == 0.01
    with pytest.raises(ValidationError):
        build_chains({"main": "nope"})
    prof = load_profiles(data_path("chains.json"))
    assert prof["ethereum-like"] == PROFILES["ethereum-like"]


def test_ledger_matches_dict_model():
    """Random interleaved executions checked against a plain dict and an append-only list."""
    rng = random.Random(5)
    for _ in range(60):
        ch = Chain("main")
        state: dict = {}
        log: list = []
        open_ctx: list = []
        for _ in range(80):
            r = rng.random()
            if r < 0.25 or not open_ctx:
                open_ctx.append((ch.begin(f"m{len(ch.blocks)}"), {}))
            elif r < 0.7:
                ctx, pend = rng.choice(open_ctx)
                k, v = rng.choice("abcde"), bytes([rng.randrange(256)]) * rng.randint(0, 40)
                ctx.put(k, v)
                pend.pop(k, None)
                pend[k] = v
                # isolation: nothing pending is visible outside its own context
                for k2 in "abcde":
                    if k2 in state:
                        assert ch.read(k2) == state[k2]
                    else:
                        with pytest.raises(NotFound):
                            ch.read(k2)
            else:
                i = rng.randrange(len(open_ctx))
                ctx, pend = open_ctx.pop(i)
                before = list(ch.log)
                if rng.random() < 0.7:
                    ch.commit_block(ctx)
                    for k, v in pend.items():
                        state[k] = v
                        log.append((k, v))
                else:
                    ch.abort(ctx)
                assert ch.log[:len(before)] == before
            assert ch.snapshot() == dict(sorted(state.items()))
            assert [(e.key, e.value) for e in ch.log] == log
