import random

import pytest
from hypothesis import given, settings, strategies as st

from mixfed.onion import (
    Deliver,
    EmptyPath,
    Forward,
    InnerKind,
    InnerPayload,
    Invalid,
    L_PKT,
    MacFailure,
    NodeKeyPair,
    OnionContext,
    PayloadTooLarge,
    SurbAlreadyUsed,
    SurbReply,
    SurbTable,
    UnknownSurbId,
)


def make_nodes(n, rng=None):
    ids = [(rng or random).randbytes(8) if rng else bytes([i]) * 8 for i in range(n)]
    keys = {nid: NodeKeyPair.generate(nid) for nid in ids}
    pubs = {nid: kp.public_key for nid, kp in keys.items()}
    return ids, keys, pubs


@pytest.fixture
def ctx():
    return OnionContext(k_max=2)


@pytest.fixture
def rng():
    return random.Random(1234)


def peel_along(ctx, packet, path, keys):
    """Peel at each hop in order; returns the list of results."""
    results = []
    for i, hop in enumerate(path):
        res = ctx.peel(packet, keys[hop].private_key)
        results.append(res)
        if isinstance(res, Forward):
            assert res.next_hop == path[i + 1]
            packet = res.packet
        else:
            break
    return results


def test_single_hop_round_trip(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    payload = InnerPayload(InnerKind.FRAGMENT, b"hello fragment")
    pkt = ctx.build_packet(payload, [ids[1]], pubs, rng)
    assert len(pkt) == L_PKT
    res = ctx.peel(pkt, keys[ids[1]].private_key)
    assert isinstance(res, Deliver)
    assert res.payload.kind == InnerKind.FRAGMENT
    assert res.payload.body == b"hello fragment"
    assert res.payload.surb is None


def test_two_hop_round_trip(ctx, rng):
    ids, keys, pubs = make_nodes(3)
    path = [ids[0], ids[2]]
    pkt = ctx.build_packet(InnerPayload(InnerKind.ACK, b"payload P"), path, pubs, rng)
    first = ctx.peel(pkt, keys[ids[0]].private_key)
    assert isinstance(first, Forward)
    assert first.next_hop == ids[2]
    assert len(first.packet) == L_PKT
    second = ctx.peel(first.packet, keys[ids[2]].private_key)
    assert isinstance(second, Deliver)
    assert second.payload.body == b"payload P"


@pytest.mark.parametrize("k_max", [1, 2, 3, 5])
def test_round_trip_all_path_lengths(k_max):
    rng = random.Random(k_max)
    ctx = OnionContext(k_max=k_max)
    ids, keys, pubs = make_nodes(k_max + 1)
    for plen in range(1, k_max + 2):
        path = ids[:plen]
        body = rng.randbytes(rng.randint(0, min(200, ctx.inner_capacity - 4)))
        pkt = ctx.build_packet(InnerPayload(InnerKind.COVER, body), path, pubs, rng)
        results = peel_along(ctx, pkt, path, keys)
        assert all(isinstance(r, Forward) for r in results[:-1])
        assert isinstance(results[-1], Deliver)
        assert results[-1].payload.body == body


@settings(max_examples=25, deadline=None)
@given(
    plen=st.integers(min_value=1, max_value=3),
    body=st.binary(max_size=500),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(plen, body, seed):
    rng = random.Random(seed)
    ctx = OnionContext(k_max=2)
    ids, keys, pubs = make_nodes(3)
    path = ids[:plen]
    pkt = ctx.build_packet(InnerPayload(InnerKind.FRAGMENT, body), path, pubs, rng)
    assert len(pkt) == L_PKT
    results = peel_along(ctx, pkt, path, keys)
    assert isinstance(results[-1], Deliver)
    assert results[-1].payload.body == body


def test_nonce_freshness(ctx):
    ids, keys, pubs = make_nodes(2)
    payload = InnerPayload(InnerKind.FRAGMENT, b"same payload")
    a = ctx.build_packet(payload, [ids[1]], pubs, random.Random(1))
    b = ctx.build_packet(payload, [ids[1]], pubs, random.Random(2))
    assert len(a) == len(b) == L_PKT
    assert a != b


def test_empty_path_rejected(ctx, rng):
    with pytest.raises(EmptyPath):
        ctx.build_packet(InnerPayload(InnerKind.COVER, b""), [], {}, rng)
    with pytest.raises(EmptyPath):
        ctx.build_surb([], {}, rng)


def test_payload_too_large(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    body = b"x" * (ctx.inner_capacity + 1)
    with pytest.raises(PayloadTooLarge):
        ctx.build_packet(InnerPayload(InnerKind.FRAGMENT, body), [ids[1]], pubs, rng)


def test_tamper_rejection_every_bit_region(ctx, rng):
    """Flipping a bit anywhere in a delivered packet yields Invalid."""
    ids, keys, pubs = make_nodes(2)
    pkt = ctx.build_packet(InnerPayload(InnerKind.FRAGMENT, b"abc"), [ids[1]], pubs, rng)
    for pos in [0, 1, 20, 1 + 32 + 5, 1 + ctx.header_size + 3, 1 + ctx.header_size + 32 + 10, L_PKT - 1]:
        flipped = bytearray(pkt)
        flipped[pos] ^= 0x01
        res = ctx.peel(bytes(flipped), keys[ids[1]].private_key)
        assert isinstance(res, Invalid), f"bit flip at {pos} accepted"


def test_tamper_on_relayed_packet_caught_by_path(ctx, rng):
    """A payload bit flipped at the relay stage is rejected at final delivery."""
    ids, keys, pubs = make_nodes(3)
    path = [ids[0], ids[2]]
    pkt = ctx.build_packet(InnerPayload(InnerKind.FRAGMENT, b"abc"), path, pubs, rng)
    flipped = bytearray(pkt)
    flipped[L_PKT - 1] ^= 0x80  # payload padding region
    res = ctx.peel(bytes(flipped), keys[ids[0]].private_key)
    assert isinstance(res, Forward)  # relay cannot see payload integrity
    final = ctx.peel(res.packet, keys[ids[2]].private_key)
    assert isinstance(final, Invalid)


def test_wrong_key_invalid(ctx, rng):
    ids, keys, pubs = make_nodes(3)
    pkt = ctx.build_packet(InnerPayload(InnerKind.FRAGMENT, b"abc"), [ids[1]], pubs, rng)
    res = ctx.peel(pkt, keys[ids[2]].private_key)
    assert isinstance(res, Invalid)


def test_bad_length_invalid(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    res = ctx.peel(b"\x01" + b"\x00" * 100, keys[ids[1]].private_key)
    assert isinstance(res, Invalid)


def test_layer_confidentiality(ctx):
    """Bytes visible at hop i contain no later hop's node id."""
    rng = random.Random(99)
    ids = [rng.randbytes(8) for _ in range(3)]
    keys = {nid: NodeKeyPair.generate(nid) for nid in ids}
    pubs = {nid: kp.public_key for nid, kp in keys.items()}
    path = [ids[0], ids[1], ids[2]]
    ctx3 = OnionContext(k_max=2)
    pkt = ctx3.build_packet(InnerPayload(InnerKind.FRAGMENT, b"secret"), path, pubs, rng)
    # at hop 0 the wire must not contain hop 2's id (only hop 1's, inside its entry)
    assert ids[2] not in pkt
    res = ctx3.peel(pkt, keys[ids[0]].private_key)
    assert isinstance(res, Forward)
    # after the first peel, hop 1 sees hop 2's id only inside its own entry


def test_surb_direct_reply(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    me, other = ids[0], ids[1]
    surb, material = ctx.build_surb([me], pubs, rng)
    assert surb.first_hop == me
    first_hop, pkt = ctx.apply_surb(surb, b"ack!", rng)
    assert first_hop == me
    assert len(pkt) == L_PKT
    res = ctx.peel(pkt, keys[me].private_key)
    assert isinstance(res, SurbReply)
    assert res.surb_id == surb.surb_id
    table = SurbTable()
    table.register(material)
    assert table.unwrap(ctx, res.surb_id, res.body) == b"ack!"


def test_surb_two_hop_round_trip(ctx, rng):
    ids, keys, pubs = make_nodes(3)
    me, relay = ids[0], ids[1]
    surb, material = ctx.build_surb([relay, me], pubs, rng)
    first_hop, pkt = ctx.apply_surb(surb, b"ok signal", rng)
    assert first_hop == relay
    hop1 = ctx.peel(pkt, keys[relay].private_key)
    assert isinstance(hop1, Forward)
    assert hop1.next_hop == me
    final = ctx.peel(hop1.packet, keys[me].private_key)
    assert isinstance(final, SurbReply)
    table = SurbTable()
    table.register(material)
    assert table.unwrap(ctx, final.surb_id, final.body) == b"ok signal"
    # material deleted after one unwrap
    with pytest.raises(UnknownSurbId):
        table.unwrap(ctx, final.surb_id, final.body)


def test_surb_reply_indistinguishable_at_relay(ctx, rng):
    """A reply packet peels at the relay exactly like forward traffic."""
    ids, keys, pubs = make_nodes(3)
    surb, _ = ctx.build_surb([ids[1], ids[0]], pubs, rng)
    _, reply_pkt = ctx.apply_surb(surb, b"a", rng)
    fwd_pkt = ctx.build_packet(
        InnerPayload(InnerKind.FRAGMENT, b"b"), [ids[1], ids[2]], pubs, rng
    )
    assert len(reply_pkt) == len(fwd_pkt) == L_PKT
    res = ctx.peel(reply_pkt, keys[ids[1]].private_key)
    assert isinstance(res, Forward)


def test_surb_single_use_by_applier(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    surb, _ = ctx.build_surb([ids[0]], pubs, rng)
    used = set()
    ctx.apply_surb(surb, b"x", rng, used_ids=used)
    with pytest.raises(SurbAlreadyUsed):
        ctx.apply_surb(surb, b"x", rng, used_ids=used)


def test_surb_ids_and_paths_independent(ctx):
    rng = random.Random(7)
    ids, keys, pubs = make_nodes(3)
    s1, _ = ctx.build_surb([ids[1], ids[0]], pubs, rng)
    s2, _ = ctx.build_surb([ids[2], ids[0]], pubs, rng)
    assert s1.surb_id != s2.surb_id
    assert (s1.alpha, s1.beta) != (s2.alpha, s2.beta)


def test_unknown_surb_id(ctx, rng):
    table = SurbTable()
    with pytest.raises(UnknownSurbId):
        table.unwrap(ctx, b"\x00" * 16, b"\x00" * ctx.payload_size)


def test_reply_tamper_mac_failure(ctx, rng):
    ids, keys, pubs = make_nodes(2)
    surb, material = ctx.build_surb([ids[0]], pubs, rng)
    _, pkt = ctx.apply_surb(surb, b"ack", rng)
    flipped = bytearray(pkt)
    flipped[-1] ^= 0x01
    res = ctx.peel(bytes(flipped), keys[ids[0]].private_key)
    assert isinstance(res, SurbReply)  # relay-level mac covers the header only
    table = SurbTable()
    table.register(material)
    with pytest.raises(MacFailure):
        table.unwrap(ctx, res.surb_id, res.body)


def test_uniform_length_across_kinds(ctx, rng):
    ids, keys, pubs = make_nodes(3)
    lengths = set()
    for kind, body in [
        (InnerKind.FRAGMENT, b"f" * 520),
        (InnerKind.ACK, b""),
        (InnerKind.COVER, rng.randbytes(16)),
        (InnerKind.JOIN, b"j" * 60),
    ]:
        pkt = ctx.build_packet(InnerPayload(kind, body), [ids[1], ids[2]], pubs, rng)
        lengths.add(len(pkt))
    surb, _ = ctx.build_surb([ids[1], ids[0]], pubs, rng)
    _, reply = ctx.apply_surb(surb, b"ack", rng)
    lengths.add(len(reply))
    assert lengths == {L_PKT}


def test_fragment_with_attached_surb_fits(ctx, rng):
    """A 512-byte fragment body plus epoch/range metadata plus a SURB fits."""
    ids, keys, pubs = make_nodes(3)
    surb, _ = ctx.build_surb([ids[1], ids[0]], pubs, rng)
    body = b"\x00" * (12 + 512)  # epoch + range + 128 float32 values
    pkt = ctx.build_packet(
        InnerPayload(InnerKind.FRAGMENT, body, surb=surb), [ids[2]], pubs, rng
    )
    res = ctx.peel(pkt, keys[ids[2]].private_key)
    assert isinstance(res, Deliver)
    assert res.payload.body == body
    assert res.payload.surb is not None
    assert res.payload.surb.surb_id == surb.surb_id
    assert res.payload.surb.first_hop == ids[1]
