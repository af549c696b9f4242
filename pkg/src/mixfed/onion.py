"""Layered packet format: build, peel, and reply blocks.

Every packet in the system is exactly ``L_PKT`` bytes:

    [version 1B][alpha 32B][beta R][mac 32B][payload P]

``alpha`` is a curve25519 point shared by all hops and blinded at each peel,
``beta`` is the routing region (R = (K_max+1) * 41 bytes, one 41-byte entry
per hop plus filler), ``mac`` authenticates version+alpha+beta under the
current hop's key, and ``payload`` is the body under one XOR-stream layer per
hop.  Peeling re-pads, so the packet that leaves a relay is again L_PKT bytes
and bitwise unrelated to the one that arrived.  Payload integrity is enforced
end to end: the innermost plaintext is framed as

    [frame mac 32B][body length 2B][body][random padding]

and the frame mac is checked at final delivery (or, for replies, when the
originator unwraps).  See protocol.md for the full derivation of the sizes.

Reply blocks (``Surb``) are pre-built headers for an independently sampled
return path.  The replier never sees anything but the first hop; the
originator keeps the per-hop payload keys (``SurbKeyMaterial``) and is the
only party able to strip the reply.
"""

from __future__ import annotations

import hmac as hmac_mod
import hashlib
import random
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

L_PKT = 1024
VERSION = 1

NODE_ID_SIZE = 8
ALPHA_SIZE = 32
MAC_SIZE = 32
ENTRY_SIZE = 1 + NODE_ID_SIZE + MAC_SIZE  # flag + next hop id + next hop mac
SURB_ID_SIZE = 16
FRAME_OVERHEAD = MAC_SIZE + 2  # end-to-end frame mac + body length

FLAG_FORWARD = 0x01
FLAG_DELIVER = 0x02
FLAG_REPLY = 0x03


class InnerKind(IntEnum):
    FRAGMENT = 1
    ACK = 2
    COVER = 3
    JOIN = 4


class OnionError(Exception):
    pass


class EmptyPath(OnionError):
    pass


class PayloadTooLarge(OnionError):
    pass


class SurbAlreadyUsed(OnionError):
    pass


class UnknownSurbId(OnionError):
    pass


class MacFailure(OnionError):
    pass


@dataclass(frozen=True)
class NodeKeyPair:
    node_id: bytes
    public_key: bytes
    private_key: bytes

    @classmethod
    def generate(cls, node_id: bytes) -> "NodeKeyPair":
        if len(node_id) != NODE_ID_SIZE:
            raise ValueError(f"node_id must be {NODE_ID_SIZE} bytes")
        priv = X25519PrivateKey.generate()
        return cls(
            node_id=node_id,
            public_key=_raw_public(priv),
            private_key=priv.private_bytes(
                serialization.Encoding.Raw,
                serialization.PrivateFormat.Raw,
                serialization.NoEncryption(),
            ),
        )


@dataclass
class InnerPayload:
    kind: InnerKind
    body: bytes
    surb: "Surb | None" = None


@dataclass(frozen=True)
class Surb:
    surb_id: bytes
    first_hop: bytes
    alpha: bytes
    beta: bytes
    mac: bytes
    reply_key: bytes


@dataclass
class SurbKeyMaterial:
    surb_id: bytes
    hop_payload_keys: list[bytes]
    reply_key: bytes


@dataclass(frozen=True)
class Forward:
    next_hop: bytes
    packet: bytes


@dataclass(frozen=True)
class Deliver:
    payload: InnerPayload


@dataclass(frozen=True)
class SurbReply:
    surb_id: bytes
    body: bytes


@dataclass(frozen=True)
class Invalid:
    reason: str = ""


PeelResult = Forward | Deliver | SurbReply | Invalid


def _raw_public(priv: X25519PrivateKey) -> bytes:
    return priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def _dh(private_bytes: bytes, public_bytes: bytes) -> bytes:
    priv = X25519PrivateKey.from_private_bytes(private_bytes)
    return priv.exchange(X25519PublicKey.from_public_bytes(public_bytes))


def _stream(key: bytes, n: int) -> bytes:
    # Single-use key per hop per packet, so a zero nonce is safe.
    enc = Cipher(algorithms.AES(key), modes.CTR(b"\x00" * 16)).encryptor()
    return enc.update(b"\x00" * n)


def _xor(a: bytes, b: bytes) -> bytes:
    assert len(a) == len(b)
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(n, "little")


def _hmac(key: bytes, *parts: bytes) -> bytes:
    h = hmac_mod.new(key, digestmod=hashlib.sha256)
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class HopKeys:
    header: bytes
    payload: bytes
    mac: bytes
    blind: bytes
    endpoint: bytes


def _hop_keys(shared: bytes, alpha: bytes) -> HopKeys:
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=160,
        salt=None,
        info=b"mixfed/hop/v1" + alpha,
    ).derive(shared)
    return HopKeys(okm[0:32], okm[32:64], okm[64:96], okm[96:128], okm[128:160])


def _reply_keys(reply_key: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(
        algorithm=hashes.SHA256(), length=64, salt=None, info=b"mixfed/reply/v1"
    ).derive(reply_key)
    return okm[0:32], okm[32:64]


class OnionContext:
    """Packet geometry and the build/peel/reply operations for a fixed K_max."""

    def __init__(self, k_max: int, l_pkt: int = L_PKT):
        if k_max < 1:
            raise ValueError("k_max must be >= 1")
        self.k_max = k_max
        self.max_hops = k_max + 1  # relays plus the final recipient
        self.l_pkt = l_pkt
        self.routing_size = self.max_hops * ENTRY_SIZE
        self.header_size = ALPHA_SIZE + self.routing_size
        self.payload_size = l_pkt - 1 - self.header_size - MAC_SIZE
        if self.payload_size < FRAME_OVERHEAD + 16:
            raise ValueError("k_max too large for packet size")
        self.inner_capacity = self.payload_size - FRAME_OVERHEAD
        self.surb_size = (
            SURB_ID_SIZE + NODE_ID_SIZE + ALPHA_SIZE + self.routing_size + MAC_SIZE + 32
        )

    # -- packet field accessors ------------------------------------------------

    def header_of(self, packet: bytes) -> bytes:
        return packet[1 : 1 + self.header_size]

    def payload_of(self, packet: bytes) -> bytes:
        return packet[1 + self.header_size + MAC_SIZE :]

    def _assemble(self, alpha: bytes, beta: bytes, mac: bytes, payload: bytes) -> bytes:
        pkt = bytes([VERSION]) + alpha + beta + mac + payload
        assert len(pkt) == self.l_pkt
        return pkt

    # -- inner payload codec ---------------------------------------------------

    def encode_inner(self, payload: InnerPayload) -> bytes:
        flags = 1 if payload.surb is not None else 0
        out = struct.pack(">BBH", int(payload.kind), flags, len(payload.body))
        out += payload.body
        if payload.surb is not None:
            out += self.surb_to_bytes(payload.surb)
        if len(out) > self.inner_capacity:
            raise PayloadTooLarge(
                f"{len(out)} bytes > capacity {self.inner_capacity}"
            )
        return out

    def decode_inner(self, data: bytes) -> InnerPayload:
        kind, flags, body_len = struct.unpack(">BBH", data[:4])
        body = data[4 : 4 + body_len]
        surb = None
        if flags & 1:
            raw = data[4 + body_len : 4 + body_len + self.surb_size]
            surb = self.surb_from_bytes(raw)
        return InnerPayload(kind=InnerKind(kind), body=body, surb=surb)

    def surb_to_bytes(self, s: Surb) -> bytes:
        raw = s.surb_id + s.first_hop + s.alpha + s.beta + s.mac + s.reply_key
        assert len(raw) == self.surb_size
        return raw

    def surb_from_bytes(self, raw: bytes) -> Surb:
        if len(raw) != self.surb_size:
            raise OnionError("bad surb length")
        o = 0
        surb_id = raw[o : o + SURB_ID_SIZE]; o += SURB_ID_SIZE
        first_hop = raw[o : o + NODE_ID_SIZE]; o += NODE_ID_SIZE
        alpha = raw[o : o + ALPHA_SIZE]; o += ALPHA_SIZE
        beta = raw[o : o + self.routing_size]; o += self.routing_size
        mac = raw[o : o + MAC_SIZE]; o += MAC_SIZE
        reply_key = raw[o : o + 32]
        return Surb(surb_id, first_hop, alpha, beta, mac, reply_key)

    # -- header construction ---------------------------------------------------

    def _path_keys(
        self, path: list[bytes], public_keys: dict[bytes, bytes], rng: random.Random
    ) -> tuple[list[bytes], list[HopKeys]]:
        """Derive the per-hop alphas and keys along the path."""
        if not path:
            raise EmptyPath("path must contain at least one hop")
        if len(path) > self.max_hops:
            raise OnionError(f"path longer than {self.max_hops} hops")
        eph_priv = rng.randbytes(32)
        alphas = [_raw_public(X25519PrivateKey.from_private_bytes(eph_priv))]
        blinds: list[bytes] = []
        keys: list[HopKeys] = []
        for i, hop in enumerate(path):
            shared = _dh(eph_priv, public_keys[hop])
            for b in blinds:
                shared = _dh(b, shared)
            hk = _hop_keys(shared, alphas[i])
            keys.append(hk)
            blinds.append(hk.blind)
            if i + 1 < len(path):
                alphas.append(_dh(hk.blind, alphas[i]))
        return alphas, keys

    def _build_header(
        self,
        path: list[bytes],
        alphas: list[bytes],
        keys: list[HopKeys],
        final_entry: bytes,
        rng: random.Random,
    ) -> tuple[bytes, bytes]:
        """Nested routing region plus the first-hop mac. Returns (beta_0, mac_0)."""
        m = len(path)
        R, E = self.routing_size, ENTRY_SIZE
        streams = [_stream(k.header, R + E) for k in keys]
        # filler forced onto the final beta by the preceding hops' decryptions
        filler = b""
        for i in range(m - 1):
            filler = _xor(filler + b"\x00" * E, streams[i][R - len(filler) :])
        head_len = R - len(filler)
        head_plain = final_entry + rng.randbytes(head_len - E)
        beta = _xor(head_plain, streams[m - 1][:head_len]) + filler
        mac = _hmac(keys[m - 1].mac, bytes([VERSION]), alphas[m - 1], beta)
        for i in range(m - 2, -1, -1):
            entry = bytes([FLAG_FORWARD]) + path[i + 1] + mac
            beta = _xor(entry + beta[: R - E], streams[i][:R])
            mac = _hmac(keys[i].mac, bytes([VERSION]), alphas[i], beta)
        return beta, mac

    # -- public operations -------------------------------------------------------

    def build_packet(
        self,
        payload: InnerPayload,
        path: list[bytes],
        public_keys: dict[bytes, bytes],
        rng: random.Random,
    ) -> bytes:
        """Wrap ``payload`` so that peeling at each hop of ``path`` in order
        forwards it hop by hop and delivers it at the last."""
        inner = self.encode_inner(payload)
        alphas, keys = self._path_keys(path, public_keys, rng)
        final_entry = bytes([FLAG_DELIVER]) + b"\x00" * (ENTRY_SIZE - 1)
        beta, mac = self._build_header(path, alphas, keys, final_entry, rng)

        pad = rng.randbytes(self.payload_size - FRAME_OVERHEAD - len(inner))
        framed = struct.pack(">H", len(inner)) + inner + pad
        frame_mac = _hmac(keys[-1].endpoint, framed)
        plain = frame_mac + framed
        wire = plain
        for k in reversed(keys):
            wire = _xor(wire, _stream(k.payload, self.payload_size))
        return self._assemble(alphas[0], beta, mac, wire)

    def peel(self, packet: bytes, private_key: bytes) -> PeelResult:
        """Remove one layer. Forward/Deliver/SurbReply on authentic packets,
        Invalid otherwise; the caller drops Invalid silently."""
        if len(packet) != self.l_pkt:
            return Invalid("bad length")
        if packet[0] != VERSION:
            return Invalid("bad version")
        o = 1
        alpha = packet[o : o + ALPHA_SIZE]; o += ALPHA_SIZE
        beta = packet[o : o + self.routing_size]; o += self.routing_size
        mac = packet[o : o + MAC_SIZE]; o += MAC_SIZE
        payload = packet[o:]
        try:
            shared = _dh(private_key, alpha)
        except ValueError:
            return Invalid("bad point")
        hk = _hop_keys(shared, alpha)
        expect = _hmac(hk.mac, bytes([VERSION]), alpha, beta)
        if not hmac_mod.compare_digest(expect, mac):
            return Invalid("header mac")
        full = _xor(beta + b"\x00" * ENTRY_SIZE, _stream(hk.header, self.routing_size + ENTRY_SIZE))
        entry, next_beta = full[:ENTRY_SIZE], full[ENTRY_SIZE:]
        payload = _xor(payload, _stream(hk.payload, self.payload_size))
        flag = entry[0]
        if flag == FLAG_FORWARD:
            next_hop = entry[1 : 1 + NODE_ID_SIZE]
            next_mac = entry[1 + NODE_ID_SIZE : 1 + NODE_ID_SIZE + MAC_SIZE]
            alpha_next = _dh(hk.blind, alpha)
            return Forward(next_hop, self._assemble(alpha_next, next_beta, next_mac, payload))
        if flag == FLAG_DELIVER:
            frame_mac, framed = payload[:MAC_SIZE], payload[MAC_SIZE:]
            if not hmac_mod.compare_digest(_hmac(hk.endpoint, framed), frame_mac):
                return Invalid("payload mac")
            (inner_len,) = struct.unpack(">H", framed[:2])
            if inner_len > self.inner_capacity:
                return Invalid("bad inner length")
            try:
                return Deliver(self.decode_inner(framed[2 : 2 + inner_len]))
            except (OnionError, ValueError, struct.error):
                return Invalid("bad inner payload")
        if flag == FLAG_REPLY:
            surb_id = entry[1 : 1 + SURB_ID_SIZE]
            return SurbReply(surb_id, payload)
        return Invalid("bad flag")

    def build_surb(
        self,
        return_path: list[bytes],
        public_keys: dict[bytes, bytes],
        rng: random.Random,
    ) -> tuple[Surb, SurbKeyMaterial]:
        """Pre-build a single-use reply block over ``return_path`` (whose last
        hop must be the originator itself)."""
        if not return_path:
            raise EmptyPath("return path must contain at least one hop")
        surb_id = rng.randbytes(SURB_ID_SIZE)
        reply_key = rng.randbytes(32)
        alphas, keys = self._path_keys(return_path, public_keys, rng)
        final_entry = (
            bytes([FLAG_REPLY]) + surb_id + b"\x00" * (ENTRY_SIZE - 1 - SURB_ID_SIZE)
        )
        beta, mac = self._build_header(return_path, alphas, keys, final_entry, rng)
        surb = Surb(
            surb_id=surb_id,
            first_hop=return_path[0],
            alpha=alphas[0],
            beta=beta,
            mac=mac,
            reply_key=reply_key,
        )
        material = SurbKeyMaterial(
            surb_id=surb_id,
            hop_payload_keys=[k.payload for k in keys],
            reply_key=reply_key,
        )
        return surb, material

    def apply_surb(
        self,
        surb: Surb,
        ack_body: bytes,
        rng: random.Random,
        used_ids: set[bytes] | None = None,
    ) -> tuple[bytes, bytes]:
        """Wrap ``ack_body`` in the surb's pre-built layers.  Returns
        (first_hop, packet); the packet is indistinguishable from forward
        traffic on the wire."""
        if used_ids is not None:
            if surb.surb_id in used_ids:
                raise SurbAlreadyUsed(surb.surb_id.hex())
            used_ids.add(surb.surb_id)
        if len(ack_body) > self.payload_size - FRAME_OVERHEAD:
            raise PayloadTooLarge("ack body too large")
        enc_key, mac_key = _reply_keys(surb.reply_key)
        pad = rng.randbytes(self.payload_size - FRAME_OVERHEAD - len(ack_body))
        framed = struct.pack(">H", len(ack_body)) + ack_body + pad
        plain = _hmac(mac_key, framed) + framed
        payload = _xor(plain, _stream(enc_key, self.payload_size))
        packet = self._assemble(surb.alpha, surb.beta, surb.mac, payload)
        return surb.first_hop, packet

    def unwrap_surb_reply(self, body: bytes, material: SurbKeyMaterial) -> bytes:
        """Strip the per-hop layers and the replier's layer; returns the ack body.

        Each peel along the return path (the originator's own final peel
        included) XORs one hop keystream onto the reply, so all of them come
        off here."""
        if len(body) != self.payload_size:
            raise MacFailure("bad reply length")
        for k in material.hop_payload_keys:
            body = _xor(body, _stream(k, self.payload_size))
        enc_key, mac_key = _reply_keys(material.reply_key)
        plain = _xor(body, _stream(enc_key, self.payload_size))
        frame_mac, framed = plain[:MAC_SIZE], plain[MAC_SIZE:]
        if not hmac_mod.compare_digest(_hmac(mac_key, framed), frame_mac):
            raise MacFailure("reply frame mac")
        (n,) = struct.unpack(">H", framed[:2])
        return framed[2 : 2 + n]


class SurbTable:
    """Originator-side pending reply material, single-use by construction."""

    def __init__(self):
        self._pending: dict[bytes, SurbKeyMaterial] = {}

    def __len__(self) -> int:
        return len(self._pending)

    def register(self, material: SurbKeyMaterial) -> None:
        self._pending[material.surb_id] = material

    def discard(self, surb_id: bytes) -> None:
        self._pending.pop(surb_id, None)

    def unwrap(self, ctx: OnionContext, surb_id: bytes, body: bytes) -> bytes:
        material = self._pending.get(surb_id)
        if material is None:
            raise UnknownSurbId(surb_id.hex())
        ack = ctx.unwrap_surb_reply(body, material)
        del self._pending[surb_id]  # one successful unwrap only
        return ack
