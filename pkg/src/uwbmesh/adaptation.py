"""IPv6-over-UWB adaptation: header compression and fragmentation codecs.

A 40-byte IPv6 header compresses to 3 bytes in the best case (dispatch byte
plus two encoding bytes, everything else elided) and never exceeds 41 bytes.
Datagrams that do not fit one frame are split into a 4-byte FRAG1 header
carrying 112 payload bytes and 5-byte FRAGN headers carrying 104 bytes each
(offsets in 8-byte units), so a 1280-byte datagram crosses the air in exactly
13 frames.  Compression happens before fragmentation; the fragment headers
count the compressed datagram.

Wire formats are byte-exact and stable:

  compressed header:  0x7A | enc1 | enc2 | inline fields (TC, FL, NH, HL, src, dst)
  FRAG1:              5-bit dispatch 11000 | 11-bit datagram size | 16-bit tag
  FRAGN:              5-bit dispatch 11100 | 11-bit datagram size | 16-bit tag | offset/8

enc1 bits: 7 TC elided, 6 FL elided, 5 NH elided (UDP), 4-3 hop-limit mode
(0 inline, 1/2/3 = 1/64/255), 2 src derived from MAC, 1 dst derived from MAC.
enc2 bits: 7-6 src address mode, 5-4 dst address mode (0 full 16 bytes inline,
1 link-local with 8-byte IID inline, 2 link-local derived from the carrying
frame's MAC address, no inline bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

DISPATCH_IPHC = 0x7A
DISPATCH_FRAG1 = 0xC0  # high 5 bits 11000
DISPATCH_FRAGN = 0xE0  # high 5 bits 11100
NEXT_HEADER_UDP = 17

MAX_MAC_PAYLOAD = 116
FRAG1_HEADER = 4
FRAGN_HEADER = 5
FRAG1_PAYLOAD = MAX_MAC_PAYLOAD - FRAG1_HEADER          # 112, already a multiple of 8
FRAGN_PAYLOAD = (MAX_MAC_PAYLOAD - FRAGN_HEADER) // 8 * 8  # 104
MAX_DATAGRAM = 0x7FF  # 11-bit size field
DEFAULT_REASSEMBLY_TIMEOUT_SF = 20

_HL_MODES = {1: 1, 64: 2, 255: 3}
_HL_VALUES = {1: 1, 2: 64, 3: 255}

ADDR_FULL = 0
ADDR_LINK_LOCAL_IID = 1
ADDR_FROM_MAC = 2


class AdaptationError(Exception):
    pass


def link_local_from_mac(short_addr: int) -> bytes:
    """fe80::ff:fe00:xxxx for a 16-bit short address."""
    return bytes([0xFE, 0x80] + [0] * 6 + [0, 0, 0, 0xFF, 0xFE, 0, (short_addr >> 8) & 0xFF, short_addr & 0xFF])


@dataclass(frozen=True)
class Ipv6Header:
    traffic_class: int
    flow_label: int
    payload_length: int
    next_header: int
    hop_limit: int
    src: bytes
    dst: bytes
    version: int = 6

    def __post_init__(self):
        if self.version != 6:
            raise AdaptationError(f"version {self.version} is not 6")
        if len(self.src) != 16 or len(self.dst) != 16:
            raise AdaptationError("addresses must be 16 bytes")

    def to_bytes(self) -> bytes:
        word = (self.version << 28) | (self.traffic_class << 20) | self.flow_label
        return struct.pack(">IHBB", word, self.payload_length, self.next_header,
                           self.hop_limit) + self.src + self.dst

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ipv6Header":
        if len(data) < 40:
            raise AdaptationError("truncated IPv6 header")
        word, plen, nh, hl = struct.unpack_from(">IHBB", data, 0)
        version = word >> 28
        if version != 6:
            raise AdaptationError(f"version {version} is not 6")
        return cls(
            traffic_class=(word >> 20) & 0xFF,
            flow_label=word & 0xFFFFF,
            payload_length=plen,
            next_header=nh,
            hop_limit=hl,
            src=bytes(data[8:24]),
            dst=bytes(data[24:40]),
        )


def _address_mode(addr: bytes, mac: int) -> int:
    if addr == link_local_from_mac(mac):
        return ADDR_FROM_MAC
    if addr[:8] == bytes([0xFE, 0x80, 0, 0, 0, 0, 0, 0]):
        return ADDR_LINK_LOCAL_IID
    return ADDR_FULL


@dataclass(frozen=True)
class CompressedHeader:
    tc_elided: bool
    fl_elided: bool
    nh_elided: bool
    hl_mode: int
    src_mode: int
    dst_mode: int
    traffic_class: int = 0
    flow_label: int = 0
    next_header: int = NEXT_HEADER_UDP
    hop_limit: int = 64
    src_inline: bytes = b""
    dst_inline: bytes = b""

    @property
    def size(self) -> int:
        return len(self.to_bytes())

    def to_bytes(self) -> bytes:
        enc1 = (
            (self.tc_elided << 7)
            | (self.fl_elided << 6)
            | (self.nh_elided << 5)
            | (self.hl_mode << 3)
            | ((self.src_mode == ADDR_FROM_MAC) << 2)
            | ((self.dst_mode == ADDR_FROM_MAC) << 1)
        )
        enc2 = (self.src_mode << 6) | (self.dst_mode << 4)
        out = bytearray([DISPATCH_IPHC, enc1, enc2])
        if not self.tc_elided:
            out.append(self.traffic_class)
        if not self.fl_elided:
            out += self.flow_label.to_bytes(3, "big")
        if not self.nh_elided:
            out.append(self.next_header)
        if self.hl_mode == 0:
            out.append(self.hop_limit)
        out += self.src_inline
        out += self.dst_inline
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> Tuple["CompressedHeader", int]:
        """Decode the compressed header at the start of `data`; returns the
        header and the number of bytes consumed."""
        if len(data) < 3:
            raise AdaptationError("truncated compressed header")
        if data[0] != DISPATCH_IPHC:
            raise AdaptationError(f"unknown dispatch 0x{data[0]:02X}")
        enc1, enc2 = data[1], data[2]
        tc_elided = bool(enc1 & 0x80)
        fl_elided = bool(enc1 & 0x40)
        nh_elided = bool(enc1 & 0x20)
        hl_mode = (enc1 >> 3) & 0x03
        src_mode = (enc2 >> 6) & 0x03
        dst_mode = (enc2 >> 4) & 0x03
        off = 3

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(data):
                raise AdaptationError("truncated inline fields")
            piece = data[off : off + n]
            off += n
            return piece

        tc = 0 if tc_elided else take(1)[0]
        fl = 0 if fl_elided else int.from_bytes(take(3), "big")
        nh = NEXT_HEADER_UDP if nh_elided else take(1)[0]
        hl = _HL_VALUES[hl_mode] if hl_mode else take(1)[0]
        src_inline = take({ADDR_FULL: 16, ADDR_LINK_LOCAL_IID: 8, ADDR_FROM_MAC: 0}[src_mode])
        dst_inline = take({ADDR_FULL: 16, ADDR_LINK_LOCAL_IID: 8, ADDR_FROM_MAC: 0}[dst_mode])
        return (
            cls(tc_elided, fl_elided, nh_elided, hl_mode, src_mode, dst_mode,
                tc, fl, nh, hl, bytes(src_inline), bytes(dst_inline)),
            off,
        )


def compress(header: Ipv6Header, src_mac: int, dst_mac: int) -> CompressedHeader:
    """Elide every field whose elision condition holds; minimal under this
    scheme and lossless with respect to :func:`decompress`."""
    src_mode = _address_mode(header.src, src_mac)
    dst_mode = _address_mode(header.dst, dst_mac)
    return CompressedHeader(
        tc_elided=header.traffic_class == 0,
        fl_elided=header.flow_label == 0,
        nh_elided=header.next_header == NEXT_HEADER_UDP,
        hl_mode=_HL_MODES.get(header.hop_limit, 0),
        src_mode=src_mode,
        dst_mode=dst_mode,
        traffic_class=header.traffic_class,
        flow_label=header.flow_label,
        next_header=header.next_header,
        hop_limit=header.hop_limit,
        src_inline=header.src[8:] if src_mode == ADDR_LINK_LOCAL_IID
        else header.src if src_mode == ADDR_FULL else b"",
        dst_inline=header.dst[8:] if dst_mode == ADDR_LINK_LOCAL_IID
        else header.dst if dst_mode == ADDR_FULL else b"",
    )


def decompress(
    ch: CompressedHeader, src_mac: int, dst_mac: int, payload_length: int
) -> Ipv6Header:
    """Reconstruct the exact original header using the carrying frame's MAC
    addresses; payload length comes from the frame / datagram size."""
    prefix = bytes([0xFE, 0x80, 0, 0, 0, 0, 0, 0])
    if ch.src_mode == ADDR_FROM_MAC:
        src = link_local_from_mac(src_mac)
    elif ch.src_mode == ADDR_LINK_LOCAL_IID:
        src = prefix + ch.src_inline
    else:
        src = ch.src_inline
    if ch.dst_mode == ADDR_FROM_MAC:
        dst = link_local_from_mac(dst_mac)
    elif ch.dst_mode == ADDR_LINK_LOCAL_IID:
        dst = prefix + ch.dst_inline
    else:
        dst = ch.dst_inline
    return Ipv6Header(
        traffic_class=0 if ch.tc_elided else ch.traffic_class,
        flow_label=0 if ch.fl_elided else ch.flow_label,
        payload_length=payload_length,
        next_header=NEXT_HEADER_UDP if ch.nh_elided else ch.next_header,
        hop_limit=_HL_VALUES[ch.hl_mode] if ch.hl_mode else ch.hop_limit,
        src=src,
        dst=dst,
    )


def decompress_bytes(data: bytes, src_mac: int, dst_mac: int) -> Tuple[Ipv6Header, bytes]:
    """Decode a compressed datagram: header plus the trailing payload bytes."""
    ch, consumed = CompressedHeader.parse(data)
    payload = data[consumed:]
    return decompress(ch, src_mac, dst_mac, len(payload)), payload


@dataclass(frozen=True)
class FragmentHeader:
    kind: str  # "frag1" | "fragn"
    datagram_size: int
    datagram_tag: int
    offset: int = 0  # bytes; FRAGN only, multiple of 8

    def to_bytes(self) -> bytes:
        if self.kind == "frag1":
            word = DISPATCH_FRAG1 << 8 | self.datagram_size
            return struct.pack(">HH", word, self.datagram_tag)
        word = DISPATCH_FRAGN << 8 | self.datagram_size
        return struct.pack(">HHB", word, self.datagram_tag, self.offset // 8)

    @classmethod
    def parse(cls, data: bytes) -> Tuple["FragmentHeader", int]:
        if len(data) < FRAG1_HEADER:
            raise AdaptationError("truncated fragment header")
        word, tag = struct.unpack_from(">HH", data, 0)
        dispatch = (word >> 8) & 0xF8
        size = word & MAX_DATAGRAM
        if dispatch == DISPATCH_FRAG1:
            return cls("frag1", size, tag), FRAG1_HEADER
        if dispatch == DISPATCH_FRAGN:
            if len(data) < FRAGN_HEADER:
                raise AdaptationError("truncated fragment header")
            return cls("fragn", size, tag, data[4] * 8), FRAGN_HEADER
        raise AdaptationError(f"unknown fragment dispatch 0x{dispatch:02X}")


def is_fragment(data: bytes) -> bool:
    return bool(data) and (data[0] & 0xF8) in (DISPATCH_FRAG1, DISPATCH_FRAGN)


def fragment(datagram: bytes, tag: int) -> List[bytes]:
    """Split a datagram into MAC payloads.

    Datagrams up to 112 bytes (the 8-byte-aligned single-frame budget) travel
    unfragmented with no fragment header; larger ones are split into FRAG1 +
    FRAGN units whose concatenation in offset order restores the datagram.
    """
    if len(datagram) == 0:
        raise AdaptationError("empty datagram")
    if len(datagram) > MAX_DATAGRAM:
        raise AdaptationError(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM}")
    if len(datagram) <= FRAG1_PAYLOAD:
        return [bytes(datagram)]
    size = len(datagram)
    units = [FragmentHeader("frag1", size, tag).to_bytes() + datagram[:FRAG1_PAYLOAD]]
    offset = FRAG1_PAYLOAD
    while offset < size:
        chunk = datagram[offset : offset + FRAGN_PAYLOAD]
        units.append(FragmentHeader("fragn", size, tag, offset).to_bytes() + chunk)
        offset += len(chunk)
    return units


@dataclass
class _Buffer:
    size: int
    chunks: Dict[int, bytes] = field(default_factory=dict)
    born_sf: int = 0


class Reassembler:
    """Per-(source, tag) reassembly state owned by the receiving node.

    Fragments may arrive in any order; duplicates are idempotent; a buffer
    whose fragments disagree is discarded; partial state expires after the
    timeout (in superframes).
    """

    def __init__(self, timeout_sf: int = DEFAULT_REASSEMBLY_TIMEOUT_SF):
        self.timeout_sf = timeout_sf
        self._buffers: Dict[Tuple[int, int], _Buffer] = {}
        self.expired = 0
        self.inconsistent = 0

    def feed(self, src: int, unit: bytes, now_sf: int = 0) -> Optional[bytes]:
        """Accept one fragment unit; returns the whole datagram on completion."""
        header, consumed = FragmentHeader.parse(unit)
        chunk = unit[consumed:]
        offset = 0 if header.kind == "frag1" else header.offset
        key = (src, header.datagram_tag)
        buf = self._buffers.get(key)
        if buf is None or buf.size != header.datagram_size:
            buf = _Buffer(header.datagram_size, born_sf=now_sf)
            self._buffers[key] = buf
        if offset + len(chunk) > buf.size:
            del self._buffers[key]
            self.inconsistent += 1
            return None
        existing = buf.chunks.get(offset)
        if existing is not None:
            if existing != chunk:
                del self._buffers[key]
                self.inconsistent += 1
                return None
        else:
            for other_off, other in buf.chunks.items():
                if other_off < offset + len(chunk) and offset < other_off + len(other):
                    del self._buffers[key]
                    self.inconsistent += 1
                    return None
            buf.chunks[offset] = chunk
        if sum(len(c) for c in buf.chunks.values()) == buf.size:
            data = b"".join(buf.chunks[o] for o in sorted(buf.chunks))
            del self._buffers[key]
            return data
        return None

    def sweep(self, now_sf: int) -> int:
        """Discard buffers older than the timeout; returns how many expired."""
        stale = [k for k, b in self._buffers.items() if now_sf - b.born_sf >= self.timeout_sf]
        for k in stale:
            del self._buffers[k]
        self.expired += len(stale)
        return len(stale)

    @property
    def pending(self) -> int:
        return len(self._buffers)


def reassemble(units: List[bytes], src: int = 0) -> Optional[bytes]:
    """One-shot reassembly of a full fragment set (any order)."""
    r = Reassembler()
    out = None
    for unit in units:
        out = r.feed(src, unit)
    return out
