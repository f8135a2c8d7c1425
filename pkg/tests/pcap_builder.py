"""Byte-level classic-pcap fixture builder for the flowcap tests.

Timestamps are passed as (seconds, fractional-ticks) integer pairs so the
expected float timestamps can be recomputed exactly in the tests.
"""

from __future__ import annotations

import struct

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D


def ip4(addr: str) -> bytes:
    return bytes(int(p) for p in addr.split("."))


def global_header(endian: str = "<", nanos: bool = False, linktype: int = 1) -> bytes:
    magic = MAGIC_NSEC if nanos else MAGIC_USEC
    return struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)


def ethernet_ipv4(src: str, dst: str, protocol: int, sport: int, dport: int,
                  payload: bytes = b"", frag: int = 0, ttl: int = 64) -> bytes:
    """An Ethernet frame around an IPv4 TCP/UDP packet (checksums left zero)."""
    eth = b"\xaa" * 6 + b"\xbb" * 6 + struct.pack(">H", 0x0800)
    if protocol == 17:
        transport = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload
    elif protocol == 6:
        transport = struct.pack(">HHIIBBHHH", sport, dport, 0, 0,
                                5 << 4, 0, 0, 0, 0) + payload
    else:
        transport = payload
    total_len = 20 + len(transport)
    ip_hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total_len, 0, frag,
                         ttl, protocol, 0, ip4(src), ip4(dst))
    return eth + ip_hdr + transport


def raw_ethernet(ethertype: int, body: bytes = b"") -> bytes:
    return b"\xaa" * 6 + b"\xbb" * 6 + struct.pack(">H", ethertype) + body


def record(sec: int, frac: int, frame: bytes, endian: str = "<") -> bytes:
    return struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame


def capture(packets, endian: str = "<", nanos: bool = False, linktype: int = 1) -> bytes:
    """packets: iterable of (sec, frac, frame) triples."""
    out = [global_header(endian, nanos, linktype)]
    for sec, frac, frame in packets:
        out.append(record(sec, frac, frame, endian))
    return b"".join(out)


def udp(src: str, sport: int, dst: str, dport: int, payload_len: int = 0) -> bytes:
    return ethernet_ipv4(src, dst, 17, sport, dport, b"\x00" * payload_len)


def tcp(src: str, sport: int, dst: str, dport: int, payload_len: int = 0) -> bytes:
    return ethernet_ipv4(src, dst, 6, sport, dport, b"\x00" * payload_len)
