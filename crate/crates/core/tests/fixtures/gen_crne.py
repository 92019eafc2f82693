#!/usr/bin/env python3
"""Writes the golden CRNE frames used by the acceptance tests.

Built from struct and zlib only, so the byte layout is checked against an
encoder that shares no code with the crate.
"""
import struct
import zlib
from pathlib import Path

OUT = Path(__file__).parent / "crne"

SETPOINT, FEEDBACK, HEARTBEAT, ENABLE, DISABLE, ESTOP, ACK = range(1, 8)


def frame(ty, seq, t_ns, payload=b"", flags=0):
    head = b"CRNE" + struct.pack("<BBHIQH", 1, ty, flags, seq, t_ns, len(payload))
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def f64s(*v):
    return struct.pack("<%dd" % len(v), *v)


FRAMES = {
    "heartbeat": frame(HEARTBEAT, 1, 0),
    "enable": frame(ENABLE, 2, 1_000_000),
    "setpoint": frame(SETPOINT, 3, 2_000_000, f64s(0.01, -0.02, 0.03, 0.5, -0.25, 0.125, 1.0, 0.03)),
    "disable": frame(DISABLE, 4, 3_000_000),
    "estop_pressed": frame(ESTOP, 5, 4_000_000, b"\x01"),
    "estop_released": frame(ESTOP, 6, 5_000_000, b"\x00"),
    "feedback": frame(
        FEEDBACK,
        7,
        123_456_789,
        f64s(0.001, 0.002, 0.003, 0.1, 0.2, 0.3, 0.4, 0.012)
        + f64s(0.0, -0.5, 0.25, 1.5, 0.0, 0.0, -2.0, 0.02)
        + f64s(76.5, 22.0)
        + bytes([2, 0x41, 0]),
        flags=1,
    ),
    "ack_accepted": frame(ACK, 8, 6_000_000, struct.pack("<BI", 0, 2)),
    "ack_rejected": frame(ACK, 9, 7_000_000, struct.pack("<BI", 4, 0xFFFFFFFE)),
    "seq_wrap": frame(HEARTBEAT, 0xFFFFFFFF, 0xFFFFFFFFFFFFFFFF),
}

if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    for name, data in FRAMES.items():
        (OUT / f"{name}.bin").write_bytes(data)
    (OUT / "stream.bin").write_bytes(b"".join(FRAMES.values()))
