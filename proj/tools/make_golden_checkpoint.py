"""Writes tests/golden/two_tensor.ambp from the documented byte layout."""

import struct
import sys
from pathlib import Path


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


NORMAL, CONSTANT = 1, 2
ROOT_SEED = 42
TENSORS = [
    ("0/mhsa_query/weight", [2, 3], [0.5, -1.25, 3.0, 0.1, 0.0, -2.0], NORMAL, 0.0, 0.25),
    ("1/ffn_start/b_in", [2], [1.0, -0.5], CONSTANT, 0.0, 0.0),
]


def build() -> bytes:
    out = bytearray(b"AMBP")
    out += struct.pack("<HQQQI", 1, 0x1122334455667788, ROOT_SEED, 7, len(TENSORS))
    for name, dims, values, kind, a, b in TENSORS:
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BB", 0, len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims)
        out += struct.pack(f"<{len(values)}f", *values)
        out += struct.pack("<BddQQ", kind, a, b, ROOT_SEED, fnv1a64(raw))
    return bytes(out)


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests/golden/two_tensor.ambp"
    target.write_bytes(build())
    print(f"wrote {target} ({target.stat().st_size} bytes)")
