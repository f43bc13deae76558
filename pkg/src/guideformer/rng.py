"""Deterministic random streams built on the Philox counter-based generator.

Streams are keyed, not seeded-and-advanced: ``sample_rng(seed, i)`` yields
the same draws for sample ``i`` no matter how many other samples were drawn
before it, which keeps datasets and shuffles reproducible under any access
order. Named streams key off a CRC of the tag so that adding a parameter to
a model never shifts the initialization of the others.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

STATE_BYTES = 13 * 8  # counter[4] + key[2] + buffer[4] + pos/has/uint tail

_U64 = (1 << 64) - 1


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one sample: keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(key=[seed & _U64, index & _U64]))


def named_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent stream for one named purpose (e.g. a parameter's init)."""
    return np.random.Generator(np.random.Philox(key=[seed & _U64, zlib.crc32(tag.encode("utf-8"))]))


def pack_state(gen: np.random.Generator) -> bytes:
    """Serialize a Philox generator's exact position as 104 little-endian bytes."""
    st = gen.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise ValueError(f"can only pack Philox streams, got {st['bit_generator']}")
    words = list(st["state"]["counter"]) + list(st["state"]["key"]) + list(st["buffer"])
    words += [st["buffer_pos"], st["has_uint32"], st["uinteger"]]
    return struct.pack("<13Q", *[int(w) & _U64 for w in words])


def unpack_state(blob: bytes) -> np.random.Generator:
    """Rebuild the exact generator serialized by ``pack_state``."""
    if len(blob) != STATE_BYTES:
        raise ValueError(f"Philox state must be {STATE_BYTES} bytes, got {len(blob)}")
    words = struct.unpack("<13Q", blob)
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(words[0:4], dtype=np.uint64),
            "key": np.array(words[4:6], dtype=np.uint64),
        },
        "buffer": np.array(words[6:10], dtype=np.uint64),
        "buffer_pos": int(words[10]),
        "has_uint32": int(words[11]),
        "uinteger": int(words[12]),
    }
    return np.random.Generator(bg)
