"""Bit-exact packed storage for color-condensed images, and the storage
budget calculator.

File layout (all integers little-endian, bit packing MSB-first):

    magic "APAL" | version u8=1 | mode u8 | C u8 | K u16 | H u16 | W u16 | bits u8
    palettes: C*K bytes (per-channel mode) or K*C bytes (joint mode, RGB triples)
    index planes: one per channel (per-channel) or one total (joint);
                  H*W indices of `bits` bits each, each plane padded to a byte

bits = ceil(log2 K), with K=1 stored as 1 bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .quantize import JOINT, PER_CHANNEL, QuantizedImage

MAGIC = b"APAL"
VERSION = 1
_HEADER = struct.Struct("<4sBBBHHHB")
_MODE_CODE = {PER_CHANNEL: 0, JOINT: 1}
_MODE_NAME = {0: PER_CHANNEL, 1: JOINT}


def bits_for(k):
    if not 1 <= k <= 256:
        raise ParameterError(f"K must be in [1, 256], got {k}")
    return max(1, int(np.ceil(np.log2(k))))


def _pack_plane(indices, bits):
    flat = np.ascontiguousarray(indices, dtype=np.uint8).reshape(-1)
    bitmat = (flat[:, None] >> np.arange(bits - 1, -1, -1, dtype=np.uint8)) & 1
    return np.packbits(bitmat.reshape(-1)).tobytes()


def _unpack_plane(buf, count, bits):
    bitstream = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[:count * bits]
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.int64)
    return bitstream.reshape(count, bits) @ weights


def plane_bytes(h, w, bits):
    return (h * w * bits + 7) // 8


def packed_size(c, h, w, k, mode=PER_CHANNEL):
    """Exact file size in bytes for the layout above."""
    bits = bits_for(k)
    palette = c * k
    planes = c * plane_bytes(h, w, bits) if mode == PER_CHANNEL else plane_bytes(h, w, bits)
    return _HEADER.size + palette + planes


def pack(q):
    """Serialize a QuantizedImage; unpack(pack(q)) reproduces it field for field."""
    c = q.channels
    h, w = q.hw
    bits = bits_for(q.k)
    head = _HEADER.pack(MAGIC, VERSION, _MODE_CODE[q.mode], c, q.k, h, w, bits)
    parts = [head, q.palette.tobytes()]
    if q.mode == PER_CHANNEL:
        for ch in range(c):
            parts.append(_pack_plane(q.indices[ch], bits))
    else:
        parts.append(_pack_plane(q.indices, bits))
    return b"".join(parts)


def unpack(data):
    """Parse bytes produced by pack; validates every field and all indices."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, mode_code, c, k, h, w, bits = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if mode_code not in _MODE_NAME:
        raise FormatError(f"unknown mode byte {mode_code}", offset=5)
    mode = _MODE_NAME[mode_code]
    if k < 1 or k > 256:
        raise FormatError(f"K={k} out of range", offset=7)
    if bits != bits_for(k):
        raise FormatError(f"bits={bits} inconsistent with K={k}", offset=13)
    pos = _HEADER.size
    pal_len = c * k
    if len(data) < pos + pal_len:
        raise FormatError("truncated palette", offset=len(data))
    pal_flat = np.frombuffer(data[pos:pos + pal_len], dtype=np.uint8)
    palette = pal_flat.reshape((c, k) if mode == PER_CHANNEL else (k, c)).copy()
    pos += pal_len

    pb = plane_bytes(h, w, bits)
    planes = []
    n_planes = c if mode == PER_CHANNEL else 1
    for p in range(n_planes):
        if len(data) < pos + pb:
            raise FormatError("truncated index plane", offset=len(data))
        idx = _unpack_plane(data[pos:pos + pb], h * w, bits)
        bad = np.flatnonzero(idx >= k)
        if bad.size:
            raise FormatError(f"index {idx[bad[0]]} >= K={k} in plane {p}",
                              offset=pos + int(bad[0]) * bits // 8)
        planes.append(idx.reshape(h, w))
        pos += pb
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    indices = np.stack(planes) if mode == PER_CHANNEL else planes[0]
    return QuantizedImage(palette, indices, int(k), mode)


# ---------------------------------------------------------------------------
# storage budget

@dataclass
class BudgetReport:
    raw_budget_bits: int
    per_image_cost_bits: int
    capacity: int
    palette_slots: int       # images sharing the 256-color space: 2^(8-n)
    ipc_base: int
    n_bits: int
    k: int

    def to_dict(self):
        return {
            "raw_budget_bits": self.raw_budget_bits,
            "per_image_cost_bits": self.per_image_cost_bits,
            "capacity": self.capacity,
            "palette_slots": self.palette_slots,
            "ipc_base": self.ipc_base,
            "n_bits": self.n_bits,
            "colors": self.k,
        }


def budget(ipc_base, c, h, w, n_bits, k, overhead_bits=0):
    """How many n-bit palette images fit in the 8-bit budget of `ipc_base` images.

    Raw budget: 8 * ipc_base * C*H*W bits. Each stored image costs
    n_bits * C*H*W (indices) + 8 * C * K (its palettes) + overhead_bits,
    except full-depth n=8, K=256 which is raw storage with no palette.
    """
    if not 1 <= n_bits <= 8:
        raise ParameterError(f"n_bits must be in [1, 8], got {n_bits}")
    if k < 1:
        raise ParameterError(f"K must be positive, got {k}")
    if k > 2 ** n_bits:
        raise ParameterError(f"K={k} violates the {n_bits}-bit constraint (max {2 ** n_bits})")
    if ipc_base < 1:
        raise ParameterError(f"ipc_base must be positive, got {ipc_base}")
    chw = c * h * w
    raw = 8 * ipc_base * chw
    if n_bits == 8 and k == 256:
        per_image = 8 * chw + overhead_bits
    else:
        per_image = n_bits * chw + 8 * c * k + overhead_bits
    return BudgetReport(
        raw_budget_bits=raw,
        per_image_cost_bits=per_image,
        capacity=raw // per_image,
        palette_slots=2 ** (8 - n_bits),
        ipc_base=ipc_base,
        n_bits=n_bits,
        k=k,
    )


def check_color_allocation(color_counts, n_bits):
    """Whether per-image color counts satisfy the shared 256-slot constraint:
    at most 2^(8-n) images, each with at most 2^n colors, 256 colors total."""
    counts = list(color_counts)
    if len(counts) > 2 ** (8 - n_bits):
        return False
    if any(c > 2 ** n_bits for c in counts):
        return False
    return sum(counts) <= 2 ** 8
