import numpy as np
import pytest

from autopalette.codec import (
    budget, bits_for, check_color_allocation, pack, packed_size, plane_bytes, unpack,
)
from autopalette.errors import FormatError, ParameterError
from autopalette.quantize import JOINT, PER_CHANNEL, QuantizedImage, median_cut


def random_quantized(rng, mode=PER_CHANNEL, c=3, hw=(8, 8), k=None):
    k = k if k is not None else int(rng.integers(1, 257))
    h, w = hw
    if mode == PER_CHANNEL:
        palette = rng.integers(0, 256, (c, k), dtype=np.uint8)
        indices = rng.integers(0, k, (c, h, w))
    else:
        palette = rng.integers(0, 256, (k, c), dtype=np.uint8)
        indices = rng.integers(0, k, (h, w))
    return QuantizedImage(palette, indices, k, mode)


def assert_equal_quantized(a, b):
    assert a.k == b.k and a.mode == b.mode
    assert np.array_equal(a.palette, b.palette)
    assert np.array_equal(a.indices, b.indices)


def test_roundtrip_both_modes(rng):
    for mode in (PER_CHANNEL, JOINT):
        for _ in range(20):
            q = random_quantized(rng, mode)
            assert_equal_quantized(unpack(pack(q)), q)


def test_roundtrip_from_real_quantizer(rng):
    img = rng.integers(0, 256, (3, 16, 16), dtype=np.uint8)
    for mode in (PER_CHANNEL, JOINT):
        q = median_cut(img, 11, mode=mode)
        back = unpack(pack(q))
        assert_equal_quantized(back, q)
        assert np.array_equal(back.reconstruct(), q.reconstruct())


def test_pack_deterministic(rng):
    q = random_quantized(rng)
    assert pack(q) == pack(q)


def test_size_formula_layout():
    # 14-byte header + 3*64 palette bytes + 3 planes of 1024 6-bit indices
    assert packed_size(3, 32, 32, 64, PER_CHANNEL) == 14 + 192 + 3 * 768
    rng = np.random.default_rng(0)
    q = random_quantized(rng, PER_CHANNEL, hw=(32, 32), k=64)
    assert len(pack(q)) == packed_size(3, 32, 32, 64, PER_CHANNEL)


def test_sizes_match_formula_randomized(rng):
    for _ in range(50):
        mode = PER_CHANNEL if rng.random() < 0.5 else JOINT
        hw = (int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        q = random_quantized(rng, mode, hw=hw)
        assert len(pack(q)) == packed_size(3, hw[0], hw[1], q.k, mode)


def test_k256_plane_is_raw_bytes(rng):
    q = random_quantized(rng, PER_CHANNEL, hw=(8, 8), k=256)
    assert bits_for(256) == 8
    assert plane_bytes(8, 8, 8) == 64  # same as one raw channel plane
    assert_equal_quantized(unpack(pack(q)), q)


def test_bits_for_small_k():
    assert bits_for(1) == 1
    assert bits_for(2) == 1
    assert bits_for(3) == 2
    assert bits_for(64) == 6
    assert bits_for(65) == 7


def test_unpack_rejects_bad_magic(rng):
    data = bytearray(pack(random_quantized(rng)))
    data[0] = ord("X")
    with pytest.raises(FormatError) as ei:
        unpack(bytes(data))
    assert ei.value.offset == 0


def test_unpack_rejects_bad_version(rng):
    data = bytearray(pack(random_quantized(rng)))
    data[4] = 9
    with pytest.raises(FormatError) as ei:
        unpack(bytes(data))
    assert ei.value.offset == 4


def test_unpack_rejects_trailing_bytes(rng):
    data = pack(random_quantized(rng)) + b"\x00"
    with pytest.raises(FormatError, match="trailing"):
        unpack(data)


def test_unpack_rejects_out_of_range_index():
    # K=3 (2 bits): an index value 3 is representable but invalid
    q = QuantizedImage(np.zeros((1, 3), np.uint8), np.zeros((1, 2, 2), np.int64), 3, PER_CHANNEL)
    data = bytearray(pack(q))
    data[-1] = 0b11000000  # first pixel index -> 3
    with pytest.raises(FormatError, match=">= K"):
        unpack(bytes(data))


def test_unpack_rejects_truncation(rng):
    data = pack(random_quantized(rng))
    with pytest.raises(FormatError):
        unpack(data[:-2])


def test_decoded_reconstruction_matches(rng):
    img = rng.integers(0, 256, (3, 8, 8), dtype=np.uint8)
    q = median_cut(img, 5)
    assert np.array_equal(unpack(pack(q)).reconstruct(), q.reconstruct())


# -------------------------------------------------- budget

def test_budget_raw_mode_capacity_is_base():
    r = budget(10, 3, 32, 32, 8, 256)
    assert r.capacity == 10
    assert r.per_image_cost_bits == 8 * 3 * 32 * 32


def test_budget_documented_example():
    r = budget(10, 3, 32, 32, 6, 64)
    assert r.raw_budget_bits == 245760
    assert r.per_image_cost_bits == 19968
    assert r.capacity == 12
    assert r.palette_slots == 4


def test_budget_matches_paper_bonus_rows():
    # 6-bit/64-color packing yields at least one extra image over the base
    # budget at IPC 10 and 50 (the cross-architecture setting)
    assert budget(10, 3, 32, 32, 6, 64).capacity >= 11
    assert budget(50, 3, 32, 32, 6, 64).capacity >= 51


def test_budget_monotonicity():
    caps_n = [budget(10, 3, 32, 32, n, 2 ** n if n < 8 else 256).capacity for n in range(1, 9)]
    assert all(a >= b for a, b in zip(caps_n, caps_n[1:]))
    caps_k = [budget(10, 3, 32, 32, 6, k).capacity for k in (2, 4, 8, 16, 32, 64)]
    assert all(a >= b for a, b in zip(caps_k, caps_k[1:]))


def test_budget_rejects_k_over_bit_depth():
    with pytest.raises(ParameterError):
        budget(10, 3, 32, 32, 6, 65)


def test_budget_overhead_bits_knob():
    base = budget(10, 3, 32, 32, 6, 64).capacity
    taxed = budget(10, 3, 32, 32, 6, 64, overhead_bits=2048).capacity
    assert taxed <= base


def test_color_allocation_check():
    assert check_color_allocation([64, 64, 64, 64], 6)
    assert not check_color_allocation([64] * 5, 6)      # too many images
    assert not check_color_allocation([65, 64], 6)      # one image too colorful
    assert not check_color_allocation([256, 1], 8)      # too many images for n=8
