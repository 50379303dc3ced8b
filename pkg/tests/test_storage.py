"""Block containers and RLE mask files: round-trips and corruption handling."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdep import storage as S


def test_block_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    blocks = [rng.normal(size=(3, 4)), rng.normal(size=(2,)),
              rng.normal(size=(2, 1, 3))]
    path = str(tmp_path / "c.bin")
    S.write_blocks(path, {"kind": "test", "note": "abc"}, blocks)
    header, back = S.read_blocks(path)
    assert header["kind"] == "test" and header["note"] == "abc"
    assert header["block_shapes"] == [[3, 4], [2], [2, 1, 3]]
    for a, b in zip(blocks, back):
        np.testing.assert_array_equal(np.asarray(a), b)
        assert b.dtype == np.float64


def test_block_truncation_detected(tmp_path):
    path = str(tmp_path / "c.bin")
    S.write_blocks(path, {}, [np.ones((4, 4))])
    raw = open(path, "rb").read()
    cut = str(tmp_path / "cut.bin")
    with open(cut, "wb") as f:
        f.write(raw[:-8])  # drop one float64
    with pytest.raises(S.ContainerError, match="truncated block"):
        S.read_blocks(cut)
    with open(cut, "wb") as f:
        f.write(raw[:4])
    with pytest.raises(S.ContainerError, match="truncated header"):
        S.read_blocks(cut)


def test_block_bad_header_detected(tmp_path):
    path = str(tmp_path / "c.bin")
    garbage = b"\xff\xfe not json"
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(garbage)))
        f.write(garbage)
    with pytest.raises(S.ContainerError, match="bad header"):
        S.read_blocks(path)
    with open(path, "wb") as f:
        payload = json.dumps({"no_shapes": True}).encode()
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
    with pytest.raises(S.ContainerError, match="block_shapes"):
        S.read_blocks(path)


def test_mask_round_trip_hand_case(tmp_path):
    masks = np.zeros((2, 1, 3, 3), dtype=bool)
    masks[0, 0, 0, :] = True
    masks[1, 0, 2, 2] = True
    path = str(tmp_path / "m.rle")
    S.write_masks(path, masks)
    header = json.load(open(path))
    # flattened: 3 True, 14 False, 1 True; False-first means a leading 0
    assert header["runs"] == [0, 3, 14, 1]
    np.testing.assert_array_equal(S.read_masks(path), masks)


def test_mask_all_false_and_all_true(tmp_path):
    path = str(tmp_path / "m.rle")
    S.write_masks(path, np.zeros((2, 3), dtype=bool))
    assert json.load(open(path))["runs"] == [6]
    np.testing.assert_array_equal(S.read_masks(path), np.zeros((2, 3), bool))
    S.write_masks(path, np.ones(4, dtype=bool))
    assert json.load(open(path))["runs"] == [0, 4]
    np.testing.assert_array_equal(S.read_masks(path), np.ones(4, bool))


def test_mask_corruption_detected(tmp_path):
    path = str(tmp_path / "m.rle")
    S.write_masks(path, np.ones((2, 2), dtype=bool))
    header = json.load(open(path))
    header["runs"] = [0, 3]
    json.dump(header, open(path, "w"))
    with pytest.raises(S.ContainerError, match="run lengths"):
        S.read_masks(path)
    json.dump({"format": "other"}, open(path, "w"))
    with pytest.raises(S.ContainerError, match="not a mask file"):
        S.read_masks(path)
    with open(path, "w") as f:
        f.write("{broken")
    with pytest.raises(S.ContainerError, match="bad mask header"):
        S.read_masks(path)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.bool_, hnp.array_shapes(min_dims=1, max_dims=3,
                                             max_side=6)))
def test_mask_round_trip_property(tmp_path_factory, masks):
    path = str(tmp_path_factory.mktemp("rle") / "m.rle")
    S.write_masks(path, masks)
    np.testing.assert_array_equal(S.read_masks(path), masks)
