"""Binary dataset/checkpoint formats: bit-exact round-trips and error taxonomy."""

import numpy as np
import pytest

from guideformer.data import gen_salient_dataset
from guideformer.serial import (CHECKPOINT_MAGIC, DATASET_MAGIC, Checkpoint, FormatError,
                                MagicError, TruncatedError, VersionError, load_checkpoint,
                                load_dataset, save_checkpoint, save_dataset, write_pgm)


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = gen_salient_dataset(seed=0, n=16, classes=10, size=32)
    path = tmp_path / "toy.sgds"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert back.images.dtype == np.float32
    assert np.array_equal(back.labels, ds.labels)
    assert back.boxes is None  # boxes are generator-side metadata, not persisted


def test_dataset_file_layout(tmp_path):
    ds = gen_salient_dataset(seed=1, n=2, classes=10, size=32)
    path = tmp_path / "toy.sgds"
    save_dataset(path, ds)
    blob = path.read_bytes()
    assert blob[:4] == DATASET_MAGIC
    header = np.frombuffer(blob[4:24], dtype="<u4")
    assert list(header) == [1, 2, 32, 32, 3]  # version, n, h, w, c
    assert len(blob) == 24 + 2 + 2 * 32 * 32 * 3 * 4
    assert blob[24:26] == ds.labels.tobytes()


def test_dataset_save_is_deterministic(tmp_path):
    ds = gen_salient_dataset(seed=2, n=4, classes=10, size=32)
    a, b = tmp_path / "a.sgds", tmp_path / "b.sgds"
    save_dataset(a, ds)
    save_dataset(b, ds)
    assert a.read_bytes() == b.read_bytes()


def _toy_checkpoint():
    g = np.random.default_rng(0)
    return Checkpoint(
        step=12345,
        rng_state=bytes(g.integers(0, 256, 104, dtype=np.uint8)),
        tensors={
            "w": g.standard_normal((3, 4)).astype(np.float32),
            "m.scalar": np.float64(2.5) * np.ones(()),
            "v.long_name_with.dots": g.standard_normal(7),
        },
    )


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _toy_checkpoint()
    path = tmp_path / "toy.sgck"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.step == ck.step
    assert back.rng_state == ck.rng_state
    assert set(back.tensors) == set(ck.tensors)
    for name, arr in ck.tensors.items():
        got = back.tensors[name]
        assert got.dtype == arr.dtype and got.shape == arr.shape
        assert np.array_equal(
            got.view(np.uint8) if got.ndim else got, arr.view(np.uint8) if arr.ndim else arr
        )
        assert got.tobytes() == arr.tobytes()  # bitwise, including any NaN payloads


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "toy.sgck"
    save_checkpoint(path, _toy_checkpoint())
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(MagicError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "toy.sgck"
    save_checkpoint(path, _toy_checkpoint())
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "toy.sgck"
    save_checkpoint(path, _toy_checkpoint())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(TruncatedError):
        load_checkpoint(path)


def test_dataset_error_taxonomy(tmp_path):
    ds = gen_salient_dataset(seed=3, n=2, classes=10, size=32)
    path = tmp_path / "toy.sgds"
    save_dataset(path, ds)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.sgds"
    bad_magic.write_bytes(CHECKPOINT_MAGIC + blob[4:])
    with pytest.raises(MagicError):
        load_dataset(bad_magic)

    bad_version = tmp_path / "version.sgds"
    bad_version.write_bytes(blob[:4] + b"\x07\x00\x00\x00" + blob[8:])
    with pytest.raises(VersionError):
        load_dataset(bad_version)

    short = tmp_path / "short.sgds"
    short.write_bytes(blob[:-1])
    with pytest.raises(TruncatedError):
        load_dataset(short)
    # the error hierarchy roots at FormatError
    assert issubclass(MagicError, FormatError)
    assert issubclass(VersionError, FormatError)
    assert issubclass(TruncatedError, FormatError)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    ck = _toy_checkpoint()
    ck.tensors["bad"] = np.zeros(3, dtype=np.int32)
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "bad.sgck", ck)


def test_pgm_bytes_and_normalization(tmp_path):
    path = tmp_path / "map.pgm"
    write_pgm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    assert list(blob[len(b"P5\n2 2\n255\n") :]) == [0, 128, 255, 64]


def test_pgm_constant_map_is_black(tmp_path):
    path = tmp_path / "flat.pgm"
    write_pgm(path, np.full((3, 3), 7.0))
    assert path.read_bytes().endswith(bytes(9))


def test_pgm_rejects_non_2d():
    with pytest.raises(FormatError):
        write_pgm("/tmp/never.pgm", np.zeros((2, 2, 2)))
