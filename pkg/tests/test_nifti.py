import gzip
import struct

import numpy as np
import pytest

from atrium_probe.nifti import NiftiError, read_nifti, write_nifti


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
@pytest.mark.parametrize(
    "dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64]
)
def test_round_trip(tmp_path, suffix, dtype):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.floating):
        data = rng.standard_normal((7, 5, 3)).astype(dtype)
    else:
        data = rng.integers(0, 100, size=(7, 5, 3)).astype(dtype)
    path = tmp_path / f"vol{suffix}"
    write_nifti(path, data, (1.0, 1.25, 2.5))
    back, spacing = read_nifti(path)
    assert back.dtype == dtype
    assert (back == data).all()
    assert spacing == pytest.approx((1.0, 1.25, 2.5))


def test_write_is_deterministic(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    write_nifti(a, data, (1, 1, 1))
    write_nifti(b, data, (1, 1, 1))
    assert a.read_bytes() == b.read_bytes()


def test_fortran_axis_order(tmp_path):
    # first axis must be the fastest-varying one on disk
    data = np.zeros((3, 2, 2), np.float32)
    data[1, 0, 0] = 7.0
    path = tmp_path / "v.nii"
    write_nifti(path, data, (1, 1, 1))
    raw = path.read_bytes()
    vals = np.frombuffer(raw[352:], dtype="<f4")
    assert vals[1] == 7.0
    back, _ = read_nifti(path)
    assert back[1, 0, 0] == 7.0


def test_scl_slope_applied(tmp_path):
    path = tmp_path / "v.nii"
    write_nifti(path, np.ones((2, 2, 2), np.int16), (1, 1, 1))
    raw = bytearray(path.read_bytes())
    # scl_slope at offset 112, scl_inter at 116
    struct.pack_into("<f", raw, 112, 2.0)
    struct.pack_into("<f", raw, 116, 0.5)
    path.write_bytes(bytes(raw))
    back, _ = read_nifti(path)
    assert back.dtype == np.float32
    assert (back == 2.5).all()

def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_nifti(tmp_path / "nope.nii.gz")


def test_truncated_file_rejected(tmp_path):
    data = np.ones((4, 4, 4), np.float32)
    path = tmp_path / "v.nii"
    write_nifti(path, data, (1, 1, 1))
    raw = path.read_bytes()
    (tmp_path / "trunc.nii").write_bytes(raw[: len(raw) - 20])
    with pytest.raises(NiftiError):
        read_nifti(tmp_path / "trunc.nii")


def test_garbage_rejected(tmp_path):
    p = tmp_path / "junk.nii"
    p.write_bytes(b"\x00" * 400)
    with pytest.raises(NiftiError):
        read_nifti(p)


def test_gzip_garbage_rejected(tmp_path):
    p = tmp_path / "junk.nii.gz"
    p.write_bytes(gzip.compress(b"hello world, not a header"))
    with pytest.raises(NiftiError):
        read_nifti(p)


def test_big_endian_readable(tmp_path):
    # byteswap a little-endian file into a valid big-endian one
    path = tmp_path / "v.nii"
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    write_nifti(path, data, (1, 1, 1))
    raw = bytearray(path.read_bytes())

    def swap(fmt, offset):
        (v,) = struct.unpack_from("<" + fmt, raw, offset)
        struct.pack_into(">" + fmt, raw, offset, v)

    swap("i", 0)                      # sizeof_hdr
    for i in range(8):
        swap("h", 40 + 2 * i)         # dim
    swap("h", 70)                     # datatype
    swap("h", 72)                     # bitpix
    for i in range(8):
        swap("f", 76 + 4 * i)         # pixdim
    swap("f", 108)                    # vox_offset
    swap("f", 112)                    # scl_slope
    swap("f", 116)                    # scl_inter
    body = np.frombuffer(raw[352:], dtype="<i2").astype(">i2").tobytes()
    (tmp_path / "be.nii").write_bytes(bytes(raw[:352]) + body)
    back, _ = read_nifti(tmp_path / "be.nii")
    assert (back.astype(np.int64) == data).all()
