import json
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pedmri.io import (DVOL_MAGIC, dvol_bytes, ensure_parent, read_dvol, read_gradient_table, read_phantom,
                       thread_cap, write_dvol, write_gradient_table, write_phantom)
from pedmri.phantom import GradientTable, PhantomSpec, synthesize_phantom
from pedmri.volume import DataError, Volume4D


def write_table(tmp_path, bvals, cols):
    (tmp_path / "bvals").write_text(" ".join(map(str, bvals)) + "\n")
    cols = np.asarray(cols, float).reshape(-1, 3)
    (tmp_path / "bvecs").write_text("\n".join(" ".join(map(str, cols[:, c])) for c in range(3)) + "\n")
    return tmp_path / "bvals", tmp_path / "bvecs"


def test_dvol_roundtrip_bitwise(tmp_path, rng):
    vol = Volume4D(rng.standard_normal((2, 3, 4, 5)).astype(np.float32), {"note": "x"})
    write_dvol(vol, tmp_path / "a.dvol")
    back = read_dvol(tmp_path / "a.dvol")
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.meta == {"note": "x"}


def test_dvol_layout(rng):
    vol = Volume4D(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
    blob = dvol_bytes(vol)
    assert blob.startswith(DVOL_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, 6)
    header = json.loads(blob[14:14 + hlen])
    assert header["dims"] == [1, 2, 2, 2] and header["dtype"] == "f32le"
    assert header["order"] == "row-major-last-fastest"
    np.testing.assert_array_equal(np.frombuffer(blob[14 + hlen:], "<f4"), np.arange(8))


def test_three_d_volume_gets_channel_axis():
    assert Volume4D(np.zeros((2, 2, 2))).dims == (2, 2, 2, 1)


def test_dvol_length_mismatch(tmp_path):
    header = json.dumps({"dims": [2, 2, 2, 3], "dtype": "f32le", "order": "row-major-last-fastest",
                         "meta": {}}).encode()
    blob = DVOL_MAGIC + struct.pack("<Q", len(header)) + header + b"\0" * 95
    (tmp_path / "x.dvol").write_bytes(blob)
    with pytest.raises(DataError, match="need 96"):
        read_dvol(tmp_path / "x.dvol")


@pytest.mark.parametrize("mutate", ["magic", "truncate", "header", "dims", "dtype"])
def test_dvol_corruptions(tmp_path, mutate):
    blob = dvol_bytes(Volume4D(np.ones((2, 2, 2, 1), np.float32)))
    if mutate == "magic":
        blob = b"NIFTI\n" + blob[6:]
    elif mutate == "truncate":
        blob = blob[:-2]
    elif mutate == "header":
        blob = blob[:10]
    else:
        (hlen,) = struct.unpack_from("<Q", blob, 6)
        h = json.loads(blob[14:14 + hlen])
        if mutate == "dims":
            h["dims"] = [2, 2, 2]
        else:
            h["dtype"] = "f64le"
        raw = json.dumps(h).encode()
        blob = DVOL_MAGIC + struct.pack("<Q", len(raw)) + raw + blob[14 + hlen:]
    (tmp_path / "x.dvol").write_bytes(blob)
    with pytest.raises(DataError):
        read_dvol(tmp_path / "x.dvol")


def test_dvol_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_dvol(tmp_path / "nope.dvol")


def test_atomic_write_leaves_no_temp(tmp_path):
    write_dvol(Volume4D(np.zeros((1, 1, 1, 1))), tmp_path / "v.dvol")
    assert [p.name for p in tmp_path.iterdir()] == ["v.dvol"]


def test_gradient_table_31(tmp_path, rng):
    dirs = rng.standard_normal((31, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bvals = [1000.0] * 31
    bvals[4] = 0.0
    t = read_gradient_table(*write_table(tmp_path, bvals, dirs))
    assert len(t) == 31 and list(t.b0_indices) == [4]
    np.testing.assert_allclose(t.bvecs, dirs, atol=1e-12)


def test_gradient_table_count_mismatch(tmp_path, rng):
    with pytest.raises(DataError):
        read_gradient_table(*write_table(tmp_path, [1000.0] * 30, rng.standard_normal((31, 3))))


def test_gradient_table_zero_vector_only_at_b0(tmp_path):
    cols = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    t = read_gradient_table(*write_table(tmp_path, [0, 1000, 1000], cols))
    np.testing.assert_array_equal(t.bvecs[0], 0.0)
    with pytest.raises(DataError):
        read_gradient_table(*write_table(tmp_path, [1000, 1000, 1000], cols))


def test_gradient_table_renormalisation(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        t = read_gradient_table(*write_table(tmp_path, [0, 1000], [[0, 0, 0], [1.05, 0, 0]]))
    assert t.bvecs[1, 0] == pytest.approx(1.0)
    assert "renormalizing" in caplog.text
    with pytest.raises(DataError):
        read_gradient_table(*write_table(tmp_path, [0, 1000], [[0, 0, 0], [1.2, 0, 0]]))


def test_gradient_table_shape_errors(tmp_path):
    (tmp_path / "bvals").write_text("0 1000\n0 1000\n")
    (tmp_path / "bvecs").write_text("0 1\n0 0\n0 0\n")
    with pytest.raises(DataError):
        read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    (tmp_path / "bvals").write_text("0 abc\n")
    with pytest.raises(DataError):
        read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")


def test_gradient_table_write_read(tmp_path, rng):
    d = rng.standard_normal((7, 3))
    t = GradientTable(np.r_[0.0, np.full(6, 1000.0)], np.vstack([[0, 0, 0], (d / np.linalg.norm(d, axis=1, keepdims=True))[:6]]))
    write_gradient_table(t, tmp_path / "bvals", tmp_path / "bvecs")
    text = (tmp_path / "bvecs").read_text()
    assert text.count("\n") == 3 and "\r" not in text
    back = read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    np.testing.assert_array_equal(back.bvals, t.bvals)
    np.testing.assert_array_equal(back.bvecs, t.bvecs)


def test_phantom_directory_roundtrip(tmp_path):
    ph = synthesize_phantom(PhantomSpec(dims=(4, 4, 4), n_dirs=7, seed=2))
    write_phantom(ph, tmp_path / "ph")
    names = sorted(p.name for p in (tmp_path / "ph").iterdir())
    assert names == sorted(["dwi.dvol", "gt_fwf.dvol", "gt_fod.dvol", "mask.dvol", "bvals", "bvecs", "spec.json"])
    back = read_phantom(tmp_path / "ph")
    np.testing.assert_array_equal(back.dwi.data, ph.dwi.data.astype(np.float32))
    assert back.spec == ph.spec
    with pytest.raises(DataError):
        read_phantom(tmp_path / "missing")


def test_ensure_parent(tmp_path):
    assert ensure_parent(tmp_path / "x.json") == tmp_path / "x.json"
    with pytest.raises(DataError):
        ensure_parent(tmp_path / "no" / "x.json")


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("PEDMRI_THREADS", raising=False)
    assert thread_cap() is None
    monkeypatch.setenv("PEDMRI_THREADS", "0")
    assert thread_cap() is None
    monkeypatch.setenv("PEDMRI_THREADS", "2")
    assert thread_cap() == 2
    monkeypatch.setenv("PEDMRI_THREADS", "two")
    with pytest.raises(DataError):
        thread_cap()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_dvol_roundtrip_property(data):
    vol = Volume4D(data)
    blob = dvol_bytes(vol)
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "v.dvol")
        with open(p, "wb") as fh:
            fh.write(blob)
        assert read_dvol(p).data.tobytes() == data.tobytes()
