import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superdti import io, network as nw, phantom as ph
from superdti.io import FormatError
from superdti.tractography import Streamline
from superdti.training import TrainedModel


class TestVolume:
    def test_round_trip_bitwise(self, tmp_path, rng):
        data = rng.normal(size=(5, 4, 3, 2)).astype(np.float32)
        p = io.write_volume(tmp_path / "v.json", data, spacing=(2, 2, 2), semantics="dwi")
        back, hdr = io.read_volume(p)
        assert back.tobytes() == data.tobytes()
        assert hdr["dims"] == [5, 4, 3] and hdr["channels"] == 2 and hdr["spacing"] == [2.0, 2.0, 2.0]

    def test_x_fastest_order(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        io.write_volume(tmp_path / "v.json", data, semantics="fa")
        raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4")
        # second stored value is x=1, y=0, z=0
        assert raw[0] == data[0, 0, 0] and raw[1] == data[1, 0, 0] and raw[2] == data[0, 1, 0]

    def test_truncated_raw(self, tmp_path):
        io.write_volume(tmp_path / "v.json", np.ones((2, 2, 2)), semantics="fa")
        raw = tmp_path / "v.raw"
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(FormatError, match="expected 32 bytes.*found 28"):
            io.read_volume(tmp_path / "v.json")

    def test_bad_magic(self, tmp_path):
        p = io.write_volume(tmp_path / "v.json", np.ones((2, 2, 2)), semantics="fa")
        hdr = json.loads(p.read_text())
        hdr["magic"] = "NOPE"
        p.write_text(json.dumps(hdr))
        with pytest.raises(FormatError, match="magic"):
            io.read_volume(p)

    def test_bad_json_reports_offset(self, tmp_path):
        p = tmp_path / "v.json"
        p.write_text('{"magic": "SDTI",,}')
        with pytest.raises(FormatError, match="byte offset 17"):
            io.read_volume(p)

    def test_unknown_semantics(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_volume(tmp_path / "v.json", np.ones((2, 2, 2)), semantics="foo")


class TestScheme:
    def test_round_trip_exact(self, tmp_path):
        s = ph.generate_scheme(12, seed=2, iterations=100)
        io.write_scheme(tmp_path / "a.bval", tmp_path / "a.bvec", s)
        back = io.read_scheme(tmp_path / "a.bval", tmp_path / "a.bvec")
        np.testing.assert_array_equal(back.bvals, s.bvals)
        np.testing.assert_array_equal(back.bvecs, s.bvecs)

    def test_non_unit_rejected(self, tmp_path):
        (tmp_path / "a.bval").write_text("0 1000\n")
        (tmp_path / "a.bvec").write_text("0 0.9\n0 0\n0 0\n")
        with pytest.raises(FormatError, match="norm 0.9"):
            io.read_scheme(tmp_path / "a.bval", tmp_path / "a.bvec")

    def test_small_error_renormalised(self, tmp_path):
        (tmp_path / "a.bval").write_text("0 1000\n")
        (tmp_path / "a.bvec").write_text("0 1.0000005\n0 0\n0 0\n")
        s = io.read_scheme(tmp_path / "a.bval", tmp_path / "a.bvec")
        assert s.bvecs[1, 0] == 1.0

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "a.bval").write_text("0 1000 1000\n")
        (tmp_path / "a.bvec").write_text("0 1\n0 0\n0 0\n")
        with pytest.raises(FormatError, match="mismatch"):
            io.read_scheme(tmp_path / "a.bval", tmp_path / "a.bvec")


class TestStreamlines:
    @given(st.lists(st.integers(1, 20), max_size=6), st.integers(0, 100))
    def test_round_trip_bitwise(self, tmp_path_factory, counts, seed):
        rng = np.random.default_rng(seed)
        sls = [Streamline(rng.normal(size=(n, 3)).astype(np.float32), (0, 0, 0), ("boundary", "angle"))
               for n in counts]
        path = tmp_path_factory.mktemp("sl") / "t.sdst"
        io.write_streamlines(path, sls, spacing=(2.0, 2.0, 2.0))
        back, spacing = io.read_streamlines(path)
        assert spacing == (2.0, 2.0, 2.0)
        assert [b.points.tobytes() for b in back] == [s.points.tobytes() for s in sls]

    def test_byte_layout(self, tmp_path):
        io.write_streamlines(tmp_path / "t.sdst", [np.zeros((2, 3))])
        blob = (tmp_path / "t.sdst").read_bytes()
        assert blob[:4] == b"SDST"
        assert struct.unpack_from("<II", blob, 4) == (1, 1)
        assert struct.unpack_from("<I", blob, 24) == (2,)
        assert len(blob) == 24 + 4 + 2 * 12

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.sdst"
        io.write_streamlines(p, [np.zeros((3, 3))])
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(FormatError, match="byte offset 28"):
            io.read_streamlines(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.sdst"
        io.write_streamlines(p, [])
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            io.read_streamlines(p)

    def test_text(self):
        assert io.streamlines_to_text([np.array([[0, 1, 2], [3, 4, 5.5]])]) == "0,1,2;3,4,5.5\n"


class TestCheckpoint:
    def _model(self):
        params = nw.init_params(nw.superdti_architecture(7, 1, width=4), seed=5)
        return TrainedModel(params, "md", 3e-3, True, 21, 7, {"epochs": 3})

    def test_round_trip_bitwise(self, tmp_path):
        m = self._model()
        io.write_checkpoint(tmp_path / "m.ckpt", m)
        back = io.read_checkpoint(tmp_path / "m.ckpt")
        for a, b in zip(m.params.arrays(), back.params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert back.params.arch == m.params.arch
        assert (back.target, back.target_divisor, back.meta) == ("md", 3e-3, {"epochs": 3})
        io.write_checkpoint(tmp_path / "n.ckpt", back)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.ckpt"
        io.write_checkpoint(p, self._model())
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError, match="expected"):
            io.read_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        io.write_checkpoint(p, self._model())
        p.write_bytes(b"ABCD" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="byte offset 0"):
            io.read_checkpoint(p)
