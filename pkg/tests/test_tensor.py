import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import naive_matmul, max_rel_err
from sliceforge import tensor
from sliceforge.errors import FormatError, NumericError, ShapeError


class TestCreate:
    def test_zero_fill(self):
        t = tensor.create([2, 2], 0.0)
        assert t.tolist() == [[0.0, 0.0], [0.0, 0.0]]

    def test_value_list(self):
        t = tensor.create([3], [1, 2, 3])
        assert t.tolist() == [1.0, 2.0, 3.0]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.create([2, 2], [1, 2, 3])

    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            tensor.create([0, 2], 0.0)

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            tensor.create([1, 1, 1, 1, 1], 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            tensor.create([2], [1.0, float("nan")])

    def test_immutable(self):
        t = tensor.create([2], [1, 2])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestMapZip:
    def test_relu_map(self):
        t = tensor.create([3], [-1, 0, 2])
        out = tensor.map_zip(t, None, lambda a: np.maximum(0, a))
        assert out.tolist() == [0.0, 0.0, 2.0]

    def test_zip_add(self):
        a = tensor.create([2], [1, 2])
        b = tensor.create([2], [3, 4])
        out = tensor.map_zip(a, b, np.add)
        assert out.tolist() == [4.0, 6.0]

    def test_zip_shape_mismatch(self):
        a = tensor.create([2], [1, 2])
        b = tensor.create([3], [1, 2, 3])
        with pytest.raises(ShapeError):
            tensor.map_zip(a, b, np.add)

    @given(st.integers(1, 4), st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_shape_preserved_and_commutative(self, n, raw_seed):
        rng = np.random.default_rng(raw_seed)
        a = tensor.Tensor(rng.normal(size=(n, 3)).astype(np.float32))
        b = tensor.Tensor(rng.normal(size=(n, 3)).astype(np.float32))
        ab = tensor.map_zip(a, b, np.add)
        ba = tensor.map_zip(b, a, np.add)
        assert ab.shape == a.shape
        assert np.array_equal(ab.data, ba.data)


class TestMatmul:
    def test_identity(self):
        eye = tensor.create([2, 2], [1, 0, 0, 1])
        m = tensor.create([2, 2], [1, 2, 3, 4])
        assert tensor.matmul(eye, m).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_scalar_case(self):
        assert tensor.matmul(tensor.create([1, 1], [2]), tensor.create([1, 1], [3])).tolist() == [[6.0]]

    def test_two_by_two(self):
        a = tensor.create([2, 2], [1, 2, 3, 4])
        b = tensor.create([2, 2], [5, 6, 7, 8])
        assert tensor.matmul(a, b).tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.matmul(tensor.create([2, 3], 1.0), tensor.create([2, 2], 1.0))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_matches_triple_loop(self, m, k, n, raw_seed):
        rng = np.random.default_rng(raw_seed)
        a = tensor.Tensor(rng.normal(size=(m, k)).astype(np.float32))
        b = tensor.Tensor(rng.normal(size=(k, n)).astype(np.float32))
        got = tensor.matmul(a, b).data
        want = naive_matmul(a.data, b.data)
        assert max_rel_err(got, want) <= 1e-5


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        t = tensor.create([2, 2], [1.5, -2.25, 3.125, 0.0])
        path = tmp_path / "t.tsr"
        tensor.write_tensor(path, t)
        back = tensor.read_tensor(path)
        assert back.data.tobytes() == t.data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tsr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="bad magic"):
            tensor.read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        t = tensor.create([2, 2], [1, 2, 3, 4])
        path = tmp_path / "t.tsr"
        tensor.write_tensor(path, t)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            tensor.read_tensor(path)

    def test_rank_out_of_range(self, tmp_path):
        path = tmp_path / "r.tsr"
        path.write_bytes(b"TSR1" + (9).to_bytes(4, "little") + b"\x01\x00\x00\x00" * 9)
        with pytest.raises(FormatError, match="rank"):
            tensor.read_tensor(path)

    def test_header_probe(self, tmp_path):
        t = tensor.create([3, 4], 1.0)
        path = tmp_path / "t.tsr"
        tensor.write_tensor(path, t)
        assert tensor.read_header(path) == (3, 4)

    @given(
        dims=st.lists(st.integers(1, 5), min_size=1, max_size=4),
        raw_seed=st.integers(0, 2 ** 31),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_random(self, tmp_path_factory, dims, raw_seed):
        rng = np.random.default_rng(raw_seed)
        arr = (rng.normal(size=dims) * 10.0 ** rng.integers(-3, 4)).astype(np.float32)
        path = tmp_path_factory.mktemp("tsr") / "x.tsr"
        tensor.write_array(path, arr)
        back = tensor.read_array(path)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


class TestPgm:
    def test_valid_p5(self, tmp_path):
        img = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "x.pgm"
        tensor.write_pgm(path, img)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n4 3\n255\n")
        pixels = blob.split(b"255\n", 1)[1]
        assert len(pixels) == 12
        assert pixels[0] == 0 and pixels[-1] == 255

    def test_constant_image(self, tmp_path):
        path = tmp_path / "c.pgm"
        tensor.write_pgm(path, np.full((2, 2), 7.0))
        pixels = path.read_bytes().split(b"255\n", 1)[1]
        assert pixels == b"\x00" * 4
