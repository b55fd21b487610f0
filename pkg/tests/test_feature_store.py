import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerank._checksum import ChecksumError, FormatError, crc64
from stylerank.dataset import Dataset, LabeledSample
from stylerank.feature_store import (
    FeatureMatrix,
    build_matrix,
    concat_features,
    extract_batches,
    from_bytes,
    load_matrix,
    save_matrix,
    to_bytes,
)
from stylerank.network import NetworkModel, fingerprint


def random_matrix(n=100, dims=(32,), seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMatrix(tuple(f"item-{i}" for i in range(n)), dims,
                         rng.normal(size=(n, sum(dims))).astype(np.float32),
                         tuple(f"{rng.integers(0, 2**63):016x}" for _ in dims))


def small_dataset(n=10, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset([LabeledSample(f"x{i}", rng.random((size, size, 3)).astype(np.float32), i % 2)
                    for i in range(n)], ("a", "b"), "t")


class TestConcat:
    def test_definition(self):
        np.testing.assert_array_equal(concat_features([np.array([1.0, 2.0]), np.array([3.0])]), [1, 2, 3])

    def test_single_part_identity(self):
        v = np.arange(5.0)
        np.testing.assert_array_equal(concat_features([v]), v)

    def test_two_1024_wide_parts(self):
        assert concat_features([np.zeros(1024), np.zeros(1024)]).shape == (2048,)

    def test_errors(self):
        with pytest.raises(ValueError):
            concat_features([])
        with pytest.raises(ValueError):
            concat_features([np.array([np.nan])])


class TestFeatureMatrix:
    def test_invariants(self):
        with pytest.raises(ValueError):
            FeatureMatrix(("a", "a"), (1,), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            FeatureMatrix(("a",), (2,), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            FeatureMatrix(("a",), (1,), np.array([[np.inf]]))

    def test_lookup_by_id(self):
        m = random_matrix(10)
        assert m.row_of("item-7") == 7
        assert m.vector("item-7").tobytes() == m.data[7].tobytes()

    def test_full_catalog_shape_contract(self):
        n = 19422
        m = FeatureMatrix(tuple(map(str, range(n))), (1024, 1024), np.zeros((n, 2048), np.float32))
        assert m.data.shape == (19422, 2048) and m.width == 2048


class TestBuild:
    def test_two_extractors(self):
        ds = small_dataset()
        models = [NetworkModel.from_profile("minibn", 2, (16, 16, 3), seed=s) for s in (1, 2)]
        m = build_matrix(models, ds)
        assert m.data.shape == (10, 128)
        assert m.dims == (64, 64)
        assert m.ids == tuple(ds.ids)
        assert m.fingerprints == tuple(fingerprint(x) for x in models)
        x, _ = ds.to_arrays((16, 16))
        assert m.vector("x3").tobytes() == np.concatenate(
            [models[0].extract_features(x[3:4])[0], models[1].extract_features(x[3:4])[0]]).tobytes()

    def test_single_extractor(self):
        m = build_matrix([NetworkModel.from_profile("minibn", 2, (16, 16, 3))], small_dataset())
        assert m.dims == (64,)

    def test_batch_size_invariance_bitwise(self):
        model = NetworkModel.from_profile("minibn", 2, (16, 16, 3), seed=4)
        x, _ = small_dataset(20).to_arrays((16, 16))
        assert extract_batches(model, x, 1).tobytes() == extract_batches(model, x, 16).tobytes()

    def test_resizes_to_model_input(self):
        m = build_matrix([NetworkModel.from_profile("minibn", 2, (8, 8, 3))], small_dataset(4, size=16))
        assert m.data.shape == (4, 64)

    def test_empty_models(self):
        with pytest.raises(ValueError):
            build_matrix([], small_dataset())


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        m = random_matrix(100, (32,))
        crc = save_matrix(m, tmp_path / "m.fmx")
        back = load_matrix(tmp_path / "m.fmx")
        assert back.data.tobytes() == m.data.tobytes()
        assert (back.ids, back.dims, back.fingerprints) == (m.ids, m.dims, m.fingerprints)
        assert back.checksum() == crc == m.checksum()
        assert to_bytes(back) == (tmp_path / "m.fmx").read_bytes()

    def test_layout(self):
        m = random_matrix(3, (4, 2))
        data = to_bytes(m)
        assert data[:4] == b"FMX1"
        version, n, count = struct.unpack_from("<IQI", data, 4)
        assert (version, n, count) == (1, 3, 2)
        assert struct.unpack_from("<2I", data, 20) == (4, 2)
        # data block is 16-byte aligned and holds fixed-stride float32 rows
        header = 4 + 4 + 8 + 4 + 4 * 2 + 8 * 2 + 8
        start = -(-header // 16) * 16
        block = np.frombuffer(data, "<f4", count=3 * 6, offset=start).reshape(3, 6)
        np.testing.assert_array_equal(block, m.data)
        (id_offset,) = struct.unpack_from("<Q", data, 20 + 8 + 16)
        assert id_offset == start + 3 * 6 * 4
        assert struct.unpack("<Q", data[-8:])[0] == crc64(data[:-8])

    def test_corrupted_byte_rejected(self, tmp_path):
        data = bytearray(to_bytes(random_matrix(20)))
        data[len(data) // 2] ^= 0x40
        with pytest.raises(ChecksumError):
            from_bytes(bytes(data))

    def test_bad_magic(self):
        data = to_bytes(random_matrix(5))
        with pytest.raises(FormatError):
            from_bytes(b"FMX9" + data[4:])

    def test_truncated(self):
        data = to_bytes(random_matrix(5))
        with pytest.raises((FormatError, ChecksumError)):
            from_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError):
            from_bytes(data[:10])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_matrix(tmp_path / "none.fmx")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.lists(st.integers(1, 9), min_size=1, max_size=3), st.integers(0, 2**31),
           st.text(min_size=1, max_size=6))
    def test_round_trip_property(self, n, dims, seed, prefix):
        rng = np.random.default_rng(seed)
        m = FeatureMatrix(tuple(f"{prefix}{i}" for i in range(n)), tuple(dims),
                          rng.normal(size=(n, sum(dims))).astype(np.float32))
        back = from_bytes(to_bytes(m))
        assert back.ids == m.ids and back.dims == m.dims
        assert back.data.tobytes() == m.data.tobytes()
