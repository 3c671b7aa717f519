import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from midres.data import (FormatError, decode_blob, encode_blob, load_manifest, load_tensor_blob,
                         normalize_batch, read_blob_shape, save_tensor_blob, staged_directory, stratified_kfold,
                         synth_dataset, write_manifest)


class TestBlob:
    def test_byte_layout(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        save_tensor_blob(arr, tmp_path / "a.tnsb")
        raw = (tmp_path / "a.tnsb").read_bytes()
        assert len(raw) == 4 + 2 + 1 + 1 + 8 + 16 == 32
        assert raw[:4] == b"TNSB"
        assert struct.unpack("<HBB2I", raw[4:16]) == (1, 1, 2, 2, 2)
        assert raw[16:] == struct.pack("<4f", 1, 2, 3, 4)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                      hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
                      elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
    def test_round_trip_bitwise(self, arr):
        back = decode_blob(encode_blob(arr))
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        arr = rng.standard_normal((2, 3, 4))
        save_tensor_blob(arr, tmp_path / "b.tnsb")
        assert load_tensor_blob(tmp_path / "b.tnsb").data.tobytes() == arr.tobytes()
        assert read_blob_shape(tmp_path / "b.tnsb") == (np.dtype("<f8"), (2, 3, 4))

    @pytest.mark.parametrize("mutate,reason", [
        (lambda b: b"XXXX" + b[4:], "bad-magic"),
        (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "bad-version"),
        (lambda b: b[:6] + b"\x03" + b[7:], "bad-dtype"),
        (lambda b: b[:7] + b"\x00" + b[8:], "bad-rank"),
        (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], "zero-dim"),
        (lambda b: b[:5], "truncated-header"),
        (lambda b: b[:10], "truncated-header"),
        (lambda b: b[:-1], "truncated-payload"),
        (lambda b: b + b"\x00", "payload-mismatch"),
        (lambda b: b[:16] + struct.pack("<f", np.nan) + b[20:], "non-finite"),
    ])
    def test_corruptions(self, mutate, reason):
        good = encode_blob(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(FormatError) as exc:
            decode_blob(mutate(good), "x.tnsb")
        assert exc.value.reason == reason
        assert "x.tnsb" in str(exc.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError) as exc:
            load_tensor_blob(tmp_path / "nope.tnsb")
        assert exc.value.reason == "missing-file"

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            encode_blob(np.ones(3, dtype=np.int32))


def _manifest(tmp_path, lines, header="# format: midres-manifest 1\n# num_classes: 3\n# shape: 1,2,2\n"):
    save_tensor_blob(np.zeros((1, 2, 2), dtype=np.float32), tmp_path / "x.tnsb")
    path = tmp_path / "m.txt"
    path.write_text(header + "".join(line + "\n" for line in lines))
    return path


GOOD = ["x.tnsb,0,a", "x.tnsb,1,b", "x.tnsb,2,c"]


class TestManifest:
    def test_mri_census(self, mri_census_manifest):
        census = mri_census_manifest.census()
        assert census == {"glioma": 1426, "meningioma": 708, "pituitary": 930}
        assert sum(census.values()) == len(mri_census_manifest) == 3064

    def test_round_trip(self, tmp_path):
        m = load_manifest(_manifest(tmp_path, GOOD))
        assert m.num_classes == 3 and m.shape == (1, 2, 2)
        assert m.class_names == ["a", "b", "c"]
        assert m.load_images().shape == (3, 1, 2, 2)

    def test_write_manifest(self, tmp_path):
        save_tensor_blob(np.zeros(4, dtype=np.float32), tmp_path / "v.tnsb")
        path = write_manifest(tmp_path / "m.txt", [("v.tnsb", 0, "a, with comma"), ("v.tnsb", 1, "b")], 2, (4,))
        assert load_manifest(path).class_names == ["a, with comma", "b"]

    @pytest.mark.parametrize("lines,reason", [
        ([], "empty"),
        (GOOD + ["x.tnsb,3,d"], "bad-label"),
        (GOOD + ["x.tnsb,-1,d"], "bad-label"),
        (GOOD + ["x.tnsb,one,a"], "bad-label"),
        (GOOD + ["x.tnsb,0,zzz"], "bad-label"),
        (GOOD[:2], "bad-label"),
        (GOOD + ["x.tnsb,0"], "bad-record"),
        (GOOD + ["missing.tnsb,0,a"], "missing-file"),
    ])
    def test_rejections(self, tmp_path, lines, reason):
        with pytest.raises(FormatError) as exc:
            load_manifest(_manifest(tmp_path, lines))
        assert exc.value.reason == reason

    def test_error_names_line(self, tmp_path):
        with pytest.raises(FormatError, match=r"m\.txt:7"):
            load_manifest(_manifest(tmp_path, GOOD + ["x.tnsb,3,d"]))

    @pytest.mark.parametrize("header", ["# num_classes: 3\n", "# shape: 1,2,2\n",
                                        "# num_classes: x\n# shape: 1,2,2\n",
                                        "# format: other 9\n# num_classes: 3\n# shape: 1,2,2\n"])
    def test_bad_header(self, tmp_path, header):
        with pytest.raises(FormatError):
            load_manifest(_manifest(tmp_path, GOOD, header=header))

    def test_shape_mismatch(self, tmp_path):
        path = _manifest(tmp_path, GOOD, header="# num_classes: 3\n# shape: 1,4,4\n")
        with pytest.raises(FormatError) as exc:
            load_manifest(path)
        assert exc.value.reason == "shape-mismatch"


class TestStratifiedKFold:
    def test_class_of_ten(self):
        a = stratified_kfold([0] * 10 + [1] * 5, 5, seed=0)
        np.testing.assert_array_equal(a.per_class_counts([0] * 10 + [1] * 5), [[2] * 5, [1] * 5])

    def test_mri_census(self, mri_census_manifest):
        a = stratified_kfold(mri_census_manifest, 5, seed=0)
        counts = a.per_class_counts(mri_census_manifest.labels)
        assert set(counts[0]) <= {285, 286} and counts[0].sum() == 1426
        assert set(counts[1]) <= {141, 142} and counts[1].sum() == 708
        assert set(counts[2]) == {186}
        assert set(a.fold_sizes()) == {612, 613}

    def test_deterministic(self, mri_census_manifest):
        a = stratified_kfold(mri_census_manifest, 5, seed=4)
        b = stratified_kfold(mri_census_manifest, 5, seed=4)
        assert a.folds.tobytes() == b.folds.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(2, 40), min_size=2, max_size=5), k=st.integers(2, 6),
           seed=st.integers(0, 2**31))
    def test_balanced_partition(self, counts, k, seed):
        counts = [max(c, k) for c in counts]
        labels = np.repeat(np.arange(len(counts)), counts)
        a = stratified_kfold(labels, k, seed)
        per_class = a.per_class_counts(labels)
        assert np.all(per_class.max(axis=1) - per_class.min(axis=1) <= 1)
        sizes = a.fold_sizes()
        assert max(sizes) - min(sizes) <= 1
        val = np.concatenate([a.val_indices(f) for f in range(k)])
        assert sorted(val) == list(range(labels.size))
        for f in range(k):
            assert set(a.train_indices(f)).isdisjoint(a.val_indices(f))

    def test_undersized_class(self):
        with pytest.raises(ValueError, match=r"\(1, 3\)"):
            stratified_kfold([0] * 5 + [1] * 3, 5, 0)

    def test_csv(self, tmp_path):
        stratified_kfold([0, 0, 1, 1], 2, 0).to_csv(tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "sample_index,fold" and len(lines) == 5


class TestSynth:
    def test_census_and_range(self, synth_manifest):
        assert synth_manifest.census() == {"class0": 10, "class1": 10, "class2": 10}
        images = synth_manifest.load_images()
        assert images.shape == (30, 1, 64, 64)
        assert images.min() >= 0 and images.max() <= 1

    def test_deterministic_per_seed(self, tmp_path):
        a = load_manifest(synth_dataset(2, 16, 2, 5, tmp_path / "a")).load_images()
        b = load_manifest(synth_dataset(2, 16, 2, 5, tmp_path / "b")).load_images()
        c = load_manifest(synth_dataset(2, 16, 2, 6, tmp_path / "c")).load_images()
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    @pytest.mark.parametrize("size", [15, 8])
    def test_bad_size(self, tmp_path, size):
        with pytest.raises(ValueError):
            synth_dataset(1, size, 2, 0, tmp_path / "d")

    def test_refuses_nonempty_output(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "keep").write_text("x")
        with pytest.raises(FileExistsError):
            synth_dataset(1, 16, 2, 0, tmp_path / "d")


class TestNormalize:
    def test_constant_image_is_zero(self):
        out = normalize_batch(np.full((2, 1, 4, 4), 0.37))
        assert not out.any()

    def test_moments(self, rng):
        out = normalize_batch(rng.uniform(0, 1, (3, 1, 16, 16)))
        assert np.all(np.abs(out.mean(axis=(1, 2, 3))) < 1e-6)
        assert np.all(np.abs(out.std(axis=(1, 2, 3)) - 1) < 1e-4)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (2, 1, 6, 6), elements=st.floats(0, 1)))
    def test_idempotent(self, batch):
        once = normalize_batch(batch)
        np.testing.assert_allclose(normalize_batch(once), once, atol=1e-5)


def test_staged_directory_cleans_up_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with staged_directory(tmp_path / "out") as tmp:
            (tmp / "partial").write_text("x")
            raise RuntimeError
    assert list(tmp_path.iterdir()) == []
