import hashlib

import numpy as np
import pytest
from PIL import Image

from bagnet.data import (
    DatasetManifest,
    Sample,
    load_manifest_arrays,
    load_sample,
    parse_manifest,
    synth_dataset,
    write_manifest,
)
from bagnet.errors import DecodeError, ManifestError, MissingFileError, SampleLoadError, SizeMismatchError


def save_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path


def digest_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestLoadSample:
    def test_white_image(self, tmp_path):
        save_png(tmp_path / "i.png", np.full((32, 32), 255))
        save_png(tmp_path / "m.png", np.zeros((32, 32)))
        img, msk = load_sample(Sample("a", "i.png", "m.png"), (16, 16), tmp_path)
        np.testing.assert_array_equal(img.data, 1.0)
        assert img.shape == msk.shape == (1, 1, 16, 16)

    def test_mask_stays_binary(self, tmp_path, rng):
        mask = np.where(rng.random((50, 70)) < 0.3, 255, 0)
        save_png(tmp_path / "i.png", rng.integers(0, 256, (50, 70)))
        save_png(tmp_path / "m.png", mask)
        _, msk = load_sample(Sample("a", "i.png", "m.png"), (64, 64), tmp_path)
        assert set(np.unique(msk.data)) <= {0.0, 1.0}
        assert msk.data.max() == 1.0

    def test_resize_shape(self, tmp_path, rng):
        save_png(tmp_path / "i.png", rng.integers(0, 256, (80, 100)))
        save_png(tmp_path / "m.png", np.zeros((80, 100)))
        img, _ = load_sample(Sample("a", "i.png", "m.png"), (64, 64), tmp_path)
        assert img.shape == (1, 1, 64, 64)
        assert 0.0 <= img.data.min() and img.data.max() <= 1.0

    def test_rgb_is_channel_mean(self, tmp_path):
        rgb = np.zeros((16, 16, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        Image.fromarray(rgb).save(tmp_path / "i.png")
        save_png(tmp_path / "m.png", np.zeros((16, 16)))
        img, _ = load_sample(Sample("a", "i.png", "m.png"), (16, 16), tmp_path)
        np.testing.assert_allclose(img.data, 1 / 3, rtol=1e-6)

    def test_pgm_input(self, tmp_path, rng):
        save_png(tmp_path / "i.pgm", rng.integers(0, 256, (16, 16)))
        save_png(tmp_path / "m.pgm", np.zeros((16, 16)))
        img, _ = load_sample(Sample("a", "i.pgm", "m.pgm"), (16, 16), tmp_path)
        assert img.shape == (1, 1, 16, 16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError) as info:
            load_sample(Sample("lost", "nope.png", "nope.png"), (16, 16), tmp_path)
        assert info.value.sample_id == "lost"

    def test_undecodable(self, tmp_path):
        (tmp_path / "i.png").write_bytes(b"this is not an image")
        save_png(tmp_path / "m.png", np.zeros((16, 16)))
        with pytest.raises(DecodeError):
            load_sample(Sample("bad", "i.png", "m.png"), (16, 16), tmp_path)

    def test_size_mismatch(self, tmp_path):
        save_png(tmp_path / "i.png", np.zeros((16, 16)))
        save_png(tmp_path / "m.png", np.zeros((16, 20)))
        with pytest.raises(SizeMismatchError):
            load_sample(Sample("odd", "i.png", "m.png"), (16, 16), tmp_path)

    def test_errors_are_distinct(self):
        kinds = {MissingFileError, DecodeError, SizeMismatchError}
        assert len(kinds) == 3 and all(issubclass(k, SampleLoadError) for k in kinds)

    def test_deterministic(self, tmp_path, rng):
        save_png(tmp_path / "i.png", rng.integers(0, 256, (40, 24)))
        save_png(tmp_path / "m.png", rng.integers(0, 2, (40, 24)) * 255)
        s = Sample("a", "i.png", "m.png")
        a, b = load_sample(s, (32, 32), tmp_path), load_sample(s, (32, 32), tmp_path)
        assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()


class TestSynth:
    def test_same_seed_same_bytes(self, tmp_path):
        synth_dataset(4, (32, 32), seed=9, out_dir=tmp_path / "a")
        synth_dataset(4, (32, 32), seed=9, out_dir=tmp_path / "b")
        assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        synth_dataset(2, (32, 32), seed=1, out_dir=tmp_path / "a")
        synth_dataset(2, (32, 32), seed=2, out_dir=tmp_path / "b")
        assert digest_tree(tmp_path / "a") != digest_tree(tmp_path / "b")

    def test_masks_binary_with_foreground_range(self, tmp_path):
        m = synth_dataset(12, (64, 64), seed=0, out_dir=tmp_path)
        for s in m.samples:
            mask = np.asarray(Image.open(tmp_path / s.mask_path))
            assert set(np.unique(mask)) <= {0, 255}
            assert 0.05 <= (mask > 0).mean() <= 0.40

    def test_lesion_darker_than_background(self, tmp_path):
        m = synth_dataset(6, (64, 64), seed=0, out_dir=tmp_path)
        for s in m.samples:
            img = np.asarray(Image.open(tmp_path / s.image_path), dtype=float)
            mask = np.asarray(Image.open(tmp_path / s.mask_path)) > 0
            assert img[mask].mean() < img[~mask].mean()

    def test_eight_loadable(self, synth8):
        m = parse_manifest(synth8 / "manifest.tsv")
        assert len(m) == 8 and m.target_size == (32, 32)
        images, masks = load_manifest_arrays(m)
        assert images.shape == masks.shape == (8, 1, 32, 32)
        assert 0.0 <= images.min() and images.max() <= 1.0

    def test_bad_size(self, tmp_path):
        with pytest.raises(ValueError):
            synth_dataset(1, (30, 32), out_dir=tmp_path)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            synth_dataset(1, (16, 16), out_dir=blocker / "sub")


class TestManifest:
    def test_empty_is_valid(self, tmp_path):
        write_manifest(DatasetManifest([]), tmp_path / "m.tsv")
        assert len(parse_manifest(tmp_path / "m.tsv")) == 0

    def test_duplicate_id_named(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\ti.png\tm.png\nb\ti.png\tm.png\na\tj.png\tk.png\n")
        with pytest.raises(ManifestError, match="'a'"):
            parse_manifest(tmp_path / "m.tsv")

    def test_duplicate_in_constructor(self):
        with pytest.raises(ManifestError, match="dup"):
            DatasetManifest([Sample("dup", "a", "b"), Sample("dup", "c", "d")])

    def test_round_trip(self, tmp_path):
        m = DatasetManifest(
            [Sample("x1", "img/x1.png", "msk/x1.png", 0), Sample("x2", "img/x2.png", "msk/x2.png"),
             Sample("x3", "/abs/x3.png", "/abs/x3m.png", 2)],
            target_size=(48, 32),
            seed=5,
        )
        write_manifest(m, tmp_path / "m.tsv")
        with pytest.warns(UserWarning, match="missing file"):
            back = parse_manifest(tmp_path / "m.tsv")
        assert back == m

    def test_malformed_row_line_number(self, tmp_path):
        (tmp_path / "m.tsv").write_text("# comment\n\nonly-two\tfields\n")
        with pytest.raises(ManifestError, match=":3:"):
            parse_manifest(tmp_path / "m.tsv")

    def test_bad_target_size(self):
        with pytest.raises(ManifestError):
            DatasetManifest([], target_size=(20, 32))
