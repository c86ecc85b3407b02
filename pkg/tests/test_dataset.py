import json

import numpy as np
import pytest
from PIL import Image

from nesyrules.dataset import (
    DatasetError,
    DatasetSplit,
    LabeledImage,
    generate_synthetic,
    load_image_folder,
    shape_membership,
    synthetic_motifs,
    write_split_manifest,
)


class TestSynthetic:
    def test_shapes_and_ranges(self):
        split = generate_synthetic(3, 10, seed=0)
        image = split.train[0]
        assert image.pixels.shape == (32, 32, 3)
        assert image.pixels.dtype == np.float32
        assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0

    def test_split_sizes(self):
        split = generate_synthetic(3, 40, seed=0, split_spec=(0.7, 0.15, 0.15))
        # per class: 28 train, 6 validation, 6 test
        assert len(split.train) == 84
        assert len(split.validation) == 18
        assert len(split.test) == 18

    def test_class_names_sorted_and_labels_consistent(self):
        split = generate_synthetic(3, 10, seed=0)
        assert split.class_names == sorted(split.class_names)
        for im in split.train + split.validation + split.test:
            assert im.id.startswith(split.class_names[im.label] + "/")

    def test_balanced_weights_are_one(self):
        split = generate_synthetic(3, 20, seed=0)
        assert np.allclose(split.class_weights, 1.0)

    def test_determinism(self):
        a = generate_synthetic(2, 10, seed=7)
        b = generate_synthetic(2, 10, seed=7)
        c = generate_synthetic(2, 10, seed=8)
        assert np.array_equal(a.train[0].pixels, b.train[0].pixels)
        assert not np.array_equal(a.train[0].pixels, c.train[0].pixels)

    def test_masks_mark_motif_pixels(self):
        split = generate_synthetic(3, 10, seed=0, with_masks=True)
        im = split.train[0]
        assert im.mask is not None
        values = set(np.unique(im.mask).tolist())
        assert values <= {0, im.label + 1}
        assert im.label + 1 in values
        # the concept map covers background plus one concept per class
        assert split.concept_names[0] == "background"
        assert split.concept_names[im.label + 1] == split.class_names[im.label]

    def test_no_masks_by_default(self):
        split = generate_synthetic(2, 10, seed=0)
        assert all(im.mask is None for im in split.train)

    def test_ids_unique(self):
        split = generate_synthetic(3, 15, seed=0)
        ids = [im.id for im in split.train + split.validation + split.test]
        assert len(ids) == len(set(ids))

    def test_validation_errors(self):
        with pytest.raises(DatasetError):
            generate_synthetic(1, 10)
        with pytest.raises(DatasetError):
            generate_synthetic(2, 5)
        with pytest.raises(DatasetError):
            generate_synthetic(2, 10, image_size=8)

    def test_motif_names_sorted(self):
        motifs = synthetic_motifs(5)
        names = [name for name, _, _ in motifs]
        assert names == sorted(names)
        assert len(set(names)) == 5


class TestShapeMembership:
    def test_circle_contains_center_not_corner(self):
        inside = shape_membership("circle", 16, 8.0, 8.0, 4.0)
        assert inside[8, 8]
        assert not inside[0, 0]

    def test_ring_has_a_hole(self):
        inside = shape_membership("ring", 32, 16.0, 16.0, 8.0)
        assert not inside[16, 16]
        assert inside[16, 16 + 7]

    def test_square_extent(self):
        inside = shape_membership("square", 16, 8.0, 8.0, 4.0)
        # half-width is 0.9 * r = 3.6
        assert inside[8, 11]
        assert not inside[8, 12]

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            shape_membership("blob", 16, 8.0, 8.0, 4.0)


class TestLabeledImage:
    def test_rejects_bad_shape(self):
        with pytest.raises(DatasetError):
            LabeledImage(np.zeros((8, 8)), 0, "x")

    def test_rejects_out_of_range(self):
        with pytest.raises(DatasetError):
            LabeledImage(np.full((8, 8, 3), 2.0), 0, "x")

    def test_rejects_mask_shape_mismatch(self):
        with pytest.raises(DatasetError):
            LabeledImage(np.zeros((8, 8, 3)), 0, "x", mask=np.zeros((4, 4), dtype=np.int64))


class TestDatasetSplit:
    def _image(self, name, label=0):
        return LabeledImage(np.zeros((8, 8, 3), dtype=np.float32), label, name)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DatasetError):
            DatasetSplit(
                train=[self._image("a"), self._image("a")],
                validation=[],
                test=[],
                class_names=["c0"],
                class_weights=np.array([1.0]),
            )

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DatasetError):
            DatasetSplit(
                train=[self._image("a", label=3)],
                validation=[],
                test=[],
                class_names=["c0"],
                class_weights=np.array([1.0]),
            )

    def test_subset_and_lookup(self):
        split = generate_synthetic(2, 10, seed=0)
        assert split.subset("train") is split.train
        with pytest.raises(ValueError):
            split.subset("all")
        im = split.test[0]
        assert split.image_by_id(im.id) is im
        with pytest.raises(KeyError):
            split.image_by_id("nope")


def _write_folder(root, per_class=4, size=20):
    rng = np.random.default_rng(0)
    for cls in ("alpha", "beta"):
        d = root / cls
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = (rng.random((size, size, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"img{i}.png")


class TestImageFolder:
    def test_basic_load(self, tmp_path):
        _write_folder(tmp_path / "data")
        split = load_image_folder(tmp_path / "data", split_spec=(0.5, 0.25, 0.25), seed=0)
        assert split.class_names == ["alpha", "beta"]
        assert len(split.train) == 4 and len(split.validation) == 2 and len(split.test) == 2
        assert split.train[0].pixels.shape == (32, 32, 3)
        assert all("/" in im.id for im in split.train)

    def test_undecodable_file_skipped(self, tmp_path):
        _write_folder(tmp_path / "data")
        (tmp_path / "data" / "alpha" / "junk.png").write_bytes(b"not a png")
        split = load_image_folder(tmp_path / "data", split_spec=(1.0, 0.0, 0.0), seed=0)
        names = [im.id for im in split.train]
        assert not any("junk" in n for n in names)
        assert len([n for n in names if n.startswith("alpha/")]) == 4

    def test_masks_and_concept_names(self, tmp_path):
        _write_folder(tmp_path / "data", per_class=4)
        masks = tmp_path / "masks"
        for cls in ("alpha", "beta"):
            (masks / cls).mkdir(parents=True)
            for i in range(4):
                arr = np.zeros((20, 20), dtype=np.uint8)
                arr[5:10, 5:10] = 2
                Image.fromarray(arr).save(masks / cls / f"img{i}.png")
        (masks / "concepts.json").write_text(json.dumps({"0": "background", "2": "box"}))
        split = load_image_folder(
            tmp_path / "data", split_spec=(1.0, 0.0, 0.0), mask_root=masks
        )
        assert split.concept_names == {0: "background", 2: "box"}
        im = split.train[0]
        assert im.mask is not None and im.mask.shape == (32, 32)
        assert set(np.unique(im.mask).tolist()) <= {0, 2}

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image_folder(tmp_path / "nope")

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "data" / "alpha").mkdir(parents=True)
        with pytest.raises(DatasetError):
            load_image_folder(tmp_path / "data")

    def test_bad_split_fractions(self, tmp_path):
        _write_folder(tmp_path / "data")
        with pytest.raises(DatasetError):
            load_image_folder(tmp_path / "data", split_spec=(0.5, 0.1, 0.1))


def test_split_manifest_round_trip(tmp_path):
    split = generate_synthetic(2, 10, seed=0)
    path = tmp_path / "manifest.json"
    write_split_manifest(split, path)
    manifest = json.loads(path.read_text())
    assert len(manifest) == 20
    for im in split.validation:
        assert manifest[im.id] == "validation"
