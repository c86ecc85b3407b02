import numpy as np
import pytest
import torch

from nesyrules.backbone import Backbone, BackboneConfig
from nesyrules.binarization import (
    BinarizationTable,
    TableError,
    _round_half_up,
    binarize_dataset,
    read_table,
    write_table,
)
from nesyrules.dataset import LabeledImage, generate_synthetic
from nesyrules.sparsity import ThresholdTensor, compute_thresholds


def test_round_half_up_boundary():
    values = np.array([0.0, 0.4999, 0.5, 0.5001, 0.9, 1.0])
    assert _round_half_up(values).tolist() == [0, 0, 1, 1, 1, 1]


class _ConstantMapModel:
    """Returns all-zero feature maps regardless of input."""

    def __init__(self, num_filters):
        self.num_filters = num_filters

    def eval(self):
        return self

    def __call__(self, batch):
        n = batch.shape[0]
        return torch.zeros(n, self.num_filters, 2, 2), torch.zeros(n, 2)


def _zero_images(ids_and_labels):
    pixels = np.zeros((4, 4, 3), dtype=np.float32)
    return [LabeledImage(pixels, label, image_id) for image_id, label in ids_and_labels]


class TestBinarizeDataset:
    def test_half_rounds_up_and_below_half_down(self):
        images = _zero_images([("a/1", 0)])
        model = _ConstantMapModel(1)
        # zero maps without thresholds sit exactly at sigmoid(0) = 0.5
        at_half = binarize_dataset(images, ["alpha", "beta"], model, None)
        assert at_half.features.tolist() == [[1]]
        # a small positive threshold pushes the activation just below 0.5
        t = ThresholdTensor(mu=[0.1], sigma=[0.0], h1=1.0, h2=0.0)
        below = binarize_dataset(images, ["alpha", "beta"], model, t)
        assert below.features.tolist() == [[0]]

    def test_rows_sorted_by_id_and_labels_mapped(self):
        images = _zero_images([("beta/2", 1), ("alpha/1", 0)])
        table = binarize_dataset(images, ["alpha", "beta"], _ConstantMapModel(2), None)
        assert table.image_ids == ["alpha/1", "beta/2"]
        assert table.labels == ["alpha", "beta"]
        assert table.class_names == ["alpha", "beta"]

    def test_empty_split_rejected(self):
        with pytest.raises(TableError):
            binarize_dataset([], ["a"], _ConstantMapModel(1), None)

    def test_real_model_batch_invariance(self):
        split = generate_synthetic(2, 10, image_size=16, seed=0)
        model = Backbone.create(
            BackboneConfig(image_size=16, num_filters=4, num_classes=2), seed=0
        )
        thresholds = compute_thresholds(split.train, model, 0.6, 0.7)
        a = binarize_dataset(split.train, split.class_names, model, thresholds, batch_size=64)
        b = binarize_dataset(split.train, split.class_names, model, thresholds, batch_size=3)
        assert a == b
        assert a.num_rows == len(split.train)
        assert a.num_features == 4
        assert a.image_ids == sorted(a.image_ids)


class TestTableValidation:
    def test_non_binary_cell_names_row(self):
        with pytest.raises(TableError, match="row 2"):
            BinarizationTable(["a", "b"], np.array([[0, 1], [2, 0]]), ["x", "y"])

    def test_length_mismatch(self):
        with pytest.raises(TableError, match="equal length"):
            BinarizationTable(["a"], np.array([[0], [1]]), ["x", "y"])

    def test_wrong_rank(self):
        with pytest.raises(TableError, match="2-d"):
            BinarizationTable(["a"], np.array([0, 1]), ["x"])

    def test_default_class_names_sorted_unique(self):
        table = BinarizationTable(["a", "b", "c"], np.zeros((3, 1)), ["z", "y", "z"])
        assert table.class_names == ["y", "z"]

    def test_equality(self):
        a = BinarizationTable(["a"], np.array([[1, 0]]), ["x"])
        b = BinarizationTable(["a"], np.array([[1, 0]]), ["x"])
        c = BinarizationTable(["a"], np.array([[0, 0]]), ["x"])
        assert a == b
        assert a != c
        assert a != "not a table"


class TestCsv:
    def _table(self):
        return BinarizationTable(
            image_ids=["a/0", "a/1", "b/0"],
            features=np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1]]),
            labels=["alpha", "alpha", "beta"],
        )

    def test_round_trip_identity(self, tmp_path):
        table = self._table()
        path = tmp_path / "table.csv"
        write_table(table, path)
        assert read_table(path) == table

    def test_header_layout(self, tmp_path):
        path = tmp_path / "table.csv"
        write_table(self._table(), path)
        first = path.read_text().splitlines()[0]
        assert first == "image_id,f0,f1,f2,label"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(TableError, match="empty file"):
            read_table(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,f0,label\nx,1,a\n")
        with pytest.raises(TableError, match="bad header"):
            read_table(path)
        path.write_text("image_id,g0,label\nx,1,a\n")
        with pytest.raises(TableError, match="feature columns"):
            read_table(path)

    def test_row_arity_error_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,f0,f1,label\na,1,0,x\nb,1,x\n")
        with pytest.raises(TableError, match="row 3"):
            read_table(path)

    def test_non_binary_cell_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,f0,label\na,1,x\nb,7,x\n")
        with pytest.raises(TableError, match="row 3"):
            read_table(path)

    def test_header_only_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("image_id,f0,label\n")
        with pytest.raises(TableError, match="no data rows"):
            read_table(path)
