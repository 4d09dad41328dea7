import numpy as np
import pytest

from gradleak.datasets import CIFAR10_RECORD_BYTES, Dataset, Sample, load_cifar10, make_synthetic
from gradleak.errors import ConfigError, DatasetFormatError, EmptyDatasetError


def _write_records(path, labels, fill=None):
    rng = np.random.default_rng(0)
    records = []
    for label in labels:
        pixels = rng.integers(0, 256, size=3072, dtype=np.uint8) if fill is None else np.full(3072, fill, np.uint8)
        records.append(np.concatenate([[label], pixels]).astype(np.uint8))
    np.concatenate(records).tofile(path)


def test_records_become_samples(tmp_path):
    path = tmp_path / "test_batch.bin"
    _write_records(path, [3, 0, 9])
    data = load_cifar10(str(path))
    assert len(data) == 3
    assert data.images.shape == (3, 3, 32, 32)
    assert list(data.labels) == [3, 0, 9]
    assert load_cifar10(str(tmp_path), limit=2).labels.tolist() == [3, 0]


def test_channel_major_layout(tmp_path):
    path = tmp_path / "batch.bin"
    record = np.zeros(CIFAR10_RECORD_BYTES, dtype=np.uint8)
    record[1 + 1024 + 5] = 255
    record.tofile(path)
    image = load_cifar10(str(path)).images[0]
    assert image[1, 0, 5] == 1.0
    assert image.sum() == 1.0


def test_label_byte_out_of_range(tmp_path):
    path = tmp_path / "batch.bin"
    _write_records(path, [1, 17])
    with pytest.raises(DatasetFormatError):
        load_cifar10(str(path))


def test_truncated_record(tmp_path):
    path = tmp_path / "batch.bin"
    _write_records(path, [1, 2])
    with open(path, "ab") as f:
        f.write(b"\x01\x02")
    with pytest.raises(DatasetFormatError):
        load_cifar10(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(str(tmp_path / "nope.bin"))


def test_synthetic_is_deterministic_and_in_range():
    a = make_synthetic(4, 12, shape=(3, 8, 8))
    b = make_synthetic(4, 12, shape=(3, 8, 8))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not np.array_equal(a.images, make_synthetic(5, 12, shape=(3, 8, 8)).images)


def test_synthetic_images_are_smooth():
    image = make_synthetic(0, 1, shape=(1, 16, 16)).images[0, 0]
    noise = np.random.default_rng(0).uniform(size=(16, 16))
    assert np.abs(np.diff(image, axis=1)).mean() < np.abs(np.diff(noise, axis=1)).mean()


def test_distinct_labels_form_a_permutation():
    data = make_synthetic(1, 10, shape=(1, 4, 4), num_classes=10, distinct_labels=True)
    assert sorted(data.labels.tolist()) == list(range(10))
    with pytest.raises(ConfigError):
        make_synthetic(1, 11, shape=(1, 4, 4), num_classes=10, distinct_labels=True)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(ConfigError):
        Dataset(np.zeros((1, 1, 2, 2)), [10])
    with pytest.raises(EmptyDatasetError):
        Dataset.from_samples([], 10)


def test_subset_and_samples():
    data = make_synthetic(2, 5, shape=(1, 4, 4))
    sub = data.subset([4, 1])
    assert isinstance(sub[0], Sample)
    assert sub[0].label == data[4].label
    rebuilt = Dataset.from_samples(list(sub), data.num_classes)
    assert rebuilt.images.tobytes() == sub.images.tobytes()
