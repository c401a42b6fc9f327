import json

import numpy as np
import pytest

from disagg.dataio import load_dataset, read_labels_csv, read_map, write_dataset, write_labels_csv, write_map
from disagg.exceptions import LoadError
from disagg.scene import SceneConfig, generate_dataset


@pytest.fixture
def dataset_dir(tmp_path):
    samples = generate_dataset(SceneConfig(height=16, width=16, parcel_grid=(2, 2), building_size_range=(2, 5), seed=1), 3)
    write_dataset(samples, tmp_path)
    return tmp_path, samples


def test_round_trip(dataset_dir):
    root, samples = dataset_dir
    loaded = load_dataset(root)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.oracle, b.oracle)
        np.testing.assert_array_equal(a.chip, b.chip)


def test_manifest_path_accepted(dataset_dir):
    root, _ = dataset_dir
    assert len(load_dataset(root / "manifest.json")) == 3


def test_map_round_trip(tmp_path):
    values = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_map(tmp_path / "m.f32", values)
    assert json.loads((tmp_path / "m.f32.json").read_text()) == {"height": 3, "width": 4}
    np.testing.assert_array_equal(read_map(tmp_path / "m.f32"), values)
    assert (tmp_path / "m.f32").stat().st_size == 48


def test_map_missing_sidecar(tmp_path):
    write_map(tmp_path / "m.f32", np.zeros((2, 2)))
    (tmp_path / "m.f32.json").unlink()
    with pytest.raises(LoadError, match="sidecar"):
        read_map(tmp_path / "m.f32")


def test_labels_csv_exact(tmp_path):
    labels = np.array([0.1, 1e20 / 3, 123456789.123])
    write_labels_csv(tmp_path / "l.csv", labels)
    np.testing.assert_array_equal(read_labels_csv(tmp_path / "l.csv"), labels)
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "region_id,value"


def test_label_count_mismatch_names_sample(dataset_dir):
    root, samples = dataset_dir
    sid = samples[1].id
    write_labels_csv(root / f"{sid}_labels.csv", samples[1].labels[:-1])
    with pytest.raises(LoadError, match=f"{sid}.*label count mismatch"):
        load_dataset(root)


def test_non_strict_skips(dataset_dir, caplog):
    root, samples = dataset_dir
    write_labels_csv(root / f"{samples[1].id}_labels.csv", samples[1].labels[:-1])
    loaded = load_dataset(root, strict=False)
    assert [s.id for s in loaded] == [samples[0].id, samples[2].id]
    assert "label count mismatch" in caplog.text


def test_missing_file(dataset_dir):
    root, samples = dataset_dir
    (root / f"{samples[0].id}_mask.png").unlink()
    with pytest.raises(LoadError, match="missing file"):
        load_dataset(root)


def test_oracle_sum_violation(dataset_dir):
    root, samples = dataset_dir
    sid = samples[0].id
    write_labels_csv(root / f"{sid}_labels.csv", samples[0].labels * 2)
    with pytest.raises(LoadError, match=sid):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(LoadError, match="manifest"):
        load_dataset(tmp_path)
