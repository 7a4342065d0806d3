import itertools
import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from gnas.data import (Dataset, SyntheticSpec, generate_synthetic, load_csv, save_csv,
                       save_dataset, split)
from gnas.errors import EmptySplit, NonBinaryLabel, ParseError
from gnas.nn import Batch


def test_synthetic_spec_invariants():
    with pytest.raises(ValueError):
        SyntheticSpec(label_noise=0.5)
    with pytest.raises(ValueError):
        SyntheticSpec(attrs_per_group=(4, 0))
    with pytest.raises(ValueError):
        SyntheticSpec(attrs_per_group=(2,) * 9, input_dim=16, latent_dim_per_group=2)


def test_same_group_labels_correlate_more():
    spec = SyntheticSpec(attrs_per_group=(3, 3, 3), label_noise=0.0,
                         samples=(10_000, 10, 10), rng_seed=1)
    data = generate_synthetic(spec)
    corr = np.corrcoef(data.train.labels.T.astype(float))
    groups = data.group_labels
    same, cross = [], []
    for a, b in itertools.combinations(range(len(groups)), 2):
        (same if groups[a] == groups[b] else cross).append(abs(corr[a, b]))
    assert np.mean(same) > np.mean(cross)
    assert np.mean(cross) < 0.05


def test_near_half_noise_destroys_signal():
    spec = SyntheticSpec(attrs_per_group=(2, 2), input_dim=8, label_noise=0.49,
                         samples=(5000, 10, 5000), rng_seed=2)
    data = generate_synthetic(spec)
    for n in range(4):
        clf = LogisticRegression().fit(data.train.features, data.train.labels[:, n])
        acc = np.mean(clf.predict(data.test.features) == data.test.labels[:, n])
        assert abs(acc - 0.5) < 0.04


def test_generation_is_deterministic():
    spec = SyntheticSpec(samples=(200, 100, 100), rng_seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for name in ("train", "valid", "test"):
        assert a.splits[name].features.tobytes() == b.splits[name].features.tobytes()
        assert a.splits[name].labels.tobytes() == b.splits[name].labels.tobytes()
    assert a.metadata == b.metadata
    other = generate_synthetic(SyntheticSpec(samples=(200, 100, 100), rng_seed=8))
    assert not np.array_equal(a.train.features, other.train.features)


def test_base_rates_and_probe():
    for seed in range(3):
        data = generate_synthetic(SyntheticSpec(label_noise=0.1, rng_seed=seed))
        assert all(0.3 <= r <= 0.7 for r in data.metadata["base_rates"])
        assert min(data.metadata["probe_accuracies"]) >= 0.9
        assert set(np.unique(data.train.labels)) <= {0, 1}
        assert data.attribute_names[4] == "g1_a4"


def test_csv_round_trip(tmp_path):
    batch = Batch(np.array([[0.1, -2.5], [1e-300, 3.0], [np.pi, -0.0]]),
                  np.array([[0, 1], [1, 1], [0, 0]], dtype=np.int8))
    path = tmp_path / "d.csv"
    save_csv(batch, path, ["smiling", "fringe"])
    loaded = load_csv(path)
    got = loaded.splits["all"]
    assert got.features.tobytes() == batch.features.tobytes()
    assert np.array_equal(got.labels, batch.labels)
    assert loaded.attribute_names == ["smiling", "fringe"]


def test_csv_non_binary_label_location(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,a0,a1\n0.5,1.0,0,1\n0.2,0.3,1,2\n")
    with pytest.raises(NonBinaryLabel) as info:
        load_csv(path)
    assert (info.value.row, info.value.column) == (3, 4)


def test_csv_bad_number_location(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,a0\n0.5,oops,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert (info.value.row, info.value.column) == (2, 2)
    assert "row 2" in str(info.value)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError):
        load_csv(path)


def test_csv_explicit_column_counts(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x,y,z\n1.5,0,1\n2.5,1,0\n")
    data = load_csv(path, n_feature_cols=1, n_attr_cols=2)
    assert data.splits["all"].features.shape == (2, 1)
    assert data.splits["all"].labels.tolist() == [[0, 1], [1, 0]]


def _rows(n):
    return Dataset({"all": Batch(np.arange(n, dtype=float)[:, None],
                                 np.zeros((n, 1), dtype=np.int8))}, ["a0"])


def test_split_sizes_and_coverage():
    out = split(_rows(100), (0.8, 0.1, 0.1), rng_seed=0)
    assert [len(out.splits[s]) for s in ("train", "valid", "test")] == [80, 10, 10]
    values = np.concatenate([out.splits[s].features[:, 0] for s in ("train", "valid", "test")])
    assert sorted(values) == list(range(100))


@pytest.mark.parametrize("fractions", [(0.6, 0.2, 0.2), (0.34, 0.33, 0.33), (0.9, 0.05, 0.05)])
def test_split_is_disjoint_and_exhaustive(fractions):
    out = split(_rows(57), fractions, rng_seed=3)
    parts = [set(out.splits[s].features[:, 0]) for s in ("train", "valid", "test")]
    assert sum(len(p) for p in parts) == 57 and set.union(*parts) == set(range(57))


def test_split_rejects_empty_part():
    with pytest.raises(EmptySplit):
        split(_rows(100), (1, 0, 0), rng_seed=0)


def test_save_dataset_writes_splits_and_metadata(tmp_path):
    data = generate_synthetic(SyntheticSpec(samples=(20, 10, 10)))
    paths = save_dataset(data, tmp_path / "out")
    meta = json.loads(open(paths["metadata"]).read())
    assert meta["group_labels"] == data.group_labels
    reloaded = load_csv(paths["valid"])
    assert np.array_equal(reloaded.splits["all"].labels, data.valid.labels)
    assert reloaded.attribute_names == data.attribute_names
