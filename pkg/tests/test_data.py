from __future__ import annotations

import gzip
import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridfl.data import (
    LabeledDataset,
    PartitionSpec,
    dirichlet_partition,
    draw_server_dataset,
    generate_synthetic,
    load_idx,
    standardize,
)
from hybridfl.errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    SamplingError,
    TruncatedFileError,
)
from hybridfl.model import Objective, full_gradient

from conftest import tiny_dataset


def test_dataset_is_frozen_copy():
    feats = np.ones((2, 2))
    ds = LabeledDataset(feats, np.array([0, 1]))
    feats[0, 0] = 5.0
    assert ds.features[0, 0] == 1.0
    with pytest.raises(ValueError):
        ds.features[0, 0] = 2.0


@pytest.mark.parametrize("feats,labels", [
    (np.zeros((2, 2)), np.array([0, 1, 1])),
    (np.zeros((2, 2)), np.array([0.5, 1.0])),
    (np.zeros((2, 2)), np.array([-1, 0])),
])
def test_dataset_validation(feats, labels):
    with pytest.raises(ValueError):
        LabeledDataset(feats, labels)


def test_concat_and_empty():
    ds = tiny_dataset()
    both = LabeledDataset.concat([ds, ds])
    assert both.n == 8 and np.array_equal(both.labels[4:], ds.labels)
    with pytest.raises(EmptyDatasetError):
        LabeledDataset.concat([])


def test_synthetic_is_deterministic_and_balanced():
    a = generate_synthetic(10, 20, 1003, 4.0, seed=7)
    b = generate_synthetic(10, 20, 1003, 4.0, seed=7)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    counts = a.class_counts(10)
    assert counts.max() - counts.min() <= 1
    c = generate_synthetic(10, 20, 1003, 4.0, seed=8)
    assert not np.array_equal(a.features, c.features)


def test_synthetic_separation_controls_class_distance():
    ds = generate_synthetic(3, 5, 30000, 4.0, seed=1)
    means = np.array([ds.features[ds.labels == c].mean(axis=0) for c in range(3)])
    # means lie on a sphere of radius 4 (up to sampling noise ~ 1/sqrt(10000))
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 4.0, atol=0.05)


def test_standardize_uses_train_statistics():
    train = generate_synthetic(2, 3, 500, 2.0, seed=0)
    test = generate_synthetic(2, 3, 100, 2.0, seed=1)
    st_train, st_test = standardize(train, test)
    np.testing.assert_allclose(st_train.features.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(st_train.features.std(axis=0), 1.0, atol=1e-12)
    mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
    np.testing.assert_allclose(st_test.features, (test.features - mu) / sd, atol=1e-12)


@pytest.mark.parametrize("scheme,alpha", [("iid", None), ("dirichlet", 0.1), ("dirichlet", 10.0)])
def test_partition_is_disjoint_equal_and_deterministic(scheme, alpha):
    data = generate_synthetic(5, 3, 1000, 2.0, seed=0)
    spec = PartitionSpec(scheme, 10, "proportional", alpha, seed=3)
    shards = dirichlet_partition(data, spec, 5)
    assert [s.client_id for s in shards] == list(range(10))
    assert all(s.m_i == 100 for s in shards)
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(all_idx)) == all_idx.size == 1000
    for s in shards:
        assert np.array_equal(s.data.labels, data.labels[s.indices])
    again = dirichlet_partition(data, spec, 5)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(shards, again))


def _mean_dominant_share(shards, C):
    return np.mean([s.data.class_counts(C).max() / s.m_i for s in shards])


def test_small_alpha_concentrates_labels():
    data = generate_synthetic(10, 3, 5000, 2.0, seed=0)
    skew = dirichlet_partition(data, PartitionSpec("dirichlet", 50, 100, 0.1, 0), 10)
    flat = dirichlet_partition(data, PartitionSpec("iid", 50, 100, None, 0), 10)
    assert _mean_dominant_share(skew, 10) > 0.6
    assert _mean_dominant_share(flat, 10) < 0.3


def test_infeasible_partition_reports_deficit():
    data = generate_synthetic(2, 2, 50, 1.0, seed=0)
    with pytest.raises(PartitionError, match="deficit 10"):
        dirichlet_partition(data, PartitionSpec("dirichlet", 6, 10, 1.0, 0), 2)
    with pytest.raises(PartitionError):
        dirichlet_partition(data, PartitionSpec("iid", 100, "proportional", None, 0), 2)


@pytest.mark.parametrize("kw", [
    dict(scheme="sorted"), dict(num_clients=0), dict(scheme="dirichlet", alpha=None),
    dict(scheme="dirichlet", alpha=0.0), dict(per_client_size=0), dict(per_client_size="half"),
])
def test_partition_spec_validation(kw):
    with pytest.raises(ValueError):
        PartitionSpec(**kw)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0), st.integers(2, 8))
def test_dirichlet_partition_property(seed, alpha, clients):
    data = generate_synthetic(4, 2, 160, 1.0, seed=1)
    shards = dirichlet_partition(data, PartitionSpec("dirichlet", clients, "proportional", alpha, seed), 4)
    sizes = {s.m_i for s in shards}
    assert sizes == {160 // clients}
    idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(idx)) == idx.size


def test_server_draw_determinism_and_edges():
    pop = generate_synthetic(3, 2, 50, 1.0, seed=0)
    a = draw_server_dataset(pop, 10, round=4, master_seed=9)
    b = draw_server_dataset(pop, 10, round=4, master_seed=9)
    c = draw_server_dataset(pop, 10, round=5, master_seed=9)
    assert np.array_equal(a.indices, b.indices) and not np.array_equal(a.indices, c.indices)
    assert a.m_s == 10 and len(np.unique(a.indices)) == 10 and a.round == 4
    full = draw_server_dataset(pop, 50, 0, 0)
    assert np.array_equal(full.indices, np.arange(50))
    for m in (0, 51):
        with pytest.raises(SamplingError):
            draw_server_dataset(pop, m, 0, 0)


def test_server_draw_inclusion_frequency():
    # each index is included with probability m_s/n; check every index at 4 sigma
    n, m, R = 20, 5, 4000
    pop = LabeledDataset(np.zeros((n, 1)), np.zeros(n, dtype=int))
    hits = np.zeros(n)
    for r in range(R):
        hits[draw_server_dataset(pop, m, r, 123).indices] += 1
    p = m / n
    assert np.all(np.abs(hits / R - p) <= 4 * np.sqrt(p * (1 - p) / R))


def test_server_gradient_unbiased_by_enumeration():
    pop = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.array([0.2, -0.7, 0.5, 0.1, 0.3, -0.3])
    acc = np.zeros(obj.dim)
    subsets = list(itertools.combinations(range(4), 2))
    assert len(subsets) == 6
    for s in subsets:
        acc += full_gradient(obj, x, pop.subset(list(s)))
    np.testing.assert_allclose(acc / 6, full_gradient(obj, x, pop), rtol=0, atol=1e-12)


# IDX: 4 images of 2x2 pixels -> 16-byte header + 16 pixel bytes = 32 bytes
PIXELS = bytes([0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0, 10, 20, 30, 40])
LABELS = bytes([3, 1, 4, 1])


def _images(count=4, magic=0x803, body=PIXELS):
    return struct.pack(">IIII", magic, count, 2, 2) + body


def _labels(count=4, magic=0x801, body=LABELS):
    return struct.pack(">II", magic, count) + body


def _write(tmp_path, img, lab, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    if gz:
        ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
        ip.write_bytes(gzip.compress(img))
        lp.write_bytes(gzip.compress(lab))
    else:
        ip.write_bytes(img)
        lp.write_bytes(lab)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx_fixture(tmp_path, gz):
    assert len(_images()) == 32
    ds = load_idx(*_write(tmp_path, _images(), _labels(), gz))
    assert ds.features.shape == (4, 4)
    np.testing.assert_array_equal(ds.labels, [3, 1, 4, 1])
    np.testing.assert_allclose(ds.features[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_allclose(ds.features[3], np.array([10, 20, 30, 40]) / 255.0)


def test_load_idx_errors(tmp_path):
    with pytest.raises(BadMagicError):
        load_idx(*_write(tmp_path, _images(magic=0x801), _labels()))
    with pytest.raises(BadMagicError):
        load_idx(*_write(tmp_path, _images(), _labels(magic=0x803)))
    with pytest.raises(TruncatedFileError):
        load_idx(*_write(tmp_path, _images(body=PIXELS[:-1]), _labels()))
    with pytest.raises(TruncatedFileError):
        load_idx(*_write(tmp_path, _images()[:10], _labels()))
    with pytest.raises(CountMismatchError):
        load_idx(*_write(tmp_path, _images(), _labels(count=3, body=LABELS[:3])))
