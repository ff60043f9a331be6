import io
import json

import numpy as np
import pytest

from fedamp.data import (
    EMNIST62,
    FMNIST100,
    MNIST100,
    PartitionPreset,
    SyntheticSpec,
    cifar100_preset,
    gen_synthetic,
    get_preset,
    load_idx_dataset,
    make_pool,
    mixture_counts,
    partition_iid,
    partition_pathological,
    partition_practical,
    read_idx,
    write_idx_images,
    write_idx_labels,
)
from fedamp.errors import ConfigError, FormatError


def all_rows(clients, split="train"):
    return np.concatenate([getattr(c, split).features for c in clients])


def row_keys(X):
    return {tuple(x) for x in X}


def test_mixture_counts():
    c = mixture_counts(500, (0, 1), 10, 0.8)
    assert c[:2].sum() == 400 and c.sum() == 500
    assert np.all(c[2:] > 0)


def test_synthetic_single_group_is_iid_like():
    clients = gen_synthetic(SyntheticSpec(groups=1, classes=2, clients_per_group=4, dominance=1.0, seed=3))
    assert {c.group_id for c in clients} == {0}
    hists = [np.bincount(c.train.labels, minlength=2) for c in clients]
    assert all(np.array_equal(h, hists[0]) for h in hists)


def test_synthetic_dominating_share():
    spec = SyntheticSpec(groups=2, classes=4, features=3, clients_per_group=2, train_samples=500, seed=0)
    clients = gen_synthetic(spec)
    for c in clients:
        dom = spec.dominating_sets()[c.group_id]
        assert np.isin(c.train.labels, dom).sum() == 400
        assert len(c.test) == 100


def test_synthetic_deterministic():
    spec = SyntheticSpec(seed=11, train_samples=20, test_samples=10)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert all(x.train == y.train and x.test == y.test for x, y in zip(a, b))
    c = gen_synthetic(SyntheticSpec(seed=12, train_samples=20, test_samples=10))
    assert not a[0].train == c[0].train


def test_synthetic_validation():
    with pytest.raises(ConfigError) as info:
        SyntheticSpec(classes=1)
    assert info.value.key == "classes"
    with pytest.raises(ConfigError):
        SyntheticSpec(dominance=0.0)
    with pytest.raises(ConfigError):
        SyntheticSpec(groups=2, train_samples=(10, 10, 10))
    with pytest.raises(ConfigError):
        SyntheticSpec(groups=2, dominating=((0,), (9,)))


def test_iid_examples():
    pool = make_pool(4, 25, seed=0)
    whole = partition_iid(pool, 1, test_fraction=0.0)
    assert len(whole[0].train) == 100
    shards = partition_iid(pool, 4, seed=1, test_fraction=0.0)
    assert [len(c.train) for c in shards] == [25] * 4
    rows = all_rows(shards)
    assert row_keys(rows) == row_keys(pool.features) and len(rows) == 100
    with pytest.raises(ConfigError):
        partition_iid(pool, 101)


def test_iid_histogram_tracks_pool():
    pool = make_pool(10, 1000, seed=2)
    shards = partition_iid(pool, 5, seed=0, test_fraction=0.0)
    ref = np.bincount(pool.labels, minlength=10) / len(pool)
    for c in shards:
        h = np.bincount(c.train.labels, minlength=10) / len(c.train)
        assert np.max(np.abs(h - ref)) < 0.05


def test_pathological_partition():
    pool = make_pool(10, 40, seed=0)
    clients = partition_pathological(pool, 5, seed=3, test_fraction=0.0)
    owners = {}
    for i, c in enumerate(clients):
        labels = set(c.train.labels.tolist())
        assert len(labels) == 2
        for lab in labels:
            owners.setdefault(lab, []).append(i)
    assert all(len(v) == 1 for v in owners.values()) and len(owners) == 10
    rows = all_rows(clients)
    assert len(rows) == len(pool) and row_keys(rows) == row_keys(pool.features)


def test_pathological_more_clients_and_split():
    pool = make_pool(6, 50, seed=1)
    clients = partition_pathological(pool, 9, seed=0, test_fraction=0.2)
    for c in clients:
        assert len(set(np.concatenate([c.train.labels, c.test.labels]).tolist())) == 2
    rows = np.concatenate([all_rows(clients), all_rows(clients, "test")])
    assert len(rows) == len(pool)
    with pytest.raises(ConfigError):
        partition_pathological(pool, 2)


def test_emnist_preset_values():
    assert EMNIST62.group_sizes == (10, 26, 26)
    assert EMNIST62.train_counts == (1000, 700, 400)
    assert EMNIST62.dominating[0] == tuple(range(10))
    assert EMNIST62.num_clients == 62
    assert EMNIST62.dominance == 0.8 and EMNIST62.test_samples == 100


def test_mnist_fmnist_presets():
    assert MNIST100.group_sizes == (20,) * 5
    assert MNIST100.train_counts == (500, 400, 300, 200, 100)
    assert FMNIST100.train_counts == (600, 500, 400, 300, 200)
    assert MNIST100.dominating[1] == (2, 3)


def test_cifar_preset_from_table(tmp_path):
    table = [c % 20 for c in range(100)]
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(table))
    p = get_preset("CIFAR100-100", str(path))
    assert p.group_sizes == (5,) * 20 and p.num_clients == 100
    assert p.train_counts[:4] == (500,) * 4 and p.train_counts[-4:] == (100,) * 4
    assert p.dominating[3] == (3, 23, 43, 63, 83)
    with pytest.raises(ConfigError):
        cifar100_preset([0] * 99)
    with pytest.raises(ConfigError):
        get_preset("CIFAR100-100")
    with pytest.raises(ConfigError):
        get_preset("SVHN")


def test_practical_partition_small_preset():
    preset = PartitionPreset("tiny", 4, (2, 2), (50, 30), ((0, 1), (2, 3)), test_samples=20)
    pool = make_pool(4, 200, seed=0)
    clients = partition_practical(pool, preset, seed=0)
    assert [c.group_id for c in clients] == [0, 0, 1, 1]
    assert [len(c.train) for c in clients] == [50, 50, 30, 30]
    for c in clients:
        dom = preset.dominating[c.group_id]
        share = np.isin(c.train.labels, dom).mean()
        assert share == pytest.approx(0.8)
        assert np.any(~np.isin(c.train.labels, dom))
    rows = np.concatenate([all_rows(clients), all_rows(clients, "test")])
    assert len(row_keys(rows)) == len(rows)  # drawn without replacement
    with pytest.raises(ConfigError):
        partition_practical(make_pool(4, 20, seed=0), preset)


def test_idx_crafted_image():
    buf = bytes.fromhex("00000803" "00000001" "00000001" "00000001") + b"\xff"
    X = read_idx(buf)
    assert X.shape == (1, 1) and X[0, 0] == 1.0


def test_idx_crafted_labels():
    buf = bytes.fromhex("00000801" "00000002") + bytes([3, 7])
    assert read_idx(io.BytesIO(buf)).tolist() == [3, 7]


def test_idx_errors(tmp_path):
    with pytest.raises(FormatError):
        read_idx(b"\x00\x00\x08")
    with pytest.raises(FormatError):
        read_idx(bytes.fromhex("00000802" "00000001") + b"\x00")
    with pytest.raises(FormatError):
        read_idx(bytes.fromhex("00000801" "00000003") + bytes([1, 2]))
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    write_idx_images(np.zeros((3, 2, 2)), img)
    write_idx_labels([0, 1], lab)
    with pytest.raises(FormatError):
        load_idx_dataset(img, lab)


def test_idx_round_trip(tmp_path):
    r = np.random.default_rng(0)
    imgs = r.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labs = r.integers(0, 10, 5)
    write_idx_images(imgs, tmp_path / "i")
    write_idx_labels(labs, tmp_path / "l")
    ds = load_idx_dataset(tmp_path / "i", tmp_path / "l")
    assert ds.features.shape == (5, 12)
    assert np.allclose(ds.features * 255, imgs.reshape(5, 12))
    assert ds.labels.tolist() == labs.tolist()
