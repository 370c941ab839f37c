"""Windowing, splits, normalization, and the binary dataset format."""

import numpy as np
import pytest

from fedtsa import dataset, grid, labels, sim
from fedtsa.dataset import ClientDataset
from fedtsa.labels import StabilityClass
from test_labels import oracle_label


def _synthetic_trajectory(fault_on=60, fault_clear=76, instability=None,
                          steps=1200, gens=10, seed=0):
    rng = np.random.default_rng(seed)
    series = rng.normal(size=(steps, gens, 5))
    scen = sim.Scenario(client_id=1, load_scale=1.0,
                        fault=grid.FaultSpec.at_bus(1))
    return sim.Trajectory(series=series, fault_on_index=fault_on,
                          fault_clear_index=fault_clear,
                          instability_index=instability, scenario=scen)


def _toy_dataset(n_scenarios=6, seed=0, steps=60):
    samples = []
    for sid in range(n_scenarios):
        traj = _synthetic_trajectory(fault_on=20, fault_clear=36,
                                     steps=steps, seed=sid)
        samples.extend(dataset.windowize(traj, scenario_id=sid))
    ds = dataset.from_samples(client_id=1, samples=samples)
    return dataset.split(ds, seed=seed)


# ---------------------------------------------------------------------------
# windowize
# ---------------------------------------------------------------------------

def test_window_count():
    traj = _synthetic_trajectory()
    samples = dataset.windowize(traj)
    assert len(samples) == 1200 - 5 + 1 == 1196


def test_first_window_is_a_slice():
    traj = _synthetic_trajectory()
    samples = dataset.windowize(traj)
    assert np.array_equal(samples[0].features,
                          traj.series[0:5].astype(np.float32))


def test_consecutive_windows_overlap():
    traj = _synthetic_trajectory()
    samples = dataset.windowize(traj)
    assert np.array_equal(samples[3].features[1:], samples[4].features[:-1])


def test_short_trajectory_rejected():
    traj = _synthetic_trajectory(fault_on=1, fault_clear=2, steps=4)
    with pytest.raises(ValueError, match="steps"):
        dataset.windowize(traj)


def test_window_labels_match_oracle():
    traj = _synthetic_trajectory(fault_on=60, fault_clear=76, instability=500)
    samples = dataset.windowize(traj)
    for s in samples:
        assert s.label == oracle_label(s.window_start, 5, 60, 76, 500, 1200)


def test_class_census_stable_faulted_trajectory():
    # fault_on=60, clear=76: five windows see each boundary instant and
    # fc - fo - 5 = 11 lie strictly inside the fault.
    traj = _synthetic_trajectory(fault_on=60, fault_clear=76)
    samples = dataset.windowize(traj)
    census = np.bincount([int(s.label) for s in samples], minlength=6)
    oracle = np.bincount(
        [int(oracle_label(k, 5, 60, 76, None, 1200)) for k in range(1196)],
        minlength=6,
    )
    assert np.array_equal(census, oracle)
    assert census[2] == 5
    assert census[3] == 11
    assert census[4] == 5
    assert census[1] == 1196 - 5 - 11 - 5


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def test_split_counts_20_scenarios():
    samples = []
    for sid in range(20):
        traj = _synthetic_trajectory(fault_on=20, fault_clear=36, steps=50,
                                     seed=sid)
        samples.extend(dataset.windowize(traj, scenario_id=sid))
    ds = dataset.from_samples(client_id=2, samples=samples)
    out = dataset.split(ds, (0.70, 0.15, 0.15), seed=3)
    names = list(out.splits.values())
    assert names.count("train") == 14
    assert names.count("val") == 3
    assert names.count("test") == 3


def test_split_deterministic_and_seed_sensitive():
    a = _toy_dataset(n_scenarios=12, seed=5)
    b = _toy_dataset(n_scenarios=12, seed=5)
    c = _toy_dataset(n_scenarios=12, seed=6)
    assert a.splits == b.splits
    counts = lambda ds: sorted(list(ds.splits.values()).count(n)
                               for n in dataset.SPLIT_NAMES)
    assert counts(a) == counts(c)


def test_split_is_by_scenario():
    ds = _toy_dataset(n_scenarios=8)
    for name in dataset.SPLIT_NAMES:
        idx = ds.indices(name)
        scen = set(int(s) for s in ds.scenario_ids[idx])
        for other in dataset.SPLIT_NAMES:
            if other != name:
                other_scen = set(int(s) for s in ds.scenario_ids[ds.indices(other)])
                assert not (scen & other_scen)


def test_split_rejects_bad_fractions_and_tiny_sets():
    ds = _toy_dataset(n_scenarios=6)
    with pytest.raises(ValueError, match="sum to 1"):
        dataset.split(ds, (0.5, 0.2, 0.2))
    two = _synthetic_trajectory(fault_on=20, fault_clear=36, steps=50)
    samples = dataset.windowize(two, 0) + dataset.windowize(two, 1)
    small = dataset.from_samples(1, samples)
    with pytest.raises(ValueError, match="scenarios"):
        dataset.split(small)


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

def test_normalize_training_split_stats():
    ds = dataset.normalize(_toy_dataset())
    train = ds.features[ds.indices("train")].astype(np.float64)
    mean = train.mean(axis=(0, 1, 2))
    std = train.std(axis=(0, 1, 2))
    assert np.all(np.abs(mean) < 1e-6)          # float32 storage rounding
    assert np.all(np.abs(std - 1.0) < 1e-6)


def test_normalize_constant_channel_centered():
    ds = _toy_dataset()
    feats = ds.features.copy()
    feats[:, :, :, 2] = 7.5
    ds = ClientDataset(client_id=1, features=feats, labels=ds.labels,
                       scenario_ids=ds.scenario_ids,
                       window_starts=ds.window_starts, splits=ds.splits,
                       split_seed=ds.split_seed)
    out = dataset.normalize(ds)
    assert np.allclose(out.features[:, :, :, 2], 0.0, atol=1e-6)
    assert out.channel_std[2] == 1.0


def test_normalize_requires_split_and_guards_double_apply():
    traj = _synthetic_trajectory(fault_on=20, fault_clear=36, steps=50)
    ds = dataset.from_samples(1, dataset.windowize(traj))
    with pytest.raises(ValueError):
        dataset.normalize(ds)  # no split yet
    full = dataset.normalize(_toy_dataset())
    with pytest.raises(ValueError, match="already"):
        dataset.normalize(full)


def test_validation_split_mean_not_forced_to_zero():
    ds = dataset.normalize(_toy_dataset(n_scenarios=10))
    val = ds.features[ds.indices("val")].astype(np.float64)
    assert val.size  # the check is vacuous otherwise
    assert np.max(np.abs(val.mean(axis=(0, 1, 2)))) > 1e-8


def test_class_weights_inverse_frequency():
    ds = _toy_dataset()
    w = dataset.class_weights(ds)
    labels_train = ds.labels[ds.indices("train")]
    for cls in range(1, 6):
        count = int((labels_train == cls).sum())
        if count:
            assert w[cls - 1] == pytest.approx(
                labels_train.size / (5 * count))
    # the dominant class gets the smallest weight
    assert w.argmin() == 0


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def _equal_datasets(a: ClientDataset, b: ClientDataset) -> bool:
    return (
        a.client_id == b.client_id
        and np.array_equal(a.features, b.features)
        and np.array_equal(a.labels, b.labels)
        and np.array_equal(a.scenario_ids, b.scenario_ids)
        and np.array_equal(a.window_starts, b.window_starts)
        and a.splits == b.splits
        and a.split_seed == b.split_seed
        and (a.channel_mean is None) == (b.channel_mean is None)
        and (a.channel_mean is None
             or np.array_equal(a.channel_mean, b.channel_mean))
        and (a.channel_std is None
             or np.array_equal(a.channel_std, b.channel_std))
    )


def test_round_trip_bit_exact(tmp_path):
    ds = dataset.normalize(_toy_dataset())
    path = tmp_path / "client1.ftsa"
    dataset.save(ds, path)
    back = dataset.load(path)
    assert _equal_datasets(ds, back)
    # byte-identical on re-save
    dataset.save(back, tmp_path / "again.ftsa")
    assert (tmp_path / "client1.ftsa").read_bytes() == \
        (tmp_path / "again.ftsa").read_bytes()


def test_round_trip_three_sample_dataset(tmp_path):
    ds = dataset.normalize(_toy_dataset())
    small = ClientDataset(
        client_id=3,
        features=ds.features[:3].copy(),
        labels=ds.labels[:3].copy(),
        scenario_ids=ds.scenario_ids[:3].copy(),
        window_starts=ds.window_starts[:3].copy(),
        splits={int(ds.scenario_ids[0]): "train"},
        split_seed=0,
        channel_mean=ds.channel_mean,
        channel_std=ds.channel_std,
    )
    path = tmp_path / "tiny.ftsa"
    dataset.save(small, path)
    assert _equal_datasets(small, dataset.load(path))


def test_bad_magic_rejected(tmp_path):
    ds = dataset.normalize(_toy_dataset())
    path = tmp_path / "ds.ftsa"
    dataset.save(ds, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(dataset.DatasetFormatError, match="magic"):
        dataset.load(path)


def test_version_bump_rejected(tmp_path):
    ds = dataset.normalize(_toy_dataset())
    path = tmp_path / "ds.ftsa"
    dataset.save(ds, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (2).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(dataset.DatasetFormatError, match="version"):
        dataset.load(path)


def test_truncated_file_rejected(tmp_path):
    ds = dataset.normalize(_toy_dataset())
    path = tmp_path / "ds.ftsa"
    dataset.save(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(dataset.DatasetFormatError, match="bytes"):
        dataset.load(path)


def test_merge_namespaces_scenarios():
    a = dataset.normalize(_toy_dataset(n_scenarios=4, seed=1))
    b_raw = _toy_dataset(n_scenarios=4, seed=2)
    b = dataset.normalize(ClientDataset(
        client_id=2, features=b_raw.features, labels=b_raw.labels,
        scenario_ids=b_raw.scenario_ids, window_starts=b_raw.window_starts,
        splits=b_raw.splits, split_seed=b_raw.split_seed))
    merged = dataset.merge([a, b])
    assert len(merged) == len(a) + len(b)
    assert len(merged.scenario_list()) == 8
    assert merged.indices("train").size == \
        a.indices("train").size + b.indices("train").size
