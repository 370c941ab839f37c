"""Sliding-window sample extraction, normalization, splits, and persistence.

The on-disk format is little-endian binary: magic ``FTSA``, version u16,
client_id u16, sample_count u64, window/generator/parameter extents u16 each,
then per sample scenario_id u32, window_start u32, label u8 and the float32
feature block in (time, generator, parameter) order, closed by a footer of
per-parameter mean and standard deviation (float64). Split assignments and
bookkeeping that the binary layout has no room for travel in a JSON sidecar
next to the file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .labels import StabilityClass, label_trajectory
from .sim import Trajectory

MAGIC = b"FTSA"
FORMAT_VERSION = 1
WINDOW_LEN = 5

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)

_HEADER = struct.Struct("<4sHHQHHH")
_SAMPLE_HEAD = struct.Struct("<IIB")


class DatasetFormatError(ValueError):
    """Corrupt, truncated, or wrong-version dataset file."""


@dataclass(frozen=True)
class WindowSample:
    """One observation window: a (T, N, P) feature tensor and its class."""

    features: np.ndarray
    label: StabilityClass
    scenario_id: int
    window_start: int


@dataclass(frozen=True)
class ClientDataset:
    """All window samples of one client, with splits and normalization stats.

    ``features`` is (n, T, N, P) float32. ``splits`` maps scenario id to one
    of "train"/"val"/"test" once :func:`split` has run; ``channel_mean`` and
    ``channel_std`` are set by :func:`normalize` from the training split only.
    """

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    scenario_ids: np.ndarray
    window_starts: np.ndarray
    splits: dict[int, str] = field(default_factory=dict)
    split_seed: int | None = None
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.features.shape[3]

    @property
    def normalized(self) -> bool:
        return self.channel_mean is not None

    def sample(self, i: int) -> WindowSample:
        return WindowSample(
            features=self.features[i],
            label=StabilityClass(int(self.labels[i])),
            scenario_id=int(self.scenario_ids[i]),
            window_start=int(self.window_starts[i]),
        )

    def scenario_list(self) -> list[int]:
        return sorted(set(int(s) for s in self.scenario_ids))

    def indices(self, split: str) -> np.ndarray:
        """Sample indices belonging to one split, in stored order."""
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        if not self.splits:
            raise ValueError("dataset has not been split")
        wanted = {sid for sid, name in self.splits.items() if name == split}
        return np.flatnonzero(np.isin(self.scenario_ids, sorted(wanted)))

    def class_census(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def windowize(traj: Trajectory, scenario_id: int = 0,
              window_len: int = WINDOW_LEN) -> list[WindowSample]:
    """Cut a trajectory into stride-1 observation windows with labels."""
    if traj.n_steps < window_len:
        raise ValueError(
            f"trajectory has {traj.n_steps} steps, needs >= {window_len}"
        )
    labels = label_trajectory(traj, window_len)
    series32 = traj.series.astype(np.float32)
    return [
        WindowSample(
            features=series32[k : k + window_len].copy(),
            label=StabilityClass(int(labels[k])),
            scenario_id=scenario_id,
            window_start=k,
        )
        for k in range(len(labels))
    ]


def from_samples(client_id: int, samples: list[WindowSample]) -> ClientDataset:
    """Pack window samples into a dataset."""
    if not samples:
        raise ValueError("no samples")
    return ClientDataset(
        client_id=client_id,
        features=np.stack([s.features for s in samples]).astype(np.float32),
        labels=np.array([int(s.label) for s in samples], dtype=np.uint8),
        scenario_ids=np.array([s.scenario_id for s in samples], dtype=np.uint32),
        window_starts=np.array([s.window_start for s in samples], dtype=np.uint32),
    )


def split(ds: ClientDataset, fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
          seed: int = 0) -> ClientDataset:
    """Assign whole scenarios to train/val/test with a seeded shuffle.

    Splitting by scenario keeps heavily overlapping stride-1 windows of one
    simulation out of multiple splits. Validation and test sizes round down;
    the remainder goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    scenarios = ds.scenario_list()
    if len(scenarios) < len(SPLIT_NAMES):
        raise ValueError(
            f"need at least {len(SPLIT_NAMES)} scenarios to split, "
            f"have {len(scenarios)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, ds.client_id]))
    order = rng.permutation(len(scenarios))
    n_val = int(len(scenarios) * fractions[1])
    n_test = int(len(scenarios) * fractions[2])
    n_train = len(scenarios) - n_val - n_test
    assignment: dict[int, str] = {}
    for pos, scen_pos in enumerate(order):
        if pos < n_train:
            name = "train"
        elif pos < n_train + n_val:
            name = "val"
        else:
            name = "test"
        assignment[scenarios[scen_pos]] = name
    return replace(ds, splits=assignment, split_seed=seed)


def normalize(ds: ClientDataset) -> ClientDataset:
    """Z-score each parameter channel using training-split statistics only.

    A constant channel (std below 1e-12) is centered and passed through
    unscaled.
    """
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    train_idx = ds.indices("train")
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    train = ds.features[train_idx].astype(np.float64)
    mean = train.mean(axis=(0, 1, 2))
    std = train.std(axis=(0, 1, 2))
    std = np.where(std > 1e-12, std, 1.0)
    feats = ((ds.features.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(ds, features=feats, channel_mean=mean, channel_std=std)


def class_weights(ds: ClientDataset) -> np.ndarray:
    """Inverse-frequency loss weights over the training split (classes 1..5)."""
    train_labels = ds.labels[ds.indices("train")]
    counts = np.bincount(train_labels, minlength=6)[1:6].astype(np.float64)
    present = counts > 0
    weights = np.ones(5)
    weights[present] = train_labels.size / (len(StabilityClass) * counts[present])
    return weights


def merge(datasets: list[ClientDataset], client_id: int = 0) -> ClientDataset:
    """Union of several clients' samples for the centralized baseline.

    Scenario ids are namespaced per client so split assignments stay disjoint;
    per-client normalization is kept as-is.
    """
    if not datasets:
        raise ValueError("nothing to merge")
    if len(datasets) == 1:
        return replace(datasets[0], client_id=client_id)
    for ds in datasets:
        if not ds.splits:
            raise ValueError("merge requires split datasets")
    offset = 10 ** (len(str(max(max(d.scenario_ids.max() for d in datasets), 1))) + 1)
    feats, labels, sids, starts = [], [], [], []
    splits: dict[int, str] = {}
    for ds in datasets:
        feats.append(ds.features)
        labels.append(ds.labels)
        starts.append(ds.window_starts)
        sids.append(ds.scenario_ids.astype(np.uint32) + ds.client_id * offset)
        for sid, name in ds.splits.items():
            splits[sid + ds.client_id * offset] = name
    return ClientDataset(
        client_id=client_id,
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        scenario_ids=np.concatenate(sids),
        window_starts=np.concatenate(starts),
        splits=splits,
        split_seed=datasets[0].split_seed,
        channel_mean=datasets[0].channel_mean,
        channel_std=datasets[0].channel_std,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def save(ds: ClientDataset, path: str | Path) -> None:
    """Write the binary dataset file plus its JSON sidecar."""
    path = Path(path)
    n, t, g, p = ds.features.shape
    mean = ds.channel_mean if ds.normalized else np.zeros(p)
    std = ds.channel_std if ds.normalized else np.ones(p)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.client_id, n, t, g, p))
        for i in range(n):
            fh.write(_SAMPLE_HEAD.pack(
                int(ds.scenario_ids[i]), int(ds.window_starts[i]), int(ds.labels[i])
            ))
            fh.write(ds.features[i].astype("<f4").tobytes())
        fh.write(np.asarray(mean, dtype="<f8").tobytes())
        fh.write(np.asarray(std, dtype="<f8").tobytes())
    meta = {
        "normalized": ds.normalized,
        "split_seed": ds.split_seed,
        "splits": {name: sorted(s for s, v in ds.splits.items() if v == name)
                   for name in SPLIT_NAMES} if ds.splits else None,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1))


def load(path: str | Path) -> ClientDataset:
    """Read a dataset file (and sidecar, if present) back into memory."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, client_id, n, t, g, p = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    sample_bytes = _SAMPLE_HEAD.size + 4 * t * g * p
    expected = _HEADER.size + n * sample_bytes + 2 * 8 * p
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes, found {len(blob)}"
        )
    features = np.empty((n, t, g, p), dtype=np.float32)
    scenario_ids = np.empty(n, dtype=np.uint32)
    window_starts = np.empty(n, dtype=np.uint32)
    labels = np.empty(n, dtype=np.uint8)
    off = _HEADER.size
    for i in range(n):
        scenario_ids[i], window_starts[i], labels[i] = _SAMPLE_HEAD.unpack_from(blob, off)
        off += _SAMPLE_HEAD.size
        features[i] = np.frombuffer(blob, "<f4", t * g * p, off).reshape(t, g, p)
        off += 4 * t * g * p
    mean = np.frombuffer(blob, "<f8", p, off).copy()
    std = np.frombuffer(blob, "<f8", p, off + 8 * p).copy()
    if np.any(labels < 1) or np.any(labels > 5):
        raise DatasetFormatError(f"{path}: label outside 1..5")

    splits: dict[int, str] = {}
    split_seed = None
    normalized = True
    meta_file = sidecar_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        normalized = bool(meta.get("normalized", True))
        split_seed = meta.get("split_seed")
        if meta.get("splits"):
            for name, ids in meta["splits"].items():
                for sid in ids:
                    splits[int(sid)] = name
    return ClientDataset(
        client_id=client_id,
        features=features,
        labels=labels,
        scenario_ids=scenario_ids,
        window_starts=window_starts,
        splits=splits,
        split_seed=split_seed,
        channel_mean=mean if normalized else None,
        channel_std=std if normalized else None,
    )
