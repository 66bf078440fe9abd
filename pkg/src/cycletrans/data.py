"""Dataset contract, synthetic two-modality data, stub backbone and the P x K sampler."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .cytr import read_tensor, write_tensor
from .params import ParameterStore, uniform_init
from .tensor import Tensor

log = logging.getLogger(__name__)

MODALITIES = ("visible", "infrared")
SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = ["sample_id", "identity", "modality", "path", "split"]


@dataclass(frozen=True)
class Record:
    sample_id: str
    identity: int
    modality: str
    path: str
    split: str


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name])

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                writer.writerow([r.sample_id, r.identity, r.modality, r.path, r.split])

    @classmethod
    def read(cls, path) -> "Manifest":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
            records = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(MANIFEST_HEADER):
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                sid, ident, mod, rel, split = row
                if mod not in MODALITIES:
                    raise ValueError(f"{path}:{lineno}: unknown modality {mod!r}")
                if split not in SPLITS:
                    raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
                records.append(Record(sid, int(ident), mod, rel, split))
        return cls(records)


@dataclass
class SampleArrays:
    """A manifest split loaded into memory."""
    maps: np.ndarray          # (N, hw, raw_dim)
    labels: np.ndarray        # (N,)
    modalities: np.ndarray    # (N,) of str
    sample_ids: np.ndarray    # (N,) of str

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "SampleArrays":
        return SampleArrays(self.maps[index], self.labels[index],
                            self.modalities[index], self.sample_ids[index])


def load_arrays(manifest: Manifest, root) -> SampleArrays:
    root = Path(root)
    if not len(manifest):
        raise ValueError("empty manifest split")
    maps = [read_tensor(root / r.path) for r in manifest]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent tensor shapes in manifest: {sorted(shapes)}")
    return SampleArrays(np.stack(maps),
                        np.array([r.identity for r in manifest]),
                        np.array([r.modality for r in manifest]),
                        np.array([r.sample_id for r in manifest]))


# -------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    num_identities: int = 32
    samples_per_modality: int = 10
    test_samples_per_modality: int = 4
    hw: int = 18
    raw_dim: int = 16
    identity_scale: float = 1.0
    modality_scale: float = 8.0
    offset_jitter: float = 0.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("identity_scale", "modality_scale", "offset_jitter", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.num_identities, self.hw, self.raw_dim) < 1:
            raise ValueError("num_identities, hw and raw_dim must be >= 1")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def synth_maps(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw raw maps for every (identity, modality, sample) triple.

    Each identity owns a unit direction plus a per-position perturbation of it.
    Each modality owns an offset direction; every sample perturbs that
    direction by ``offset_jitter`` and adds it, at length ``modality_scale``,
    to all of its positions.
    Returns maps (N, hw, raw_dim), labels, modalities and a train/test flag.
    """
    rng = np.random.default_rng(spec.seed)
    base = _unit_rows(rng, spec.num_identities, spec.raw_dim)
    jitter = rng.normal(scale=0.5 / math.sqrt(spec.raw_dim),
                        size=(spec.num_identities, spec.hw, spec.raw_dim))
    templates = spec.identity_scale * (base[:, None, :] + jitter)
    offsets = _unit_rows(rng, len(MODALITIES), spec.raw_dim)

    per = spec.samples_per_modality + spec.test_samples_per_modality
    maps, labels, mods, is_train = [], [], [], []
    for y in range(spec.num_identities):
        for m, mod in enumerate(MODALITIES):
            direction = offsets[m] + spec.offset_jitter / math.sqrt(spec.raw_dim) * rng.normal(
                size=(per, spec.raw_dim))
            direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-12)
            noise = rng.normal(scale=spec.noise_scale, size=(per, spec.hw, spec.raw_dim))
            maps.append(templates[y][None] + spec.modality_scale * direction[:, None, :] + noise)
            labels += [y] * per
            mods += [mod] * per
            is_train += [True] * spec.samples_per_modality + [False] * spec.test_samples_per_modality
    return (np.concatenate(maps).astype(np.float32), np.array(labels),
            np.array(mods), np.array(is_train))


def synth_generate(spec: SyntheticSpec, root) -> Manifest:
    """Write CYTR1 maps plus ``manifest.csv`` under ``root``.

    Training samples form the train split; held-out infrared samples are
    queries and held-out visible samples form the gallery.
    """
    root = Path(root)
    maps, labels, mods, is_train = synth_maps(spec)
    records = []
    counters: dict[tuple[int, str], int] = {}
    for arr, y, mod, train in zip(maps, labels, mods, is_train):
        idx = counters.get((int(y), mod), 0)
        counters[(int(y), mod)] = idx + 1
        sid = f"id{int(y):04d}_{mod[0]}{idx:03d}"
        split = "train" if train else ("query" if mod == "infrared" else "gallery")
        rel = f"tensors/{sid}.cytr"
        write_tensor(root / rel, arr)
        records.append(Record(sid, int(y), mod, rel, split))
    manifest = Manifest(records)
    manifest.write(root / "manifest.csv")
    (root / "synth.txt").write_text("".join(f"{k} = {v}\n" for k, v in asdict(spec).items()))
    return manifest


# --------------------------------------------------------------- backbone

@dataclass
class StubBackbone:
    """Per-position tanh(raw @ W + b); stands in for a convolutional trunk."""
    weight: Tensor
    bias: Tensor

    @classmethod
    def register(cls, store: ParameterStore, raw_dim: int, dim: int,
                 rng: np.random.Generator | None = None) -> "StubBackbone":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(store.register("backbone.weight", uniform_init(rng, (raw_dim, dim), 1.0 / math.sqrt(raw_dim))),
                   store.register("backbone.bias", lambda: np.zeros(dim)))

    def __call__(self, raw) -> Tensor:
        return backbone_forward(raw, self)


def backbone_forward(raw, backbone: StubBackbone) -> Tensor:
    raw = T.as_tensor(raw)
    if raw.shape[-1] != backbone.weight.shape[0]:
        raise T.DimensionError(f"raw width {raw.shape[-1]} != backbone input {backbone.weight.shape[0]}")
    return T.tanh(raw @ backbone.weight + backbone.bias)


# ---------------------------------------------------------------- sampler

def _draw(pool: np.ndarray, k: int, rng: np.random.Generator, what: str) -> np.ndarray:
    if len(pool) >= k:
        return rng.choice(pool, size=k, replace=False)
    if not len(pool):
        raise ValueError(f"{what}: no samples")
    log.warning("%s: only %d samples for %d slots, drawing with replacement", what, len(pool), k)
    return rng.choice(pool, size=k, replace=True)


def _pools(labels, modalities) -> dict[int, dict[str, np.ndarray]]:
    labels = np.asarray(labels)
    modalities = np.asarray(modalities)
    return {int(y): {m: np.flatnonzero((labels == y) & (modalities == m)) for m in MODALITIES}
            for y in np.unique(labels)}


def pk_sample_batch(labels, modalities, num_identities: int = 8, k_visible: int = 4,
                    k_infrared: int = 4, rng: np.random.Generator | None = None) -> np.ndarray:
    """One batch: ``num_identities`` distinct identities, each with exactly
    ``k_visible`` visible and ``k_infrared`` infrared sample indices."""
    rng = rng if rng is not None else np.random.default_rng()
    pools = _pools(labels, modalities)
    if len(pools) < num_identities:
        raise ValueError(f"need {num_identities} identities, have {len(pools)}")
    chosen = rng.choice(sorted(pools), size=num_identities, replace=False)
    out = []
    for y in chosen:
        out.append(_draw(pools[int(y)]["visible"], k_visible, rng, f"identity {y} visible"))
        out.append(_draw(pools[int(y)]["infrared"], k_infrared, rng, f"identity {y} infrared"))
    return np.concatenate(out)


class PKSampler:
    """Epoch iterator of P x (K_v + K_r) batches, without replacement within an epoch.

    Each identity's modality pools are shuffled and cut into chunks of K; an
    identity contributes as many chunks as its scarcer modality allows (at
    least one, padded by resampling when a pool is smaller than K). Every
    batch takes the P identities with the most chunks left.
    """

    def __init__(self, labels, modalities, num_identities: int = 8, k_visible: int = 4,
                 k_infrared: int = 4, seed: int = 0):
        self.pools = _pools(labels, modalities)
        if len(self.pools) < num_identities:
            raise ValueError(f"need {num_identities} identities, have {len(self.pools)}")
        self.num_identities = num_identities
        self.k = {"visible": k_visible, "infrared": k_infrared}
        self.rng = np.random.default_rng(seed)

    def _chunks(self, y: int) -> list[np.ndarray]:
        parts = {}
        for m, k in self.k.items():
            pool = self.rng.permutation(self.pools[y][m])
            if len(pool) < k:
                parts[m] = [_draw(pool, k, self.rng, f"identity {y} {m}")]
            else:
                parts[m] = [pool[i:i + k] for i in range(0, len(pool) - k + 1, k)]
        n = min(len(parts["visible"]), len(parts["infrared"]))
        return [np.concatenate([parts["visible"][i], parts["infrared"][i]]) for i in range(n)]

    def epoch(self) -> Iterator[np.ndarray]:
        chunks = {y: self._chunks(y) for y in sorted(self.pools)}
        while True:
            ids = sorted(chunks)
            left = np.array([len(chunks[y]) for y in ids])
            if np.count_nonzero(left) < self.num_identities:
                return
            # identities with the most chunks left go first (random among ties), so the
            # epoch does not strand chunks in fewer than P identities
            order = np.lexsort((self.rng.random(len(ids)), -left))
            picked = [ids[i] for i in order[:self.num_identities]]
            yield np.concatenate([chunks[y].pop() for y in self.rng.permutation(picked)])

    def __iter__(self) -> Iterator[np.ndarray]:
        return self.epoch()
