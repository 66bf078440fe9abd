"""Cross-modal retrieval metrics (CMC, mAP) under single- and multi-shot galleries."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SampleArrays

log = logging.getLogger(__name__)

REPORT_RANKS = (1, 10, 20)


@dataclass
class EmbeddingSet:
    matrix: np.ndarray        # (N, E)
    identities: np.ndarray    # (N,)
    modalities: np.ndarray    # (N,)
    sample_ids: np.ndarray    # (N,)

    def __len__(self) -> int:
        return len(self.identities)

    def subset(self, index) -> "EmbeddingSet":
        return EmbeddingSet(self.matrix[index], self.identities[index],
                            self.modalities[index], self.sample_ids[index])

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "identity", "modality",
                        *[f"f{i}" for i in range(self.matrix.shape[1])]])
            for sid, y, m, row in zip(self.sample_ids, self.identities, self.modalities, self.matrix):
                w.writerow([sid, int(y), m, *[repr(float(v)) for v in row]])

    @classmethod
    def read_csv(cls, path) -> "EmbeddingSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array([[float(v) for v in r[3:]] for r in rows]),
                   np.array([int(r[1]) for r in rows]),
                   np.array([r[2] for r in rows]),
                   np.array([r[0] for r in rows]))


@dataclass
class EvalReport:
    rank1: float
    rank10: float
    rank20: float
    mAP: float
    protocol: str = "multi-shot"
    draws: int = 1
    num_queries: int = 0
    excluded: int = 0
    cmc: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def as_row(self) -> dict:
        return {"protocol": self.protocol, "draws": self.draws, "queries": self.num_queries,
                "excluded": self.excluded, "rank1": self.rank1, "rank10": self.rank10,
                "rank20": self.rank20, "mAP": self.mAP}

    def table(self) -> str:
        row = self.as_row()
        head = "  ".join(f"{k:>9}" for k in row)
        vals = "  ".join(f"{v:>9.2f}" if isinstance(v, float) else f"{v:>9}" for v in row.values())
        return head + "\n" + vals

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        row = self.as_row()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(row))
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row.values()])


def embed(net, arrays: SampleArrays, batch_size: int = 256) -> EmbeddingSet:
    """Flattened neutral features for every sample; no cycle construction."""
    out = []
    for start in range(0, len(arrays), batch_size):
        part = arrays.subset(slice(start, start + batch_size))
        fwd = net.forward_batch(T.Tensor(part.maps, dtype=np.float32), part.modalities, cycle=False)
        out.append(fwd.embedding.data)
    return EmbeddingSet(np.concatenate(out), arrays.labels.copy(), arrays.modalities.copy(),
                        arrays.sample_ids.copy())


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    return x / np.maximum(n, 1e-12)


def similarity(queries: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Higher is closer. einsum keeps identical gallery rows bitwise identical in the output."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if metric == "cosine":
        return np.einsum("qd,gd->qg", _unit(q), _unit(g))
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return -np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    raise ValueError(f"unknown metric {metric!r}")


def _check_protocol(queries: EmbeddingSet, gallery: EmbeddingSet) -> None:
    if set(queries.modalities.tolist()) & set(gallery.modalities.tolist()):
        raise ValueError("query and gallery modalities overlap; the protocol is cross-modal")


def cmc_map(queries: EmbeddingSet, gallery: EmbeddingSet, metric: str = "cosine",
            ranks=REPORT_RANKS) -> EvalReport:
    """Rank the gallery per query by similarity; ties go to the smaller sample_id."""
    _check_protocol(queries, gallery)
    order = np.argsort(gallery.sample_ids, kind="stable")
    gallery = gallery.subset(order)
    sim = similarity(queries.matrix, gallery.matrix, metric)
    ranking = np.argsort(-sim, axis=1, kind="stable")
    matches = gallery.identities[ranking] == queries.identities[:, None]
    valid = matches.any(axis=1)
    excluded = int((~valid).sum())
    if excluded:
        log.warning("%d queries have no gallery match and are excluded", excluded)
    matches = matches[valid]
    if not len(matches):
        raise ValueError("no query identity is present in the gallery")
    cmc = (np.cumsum(matches, axis=1) > 0).mean(axis=0)
    hits = np.cumsum(matches, axis=1)
    positions = np.arange(1, matches.shape[1] + 1)
    ap = (matches * hits / positions).sum(axis=1) / matches.sum(axis=1)
    at = [100.0 * float(cmc[min(r, len(cmc)) - 1]) for r in ranks]
    return EvalReport(at[0], at[1], at[2], 100.0 * float(ap.mean()), "multi-shot", 1,
                      int(valid.sum()), excluded, 100.0 * cmc)


def cmc_map_oracle(queries: EmbeddingSet, gallery: EmbeddingSet, metric: str = "cosine",
                   ranks=REPORT_RANKS) -> EvalReport:
    """Deliberately naive reference: Python loops, one full sort per query."""
    gal = [(str(gallery.sample_ids[j]), int(gallery.identities[j]), [float(v) for v in gallery.matrix[j]])
           for j in range(len(gallery))]

    def unit(v):
        n = math.sqrt(math.fsum(x * x for x in v))
        return [x / max(n, 1e-12) for x in v]

    def score(a, b):
        if metric == "cosine":
            ua, ub = unit(a), unit(b)
            return math.fsum(x * y for x, y in zip(ua, ub))
        return -math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))

    curves, aps, skipped = [], [], 0
    for i in range(len(queries)):
        qv = [float(v) for v in queries.matrix[i]]
        qy = int(queries.identities[i])
        scored = sorted(((-score(qv, gv), sid, y) for sid, y, gv in gal),
                        key=lambda t: (t[0], t[1]))
        flags = [y == qy for _, _, y in scored]
        if not any(flags):
            skipped += 1
            continue
        first = flags.index(True)
        curves.append([1.0 if r >= first else 0.0 for r in range(len(flags))])
        precisions, found = [], 0
        for r, hit in enumerate(flags, start=1):
            if hit:
                found += 1
                precisions.append(found / r)
        aps.append(sum(precisions) / len(precisions))
    if not curves:
        raise ValueError("no query identity is present in the gallery")
    n = len(curves)
    cmc = [sum(c[r] for c in curves) / n for r in range(len(gal))]
    at = [100.0 * cmc[min(r, len(cmc)) - 1] for r in ranks]
    return EvalReport(at[0], at[1], at[2], 100.0 * sum(aps) / n, "multi-shot", 1, n, skipped,
                      100.0 * np.array(cmc))


def single_shot_gallery(gallery: EmbeddingSet, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn gallery index per identity (identities in ascending order)."""
    picks = []
    for y in np.unique(gallery.identities):
        picks.append(int(rng.choice(np.flatnonzero(gallery.identities == y))))
    return np.array(picks)


def evaluate(queries: EmbeddingSet, gallery: EmbeddingSet, protocol: str = "single-shot",
             draws: int = 10, seed: int = 0, metric: str = "cosine") -> EvalReport:
    """Multi-shot uses the full gallery; single-shot averages ``draws`` random one-per-identity galleries."""
    if protocol == "multi-shot":
        return cmc_map(queries, gallery, metric)
    if protocol != "single-shot":
        raise ValueError(f"unknown protocol {protocol!r}")
    rng = np.random.default_rng(seed)
    reports = [cmc_map(queries, gallery.subset(single_shot_gallery(gallery, rng)), metric)
               for _ in range(draws)]
    width = min(len(r.cmc) for r in reports)
    return EvalReport(float(np.mean([r.rank1 for r in reports])),
                      float(np.mean([r.rank10 for r in reports])),
                      float(np.mean([r.rank20 for r in reports])),
                      float(np.mean([r.mAP for r in reports])),
                      "single-shot", draws, reports[0].num_queries, reports[0].excluded,
                      np.mean([r.cmc[:width] for r in reports], axis=0))
