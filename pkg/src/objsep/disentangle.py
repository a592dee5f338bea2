"""Harvest per-object basis dictionaries from a trained MIML network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .miml import BasisBag, MimlParams, RelationMap, forward_batch, normalize_bases


@dataclass(frozen=True)
class HarvestThresholds:
    alpha: float = 2.0  # key basis: probability above alpha / M
    n_min: int = 2      # minimum key bases per label before a clip contributes
    cap: int = 200      # entries kept per label

    def __post_init__(self):
        if self.alpha <= 0 or self.n_min < 1 or self.cap < 1:
            raise ValueError(f"invalid harvest thresholds {self}")


@dataclass(frozen=True)
class Entry:
    clip_id: str
    basis_index: int
    confidence: float


@dataclass
class BasisDictionary:
    n_labels: int
    bases: dict = field(default_factory=dict)    # label -> (n, F) array, unit L2 rows
    entries: dict = field(default_factory=dict)  # label -> list[Entry], same order
    f: int | None = None

    def __post_init__(self):
        for lab in range(self.n_labels):
            self.entries.setdefault(lab, [])
            if lab not in self.bases:
                self.bases[lab] = np.zeros((0, self.f or 0))

    def size(self, label: int) -> int:
        return len(self.entries[label])

    def sizes(self) -> list:
        return [self.size(lab) for lab in range(self.n_labels)]


def relation_probabilities(rmap) -> np.ndarray:
    """Softmax over the basis axis, independently for each label row."""
    rmap = np.asarray(rmap, dtype=np.float64)
    z = rmap - rmap.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def harvest_bases(bag: BasisBag, relmap, thresholds: HarvestThresholds = HarvestThresholds()):
    """Key bases for the bag's own labels, as (label, basis index, confidence) triples."""
    rmap = relmap.map if isinstance(relmap, RelationMap) else np.asarray(relmap)
    probs = relation_probabilities(rmap)
    m = probs.shape[1]
    out = []
    for lab in bag.labels:
        p = probs[lab]
        keys = np.flatnonzero(p > thresholds.alpha / m)
        if len(keys) >= thresholds.n_min:
            out.extend((lab, int(i), float(p[i])) for i in keys)
    return out


def build_dictionary(corpus, params: MimlParams,
                     thresholds: HarvestThresholds = HarvestThresholds(),
                     batch_size: int = 64) -> BasisDictionary:
    hp = params.hyper
    bags = sorted(corpus, key=lambda b: b.clip_id)
    found = {lab: [] for lab in range(hp.l)}
    for start in range(0, len(bags), batch_size):
        chunk = bags[start:start + batch_size]
        _, rmaps, _ = forward_batch(chunk, params, "eval")
        for bag, rmap in zip(chunk, rmaps):
            unit = normalize_bases(bag.bases)
            for lab, idx, conf in harvest_bases(bag, rmap, thresholds):
                found[lab].append((Entry(bag.clip_id, idx, conf), unit[idx]))
    d = BasisDictionary(hp.l, f=hp.f)
    for lab, items in found.items():
        items.sort(key=lambda it: (-it[0].confidence, it[0].clip_id, it[0].basis_index))
        items = items[:thresholds.cap]
        d.entries[lab] = [e for e, _ in items]
        d.bases[lab] = np.array([v for _, v in items]).reshape(len(items), hp.f)
    return d
