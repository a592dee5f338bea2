"""Dictionary-guided separation of a mixture into per-object sources.

A fixed dictionary is assembled from the bases harvested for each detected
object, activations are fitted with KL-NMF, and each object's partial
reconstruction becomes a soft mask on the complex mixture spectrogram.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from . import dsp
from .disentangle import BasisDictionary
from .nmf import EPS, NmfOptions, kl_divergence, nmf_fixed_w, nmf_full

log = logging.getLogger(__name__)

MODES = ("matched", "unmatched", "gaussian", "exemplar", "denoise")
MASK_EPS = 1e-12


class SeparationError(ValueError):
    pass


@dataclass(frozen=True)
class SeparateOptions:
    window_len: int = 4800
    hop: int = 2400
    per_label_count: int = 25
    nmf: NmfOptions = NmfOptions()
    seed: int = 0
    adapt_noise: bool = True  # let the denoising block re-estimate its bases


@dataclass
class SeparationPlan:
    labels: list
    w_blocks: list  # F x n_j arrays; an extra trailing block in denoise mode
    mode: str
    sources: list = field(default_factory=list)  # provenance label per block (None = random)

    @property
    def widths(self) -> list:
        return [b.shape[1] for b in self.w_blocks]

    @property
    def w(self) -> np.ndarray:
        return np.concatenate(self.w_blocks, axis=1)

    def slices(self) -> list:
        edges = np.cumsum([0] + self.widths)
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class SeparationResult:
    labels: list
    magnitudes: list     # per block, F x N
    spectrograms: list   # per block, ComplexSpectrogram
    waveforms: list      # per block, Waveform
    h: np.ndarray
    plan: SeparationPlan
    final_divergence: float
    iterations: int
    block_divergences: list = field(default_factory=list)

    def block_h(self, j: int) -> np.ndarray:
        return self.h[self.plan.slices()[j]]

    def report(self) -> str:
        lines = [f"mode={self.plan.mode}",
                 f"final_divergence={self.final_divergence:.6e}",
                 f"iterations={self.iterations}"]
        names = list(self.labels) + ["noise"] * (len(self.waveforms) - len(self.labels))
        for j, (name, wav) in enumerate(zip(names, self.waveforms)):
            act = self.block_h(j)
            energy = float(np.sum(wav.samples ** 2))
            div = self.block_divergences[j] if self.block_divergences else float("nan")
            lines.append(f"block {j} label={name} bases={act.shape[0]} divergence={div:.6e} "
                         f"mean_activation={act.mean():.6e} energy={energy:.6e}")
        return "\n".join(lines) + "\n"


def _top_block(dictionary: BasisDictionary, label: int, count: int) -> np.ndarray:
    vecs = dictionary.bases[label]
    if len(vecs) == 0:
        raise SeparationError(f"no bases for label {label}")
    return vecs[:count].T.copy()  # entries are stored by descending confidence


def _exemplar_block(dictionary: BasisDictionary, label: int) -> np.ndarray:
    entries = dictionary.entries[label]
    if not entries:
        raise SeparationError(f"no bases for label {label}")
    clip = entries[0].clip_id  # highest-confidence entry comes first
    rows = [i for i, e in enumerate(entries) if e.clip_id == clip]
    return dictionary.bases[label][rows].T.copy()


def _unit_columns(w: np.ndarray) -> np.ndarray:
    return w / np.maximum(np.linalg.norm(w, axis=0, keepdims=True), EPS)


def assemble_dictionary(labels, dictionary: BasisDictionary, mode: str = "matched",
                        per_label_count: int = 25, seed: int = 0) -> SeparationPlan:
    labels = [int(x) for x in labels]
    if not labels:
        raise SeparationError("no detected labels")
    if mode not in MODES:
        raise SeparationError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    f = dictionary.f

    if mode in ("matched", "denoise"):
        blocks = [_top_block(dictionary, lab, per_label_count) for lab in labels]
        sources = list(labels)
    elif mode == "exemplar":
        blocks = [_exemplar_block(dictionary, lab) for lab in labels]
        sources = list(labels)
    elif mode == "unmatched":
        absent = [lab for lab in range(dictionary.n_labels)
                  if lab not in labels and dictionary.size(lab) > 0]
        if not absent:
            raise SeparationError("no absent labels with bases available for unmatched mode")
        replace = len(absent) < len(labels)
        sources = [int(x) for x in rng.choice(absent, size=len(labels), replace=replace)]
        blocks = []
        for lab, src in zip(labels, sources):
            width = min(per_label_count, dictionary.size(lab)) or per_label_count
            blocks.append(dictionary.bases[src][:width].T.copy())
    else:  # gaussian
        blocks, sources = [], [None] * len(labels)
        for lab in labels:
            width = min(per_label_count, dictionary.size(lab)) or per_label_count
            blocks.append(_unit_columns(np.abs(rng.standard_normal((f, width)))))

    if mode == "denoise":
        width = sum(b.shape[1] for b in blocks)
        blocks.append(_unit_columns(rng.uniform(EPS, 1.0, size=(f, width))))
        sources.append(None)
    return SeparationPlan(labels, blocks, mode, sources)


def soft_mask(per_source_mags, mixture: dsp.ComplexSpectrogram) -> list:
    """Split the complex mixture in proportion to per-source magnitude estimates.

    Masks sum to one everywhere; bins where every estimate vanishes are shared
    equally.
    """
    mags = [np.asarray(v, dtype=np.float64) for v in per_source_mags]
    if not mags:
        raise ValueError("no source magnitudes")
    for v in mags:
        if v.shape != mixture.bins.shape:
            raise ValueError(f"shape mismatch: {v.shape} vs mixture {mixture.bins.shape}")
        if np.any(v < 0):
            raise ValueError("source magnitudes must be non-negative")
    total = np.sum(mags, axis=0)
    silent = total <= MASK_EPS
    safe = np.where(silent, 1.0, total)
    out = []
    for v in mags:
        mask = np.where(silent, 1.0 / len(mags), v / safe)
        out.append(mixture.with_bins(mask * mixture.bins))
    return out


def separate_with_plan(mixture: dsp.Waveform, plan: SeparationPlan,
                       opts: SeparateOptions = SeparateOptions()) -> SeparationResult:
    spec = dsp.stft(mixture, opts.window_len, opts.hop)
    mag = dsp.magnitude(spec)
    w = plan.w
    if w.shape[0] != mag.shape[0]:
        raise SeparationError(f"dictionary has {w.shape[0]} bins, spectrogram has "
                              f"{mag.shape[0]}")
    update = None
    if plan.mode == "denoise" and opts.adapt_noise:
        update = np.arange(w.shape[1])[plan.slices()[-1]]
    res = nmf_fixed_w(mag.mags, w, opts.nmf, update_cols=update)
    mags = [res.w[:, s] @ res.h[s] for s in plan.slices()]
    parts = soft_mask(mags, spec)
    waves = [dsp.istft(p, len(mixture)) for p in parts]
    # per block: masked magnitude against the block's own reconstruction
    divs = [kl_divergence(np.abs(p.bins), np.maximum(v, opts.nmf.eps))
            for p, v in zip(parts, mags)]
    return SeparationResult(plan.labels, mags, parts, waves, res.h, plan,
                            res.final_divergence, res.iterations, divs)


def guided_separate(mixture: dsp.Waveform, labels, dictionary: BasisDictionary,
                    mode: str = "matched",
                    opts: SeparateOptions = SeparateOptions()) -> SeparationResult:
    plan = assemble_dictionary(labels, dictionary, mode, opts.per_label_count, opts.seed)
    return separate_with_plan(mixture, plan, opts)


def denoise(noisy: dsp.Waveform, labels, dictionary: BasisDictionary,
            opts: SeparateOptions = SeparateOptions()):
    """Return (clean estimate, noise estimate)."""
    res = guided_separate(noisy, labels, dictionary, "denoise", opts)
    clean = np.sum([w.samples for w in res.waveforms[:-1]], axis=0)
    return dsp.Waveform(clean, noisy.sample_rate), res.waveforms[-1]


def kmeans_features(w: np.ndarray) -> np.ndarray:
    """Rows: log-compressed, unit-norm basis spectra."""
    cols = _unit_columns(w)
    feats = np.log1p(cols).T
    return feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), EPS)


def kmeans_baseline_separate(mixture: dsp.Waveform, m: int, n_sources: int, seed: int = 0,
                             opts: SeparateOptions = SeparateOptions(),
                             max_retries: int = 5) -> list:
    """Unsupervised NMF followed by k-means grouping of the learned bases."""
    if n_sources < 1:
        raise ValueError("n_sources must be >= 1")
    if m < n_sources:
        raise ValueError(f"need at least {n_sources} bases, got m={m}")
    spec = dsp.stft(mixture, opts.window_len, opts.hop)
    mag = dsp.magnitude(spec)
    nmf_opts = NmfOptions(m=m, max_iters=opts.nmf.max_iters, rel_tol=opts.nmf.rel_tol,
                          seed=seed, eps=opts.nmf.eps)
    res = nmf_full(mag.mags, nmf_opts)
    feats = kmeans_features(res.w)
    for attempt in range(max_retries):
        km = KMeans(n_clusters=n_sources, n_init=10, random_state=seed + attempt).fit(feats)
        assign = km.labels_
        if len(np.unique(assign)) == n_sources:
            break
    else:
        raise SeparationError(f"k-means left an empty cluster after {max_retries} attempts")
    mags = [res.w[:, assign == c] @ res.h[assign == c] for c in range(n_sources)]
    parts = soft_mask(mags, spec)
    return [dsp.istft(p, len(mixture)) for p in parts]
