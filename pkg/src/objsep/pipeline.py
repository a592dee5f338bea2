"""Stage orchestration shared by the CLI and the synthetic benchmark."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus as corpus_mod
from . import dsp
from .disentangle import BasisDictionary, HarvestThresholds, build_dictionary
from .metrics import nsdr, sdr_best_permutation
from .miml import Hyper, TrainConfig, train
from .nmf import NmfOptions
from .separate import SeparateOptions, denoise, guided_separate, kmeans_baseline_separate

log = logging.getLogger(__name__)

STAGES = ("synth", "extract", "train", "dict", "separate", "kmeans", "noise")


def stage_seed(seed: int, stage: str) -> int:
    """Derive an independent per-stage seed from the run seed."""
    ss = np.random.SeedSequence([int(seed), STAGES.index(stage)])
    return int(ss.generate_state(1)[0])


def _extract_one(args):
    clip, opts, window_len, hop, threshold = args
    return corpus_mod.extract_bag(clip, opts, window_len, hop, threshold)


def extract_bags(clips, opts: NmfOptions, window_len: int, hop: int,
                 threshold: float = corpus_mod.LABEL_THRESHOLD, jobs: int = 1) -> list:
    work = [(c, opts, window_len, hop, threshold) for c in clips]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_extract_one, work, chunksize=4))
    return [_extract_one(w) for w in work]


def trainable(bags) -> list:
    """Bags usable for training: labelled and not silent."""
    return [b for b in bags if len(b.labels) and not b.low_energy]


@dataclass
class BenchmarkConfig:
    window_len: int = 1024
    hop: int = 512
    m: int = 25
    k: int = 4
    hidden: int = 1024
    nmf: NmfOptions = NmfOptions()
    train: TrainConfig = TrainConfig(patience=5)
    harvest: HarvestThresholds = HarvestThresholds()
    per_label_count: int = 25
    n_test: int = 50
    n_denoise: int = 20
    seed: int = 0
    jobs: int = 1


@dataclass
class BenchmarkResult:
    mean_sdr: dict = field(default_factory=dict)   # mode -> dB
    per_clip: dict = field(default_factory=dict)   # mode -> list of dB
    nsdr_method: float = float("nan")
    nsdr_oracle_mask: float = float("nan")
    dictionary_sizes: list = field(default_factory=list)
    train_history: list = field(default_factory=list)
    selected_epoch: int = -1

    def to_text(self) -> str:
        lines = [f"mode={mode} mean_sdr_db={v:.6f}" for mode, v in self.mean_sdr.items()]
        lines.append(f"denoise nsdr_db={self.nsdr_method:.6f} "
                     f"oracle_mask_nsdr_db={self.nsdr_oracle_mask:.6f}")
        lines.append("dictionary_sizes=" + ",".join(str(s) for s in self.dictionary_sizes))
        lines.append(f"selected_epoch={self.selected_epoch} epochs_run={len(self.train_history)}")
        return "\n".join(lines) + "\n"


def learn_dictionary(train_clips, cfg: BenchmarkConfig, n_labels: int, val_clips=()):
    """Extract bags, train the network and harvest; returns (dictionary, state, bags).

    With validation clips the dictionary is harvested with the best-validation
    parameters.
    """
    nmf_opts = replace(cfg.nmf, m=cfg.m, seed=stage_seed(cfg.seed, "extract"))
    bags = extract_bags(train_clips, nmf_opts, cfg.window_len, cfg.hop, jobs=cfg.jobs)
    bags = trainable(bags)
    val = trainable(extract_bags(val_clips, nmf_opts, cfg.window_len, cfg.hop, jobs=cfg.jobs))
    hyper = Hyper(k=cfg.k, l=n_labels, m=cfg.m, f=cfg.window_len // 2 + 1, hidden=cfg.hidden)
    tcfg = replace(cfg.train, seed=stage_seed(cfg.seed, "train"))
    state = train(bags, tcfg, hyper, val=val)
    d = build_dictionary(bags, state.selected, cfg.harvest)
    return d, state, bags


def evaluate_modes(test_clips, dictionary: BasisDictionary, cfg: BenchmarkConfig,
                   modes=("matched", "unmatched", "gaussian", "kmeans"),
                   oracle: BasisDictionary | None = None) -> dict:
    opts = SeparateOptions(cfg.window_len, cfg.hop, cfg.per_label_count, cfg.nmf,
                           stage_seed(cfg.seed, "separate"))
    scores = {m: [] for m in modes}
    if oracle is not None:
        scores["oracle"] = []
    for i, clip in enumerate(test_clips):
        labels = list(clip.true_classes)
        refs = clip.stems
        for mode in modes:
            if mode == "kmeans":
                est = kmeans_baseline_separate(clip.audio, cfg.m, len(refs),
                                               stage_seed(cfg.seed, "kmeans") % 2**31, opts)
            else:
                o = replace(opts, seed=opts.seed + i)
                est = guided_separate(clip.audio, labels, dictionary, mode, o).waveforms
            scores[mode].append(sdr_best_permutation(est, refs).mean_sdr)
        if oracle is not None:
            est = guided_separate(clip.audio, labels, oracle, "matched",
                                  replace(opts, per_label_count=10**6)).waveforms
            scores["oracle"].append(sdr_best_permutation(est, refs).mean_sdr)
    return scores


def white_noise_at_snr(clean: np.ndarray, snr_db: float, rng) -> np.ndarray:
    noise = rng.standard_normal(len(clean))
    gain = np.sqrt(np.sum(clean ** 2) / (np.sum(noise ** 2) * 10 ** (snr_db / 10)))
    return noise * gain


def oracle_mask_denoise(clean: dsp.Waveform, noise: dsp.Waveform, window_len: int,
                        hop: int) -> dsp.Waveform:
    """Ideal ratio mask from the true clean and noise magnitudes (upper bound)."""
    noisy = dsp.Waveform(clean.samples + noise.samples, clean.sample_rate)
    spec = dsp.stft(noisy, window_len, hop)
    s = dsp.magnitude(dsp.stft(clean, window_len, hop)).mags
    n = dsp.magnitude(dsp.stft(noise, window_len, hop)).mags
    mask = s / np.maximum(s + n, 1e-12)
    return dsp.istft(spec.with_bins(mask * spec.bins), len(clean))


def evaluate_denoising(clips, dictionary: BasisDictionary, cfg: BenchmarkConfig):
    """Mean NSDR of the method and of the oracle mask on 0 dB white-noise mixtures."""
    rng = np.random.default_rng(stage_seed(cfg.seed, "noise"))
    opts = SeparateOptions(cfg.window_len, cfg.hop, cfg.per_label_count, cfg.nmf,
                           stage_seed(cfg.seed, "separate"))
    method, oracle = [], []
    for clip in clips:
        clean = clip.audio
        noise = dsp.Waveform(white_noise_at_snr(clean.samples, 0.0, rng), clean.sample_rate)
        noisy = dsp.Waveform(clean.samples + noise.samples, clean.sample_rate)
        est, _ = denoise(noisy, list(clip.true_classes), dictionary, opts)
        method.append(nsdr(est, noisy, clean))
        ideal = oracle_mask_denoise(clean, noise, cfg.window_len, cfg.hop)
        oracle.append(nsdr(ideal, noisy, clean))
    return float(np.mean(method)), float(np.mean(oracle)), method, oracle


def single_source_clips(spec: corpus_mod.SynthSpec, n: int, seed: int) -> list:
    """Fresh single-source clips drawn with the corpus prototypes (for denoising)."""
    protos = corpus_mod.class_prototypes(spec)
    rng = np.random.default_rng(seed)
    n_samp = int(round(spec.duration * spec.sample_rate))
    clips = []
    for i in range(n):
        c = int(rng.integers(spec.n_classes))
        proto = protos[c][int(rng.integers(spec.prototypes_per_class))]
        x = corpus_mod.MIX_PEAK * corpus_mod.render_prototype(
            proto, n_samp, spec.sample_rate, rng, rng.uniform(-spec.detune, spec.detune))
        w = dsp.Waveform(x, spec.sample_rate)
        clips.append(corpus_mod.Clip(w, [(c, 1.0)], f"denoise{i:03d}", "test", [w], (c,)))
    return clips


def run_benchmark(spec: corpus_mod.SynthSpec, cfg: BenchmarkConfig,
                  with_oracle: bool = True, progress=None) -> BenchmarkResult:
    corpus = corpus_mod.synth_corpus(spec)
    d, state, _ = learn_dictionary(corpus.clips["train"], cfg, spec.n_classes,
                                   corpus.clips.get("val", ()))
    oracle = (corpus_mod.prototype_dictionary(corpus, cfg.window_len, cfg.hop)
              if with_oracle else None)
    tests = corpus.clips["test"][:cfg.n_test]
    scores = evaluate_modes(tests, d, cfg, oracle=oracle)
    res = BenchmarkResult({m: float(np.mean(v)) for m, v in scores.items()}, scores,
                          dictionary_sizes=d.sizes(), train_history=list(state.history),
                          selected_epoch=state.best_epoch)
    dn = single_source_clips(spec, cfg.n_denoise, stage_seed(cfg.seed, "noise"))
    res.nsdr_method, res.nsdr_oracle_mask, _, _ = evaluate_denoising(dn, d, cfg)
    return res
