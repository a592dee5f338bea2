"""Clip ingestion, bag extraction, compound mixtures and the synthetic corpus.

On-disk layout written by :func:`write_corpus`::

    root/
      manifest.json        {"version": 1, "vocabulary": "vocabulary.json",
                            "splits": {"train": [{"audio", "sidecar", "stems"}...]}}
      vocabulary.json      ordered list of label names (index = position)
      <split>/<clip_id>.wav, <clip_id>.json, <clip_id>.s<k>.wav

Sidecars hold ``clip_id``, ``split``, ``labels`` (list of ``{name, score}``)
and ``normalized`` (whether scores are already probabilities).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import dsp
from .disentangle import BasisDictionary, Entry
from .miml import BasisBag, LabelSet
from .nmf import NmfOptions, nmf_full

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1
LABEL_THRESHOLD = 0.3
MIX_PEAK = 0.9


class CorpusError(ValueError):
    pass


@dataclass
class Clip:
    audio: dsp.Waveform
    labels: list  # (label id, score)
    clip_id: str
    split: str = "train"
    stems: list = field(default_factory=list)
    true_classes: tuple = ()

    def __post_init__(self):
        for lab, score in self.labels:
            if not 0.0 <= score <= 1.0:
                raise CorpusError(f"clip {self.clip_id}: score {score} for label {lab} "
                                  f"outside [0, 1]")

    def label_set(self, threshold: float = LABEL_THRESHOLD) -> LabelSet:
        return LabelSet(lab for lab, score in self.labels if score > threshold)


# --------------------------------------------------------------------------
# audio files

def read_wav(path, sample_rate: int | None = None) -> dsp.Waveform:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"cannot read audio {path}: {exc}") from exc
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM is returned left-justified in int32
        x = data / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise CorpusError(f"unsupported sample format {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise CorpusError(f"empty audio in {path}")
    w = dsp.Waveform(x, int(rate))
    if sample_rate is not None and sample_rate != w.sample_rate:
        w = dsp.resample(w, sample_rate)
    return w


def write_wav(path, w: dsp.Waveform):
    """16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), int(w.sample_rate), pcm)


# --------------------------------------------------------------------------
# sidecars, vocabulary, manifest

def load_vocabulary(path) -> list:
    names = json.loads(Path(path).read_text())
    if not isinstance(names, list) or len(set(names)) != len(names):
        raise CorpusError(f"vocabulary {path} must be a list of unique names")
    return names


def read_sidecar(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read sidecar {path}: {exc}") from exc
    for key in ("clip_id", "labels"):
        if key not in doc:
            raise CorpusError(f"sidecar {path} lacks field {key!r}")
    for item in doc["labels"]:
        if not isinstance(item, dict) or "name" not in item or "score" not in item:
            raise CorpusError(f"sidecar {path}: malformed label entry {item!r}")
    return doc


def write_sidecar(path, clip: Clip, vocabulary: list):
    doc = {
        "clip_id": clip.clip_id,
        "split": clip.split,
        "labels": [{"name": vocabulary[lab], "score": round(float(s), 6)}
                   for lab, s in clip.labels],
        "normalized": True,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_clip(audio_path, sidecar_path, vocabulary: list, sample_rate: int = 48000,
              threshold: float = LABEL_THRESHOLD) -> Clip:
    """Read one clip and keep its labels with probability above ``threshold``."""
    doc = read_sidecar(sidecar_path)
    audio = read_wav(audio_path, sample_rate)
    index = {name: i for i, name in enumerate(vocabulary)}
    names, scores = [], []
    for item in doc["labels"]:
        if item["name"] not in index:
            raise CorpusError(f"sidecar {sidecar_path}: label {item['name']!r} not in vocabulary")
        names.append(item["name"])
        scores.append(float(item["score"]))
    scores = np.asarray(scores, dtype=np.float64)
    if not doc.get("normalized", True) and scores.size:
        e = np.exp(scores - scores.max())
        scores = e / e.sum()
    labels = [(index[n], float(s)) for n, s in zip(names, scores) if s > threshold]
    return Clip(audio, labels, str(doc["clip_id"]), doc.get("split", "train"))


def load_manifest(path) -> dict:
    """Return {"vocabulary": [...], "splits": {split: [record, ...]}} with absolute paths."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    splits = {}
    for split, records in doc.get("splits", {}).items():
        splits[split] = [{
            "audio": root / r["audio"],
            "sidecar": root / r["sidecar"],
            "stems": [root / s for s in r.get("stems", [])],
        } for r in records]
    return {"vocabulary": load_vocabulary(root / doc.get("vocabulary", "vocabulary.json")),
            "splits": splits}


# --------------------------------------------------------------------------
# bags and mixtures

def extract_bag(clip: Clip, opts: NmfOptions = NmfOptions(), window_len: int = 4800,
                hop: int = 2400, threshold: float = LABEL_THRESHOLD) -> BasisBag:
    """NMF on the clip's magnitude spectrogram; keep the unit-norm bases, drop H."""
    mag = dsp.magnitude(dsp.stft(clip.audio, window_len, hop))
    res = nmf_full(mag.mags, opts)
    w = res.w / np.linalg.norm(res.w, axis=0, keepdims=True)
    low = float(np.max(mag.mags)) < 1e-8
    return BasisBag(w.T.copy(), clip.label_set(threshold), clip.clip_id, low_energy=low)


def peak_normalize(x: np.ndarray, peak: float = MIX_PEAK) -> np.ndarray:
    top = float(np.max(np.abs(x)))
    if top == 0.0:
        raise CorpusError("cannot normalize silent clip")
    return x * (peak / top)


def mix_pair(a: Clip, b: Clip):
    """Peak-normalise both clips and average them; labels merge by max score.

    Returns the mixture clip and the two weighted references, which sum to the
    mixture exactly.
    """
    if a.audio.sample_rate != b.audio.sample_rate:
        raise CorpusError("clips have different sample rates")
    n = min(len(a.audio), len(b.audio))
    xa = 0.5 * peak_normalize(a.audio.samples[:n])
    xb = 0.5 * peak_normalize(b.audio.samples[:n])
    mix = xa + xb
    scores = {}
    for lab, s in list(a.labels) + list(b.labels):
        scores[lab] = max(s, scores.get(lab, 0.0))
    rate = a.audio.sample_rate
    clip = Clip(dsp.Waveform(mix, rate), sorted(scores.items()), f"{a.clip_id}+{b.clip_id}",
                "test", [dsp.Waveform(xa, rate), dsp.Waveform(xb, rate)],
                tuple(sorted(set(a.true_classes) | set(b.true_classes))))
    return clip, [dsp.Waveform(xa, rate), dsp.Waveform(xb, rate)]


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 8
    prototypes_per_class: int = 2
    clips_per_split: tuple = (("train", 500), ("val", 50), ("test", 50))
    sources_per_clip: tuple = (1, 3)
    test_sources: int = 2
    label_noise_rate: float = 0.3
    seed: int = 0
    duration: float = 2.0
    sample_rate: int = 16000
    max_harmonic_hz: float = 6000.0
    detune: float = 0.01  # per-clip detuning, in octaves (half-range)

    def __post_init__(self):
        if self.n_classes < 2:
            raise CorpusError("n_classes must be >= 2")
        if self.prototypes_per_class < 1:
            raise CorpusError("prototypes_per_class must be >= 1")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise CorpusError("label_noise_rate must be in [0, 1)")
        lo, hi = self.sources_per_clip
        if not 1 <= lo <= hi <= self.n_classes:
            raise CorpusError(f"invalid sources_per_clip {self.sources_per_clip}")
        if not 1 <= self.test_sources <= self.n_classes:
            raise CorpusError("invalid test_sources")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise CorpusError("duration and sample_rate must be positive")

    @property
    def counts(self) -> dict:
        return dict(self.clips_per_split)


@dataclass(frozen=True)
class Prototype:
    f0: float
    harmonic_gains: np.ndarray  # per harmonic, starting at the fundamental


@dataclass
class SynthCorpus:
    spec: SynthSpec
    vocabulary: list
    prototypes: list  # per class: list[Prototype]
    clips: dict       # split -> list[Clip]
    n_corrupted: int = 0
    n_labels_total: int = 0

    @property
    def corruption_rate(self) -> float:
        return self.n_corrupted / max(self.n_labels_total, 1)


def _make_prototypes(spec: SynthSpec, rng) -> list:
    c = spec.n_classes
    protos = []
    for k in range(c):
        base_f0 = 110.0 * 2.0 ** (1.6 * k / c)
        center = 350.0 * 2.0 ** (3.0 * k / c)
        per_class = []
        for _ in range(spec.prototypes_per_class):
            f0 = base_f0 * 2.0 ** rng.uniform(-0.05, 0.05)
            n_harm = int(min(spec.max_harmonic_hz, 0.45 * spec.sample_rate) // f0)
            freqs = f0 * np.arange(1, n_harm + 1)
            c1 = center * 2.0 ** rng.uniform(-0.2, 0.2)
            c2 = c1 * 2.0 ** rng.uniform(1.0, 2.0)
            env = np.exp(-0.5 * (np.log2(freqs / c1) / 0.5) ** 2)
            env += rng.uniform(0.2, 0.5) * np.exp(-0.5 * (np.log2(freqs / c2) / 0.4) ** 2)
            env *= rng.uniform(0.8, 1.2, size=n_harm)
            per_class.append(Prototype(f0, env / env.max()))
        protos.append(per_class)
    return protos


def class_prototypes(spec: SynthSpec) -> list:
    """The per-class prototypes ``synth_corpus(spec)`` draws its stems from."""
    return _make_prototypes(spec, np.random.default_rng(spec.seed))


def render_prototype(proto: Prototype, n: int, rate: int, rng, detune: float = 0.0,
                     modulate: bool = True) -> np.ndarray:
    t = np.arange(n) / rate
    f0 = proto.f0 * 2.0 ** detune
    x = np.zeros(n)
    phases = rng.uniform(0, 2 * np.pi, size=len(proto.harmonic_gains))
    for h, (g, ph) in enumerate(zip(proto.harmonic_gains, phases), start=1):
        if h * f0 >= 0.5 * rate:
            break
        x += g * np.sin(2 * np.pi * h * f0 * t + ph)
    if modulate:
        rate_am = rng.uniform(0.5, 2.5)
        depth = rng.uniform(0.3, 0.9)
        am = 1.0 - depth * (0.5 + 0.5 * np.sin(2 * np.pi * rate_am * t + rng.uniform(0, 2 * np.pi)))
        x *= am
    fade = min(n // 2, int(0.01 * rate))
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[n - fade:] *= ramp[::-1]
    return x / max(np.max(np.abs(x)), 1e-12)


def _corrupt(labels: list, n_classes: int, rate: float, rng):
    out, n_bad = [], 0
    for lab in labels:
        if rng.random() < rate:
            choices = [c for c in range(n_classes) if c not in labels and c not in out]
            if choices:
                out.append(int(rng.choice(choices)))
                n_bad += 1
                continue
        out.append(lab)
    return out, n_bad


def _weak_scores(labels: list, n_classes: int) -> list:
    k = len(labels)
    rest = 0.05 / max(n_classes - k, 1)
    return [(c, 0.95 / k if c in labels else rest) for c in range(n_classes)]


def synth_corpus(spec: SynthSpec) -> SynthCorpus:
    """Harmonic-comb classes mixed into clips with (noisy) weak labels."""
    rng = np.random.default_rng(spec.seed)
    protos = _make_prototypes(spec, rng)
    vocab = [f"class{k:02d}" for k in range(spec.n_classes)]
    n = int(round(spec.duration * spec.sample_rate))
    clips = {}
    n_bad = n_total = 0
    for split in SPLITS:
        out = []
        for i in range(spec.counts.get(split, 0)):
            if split == "test":
                k = spec.test_sources
            else:
                k = int(rng.integers(spec.sources_per_clip[0], spec.sources_per_clip[1] + 1))
            classes = sorted(int(c) for c in rng.choice(spec.n_classes, size=k, replace=False))
            stems = []
            for c in classes:
                proto = protos[c][int(rng.integers(spec.prototypes_per_class))]
                det = rng.uniform(-spec.detune, spec.detune)
                stems.append(rng.uniform(0.5, 1.0) * render_prototype(proto, n, spec.sample_rate,
                                                                      rng, det))
            mix = np.sum(stems, axis=0)
            scale = MIX_PEAK / max(np.max(np.abs(mix)), 1e-12)
            stems = [s * scale for s in stems]
            mix = np.sum(stems, axis=0)
            labels = classes
            if split != "test":
                labels, bad = _corrupt(classes, spec.n_classes, spec.label_noise_rate, rng)
                n_bad += bad
                n_total += len(classes)
            out.append(Clip(dsp.Waveform(mix, spec.sample_rate),
                            _weak_scores(labels, spec.n_classes),
                            f"{split}{i:05d}", split,
                            [dsp.Waveform(s, spec.sample_rate) for s in stems],
                            tuple(classes)))
        clips[split] = out
    return SynthCorpus(spec, vocab, protos, clips, n_bad, n_total)


def prototype_dictionary(corpus: SynthCorpus, window_len: int, hop: int,
                         detunings: int = 5) -> BasisDictionary:
    """Oracle dictionary: steady renderings of every true prototype."""
    spec = corpus.spec
    rng = np.random.default_rng([spec.seed, 1])
    n = max(4 * window_len, int(0.5 * spec.sample_rate))
    f = window_len // 2 + 1
    d = BasisDictionary(spec.n_classes, f=f)
    for c, protos in enumerate(corpus.prototypes):
        vecs, entries = [], []
        for p, proto in enumerate(protos):
            for det in np.linspace(-spec.detune, spec.detune, detunings):
                x = render_prototype(proto, n, spec.sample_rate, rng, det, modulate=False)
                mag = dsp.magnitude(dsp.stft(dsp.Waveform(x, spec.sample_rate), window_len, hop))
                v = mag.mags[:, 2:-2].mean(axis=1)
                vecs.append(v / np.linalg.norm(v))
                entries.append(Entry(f"prototype{c:02d}.{p}", len(entries), 1.0))
        d.bases[c] = np.array(vecs)
        d.entries[c] = entries
    return d


def write_corpus(corpus: SynthCorpus, root) -> Path:
    """Write audio, stems, sidecars, vocabulary and manifest; return the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "vocabulary.json").write_text(json.dumps(corpus.vocabulary, indent=1) + "\n")
    splits = {}
    for split in SPLITS:
        d = root / split
        d.mkdir(exist_ok=True)
        records = []
        for clip in corpus.clips.get(split, []):
            write_wav(d / f"{clip.clip_id}.wav", clip.audio)
            write_sidecar(d / f"{clip.clip_id}.json", clip, corpus.vocabulary)
            stems = []
            for k, stem in enumerate(clip.stems):
                write_wav(d / f"{clip.clip_id}.s{k}.wav", stem)
                stems.append(f"{split}/{clip.clip_id}.s{k}.wav")
            records.append({"audio": f"{split}/{clip.clip_id}.wav",
                            "sidecar": f"{split}/{clip.clip_id}.json",
                            "stems": stems})
        splits[split] = records
    manifest = {"version": MANIFEST_VERSION, "vocabulary": "vocabulary.json", "splits": splits}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path
