"""Object-level audio source separation guided by weak visual labels.

Pipeline: per-clip KL-NMF bases -> MIML network over weakly labelled bags ->
per-object basis dictionaries -> fixed-dictionary NMF and soft masking.
"""

from .dsp import ComplexSpectrogram, MagnitudeSpectrogram, Waveform, istft, magnitude, resample, stft
from .nmf import NmfOptions, kl_divergence, nmf_fixed_w, nmf_full
from .miml import BasisBag, Hyper, LabelSet, MimlParams, RelationMap, TrainConfig
from .disentangle import BasisDictionary, HarvestThresholds, build_dictionary, harvest_bases
from .separate import SeparateOptions, assemble_dictionary, denoise, guided_separate, soft_mask
from .metrics import EvalReport, nsdr, sdr_best_permutation, si_sdr

__version__ = "0.1.0"
