"""Scale-invariant SDR, best-permutation scoring and NSDR."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

SDR_CAP = 300.0
MAX_SOURCES = 4


def _samples(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +/-300 dB."""
    e, s = _samples(estimate), _samples(reference)
    if e.shape != s.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {s.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ValueError("reference is all zeros")
    target = (float(e @ s) / ref_energy) * s
    residual = e - target
    t, r = float(target @ target), float(residual @ residual)
    if t == 0.0:
        # estimate carries no component of the reference
        return -SDR_CAP
    if r < 1e-30:
        return SDR_CAP
    return float(np.clip(10.0 * np.log10(t / r), -SDR_CAP, SDR_CAP))


@dataclass
class EvalReport:
    sdr: list            # per reference, in reference order
    permutation: tuple   # permutation[j] = estimate index matched to reference j
    nsdr: float | None = None

    @property
    def mean_sdr(self) -> float:
        return float(np.mean(self.sdr))

    def to_text(self) -> str:
        lines = [f"source {j} estimate={self.permutation[j]} sdr_db={v:.6f}"
                 for j, v in enumerate(self.sdr)]
        lines.append(f"mean_sdr_db={self.mean_sdr:.6f}")
        if self.nsdr is not None:
            lines.append(f"nsdr_db={self.nsdr:.6f}")
        return "\n".join(lines) + "\n"


def sdr_best_permutation(estimates, references) -> EvalReport:
    estimates, references = list(estimates), list(references)
    j = len(references)
    if len(estimates) != j:
        raise ValueError(f"{len(estimates)} estimates for {j} references")
    if j == 0:
        raise ValueError("no sources to evaluate")
    if j > MAX_SOURCES:
        raise ValueError(f"exhaustive permutation search limited to {MAX_SOURCES} sources")
    table = np.array([[si_sdr(e, r) for e in estimates] for r in references])
    best = None
    for perm in itertools.permutations(range(j)):
        score = np.mean([table[r, perm[r]] for r in range(j)])
        if best is None or score > best[0]:
            best = (score, perm)
    perm = best[1]
    return EvalReport([float(table[r, perm[r]]) for r in range(j)], tuple(perm))


def nsdr(denoised, noisy, clean) -> float:
    return si_sdr(denoised, clean) - si_sdr(noisy, clean)
