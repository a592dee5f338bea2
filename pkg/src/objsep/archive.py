"""Versioned on-disk containers: bag archives, checkpoints, dictionaries.

All three are ``.npz`` zip files written with fixed timestamps and sorted
member order, so identical contents give byte-identical files.
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

from .disentangle import BasisDictionary, Entry
from .miml import PARAM_NAMES, STAT_NAMES, BasisBag, Hyper, LabelSet, MimlParams, TrainState

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    pass


def save_npz(path, arrays: dict):
    """Deterministic, uncompressed ``np.savez`` equivalent (no pickled objects)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_npz(path, kind: str) -> dict:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise ArchiveError(f"cannot read {kind} file {path}: {exc}") from exc
    if str(data.get("kind", "")) != kind:
        raise ArchiveError(f"{path} is not a {kind} file")
    version = int(data.get("version", -1))
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported {kind} version {version}")
    return data


def _header(kind: str) -> dict:
    return {"kind": np.array(kind), "version": np.array(FORMAT_VERSION)}


# ---------------------------------------------------------------- bags

def save_bags(path, bags, vocabulary=(), meta: dict | None = None):
    bags = list(bags)
    arrays = _header("bags")
    if bags:
        arrays["bases"] = np.stack([b.bases for b in bags])
    else:
        arrays["bases"] = np.zeros((0, 0, 0))
    arrays["clip_ids"] = np.array([b.clip_id for b in bags], dtype=str)
    counts = [len(b.labels) for b in bags]
    arrays["label_offsets"] = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    arrays["label_values"] = np.array([i for b in bags for i in b.labels], dtype=np.int64)
    arrays["low_energy"] = np.array([b.low_energy for b in bags], dtype=bool)
    arrays["vocabulary"] = np.array(list(vocabulary), dtype=str)
    for k, v in (meta or {}).items():
        arrays[f"meta_{k}"] = np.array(v)
    save_npz(path, arrays)


def load_bags(path):
    """Return (bags, vocabulary, meta)."""
    d = load_npz(path, "bags")
    off, vals = d["label_offsets"], d["label_values"]
    bags = [BasisBag(d["bases"][i], LabelSet(vals[off[i]:off[i + 1]]), str(cid),
                     bool(d["low_energy"][i]))
            for i, cid in enumerate(d["clip_ids"])]
    meta = {k[5:]: d[k].item() for k in d if k.startswith("meta_")}
    return bags, [str(v) for v in d["vocabulary"]], meta


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, state_or_params, vocabulary=()):
    if isinstance(state_or_params, TrainState):
        state, params = state_or_params, state_or_params.params
    else:
        state, params = None, state_or_params
    hp = params.hyper
    arrays = _header("checkpoint")
    arrays["hyper"] = np.array([hp.k, hp.l, hp.m, hp.f, hp.hidden], dtype=np.int64)
    arrays["vocabulary"] = np.array(list(vocabulary), dtype=str)
    for k in PARAM_NAMES + STAT_NAMES:
        arrays[f"param_{k}"] = params[k]
    if state is not None:
        for k in PARAM_NAMES:
            arrays[f"adam_m1_{k}"] = state.m1[k]
            arrays[f"adam_m2_{k}"] = state.m2[k]
        arrays["train_step"] = np.array(state.step, dtype=np.int64)
        arrays["train_epoch"] = np.array(state.epoch, dtype=np.int64)
        arrays["train_history"] = np.array(state.history, dtype=np.float64)
        arrays["val_history"] = np.array(state.val_history, dtype=np.float64)
        arrays["best_epoch"] = np.array(state.best_epoch, dtype=np.int64)
        if state.best_params is not None:
            for k in PARAM_NAMES + STAT_NAMES:
                arrays[f"best_{k}"] = state.best_params[k]
    save_npz(path, arrays)


def load_checkpoint(path):
    """Return (TrainState or None, selected MimlParams, vocabulary).

    The selected parameters are the best-validation ones when the run had a
    validation set, otherwise the latest.
    """
    d = load_npz(path, "checkpoint")
    k, l, m, f, hidden = (int(x) for x in d["hyper"])
    hyper = Hyper(k, l, m, f, hidden)
    params = MimlParams(hyper, {n: d[f"param_{n}"].copy() for n in PARAM_NAMES + STAT_NAMES})
    best = None
    if "best_fc_w" in d:
        best = MimlParams(hyper, {n: d[f"best_{n}"].copy() for n in PARAM_NAMES + STAT_NAMES})
    state = None
    if "train_step" in d:
        state = TrainState(params,
                           {n: d[f"adam_m1_{n}"].copy() for n in PARAM_NAMES},
                           {n: d[f"adam_m2_{n}"].copy() for n in PARAM_NAMES},
                           int(d["train_step"]), int(d["train_epoch"]),
                           [float(x) for x in d["train_history"]],
                           [float(x) for x in d["val_history"]], best, int(d["best_epoch"]))
    return state, best if best is not None else params, [str(v) for v in d["vocabulary"]]


# ---------------------------------------------------------------- dictionaries

def save_dictionary(path, d: BasisDictionary, vocabulary=()):
    arrays = _header("dictionary")
    arrays["n_labels"] = np.array(d.n_labels, dtype=np.int64)
    arrays["f"] = np.array(d.f or 0, dtype=np.int64)
    arrays["vocabulary"] = np.array(list(vocabulary), dtype=str)
    for lab in range(d.n_labels):
        entries = d.entries[lab]
        arrays[f"bases_{lab:03d}"] = np.asarray(d.bases[lab], dtype=np.float64).reshape(
            len(entries), d.f or 0)
        arrays[f"clip_ids_{lab:03d}"] = np.array([e.clip_id for e in entries], dtype=str)
        arrays[f"basis_index_{lab:03d}"] = np.array([e.basis_index for e in entries],
                                                    dtype=np.int64)
        arrays[f"confidence_{lab:03d}"] = np.array([e.confidence for e in entries],
                                                   dtype=np.float64)
    save_npz(path, arrays)


def load_dictionary(path):
    """Return (BasisDictionary, vocabulary)."""
    z = load_npz(path, "dictionary")
    n, f = int(z["n_labels"]), int(z["f"])
    d = BasisDictionary(n, f=f)
    for lab in range(n):
        d.bases[lab] = z[f"bases_{lab:03d}"].copy()
        d.entries[lab] = [Entry(str(c), int(i), float(p)) for c, i, p in zip(
            z[f"clip_ids_{lab:03d}"], z[f"basis_index_{lab:03d}"], z[f"confidence_{lab:03d}"])]
    return d, [str(v) for v in z["vocabulary"]]
