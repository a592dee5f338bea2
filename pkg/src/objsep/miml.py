"""Deep multi-instance multi-label network over bags of NMF bases.

Each basis in a bag goes through a shared FC-BN-ReLU branch; the stacked
features pass a 1x1 Conv-BN-ReLU producing K*L channels per basis, reshaped to
a K x L x M cube. Max over sub-concepts gives the L x M relation map and max
over bases gives the bag-level label scores. Forward and backward passes are
written out by hand in numpy, in double precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

BN_EPS = 1e-5
PARAM_NAMES = ("fc_w", "fc_b", "bn1_gamma", "bn1_beta",
               "conv_w", "conv_b", "bn2_gamma", "bn2_beta")
STAT_NAMES = ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")


@dataclass(frozen=True)
class LabelSet:
    indices: tuple

    def __init__(self, indices=()):
        idx = tuple(sorted(int(i) for i in indices))
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate labels in {idx}")
        object.__setattr__(self, "indices", idx)

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, item):
        return item in self.indices


@dataclass
class BasisBag:
    bases: np.ndarray  # M x F
    labels: LabelSet
    clip_id: str = ""
    low_energy: bool = False

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.float64)
        if not isinstance(self.labels, LabelSet):
            self.labels = LabelSet(self.labels)
        if self.bases.ndim != 2:
            raise ValueError("bases must be an M x F matrix")
        if not np.all(np.isfinite(self.bases)) or np.any(self.bases < 0):
            raise ValueError(f"bag {self.clip_id!r}: bases must be finite and non-negative")


@dataclass(frozen=True)
class Hyper:
    k: int = 4
    l: int = 25
    m: int = 25
    f: int = 2401
    hidden: int = 1024

    def __post_init__(self):
        for name in ("k", "l", "m", "f", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class MimlParams:
    hyper: Hyper
    arrays: dict  # PARAM_NAMES + STAT_NAMES -> ndarray

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "MimlParams":
        return MimlParams(self.hyper, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class RelationMap:
    cube: np.ndarray    # K x L x M
    map: np.ndarray     # L x M
    scores: np.ndarray  # L


def init_params(hyper: Hyper, seed: int = 0) -> MimlParams:
    rng = np.random.default_rng(seed)
    h, kl = hyper.hidden, hyper.k * hyper.l
    a = {
        "fc_w": rng.normal(0.0, np.sqrt(2.0 / hyper.f), size=(h, hyper.f)),
        "fc_b": np.zeros(h),
        "bn1_gamma": np.ones(h),
        "bn1_beta": np.zeros(h),
        "conv_w": rng.normal(0.0, np.sqrt(2.0 / h), size=(kl, h)),
        "conv_b": np.zeros(kl),
        "bn2_gamma": np.ones(kl),
        "bn2_beta": np.zeros(kl),
        "bn1_mean": np.zeros(h),
        "bn1_var": np.ones(h),
        "bn2_mean": np.zeros(kl),
        "bn2_var": np.ones(kl),
    }
    return MimlParams(hyper, a)


def normalize_bases(bases: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(bases, axis=-1, keepdims=True)
    return np.where(norms > 0, bases / np.where(norms > 0, norms, 1.0), 0.0)


def _stack(bags, hyper: Hyper) -> np.ndarray:
    if isinstance(bags, BasisBag):
        bags = [bags]
    x = np.stack([b.bases for b in bags])
    if x.shape[1:] != (hyper.m, hyper.f):
        raise ValueError(f"bag shape {x.shape[1:]} does not match network (M={hyper.m}, "
                         f"F={hyper.f})")
    return normalize_bases(x)


def _bn_forward(z, gamma, beta, mean, var, train):
    # z: (rows, channels)
    if train:
        mu = z.mean(axis=0)
        var_b = z.var(axis=0)
    else:
        mu, var_b = mean, var
    inv = 1.0 / np.sqrt(var_b + BN_EPS)
    zhat = (z - mu) * inv
    return gamma * zhat + beta, (zhat, inv, mu, var_b)


def _bn_backward(dy, gamma, cache, train):
    zhat, inv, _, _ = cache
    dgamma = np.sum(dy * zhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dzhat = dy * gamma
    if train:
        n = dy.shape[0]
        dz = inv / n * (n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
    else:
        dz = dzhat * inv
    return dz, dgamma, dbeta


def _forward(x, params: MimlParams, train: bool):
    hp = params.hyper
    b, m, _ = x.shape
    rows = x.reshape(b * m, hp.f)
    z1 = rows @ params["fc_w"].T + params["fc_b"]
    y1, c1 = _bn_forward(z1, params["bn1_gamma"], params["bn1_beta"],
                         params["bn1_mean"], params["bn1_var"], train)
    a1 = np.maximum(y1, 0.0)
    z2 = a1 @ params["conv_w"].T + params["conv_b"]
    y2, c2 = _bn_forward(z2, params["bn2_gamma"], params["bn2_beta"],
                         params["bn2_mean"], params["bn2_var"], train)
    a2 = np.maximum(y2, 0.0)
    # channel c = k * L + l
    cube = a2.reshape(b, m, hp.k, hp.l).transpose(0, 2, 3, 1)  # B K L M
    k_arg = np.argmax(cube, axis=1)                             # B L M
    rmap = np.take_along_axis(cube, k_arg[:, None], axis=1)[:, 0]
    m_arg = np.argmax(rmap, axis=2)                             # B L
    scores = np.take_along_axis(rmap, m_arg[..., None], axis=2)[..., 0]
    cache = dict(rows=rows, z1=z1, y1=y1, a1=a1, c1=c1, z2=z2, y2=y2, c2=c2,
                 k_arg=k_arg, m_arg=m_arg, shape=(b, m))
    return cube, rmap, scores, cache


def forward(bag: BasisBag, params: MimlParams, mode: str = "eval") -> RelationMap:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _stack(bag, params.hyper)
    cube, rmap, scores, _ = _forward(x, params, mode == "train")
    return RelationMap(cube[0], rmap[0], scores[0])


def forward_batch(bags, params: MimlParams, mode: str = "eval"):
    """Batched forward; returns (cube B x K x L x M, map B x L x M, scores B x L)."""
    x = _stack(bags, params.hyper)
    cube, rmap, scores, _ = _forward(x, params, mode == "train")
    return cube, rmap, scores


def hinge_loss(scores, labels) -> float:
    """Multi-label hinge loss; every positive must beat every negative by 1."""
    loss, _ = _hinge(np.asarray(scores, dtype=np.float64), labels)
    return loss


def _hinge(scores, labels):
    labels = labels if isinstance(labels, LabelSet) else LabelSet(labels)
    if len(labels) == 0:
        raise ValueError("hinge loss needs at least one positive label")
    n_labels = scores.shape[0]
    pos = np.zeros(n_labels, dtype=bool)
    pos[list(labels.indices)] = True
    margins = 1.0 - (scores[pos][:, None] - scores[~pos][None, :])  # |V| x (L - |V|)
    active = margins > 0
    loss = float(np.sum(margins[active])) / n_labels
    grad = np.zeros(n_labels)
    grad[pos] = -active.sum(axis=1) / n_labels
    grad[~pos] = active.sum(axis=0) / n_labels
    return loss, grad


def batch_loss(bags, params: MimlParams, mode: str = "eval") -> float:
    """Mean hinge loss over ``bags`` (forward pass only)."""
    if isinstance(bags, BasisBag):
        bags = [bags]
    _, _, scores, _ = _forward(_stack(bags, params.hyper), params, mode == "train")
    return float(np.mean([_hinge(s, b.labels)[0] for s, b in zip(scores, bags)]))


def loss_and_grads(bags, params: MimlParams, mode: str = "train"):
    """Mean hinge loss over ``bags`` and its gradient w.r.t. every trainable array.

    Also returns the batch BN statistics (train mode) for running-stat updates.
    """
    if isinstance(bags, BasisBag):
        bags = [bags]
    train = mode == "train"
    hp = params.hyper
    x = _stack(bags, hp)
    cube, rmap, scores, c = _forward(x, params, train)
    b, m = c["shape"]

    total = 0.0
    dscores = np.zeros_like(scores)
    for i, bag in enumerate(bags):
        li, gi = _hinge(scores[i], bag.labels)
        total += li
        dscores[i] = gi / b
    loss = total / b

    # max over M: gradient to the (lowest-index) winning basis
    drmap = np.zeros_like(rmap)
    np.put_along_axis(drmap, c["m_arg"][..., None], dscores[..., None], axis=2)
    # max over K
    dcube = np.zeros_like(cube)
    np.put_along_axis(dcube, c["k_arg"][:, None], drmap[:, None], axis=1)
    da2 = dcube.transpose(0, 3, 1, 2).reshape(b * m, hp.k * hp.l)

    dy2 = da2 * (c["y2"] > 0)
    dz2, dg2, db2 = _bn_backward(dy2, params["bn2_gamma"], c["c2"], train)
    grads = {
        "bn2_gamma": dg2, "bn2_beta": db2,
        "conv_w": dz2.T @ c["a1"], "conv_b": dz2.sum(axis=0),
    }
    da1 = dz2 @ params["conv_w"]
    dy1 = da1 * (c["y1"] > 0)
    dz1, dg1, db1 = _bn_backward(dy1, params["bn1_gamma"], c["c1"], train)
    grads.update({
        "bn1_gamma": dg1, "bn1_beta": db1,
        "fc_w": dz1.T @ c["rows"], "fc_b": dz1.sum(axis=0),
    })
    stats = None
    if train:
        n = b * m
        corr = n / (n - 1) if n > 1 else 1.0
        stats = {"bn1_mean": c["c1"][2], "bn1_var": c["c1"][3] * corr,
                 "bn2_mean": c["c2"][2], "bn2_var": c["c2"][3] * corr}
    return loss, grads, stats


def backward(bag, params: MimlParams, labels=None, mode: str = "eval") -> dict:
    """Gradient of the hinge loss of ``bag`` w.r.t. all trainable parameters."""
    if labels is not None:
        bag = BasisBag(bag.bases, labels, bag.clip_id)
    _, grads, _ = loss_and_grads(bag, params, mode)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.94
    lr_step_epochs: int = 5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    seed: int = 0
    patience: int = 0  # stop after this many epochs without validation gain; 0 = never

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step_epochs)


FULL_SCALE_TRAIN_CONFIG = TrainConfig(epochs=300, batch_size=256)


@dataclass
class TrainState:
    params: MimlParams
    m1: dict
    m2: dict
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)  # mean loss per epoch
    val_history: list = field(default_factory=list)
    best_params: MimlParams | None = None  # lowest validation loss so far
    best_epoch: int = -1

    @property
    def best_val(self) -> float:
        return self.val_history[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    @property
    def selected(self) -> MimlParams:
        """Best-validation parameters when a validation set was used, else the latest."""
        return self.best_params if self.best_params is not None else self.params

    @classmethod
    def fresh(cls, params: MimlParams) -> "TrainState":
        zeros = {k: np.zeros_like(params[k]) for k in PARAM_NAMES}
        return cls(params, zeros, {k: v.copy() for k, v in zeros.items()})


def adam_step(state: TrainState, grads: dict, lr: float, cfg: TrainConfig):
    state.step += 1
    t = state.step
    for k in PARAM_NAMES:
        g = grads[k]
        state.m1[k] = cfg.beta1 * state.m1[k] + (1 - cfg.beta1) * g
        state.m2[k] = cfg.beta2 * state.m2[k] + (1 - cfg.beta2) * g * g
        mhat = state.m1[k] / (1 - cfg.beta1 ** t)
        vhat = state.m2[k] / (1 - cfg.beta2 ** t)
        p = state.params.arrays[k]
        p -= lr * cfg.weight_decay * p
        p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _update_running(params: MimlParams, stats: dict, momentum: float):
    for k, v in stats.items():
        params.arrays[k] = (1 - momentum) * params.arrays[k] + momentum * v


def train(dataset, config: TrainConfig = TrainConfig(), hyper: Hyper | None = None,
          state: TrainState | None = None, epochs: int | None = None,
          on_epoch=None, val=None) -> TrainState:
    """Train with Adam (decoupled weight decay) and a step-decayed learning rate.

    Pass ``state`` to resume; ``epochs`` overrides how many further epochs to
    run (default: until ``config.epochs`` total). With a validation set ``val``
    the best epoch's parameters are kept in ``state.best_params`` and training
    stops early once ``config.patience`` epochs pass without improvement.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    for bag in dataset:
        if len(bag.labels) == 0:
            raise ValueError(f"bag {bag.clip_id!r} has no labels")
    if state is None:
        if hyper is None:
            m, f = dataset[0].bases.shape
            n_labels = 1 + max(max(b.labels.indices) for b in dataset)
            hyper = Hyper(l=n_labels, m=m, f=f)
        state = TrainState.fresh(init_params(hyper, config.seed))
    end = config.epochs if epochs is None else state.epoch + epochs
    n = len(dataset)
    val = list(val) if val is not None else []
    while state.epoch < end:
        if val and config.patience and state.epoch - 1 - state.best_epoch >= config.patience:
            log.info("no validation gain for %d epochs; stopping", config.patience)
            break
        rng = np.random.default_rng([config.seed, state.epoch])
        order = rng.permutation(n)
        lr = config.lr_at(state.epoch)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            loss, grads, stats = loss_and_grads(batch, state.params, "train")
            adam_step(state, grads, lr, config)
            _update_running(state.params, stats, config.bn_momentum)
            total += loss * len(batch)
            seen += len(batch)
        state.history.append(total / seen)
        log.info("epoch %d lr %.6f loss %.6f", state.epoch, lr, state.history[-1])
        if val:
            vl = evaluate_loss(val, state.params)
            state.val_history.append(vl)
            if vl < state.best_val:
                state.best_epoch, state.best_params = state.epoch, state.params.copy()
            log.info("epoch %d validation loss %.6f", state.epoch, vl)
        if on_epoch is not None:
            on_epoch(state)
        state.epoch += 1
    return state


def evaluate_loss(dataset, params: MimlParams) -> float:
    dataset = list(dataset)
    _, _, scores = forward_batch(dataset, params, "eval")
    return float(np.mean([hinge_loss(s, b.labels) for s, b in zip(scores, dataset)]))
