"""Reference uncertainty methods: standard bootstrap, random-weight bootstrap,
final-layer MC dropout and a plain independent-initialization ensemble.

Ensembles are trained as one stacked network (leading member axis), which
gives every member its own initialization, data and shuffle order while
paying Python overhead once per step instead of once per member.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericalError
from .generator import PredictionEnsemble
from .weights import sample_resample_indices, sample_rwb_weights

METHOD_TAGS = ("standard_bootstrap", "rwb", "deep_ensemble_plain")


@dataclass(frozen=True)
class ArchSpec:
    sizes: tuple[int, ...]
    hidden: str | tuple[str, ...] = "relu"
    output: str = "identity"
    gain: float = 1.0

    def init(self, rng, members=()):
        return nn.init_net(self.sizes, rng, hidden=self.hidden, output=self.output,
                           members=members, gain=self.gain)

    @property
    def loss_kind(self) -> str:
        return "cross_entropy" if self.output == "softmax" else "mse"


@dataclass
class EnsembleOfNets:
    stacked: nn.DenseNet
    method_tag: str

    def __post_init__(self):
        if self.method_tag not in METHOD_TAGS:
            raise ValueError(f"unknown method tag {self.method_tag!r}")

    @property
    def members(self) -> list[nn.DenseNet]:
        return self.stacked.unstack()

    def __len__(self) -> int:
        return self.stacked.members[0]


def _train_stacked(arch, x, y, cfg, rng, K, *, weights=None, stacked_data=False, member_init=None):
    net = member_init if member_init is not None else arch.init(rng, members=(K,))
    try:
        nn.train_loop(net, x, y, cfg, rng, arch.loss_kind, sample_weights=weights, stacked_data=stacked_data)
    except NumericalError as exc:
        raise NumericalError(str(exc), batch=exc.batch, epoch=exc.epoch, step=exc.step,
                             member=_first_bad_member(net)) from exc
    return net


def _first_bad_member(net):
    """First member with a non-finite or diverged parameter (the training loop's own test)."""
    bad = np.zeros(net.members, dtype=bool)
    for p in net.params():
        ok = np.isfinite(p) & (np.abs(p) < nn.MAX_PARAM)
        bad |= ~ok.reshape(net.members + (-1,)).all(axis=-1)
    return int(np.argmax(bad)) if bad.any() else None


def standard_bootstrap_train(arch: ArchSpec, x, y, B: int, cfg: nn.SgdConfig, rng: np.random.Generator,
                             *, resample=None) -> EnsembleOfNets:
    """B networks, each fit to an i.i.d. with-replacement resample of size n.

    ``resample`` overrides the ``(B, n)`` index matrix (tests use the identity).
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    idx = sample_resample_indices(len(x), rng, size=B) if resample is None else np.asarray(resample)
    net = _train_stacked(arch, x[idx], y[idx], cfg, rng, B, stacked_data=True)
    return EnsembleOfNets(net, "standard_bootstrap")


def rwb_train(arch: ArchSpec, x, y, B: int, cfg: nn.SgdConfig, rng: np.random.Generator,
              *, weights=None) -> EnsembleOfNets:
    """B networks, each trained once under a fixed ``n x Dirichlet(1,...,1)`` weight vector."""
    if B < 1:
        raise ValueError("B must be at least 1")
    w = sample_rwb_weights(len(x), rng, size=B) if weights is None else np.asarray(weights, dtype=float)
    net = _train_stacked(arch, x, y, cfg, rng, B, weights=w)
    return EnsembleOfNets(net, "rwb")


def deep_ensemble_train(arch: ArchSpec, x, y, K: int, cfg: nn.SgdConfig, rng: np.random.Generator) -> EnsembleOfNets:
    """K independently initialized networks trained on the full data."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return EnsembleOfNets(_train_stacked(arch, x, y, cfg, rng, K), "deep_ensemble_plain")


def ensemble_predict(ens: EnsembleOfNets, x) -> PredictionEnsemble:
    z = nn.logits(ens.stacked, x)
    return PredictionEnsemble(nn.apply_output(ens.stacked, z), z)


# -- MC dropout ---------------------------------------------------------------

@dataclass
class DropoutPredictor:
    """Network with inverted dropout on the final feature layer only."""

    net: nn.DenseNet
    p: float

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError(f"dropout probability must lie in (0, 1), got {self.p}")


def dropout_mask(shape, p, rng):
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout_train(arch: ArchSpec, x, y, p: float, cfg: nn.SgdConfig, rng: np.random.Generator) -> DropoutPredictor:
    net = arch.init(rng)
    S = arch.sizes[-2]
    nn.train_loop(net, x, y, cfg, rng, arch.loss_kind,
                  batch_hook=lambda idx: dropout_mask((idx.shape[-1], S), p, rng))
    return DropoutPredictor(net, p)


def mc_dropout_predict(pred: DropoutPredictor, x, B: int, rng: np.random.Generator) -> PredictionEnsemble:
    """B full stochastic forward passes, a fresh Bernoulli(1-p) mask per pass and input."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    S = pred.net.sizes[-2]
    z = np.stack([nn.logits(pred.net, x, feature_scale=dropout_mask((len(x), S), pred.p, rng))
                  for _ in range(B)])
    return PredictionEnsemble(nn.apply_output(pred.net, z), z)


def deterministic_predict(pred: DropoutPredictor, x) -> np.ndarray:
    return nn.forward(pred.net, x)
