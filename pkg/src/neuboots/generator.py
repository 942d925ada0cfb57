"""Neural bootstrap generator ``g(x, alpha) = M(F(x) * alpha)``.

``F`` is every layer of a :class:`~neuboots.nn.DenseNet` but the last and
``M`` is the last affine layer plus the output head. One training run under
randomly reweighted block losses yields a network that produces bootstrap
replicates of its predictions by plugging fresh block weights into ``M``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ShapeError
from .weights import BlockAssignment, BootstrapAlpha, expand_weights, sample_dirichlet_alpha

_versions = itertools.count(1)

AlphaSampler = Callable[[int, np.random.Generator], BootstrapAlpha]


class StaleCacheError(RuntimeError):
    """Cached features were computed by a different network version."""


@dataclass(frozen=True)
class GeneratorNet:
    net: nn.DenseNet
    assignment_seed: int | None = None
    version: int = field(default_factory=lambda: next(_versions))

    def __post_init__(self):
        if self.net.members:
            raise ShapeError("a generator wraps a single network")

    @property
    def S(self) -> int:
        """Number of blocks: the width of the final feature layer."""
        return self.net.sizes[-2]

    @property
    def task(self) -> str:
        return "classification" if self.net.output == "softmax" else "regression"


def make_generator(sizes, rng, *, hidden="relu", output="identity", gain=1.0) -> GeneratorNet:
    """Fresh generator; ``sizes[-2]`` becomes the number of blocks S."""
    return GeneratorNet(nn.init_net(sizes, rng, hidden=hidden, output=output, gain=gain))


def _alpha_array(alpha, S):
    a = np.asarray(alpha, dtype=float)
    if a.shape[-1] != S:
        raise ShapeError(f"alpha has length {a.shape[-1]}, generator has S={S}")
    return a


def generator_forward(gen: GeneratorNet, x, alpha) -> np.ndarray:
    return nn.forward(gen.net, x, feature_scale=_alpha_array(alpha, gen.S))


def generator_logits(gen: GeneratorNet, x, alpha) -> np.ndarray:
    return nn.logits(gen.net, x, feature_scale=_alpha_array(alpha, gen.S))


def default_loss(gen: GeneratorNet) -> str:
    return "cross_entropy" if gen.net.output == "softmax" else "mse"


def train(gen: GeneratorNet, x, y, assignment: BlockAssignment, cfg: nn.SgdConfig,
          rng: np.random.Generator, *, loss_kind: str | None = None,
          alpha_sampler: AlphaSampler = sample_dirichlet_alpha) -> tuple[GeneratorNet, list[float]]:
    """Train a generator with the block-weighted bootstrap loss.

    At the start of every epoch one ``alpha ~ S x Dirichlet(1,...,1)`` is
    drawn. For the whole epoch it both scales the final features and weights
    sample ``i``'s loss by ``alpha[u(i)]``. ``alpha_sampler`` exists so tests
    can freeze alpha at the all-ones vector.
    """
    x = np.asarray(x, dtype=float)
    if assignment.S != gen.S:
        raise ShapeError(f"assignment has {assignment.S} blocks, generator has S={gen.S}")
    if assignment.n != x.shape[0]:
        raise ShapeError(f"assignment covers {assignment.n} samples, data has {x.shape[0]}")
    net = gen.net.copy()

    def epoch_hook(epoch):
        alpha = np.asarray(alpha_sampler(gen.S, rng), dtype=float)
        return alpha, expand_weights(alpha, assignment)

    trace = nn.train_loop(net, x, y, cfg, rng, loss_kind or default_loss(gen), epoch_hook=epoch_hook)
    return GeneratorNet(net, gen.assignment_seed), [float(t) for t in trace]


@dataclass(frozen=True)
class CachedFeatures:
    phi: np.ndarray
    source_net_version: int


@dataclass(frozen=True)
class PredictionEnsemble:
    """``samples[b]`` is the b-th bootstrap prediction for every input.

    ``samples`` has shape ``(B, m, out)``: probabilities for classification,
    raw outputs for regression. ``logits`` holds the pre-head outputs.
    """

    samples: np.ndarray
    logits: np.ndarray | None = None

    @property
    def B(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def cache_features(gen: GeneratorNet, x) -> CachedFeatures:
    return CachedFeatures(nn.features(gen.net, x), gen.version)


def head_predict(gen: GeneratorNet, cache: CachedFeatures, alphas, *, chunk_elems: int = 1 << 22):
    """Head outputs for each row of ``alphas`` on cached features: ``(logits, outputs)``."""
    if cache.source_net_version != gen.version:
        raise StaleCacheError(
            f"features cached from net version {cache.source_net_version}, current is {gen.version}")
    alphas = np.atleast_2d(_alpha_array(alphas, gen.S))
    phi = cache.phi
    # chunk over draws so the (B, m, out) result is built a slice at a time
    step = max(1, chunk_elems // max(1, phi.shape[0] * gen.net.sizes[-1]))
    parts = []
    for start in range(0, alphas.shape[0], step):
        parts.append(nn.scaled_head_logits(gen.net, phi, alphas[start:start + step]))
    z = np.concatenate(parts, axis=0)
    return z, nn.apply_output(gen.net, z)


def draw_alphas(S: int, B: int, rng: np.random.Generator) -> np.ndarray:
    return sample_dirichlet_alpha(S, rng, size=B).alpha


def predict_bootstrap(gen: GeneratorNet, x, B: int, rng: np.random.Generator, *,
                      alphas=None) -> PredictionEnsemble:
    """B bootstrap predictions from one feature pass and B cheap head passes."""
    if B < 1:
        raise ValueError("B must be at least 1")
    if alphas is None:
        alphas = draw_alphas(gen.S, B, rng)
    z, out = head_predict(gen, cache_features(gen, x), alphas)
    return PredictionEnsemble(out, z)


def predict_bootstrap_naive(gen: GeneratorNet, x, B: int, rng: np.random.Generator, *,
                            alphas=None) -> PredictionEnsemble:
    """Reference path: B full forward passes, same alpha stream as the cached path."""
    if alphas is None:
        alphas = draw_alphas(gen.S, B, rng)
    z = np.stack([generator_logits(gen, x, a) for a in alphas])
    return PredictionEnsemble(nn.apply_output(gen.net, z), z)


def confidence_band(samples, level: float = 0.95):
    """Pointwise percentile band over the leading (bootstrap) axis.

    Quantiles use linear interpolation between order statistics (numpy's
    default, Hyndman-Fan type 7). Returns ``(lower, upper, mean)``.
    """
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    samples = np.asarray(samples, dtype=float)
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(samples, [tail, 1.0 - tail], axis=0)
    return lower, upper, samples.mean(axis=0)
