"""Copy the first k hidden layers of a trained parent network into a child network."""

import itertools
from dataclasses import dataclass

import numpy as np

from .nnet import Network, init_layer

DEFAULT_XS = (0.0, 0.25, 1.0)


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class TransferConfig:
    k: int
    x: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise TransferError("k must be a nonnegative integer, got %r" % (self.k,))
        if not self.x >= 0:
            raise TransferError("lr multiplier x must be >= 0, got %r" % (self.x,))
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "x", float(self.x))

    @property
    def label(self):
        return "k%d_x%g" % (self.k, self.x)


def transfer_weights(parent, child_specs, cfg, input_dim=None):
    """Child network whose layers 0..k-1 are exact copies of the parent's.

    Copied layers get lr_multiplier x; the rest are freshly initialized from
    cfg.seed with multiplier 1. The output layer is never copied. The child
    input dim defaults to the parent's.
    """
    child_specs = list(child_specs)
    input_dim = parent.input_dim if input_dim is None else int(input_dim)
    k = cfg.k
    if k > len(parent.layers) - 1:
        raise TransferError("k=%d exceeds the %d transferable parent layers" % (k, len(parent.layers) - 1))
    if k > len(child_specs) - 1:
        raise TransferError("k=%d exceeds the %d hidden child layers" % (k, len(child_specs) - 1))
    if k > 0 and input_dim != parent.input_dim:
        raise TransferError("child input dim %d differs from parent %d" % (input_dim, parent.input_dim))
    for i in range(k):
        if child_specs[i] != parent.layers[i].spec:
            raise TransferError("layer %d: child spec %s does not match parent %s"
                                % (i, child_specs[i], parent.layers[i].spec))

    rng = np.random.default_rng(cfg.seed)
    layers = []
    d = input_dim
    for i, spec in enumerate(child_specs):
        if i < k:
            layer = parent.layers[i].copy()
            layer.lr_multiplier = cfg.x
        else:
            layer = init_layer(spec, d, rng)
        layers.append(layer)
        d = spec.output_dim
    return Network(layers, input_dim)


def build_transfer_grid(ks, xs=DEFAULT_XS, seed=0):
    ks, xs = list(ks), list(xs)
    if not ks or not xs:
        raise TransferError("grid lists must be nonempty")
    return [TransferConfig(k, x, seed) for k, x in itertools.product(ks, xs)]
