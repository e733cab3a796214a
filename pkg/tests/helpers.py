"""Shared builders for small models, masks, and datasets used across tests."""

import numpy as np

from fedtickets import nn
from fedtickets.data import generate_dataset
from fedtickets.tickets import PruneMask

L = nn.LayerSpec


def dense_arch(in_dim, widths, classes):
    layers = []
    w_in = in_dim
    for w in widths:
        layers += [
            L("dense", w_in, w),
            L("unit-scale", w, w, prunable=True),
            L("relu", w, w),
        ]
        w_in = w
    layers.append(L("softmax-output", w_in, classes))
    return tuple(layers)


def make_model(widths=(6,), side=8, channels=1, classes=3, seed=0):
    arch = dense_arch(side * side * channels, widths, classes)
    return nn.init_params(arch, (side, side, channels), seed=seed)


def model_with_gammas(*gamma_layers, classes=2, seed=0):
    """A dense chain whose prunable scale vectors are set to the given values."""
    widths = tuple(len(g) for g in gamma_layers)
    arch = dense_arch(1, widths, classes)
    params = nn.init_params(arch, (1,), seed=seed)
    for ai, g in zip(nn.prunable_layer_indices(arch), gamma_layers):
        params.gammas[ai][:] = np.asarray(g, dtype=float)
    return params


def mask_of(*layers, rate=0.0):
    return PruneMask(layers=tuple(np.asarray(v, dtype=bool) for v in layers), rate=rate)


def flat_params(params):
    """Every parameter value as one vector, for bit-level comparisons."""
    out = []
    for store in (params.weights, params.biases, params.gammas):
        for arr in store:
            if arr is not None:
                out.append(arr.ravel())
    return np.concatenate(out)


def tiny_blobs(classes=3, per_class=12, size=8, seed=5, split="train"):
    return generate_dataset(
        classes, per_class, size, seed=seed, channels=1,
        split=split, noise=0.12, jitter=1.0,
    )
