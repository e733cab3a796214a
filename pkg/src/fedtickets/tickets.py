"""Channel pruning masks, early drawing, similarity, and neuron overlap.

A mask is one boolean vector per prunable unit-scale layer; True keeps the
unit. Extraction ranks every prunable unit in the whole network by |scale|
and drops the global bottom floor(rate * total). Masks from consecutive
epochs feed a FIFO window; when the worst pairwise normalized Hamming
distance within a full window falls below a threshold the ticket has
stabilized and can be drawn early.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import (
    ConfigError,
    LayerCollapseError,
    ShapeMismatchError,
    UndefinedOverlapError,
)

MASK_FORMAT = "fedtickets-mask"
MASK_VERSION = 1


@dataclass(frozen=True)
class PruneMask:
    """Keep/drop flags per prunable layer, plus the prune rate that made it."""

    layers: tuple
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(np.asarray(v, dtype=bool) for v in self.layers))
        for v in self.layers:
            if v.ndim != 1:
                raise ShapeMismatchError("mask layer", "1-D", v.shape)
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError("mask.rate", "prune rate must lie in [0, 1)")

    @property
    def total_units(self) -> int:
        return int(sum(v.size for v in self.layers))

    @property
    def retained_units(self) -> int:
        return int(sum(int(v.sum()) for v in self.layers))

    def retained_set(self) -> frozenset:
        """Retained units as (layer, unit) pairs."""
        return frozenset(
            (li, ui) for li, v in enumerate(self.layers) for ui in np.flatnonzero(v)
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for v in self.layers:
            h.update(np.packbits(v).tobytes())
            h.update(str(v.size).encode())
        return h.hexdigest()


def drop_count(rate: float, total: int) -> int:
    """floor(rate * total) under decimal semantics (0.3 * 10 is exactly 3)."""
    return int(math.floor(round(rate * total, 9)))


def extract_mask(model: nn.ModelParams, rate: float) -> PruneMask:
    """One-shot global channel pruning by |scale| magnitude.

    All prunable units compete in one pool; the floor(rate * total) smallest
    |scale| values are dropped. Ties break deterministically: among equal
    magnitudes, lower (layer, unit) positions drop first. Emptying an entire
    layer is an error rather than a silent adjustment.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError("prune.rate", "prune rate must lie in [0, 1)")
    idxs = nn.prunable_layer_indices(model.arch)
    if not idxs:
        raise ConfigError("prune", "model has no prunable layers")
    mags, layer_of, unit_of = [], [], []
    for li, ai in enumerate(idxs):
        g = model.gammas[ai]
        mags.append(np.abs(g))
        layer_of.append(np.full(g.size, li))
        unit_of.append(np.arange(g.size))
    mags = np.concatenate(mags)
    layer_of = np.concatenate(layer_of)
    unit_of = np.concatenate(unit_of)
    n_drop = drop_count(rate, mags.size)
    order = np.lexsort((unit_of, layer_of, mags))  # magnitude, then position
    dropped = order[:n_drop]
    keep = np.ones(mags.size, dtype=bool)
    keep[dropped] = False
    layers = []
    offset = 0
    for ai in idxs:
        width = model.arch[ai].out_dim
        vec = keep[offset : offset + width]
        if not vec.any():
            raise LayerCollapseError(idxs.index(ai), rate)
        layers.append(vec.copy())
        offset += width
    return PruneMask(layers=tuple(layers), rate=rate)


def mask_similarity(a: PruneMask, b: PruneMask) -> float:
    """100 * (1 - hamming/total): percent of units the two masks agree on."""
    if len(a.layers) != len(b.layers):
        raise ShapeMismatchError("mask layers", len(a.layers), len(b.layers))
    ham = 0
    total = 0
    for va, vb in zip(a.layers, b.layers):
        if va.shape != vb.shape:
            raise ShapeMismatchError("mask layer", va.shape, vb.shape)
        ham += int(np.count_nonzero(va != vb))
        total += va.size
    if total == 0:
        raise ShapeMismatchError("mask", "nonempty", "empty")
    return 100.0 * (1.0 - ham / total)


def mask_distance(a: PruneMask, b: PruneMask) -> float:
    """Normalized Hamming distance in [0, 1]."""
    return 1.0 - mask_similarity(a, b) / 100.0


@dataclass(frozen=True)
class MaskWindow:
    """FIFO of the most recent masks used for stabilization detection."""

    capacity: int
    masks: tuple = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("eb.window", "window capacity must be >= 1")

    @property
    def full(self) -> bool:
        return len(self.masks) == self.capacity

    def push(self, mask: PruneMask) -> "MaskWindow":
        masks = (self.masks + (mask,))[-self.capacity :]
        return replace(self, masks=masks)


def eb_step(window: MaskWindow, mask: PruneMask, eps: float = 0.1):
    """Push a mask; report (new window, converged, max pairwise distance).

    Convergence requires a full window whose worst pairwise distance is
    below eps. With fewer than two masks the distance reports as 0.0 but
    convergence stays False until the window fills.
    """
    if eps <= 0:
        raise ConfigError("eb.eps", "threshold must be positive")
    new = window.push(mask)
    ms = new.masks
    max_dist = 0.0
    for i in range(len(ms)):
        for j in range(i + 1, len(ms)):
            d = mask_distance(ms[i], ms[j])
            if d > max_dist:
                max_dist = d
    converged = new.full and max_dist < eps
    return new, converged, max_dist


@dataclass(frozen=True)
class TicketDraw:
    """A drawn mask plus the 1-based epoch its training had completed."""

    mask: PruneMask
    epoch: int
    converged: bool


def draw_tickets(
    model: nn.ModelParams,
    dataset,
    config: nn.TrainConfig,
    rates,
    eb_window: int = 5,
    eb_eps: float = 0.1,
    early: bool = True,
):
    """Train once, drawing a ticket per prune rate.

    Each rate keeps its own FIFO window over the shared training trajectory
    (extraction reads scales without touching them, so sharing is exact).
    A rate's ticket freezes at its first stabilized epoch; rates that never
    stabilize, or all rates when early drawing is off, use the final epoch.
    Returns (trained params, {rate: TicketDraw}, loss history).
    """
    rates = list(rates)
    if not rates:
        raise ConfigError("prune.rates", "need at least one prune rate")
    windows = {r: MaskWindow(capacity=eb_window) for r in rates}
    draws: dict = {}

    def hook(epoch: int, params: nn.ModelParams) -> None:
        if not early:
            return
        for r in rates:
            if r in draws:
                continue
            m = extract_mask(params, r)
            windows[r], converged, _ = eb_step(windows[r], m, eb_eps)
            if converged:
                draws[r] = TicketDraw(mask=m, epoch=epoch + 1, converged=True)

    trained, history = nn.train(model, None, dataset, config, epoch_hook=hook)
    for r in rates:
        if r not in draws:
            draws[r] = TicketDraw(mask=extract_mask(trained, r), epoch=config.epochs, converged=False)
    return trained, draws, history


def draw_ticket(model, dataset, config, rate, eb_window=5, eb_eps=0.1, early=True):
    trained, draws, history = draw_tickets(
        model, dataset, config, [rate], eb_window=eb_window, eb_eps=eb_eps, early=early
    )
    return trained, draws[rate], history


def apply_mask(model: nn.ModelParams, mask: PruneMask) -> nn.ModelParams:
    """Zero every coordinate a mask kills, on a fresh copy.

    For a dropped unit u of the scale layer following layer L: scale[u], the
    producing row W_L[u, :], bias_L[u], the matching momenta, and every next
    parameterized layer weight that consumes unit u's output all become 0.
    Conv channels feeding a dense layer zero the flattened columns for that
    channel. Applying two masks in sequence keeps only coordinates both
    retain.
    """
    idxs = nn.prunable_layer_indices(model.arch)
    if len(mask.layers) != len(idxs):
        raise ShapeMismatchError("mask.layers", len(idxs), len(mask.layers))
    out = model.copy()
    shapes = nn.validate_arch(out.arch, out.input_shape)
    for li, ai in zip(range(len(idxs)), idxs):
        vec = mask.layers[li]
        width = out.arch[ai].out_dim
        if vec.shape != (width,):
            raise ShapeMismatchError(f"mask layer {li}", (width,), vec.shape)
        dead = ~vec
        if not dead.any():
            continue
        out.gammas[ai][dead] = 0.0
        out.g_mom[ai][dead] = 0.0
        prod = ai - 1  # validated: prunable unit-scale follows dense/conv2d
        out.weights[prod][dead] = 0.0
        out.biases[prod][dead] = 0.0
        out.w_mom[prod][dead] = 0.0
        out.b_mom[prod][dead] = 0.0
        # find the next layer with weights; zero the columns fed by dead units
        for nj in range(ai + 1, len(out.arch)):
            spec = out.arch[nj]
            if spec.kind == "conv2d":
                out.weights[nj][:, dead, :, :] = 0.0
                out.w_mom[nj][:, dead, :, :] = 0.0
                break
            if spec.kind in ("dense", "softmax-output"):
                in_shape = shapes[nj - 1] if nj > 0 else out.input_shape
                col_dead = np.broadcast_to(dead, in_shape).ravel()
                out.weights[nj][:, col_dead] = 0.0
                out.w_mom[nj][:, col_dead] = 0.0
                break
    return out


def neuron_overlap(reference: PruneMask, other: PruneMask) -> float:
    """Percent of reference-retained units also retained by `other`."""
    if len(reference.layers) != len(other.layers) or any(
        a.shape != b.shape for a, b in zip(reference.layers, other.layers)
    ):
        raise ShapeMismatchError("mask layers", "matching shapes", "mismatch")
    ref = reference.retained_set()
    if not ref:
        raise UndefinedOverlapError("reference mask retains no units")
    both = ref & other.retained_set()
    return 100.0 * len(both) / len(ref)


def overlap_categories(benign: PruneMask, backdoor: PruneMask) -> list:
    """Per layer, each unit tagged both / benign-only / backdoor-only / neither."""
    if len(benign.layers) != len(backdoor.layers):
        raise ShapeMismatchError("mask layers", len(benign.layers), len(backdoor.layers))
    out = []
    for vb, vk in zip(benign.layers, backdoor.layers):
        if vb.shape != vk.shape:
            raise ShapeMismatchError("mask layer", vb.shape, vk.shape)
        tags = []
        for b, k in zip(vb, vk):
            if b and k:
                tags.append("both")
            elif b:
                tags.append("benign-only")
            elif k:
                tags.append("backdoor-only")
            else:
                tags.append("neither")
        out.append(tags)
    return out


def save_mask(mask: PruneMask, path, seed: int = 0) -> None:
    doc = {
        "format": MASK_FORMAT,
        "version": MASK_VERSION,
        "rate": mask.rate,
        "seed": seed,
        "layers": [
            {"size": int(v.size), "bits": np.packbits(v).tobytes().hex()} for v in mask.layers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mask(path) -> PruneMask:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MASK_FORMAT:
        raise ConfigError(str(path), "not a mask file")
    layers = []
    for entry in doc["layers"]:
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(entry["bits"]), dtype=np.uint8))
        layers.append(bits[: entry["size"]].astype(bool))
    return PruneMask(layers=tuple(layers), rate=doc["rate"])
