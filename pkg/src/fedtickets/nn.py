"""Minimal trainable network with per-unit scale factors and manual backprop.

Layers form a simple chain: dense / conv2d blocks, each optionally followed
by a prunable unit-scale layer (one learned multiplier per output unit or
channel), relu nonlinearities, and a terminal softmax-output classifier head.
All numerics are float64 and every stochastic step is a pure function of the
configured seed, so identical inputs reproduce bit-identical models.

Pruning masks act at the unit-scale layers: a dropped unit's multiplier is
forced to zero, which makes the unit contribute exactly zero downstream and
kills its gradients exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArchitectureError,
    ConfigError,
    EmptyDatasetError,
    ShapeMismatchError,
    TrainingDivergedError,
)

LAYER_KINDS = ("dense", "conv2d", "unit-scale", "relu", "softmax-output")

CHECKPOINT_FORMAT = "fedtickets-model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer in the chain.

    in_dim/out_dim are widths for dense and softmax-output, channel counts
    for conv2d, and the (equal) unit count for unit-scale and relu. Only
    unit-scale layers may be prunable; the softmax-output head never is.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    padding: int = 0
    prunable: bool = False


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum settings; `schedule` maps epoch starts to rates."""

    schedule: tuple[tuple[int, float], ...] = ((0, 0.1),)
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    l1_gamma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.schedule or self.schedule[0][0] != 0:
            raise ConfigError("train.schedule", "schedule must start at epoch 0")
        epochs_seen = [e for e, _ in self.schedule]
        if epochs_seen != sorted(set(epochs_seen)):
            raise ConfigError("train.schedule", "schedule epochs must be strictly increasing")
        if any(rate <= 0 for _, rate in self.schedule):
            raise ConfigError("train.schedule", "learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "batch size must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "epoch count must be nonnegative")
        if self.l1_gamma < 0:
            raise ConfigError("train.l1_gamma", "L1 penalty must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum", "momentum must lie in [0, 1)")


def schedule_rate(schedule, epoch: int) -> float:
    """Learning rate in effect at `epoch` (last entry whose start <= epoch)."""
    if epoch < 0:
        raise ConfigError("train.schedule", f"epoch {epoch} precedes the schedule")
    rate = schedule[0][1]
    for start, r in schedule:
        if epoch >= start:
            rate = r
    return rate


@dataclass
class ModelParams:
    """All trainable state: weights, biases, unit scales, momentum buffers."""

    arch: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    weights: list
    biases: list
    gammas: list
    w_mom: list
    b_mom: list
    g_mom: list
    seed: int = 0

    def copy(self) -> "ModelParams":
        dup = lambda xs: [None if x is None else x.copy() for x in xs]
        return ModelParams(
            arch=self.arch,
            input_shape=self.input_shape,
            weights=dup(self.weights),
            biases=dup(self.biases),
            gammas=dup(self.gammas),
            w_mom=dup(self.w_mom),
            b_mom=dup(self.b_mom),
            g_mom=dup(self.g_mom),
            seed=self.seed,
        )

    @property
    def num_classes(self) -> int:
        return self.arch[-1].out_dim

    def zero_momentum(self) -> None:
        for buf in (self.w_mom, self.b_mom, self.g_mom):
            for arr in buf:
                if arr is not None:
                    arr.fill(0.0)


@dataclass
class Gradients:
    """Per-layer gradients mirroring ModelParams shapes."""

    weights: list
    biases: list
    gammas: list


def validate_arch(arch, input_shape) -> list:
    """Check the layer chain and return each layer's output shape.

    Rules: the chain ends with exactly one softmax-output head; a prunable
    unit-scale layer directly follows the dense/conv2d layer it scales; only
    unit-scale layers carry the prunable flag.
    """
    arch = tuple(arch)
    if not arch:
        raise ArchitectureError("empty layer list")
    shapes = []
    shape = tuple(input_shape)
    for i, spec in enumerate(arch):
        if spec.kind not in LAYER_KINDS:
            raise ArchitectureError(f"layer {i}: unknown kind {spec.kind!r}")
        if spec.prunable and spec.kind != "unit-scale":
            raise ArchitectureError(f"layer {i}: only unit-scale layers are prunable")
        if spec.kind in ("dense", "softmax-output"):
            flat = int(np.prod(shape))
            if flat != spec.in_dim:
                raise ArchitectureError(
                    f"layer {i} ({spec.kind}): in_dim {spec.in_dim} != incoming size {flat}"
                )
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ArchitectureError(f"layer {i} (conv2d): needs HxWxC input, got {shape}")
            h, w, c = shape
            if c != spec.in_dim:
                raise ArchitectureError(
                    f"layer {i} (conv2d): in_dim {spec.in_dim} != incoming channels {c}"
                )
            if spec.kernel < 1:
                raise ArchitectureError(f"layer {i} (conv2d): kernel must be >= 1")
            ho = h + 2 * spec.padding - spec.kernel + 1
            wo = w + 2 * spec.padding - spec.kernel + 1
            if ho < 1 or wo < 1:
                raise ArchitectureError(f"layer {i} (conv2d): kernel does not fit input {shape}")
            shape = (ho, wo, spec.out_dim)
        elif spec.kind in ("unit-scale", "relu"):
            width = shape[-1]
            if spec.in_dim != width or spec.out_dim != width:
                raise ArchitectureError(
                    f"layer {i} ({spec.kind}): width {spec.in_dim} != incoming units {width}"
                )
            if spec.kind == "unit-scale" and spec.prunable:
                prev = arch[i - 1] if i > 0 else None
                if prev is None or prev.kind not in ("dense", "conv2d"):
                    raise ArchitectureError(
                        f"layer {i}: prunable unit-scale must directly follow dense or conv2d"
                    )
        if spec.kind == "softmax-output" and i != len(arch) - 1:
            raise ArchitectureError("softmax-output must be the final layer")
        shapes.append(shape)
    if arch[-1].kind != "softmax-output":
        raise ArchitectureError("the final layer must be softmax-output")
    return shapes


def prunable_layer_indices(arch) -> list:
    return [i for i, s in enumerate(arch) if s.kind == "unit-scale" and s.prunable]


def prunable_widths(arch) -> list:
    return [arch[i].out_dim for i in prunable_layer_indices(arch)]


def init_params(arch, input_shape, seed: int) -> ModelParams:
    """Fresh parameters: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), scales 0.5."""
    arch = tuple(arch)
    validate_arch(arch, input_shape)
    rng = np.random.default_rng(seed)
    weights, biases, gammas = [], [], []
    for spec in arch:
        if spec.kind in ("dense", "softmax-output"):
            bound = 1.0 / math.sqrt(spec.in_dim)
            weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
            biases.append(rng.uniform(-bound, bound, size=spec.out_dim))
            gammas.append(None)
        elif spec.kind == "conv2d":
            fan_in = spec.in_dim * spec.kernel * spec.kernel
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(
                rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim, spec.kernel, spec.kernel))
            )
            biases.append(rng.uniform(-bound, bound, size=spec.out_dim))
            gammas.append(None)
        elif spec.kind == "unit-scale":
            weights.append(None)
            biases.append(None)
            gammas.append(np.full(spec.out_dim, 0.5))
        else:
            weights.append(None)
            biases.append(None)
            gammas.append(None)
    zeros = lambda xs: [None if x is None else np.zeros_like(x) for x in xs]
    return ModelParams(
        arch=arch,
        input_shape=tuple(input_shape),
        weights=weights,
        biases=biases,
        gammas=gammas,
        w_mom=zeros(weights),
        b_mom=zeros(biases),
        g_mom=zeros(gammas),
        seed=seed,
    )


def _mask_vectors(model: ModelParams, mask) -> dict:
    """Map arch layer index -> float 0/1 vector for prunable unit-scale layers."""
    idxs = prunable_layer_indices(model.arch)
    if mask is None:
        return {i: None for i in idxs}
    layers = mask.layers
    if len(layers) != len(idxs):
        raise ShapeMismatchError("mask.layers", len(idxs), len(layers))
    out = {}
    for i, vec in zip(idxs, layers):
        width = model.arch[i].out_dim
        if vec.shape != (width,):
            raise ShapeMismatchError(f"mask layer for arch[{i}]", (width,), vec.shape)
        out[i] = np.asarray(vec, dtype=float)
    return out


def _check_batch(model: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    if batch.shape[1:] != model.input_shape:
        raise ShapeMismatchError("batch", ("N",) + model.input_shape, batch.shape)
    return batch


def _conv_forward(x, w, b, padding):
    n, h, wd, _ = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    ho = h + 2 * padding - k + 1
    wo = wd + 2 * padding - k + 1
    y = np.broadcast_to(b, (n, ho, wo, cout)).copy()
    for di in range(k):
        for dj in range(k):
            y += np.einsum("nijc,oc->nijo", xp[:, di : di + ho, dj : dj + wo, :], w[:, :, di, dj])
    return y


def _conv_backward(x, w, padding, dy):
    n, h, wd, _ = x.shape
    k = w.shape[2]
    ho, wo = dy.shape[1], dy.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 1, 2))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di : di + ho, dj : dj + wo, :]
            dw[:, :, di, dj] = np.einsum("nijo,nijc->oc", dy, patch)
            dxp[:, di : di + ho, dj : dj + wo, :] += np.einsum("nijo,oc->nijc", dy, w[:, :, di, dj])
    dx = dxp[:, padding : padding + h, padding : padding + wd, :] if padding else dxp
    return dx, dw, db


def _forward_tape(model: ModelParams, mask, batch):
    """Run the chain, keeping every layer input for backprop."""
    mvecs = _mask_vectors(model, mask)
    a = _check_batch(model, batch)
    tape = []
    for i, spec in enumerate(model.arch):
        tape.append(a)
        if spec.kind in ("dense", "softmax-output"):
            flat = a.reshape(a.shape[0], -1)
            a = flat @ model.weights[i].T + model.biases[i]
        elif spec.kind == "conv2d":
            a = _conv_forward(a, model.weights[i], model.biases[i], spec.padding)
        elif spec.kind == "unit-scale":
            g = model.gammas[i]
            if spec.prunable and mvecs.get(i) is not None:
                g = g * mvecs[i]
            a = a * g
        elif spec.kind == "relu":
            a = np.maximum(a, 0.0)
    return a, tape, mvecs


def forward(model: ModelParams, mask, batch) -> np.ndarray:
    """Logits for a batch; `mask` of None means the dense (unpruned) network."""
    logits, _, _ = _forward_tape(model, mask, batch)
    return logits


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_grads(model: ModelParams, mask, batch, labels, l1_gamma: float = 0.0):
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) != len(batch):
        raise ShapeMismatchError("labels", (len(batch),), labels.shape)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.num_classes:
        raise ConfigError("labels", f"labels must lie in [0, {model.num_classes})")
    logits, tape, mvecs = _forward_tape(model, mask, batch)
    n = len(labels)
    loss = ce_loss(logits, labels)

    delta = _softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    gw = [None] * len(model.arch)
    gb = [None] * len(model.arch)
    gg = [None] * len(model.arch)
    for i in range(len(model.arch) - 1, -1, -1):
        spec = model.arch[i]
        a_in = tape[i]
        if spec.kind in ("dense", "softmax-output"):
            flat = a_in.reshape(a_in.shape[0], -1)
            gw[i] = delta.T @ flat
            gb[i] = delta.sum(axis=0)
            delta = (delta @ model.weights[i]).reshape(a_in.shape)
        elif spec.kind == "conv2d":
            delta, gw[i], gb[i] = _conv_backward(a_in, model.weights[i], spec.padding, delta)
        elif spec.kind == "unit-scale":
            g = model.gammas[i]
            mvec = mvecs.get(i) if spec.prunable else None
            axes = tuple(range(delta.ndim - 1))
            dgamma = (delta * a_in).sum(axis=axes)
            g_eff = g if mvec is None else g * mvec
            if mvec is not None:
                dgamma = dgamma * mvec
            if l1_gamma > 0 and spec.prunable:
                pen = l1_gamma * np.sign(g)
                if mvec is not None:
                    pen = pen * mvec
                dgamma = dgamma + pen
                loss += l1_gamma * float(np.abs(g if mvec is None else g * mvec).sum())
            gg[i] = dgamma
            delta = delta * g_eff
        elif spec.kind == "relu":
            delta = delta * (a_in > 0)
    return loss, Gradients(weights=gw, biases=gb, gammas=gg)


def backward(model: ModelParams, mask, batch, labels, l1_gamma: float = 0.0) -> Gradients:
    """Gradients of the training objective (cross-entropy plus optional L1 on scales)."""
    _, grads = _loss_and_grads(model, mask, batch, labels, l1_gamma)
    return grads


def sgd_step(model: ModelParams, grads: Gradients, config: TrainConfig, epoch: int) -> ModelParams:
    """One momentum-SGD update, in place: v <- mu v + g; theta <- theta - lr v."""
    lr = schedule_rate(config.schedule, epoch)
    mu = config.momentum
    for params, moms, gs in (
        (model.weights, model.w_mom, grads.weights),
        (model.biases, model.b_mom, grads.biases),
        (model.gammas, model.g_mom, grads.gammas),
    ):
        for i, g in enumerate(gs):
            if g is None:
                continue
            moms[i] *= mu
            moms[i] += g
            params[i] -= lr * moms[i]
    return model


def _dataset_arrays(dataset):
    images = getattr(dataset, "images", None)
    labels = getattr(dataset, "labels", None)
    if images is None or labels is None:
        images, labels = dataset
    return np.asarray(images), np.asarray(labels)


def train(model: ModelParams, mask, dataset, config: TrainConfig, epoch_hook=None):
    """Train a copy of `model` for config.epochs; returns (params, loss history).

    Minibatch order each epoch is a pure function of (config.seed, epoch), so
    the result is bit-identical for identical arguments. `epoch_hook(epoch,
    params)` is called read-only after each epoch (used for early ticket
    drawing); it must not mutate the params.
    """
    config.validate()
    images, labels = _dataset_arrays(dataset)
    if len(images) == 0:
        raise EmptyDatasetError("training dataset is empty")
    out = model.copy()
    _mask_vectors(out, mask)  # validate shape pairing up front
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, epoch]))
        order = rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _loss_and_grads(out, mask, images[idx], labels[idx], config.l1_gamma)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            sgd_step(out, grads, config, epoch)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
        if epoch_hook is not None:
            epoch_hook(epoch, out)
    return out, history


def predict(model: ModelParams, mask, images, chunk: int = 512) -> np.ndarray:
    """Argmax class per image (ties resolve to the lowest class index)."""
    images = np.asarray(images, dtype=float)
    outs = []
    for start in range(0, len(images), chunk):
        logits = forward(model, mask, images[start : start + chunk])
        outs.append(np.argmax(logits, axis=1))
    return np.concatenate(outs) if outs else np.zeros(0, dtype=int)


def save_model(model: ModelParams, path) -> None:
    """Write a versioned JSON checkpoint; float64 round-trips bit-exactly."""
    flat = lambda xs: [None if x is None else x.ravel().tolist() for x in xs]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "layers": [
            {
                "kind": s.kind,
                "in_dim": s.in_dim,
                "out_dim": s.out_dim,
                "kernel": s.kernel,
                "padding": s.padding,
                "prunable": s.prunable,
            }
            for s in model.arch
        ],
        "params": {
            "weights": flat(model.weights),
            "biases": flat(model.biases),
            "gammas": flat(model.gammas),
            "w_mom": flat(model.w_mom),
            "b_mom": flat(model.b_mom),
            "g_mom": flat(model.g_mom),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(str(path), "not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(str(path), f"unsupported checkpoint version {doc.get('version')}")
    arch = tuple(LayerSpec(**d) for d in doc["layers"])
    input_shape = tuple(doc["input_shape"])
    blank = init_params(arch, input_shape, seed=doc["seed"])

    def restore(flats, templates):
        out = []
        for flat_vals, tmpl in zip(flats, templates):
            if flat_vals is None:
                out.append(None)
            else:
                arr = np.asarray(flat_vals, dtype=float)
                if tmpl is None or arr.size != tmpl.size:
                    raise ConfigError(str(path), "checkpoint arrays do not match layer specs")
                out.append(arr.reshape(tmpl.shape))
        return out

    p = doc["params"]
    return ModelParams(
        arch=arch,
        input_shape=input_shape,
        weights=restore(p["weights"], blank.weights),
        biases=restore(p["biases"], blank.biases),
        gammas=restore(p["gammas"], blank.gammas),
        w_mom=restore(p["w_mom"], blank.w_mom),
        b_mom=restore(p["b_mom"], blank.b_mom),
        g_mom=restore(p["g_mom"], blank.g_mom),
        seed=doc["seed"],
    )
