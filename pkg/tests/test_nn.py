"""Network core: forward/backward correctness, SGD mechanics, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtickets import nn
from fedtickets.errors import (
    ArchitectureError,
    ConfigError,
    EmptyDatasetError,
    TrainingDivergedError,
)
from helpers import dense_arch, flat_params, make_model, mask_of, model_with_gammas

L = nn.LayerSpec


def test_zero_weight_model_is_uniform():
    model = make_model(widths=(6,), classes=4)
    for store in (model.weights, model.biases, model.gammas):
        for arr in store:
            if arr is not None:
                arr.fill(0.0)
    x = np.random.default_rng(0).random((5, 8, 8, 1))
    logits = nn.forward(model, None, x)
    assert np.array_equal(logits, np.zeros((5, 4)))
    labels = np.array([0, 1, 2, 3, 0])
    assert nn.ce_loss(logits, labels) == math.log(4)


def test_full_mask_matches_no_mask():
    model = make_model(widths=(5, 4))
    x = np.random.default_rng(1).random((3, 8, 8, 1))
    full = mask_of(np.ones(5), np.ones(4), rate=0.0)
    assert np.array_equal(nn.forward(model, None, x), nn.forward(model, full, x))


def test_masked_unit_logit_exactly_zero():
    # dense W=[[1,2],[3,4]] into an identity readout: dropping unit 0 pins logit 0 at 0
    arch = dense_arch(2, (2,), 2)
    model = nn.init_params(arch, (2,), seed=0)
    model.weights[0][:] = [[1.0, 2.0], [3.0, 4.0]]
    model.biases[0][:] = 0.0
    model.gammas[1][:] = 1.0
    model.weights[3][:] = np.eye(2)
    model.biases[3][:] = 0.0
    mask = mask_of([False, True], rate=0.5)
    x = np.random.default_rng(2).random((8, 2))
    logits = nn.forward(model, mask, x)
    assert np.array_equal(logits[:, 0], np.zeros(8))


def test_mask_zero_absorption():
    """Perturbing anything that feeds a dead unit leaves the logits bitwise unchanged."""
    model = make_model(widths=(6,), classes=3, seed=9)
    mask = mask_of([True, False, True, False, True, True], rate=0.0)
    x = np.random.default_rng(3).random((4, 8, 8, 1))
    before = nn.forward(model, mask, x)
    dead = ~mask.layers[0]
    model.weights[0][dead, :] += 17.0
    model.biases[0][dead] -= 4.0
    model.gammas[1][dead] = 1e9
    assert np.array_equal(before, nn.forward(model, mask, x))


def test_masked_unit_gradients_zero():
    model = make_model(widths=(6,), classes=3, seed=4)
    mask = mask_of([True, True, False, True, False, True], rate=0.0)
    x = np.random.default_rng(4).random((5, 8, 8, 1))
    y = np.array([0, 1, 2, 0, 1])
    grads = nn.backward(model, mask, x, y, l1_gamma=0.1)
    dead = ~mask.layers[0]
    assert not grads.weights[0][dead, :].any()
    assert not grads.biases[0][dead].any()
    assert not grads.gammas[1][dead].any()


def _fd_relative_error(params, mask, images, labels, l1, h=1e-5):
    grads = nn.backward(params, mask, images, labels, l1_gamma=l1)
    idxs = nn.prunable_layer_indices(params.arch)

    def total_loss():
        loss = nn.ce_loss(nn.forward(params, mask, images), labels)
        for li, ai in enumerate(idxs):
            g = params.gammas[ai]
            vec = np.ones_like(g) if mask is None else mask.layers[li].astype(float)
            loss += l1 * float(np.abs(g * vec).sum())
        return loss

    analytic, numeric = [], []
    for store, gstore in (
        (params.weights, grads.weights),
        (params.biases, grads.biases),
        (params.gammas, grads.gammas),
    ):
        for arr, g in zip(store, gstore):
            if arr is None:
                continue
            analytic.append(np.asarray(g).ravel().copy())
            flat = arr.ravel()
            fd = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = total_loss()
                flat[i] = orig - h
                dn = total_loss()
                flat[i] = orig
                fd[i] = (up - dn) / (2 * h)
            numeric.append(fd)
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    return float(np.linalg.norm(a - n)) / max(float(np.linalg.norm(n)), 1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    for trial in range(5):
        model = make_model(widths=(4,), side=2, classes=3, seed=trial)
        x = rng.random((3, 2, 2, 1))
        y = rng.integers(0, 3, 3)
        mask = mask_of(rng.random(4) < 0.7, rate=0.0) if trial % 2 else None
        if mask is not None and not mask.layers[0].any():
            mask = None
        l1 = 0.1 if trial % 2 == 0 else 0.0
        assert _fd_relative_error(model, mask, x, y, l1) <= 1e-3


def test_sgd_plain_step():
    model = model_with_gammas([0.0, 0.0])
    grads = nn.Gradients(
        weights=[None] * len(model.arch),
        biases=[None] * len(model.arch),
        gammas=[None, np.array([1.0, -2.0]), None, None],
    )
    cfg = nn.TrainConfig(schedule=((0, 0.1),), momentum=0.0)
    nn.sgd_step(model, grads, cfg, epoch=0)
    assert model.gammas[1] == pytest.approx([-0.1, 0.2])


def test_sgd_momentum_two_steps():
    # v1 = 1, v2 = 0.9 + 1 = 1.9; theta = -0.1 * (1 + 1.9) = -0.29
    model = model_with_gammas([0.0])
    grads = nn.Gradients(
        weights=[None] * len(model.arch),
        biases=[None] * len(model.arch),
        gammas=[None, np.array([1.0]), None, None],
    )
    cfg = nn.TrainConfig(schedule=((0, 0.1),), momentum=0.9)
    nn.sgd_step(model, grads, cfg, epoch=0)
    nn.sgd_step(model, grads, cfg, epoch=0)
    assert model.gammas[1][0] == pytest.approx(-0.29)


def test_schedule_lookup():
    schedule = ((0, 0.1), (2, 0.01))
    assert nn.schedule_rate(schedule, 0) == 0.1
    assert nn.schedule_rate(schedule, 1) == 0.1
    assert nn.schedule_rate(schedule, 2) == 0.01
    assert nn.schedule_rate(schedule, 50) == 0.01
    with pytest.raises(ConfigError):
        nn.schedule_rate(schedule, -1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"schedule": ((1, 0.1),)},
        {"schedule": ((0, 0.1), (5, -0.2))},
        {"schedule": ((0, 0.1), (5, 0.2), (5, 0.3))},
        {"batch_size": 0},
        {"epochs": -1},
        {"l1_gamma": -0.5},
        {"momentum": 1.0},
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        nn.TrainConfig(**kwargs).validate()


def test_train_zero_epochs_unchanged(blobs3):
    model = make_model(widths=(6,))
    cfg = nn.TrainConfig(schedule=((0, 0.05),), epochs=0, seed=3)
    out, history = nn.train(model, None, blobs3, cfg)
    assert history == []
    assert np.array_equal(flat_params(out), flat_params(model))
    assert out is not model


def test_train_deterministic(blobs3):
    cfg = nn.TrainConfig(schedule=((0, 0.05),), epochs=3, batch_size=8, seed=11)
    runs = []
    for _ in range(2):
        model = make_model(widths=(6,), seed=2)
        out, history = nn.train(model, None, blobs3, cfg)
        runs.append((flat_params(out), history))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_train_empty_dataset():
    model = make_model()
    empty = (np.zeros((0, 8, 8, 1)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyDatasetError):
        nn.train(model, None, empty, nn.TrainConfig(schedule=((0, 0.1),), epochs=1))


def test_train_divergence_raises():
    model = model_with_gammas([0.5] * 4, [0.5] * 3, seed=1)
    rng = np.random.default_rng(0)
    ds = (rng.random((12, 1)), rng.integers(0, 2, 12))
    cfg = nn.TrainConfig(schedule=((0, 1e200),), momentum=0.9, batch_size=4, epochs=5, seed=1)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as exc:
        nn.train(model, None, ds, cfg)
    assert exc.value.epoch >= 0


def test_train_learns_separable_task():
    from helpers import tiny_blobs

    ds = tiny_blobs(classes=2, per_class=20, seed=3)
    model = make_model(widths=(8,), classes=2, seed=3)
    cfg = nn.TrainConfig(schedule=((0, 0.08),), epochs=10, batch_size=8, seed=7)
    trained, _ = nn.train(model, None, ds, cfg)
    acc = 100.0 * np.mean(nn.predict(trained, None, ds.images) == ds.labels)
    assert acc >= 99.0


def test_masked_training_keeps_dead_units_dead(blobs3):
    model = make_model(widths=(6,), seed=8)
    mask = mask_of([True, False, True, True, False, True], rate=0.0)
    from fedtickets.tickets import apply_mask

    start = apply_mask(model, mask)
    cfg = nn.TrainConfig(schedule=((0, 0.05),), epochs=2, batch_size=8, seed=5)
    trained, _ = nn.train(start, mask, blobs3, cfg)
    dead = ~mask.layers[0]
    assert not trained.gammas[1][dead].any()
    assert not trained.weights[0][dead, :].any()
    assert not trained.biases[0][dead].any()


def test_predict_tie_breaks_to_lowest_class():
    model = make_model(widths=(4,), classes=3)
    for store in (model.weights, model.biases, model.gammas):
        for arr in store:
            if arr is not None:
                arr.fill(0.0)
    x = np.random.default_rng(5).random((6, 8, 8, 1))
    assert np.array_equal(nn.predict(model, None, x), np.zeros(6, dtype=int))


def test_checkpoint_roundtrip(tmp_path):
    model = make_model(widths=(5, 4), seed=21)
    path = tmp_path / "model.json"
    nn.save_model(model, path)
    loaded = nn.load_model(path)
    assert loaded.arch == model.arch
    assert loaded.input_shape == model.input_shape
    assert np.array_equal(flat_params(loaded), flat_params(model))


def test_validate_arch_errors():
    with pytest.raises(ArchitectureError):
        nn.validate_arch((), (4,))
    with pytest.raises(ArchitectureError):  # missing output head
        nn.validate_arch((L("dense", 4, 3),), (4,))
    with pytest.raises(ArchitectureError):  # head must come last
        nn.validate_arch(
            (L("softmax-output", 4, 2), L("dense", 2, 2), L("softmax-output", 2, 2)), (4,)
        )
    with pytest.raises(ArchitectureError):  # dims must chain
        nn.validate_arch((L("dense", 5, 3), L("softmax-output", 3, 2)), (4,))
    with pytest.raises(ArchitectureError):  # prunable scale needs a producer before it
        nn.validate_arch(
            (L("unit-scale", 4, 4, prunable=True), L("softmax-output", 4, 2)), (4,)
        )
    with pytest.raises(ArchitectureError):  # only unit-scale may be prunable
        nn.validate_arch(
            (L("dense", 4, 3, prunable=True), L("softmax-output", 3, 2)), (4,)
        )


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_init_params_shapes_and_zero_momentum(seed, hidden):
    arch = dense_arch(16, (hidden,), 3)
    params = nn.init_params(arch, (4, 4, 1), seed=seed)
    assert params.weights[0].shape == (hidden, 16)
    assert params.gammas[1].shape == (hidden,)
    assert np.all(params.gammas[1] == 0.5)
    for buf in (params.w_mom, params.b_mom, params.g_mom):
        for arr in buf:
            if arr is not None:
                assert not arr.any()
    bound = 1.0 / math.sqrt(16)
    assert np.all(np.abs(params.weights[0]) <= bound)
