"""Mask extraction, stabilization windows, mask algebra, and overlap."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtickets import nn
from fedtickets.errors import (
    ConfigError,
    LayerCollapseError,
    ShapeMismatchError,
    UndefinedOverlapError,
)
from fedtickets.tickets import (
    MaskWindow,
    PruneMask,
    apply_mask,
    draw_tickets,
    drop_count,
    eb_step,
    extract_mask,
    load_mask,
    mask_distance,
    mask_similarity,
    neuron_overlap,
    overlap_categories,
    save_mask,
)
from helpers import L, flat_params, make_model, mask_of, model_with_gammas


def _brute_force_layers(gamma_layers, rate):
    """Reference pruning: sort (|g|, layer, unit) ascending, drop the prefix."""
    units = [
        (abs(g), li, ui)
        for li, layer in enumerate(gamma_layers)
        for ui, g in enumerate(layer)
    ]
    dropped = {(li, ui) for _, li, ui in sorted(units)[: drop_count(rate, len(units))]}
    return [
        np.array([(li, ui) not in dropped for ui in range(len(layer))])
        for li, layer in enumerate(gamma_layers)
    ]


def test_drop_count_decimal_semantics():
    assert drop_count(0.3, 10) == 3
    assert drop_count(0.7, 10) == 7
    assert drop_count(0.1, 3) == 0
    assert drop_count(0.5, 5) == 2
    assert drop_count(0.0, 100) == 0


def test_extract_drops_smallest_magnitudes():
    model = model_with_gammas([0.1, 0.5, 0.3, 0.9])
    mask = extract_mask(model, 0.5)
    assert mask.layers[0].tolist() == [False, True, False, True]
    assert mask.rate == 0.5


def test_extract_tie_drops_lowest_position_first():
    model = model_with_gammas([0.5, 0.5, 0.9, 0.9])
    mask = extract_mask(model, 0.25)
    assert mask.layers[0].tolist() == [False, True, True, True]
    two_layer = model_with_gammas([0.5, 0.9], [0.5, 0.9])
    mask2 = extract_mask(two_layer, 0.25)
    assert mask2.layers[0].tolist() == [False, True]
    assert mask2.layers[1].tolist() == [True, True]


def test_extract_negative_magnitude_counts():
    model = model_with_gammas([-0.9, 0.1, -0.2, 0.8])
    mask = extract_mask(model, 0.5)
    assert mask.layers[0].tolist() == [True, False, False, True]


def test_extract_zero_rate_keeps_everything():
    model = model_with_gammas([0.1, 0.2], [0.3, 0.4, 0.5])
    mask = extract_mask(model, 0.0)
    assert all(v.all() for v in mask.layers)
    assert mask.retained_units == mask.total_units == 5


def test_extract_rate_validation():
    model = model_with_gammas([0.1, 0.2])
    with pytest.raises(ConfigError):
        extract_mask(model, 1.0)
    with pytest.raises(ConfigError):
        extract_mask(model, -0.1)


def test_extract_layer_collapse():
    model = model_with_gammas([0.1, 0.2], [5.0, 6.0])
    with pytest.raises(LayerCollapseError) as exc:
        extract_mask(model, 0.5)
    assert exc.value.layer == 0
    assert exc.value.rate == 0.5


@settings(max_examples=80)
@given(
    g1=st.lists(st.integers(-8, 8), min_size=1, max_size=6),
    g2=st.lists(st.integers(-8, 8), min_size=1, max_size=6),
    rate_idx=st.integers(0, 3),
    power=st.integers(-3, 3),
)
def test_extract_matches_reference_and_is_scale_invariant(g1, g2, rate_idx, power):
    rate = (0.0, 0.25, 0.5, 0.75)[rate_idx]
    layers = [[v / 8.0 for v in g1], [v / 8.0 for v in g2]]
    expected = _brute_force_layers(layers, rate)
    model = model_with_gammas(*layers)
    if any(not v.any() for v in expected):
        with pytest.raises(LayerCollapseError):
            extract_mask(model, rate)
        return
    mask = extract_mask(model, rate)
    for got, want in zip(mask.layers, expected):
        assert np.array_equal(got, want)
    # exact power-of-two scaling preserves the magnitude order
    scaled = model_with_gammas(*[[v * 2.0**power for v in layer] for layer in layers])
    mask_s = extract_mask(scaled, rate)
    assert mask_s.digest() == mask.digest()


@settings(max_examples=40)
@given(
    sizes=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    seed=st.integers(0, 2**31),
    rate=st.sampled_from([0.0, 0.2, 0.4, 0.6]),
)
def test_extract_nesting_and_retained_count(sizes, seed, rate):
    rng = np.random.default_rng(seed)
    # distinct magnitudes: no ties, no accidental collapse analysis needed
    total = sum(sizes)
    values = rng.permutation(np.arange(1, total + 1)) / total
    layers, off = [], 0
    for width in sizes:
        layers.append(list(values[off : off + width]))
        off += width
    model = model_with_gammas(*layers)
    try:
        small = extract_mask(model, rate)
        large = extract_mask(model, min(rate + 0.2, 0.8))
    except LayerCollapseError:
        return
    assert small.retained_units == total - drop_count(rate, total)
    assert large.retained_set() <= small.retained_set()


def test_prune_mask_validation():
    with pytest.raises(ConfigError):
        PruneMask(layers=(np.array([True]),), rate=1.0)
    with pytest.raises(ShapeMismatchError):
        PruneMask(layers=(np.ones((2, 2), dtype=bool),), rate=0.0)


def test_similarity_hand_values():
    a = mask_of([True, True, False, False])
    b = mask_of([True, False, True, False])
    assert mask_similarity(a, a) == 100.0
    assert mask_similarity(a, b) == 50.0
    c = mask_of([False, False, True, True])
    assert mask_similarity(a, c) == 0.0
    assert mask_distance(a, c) == 1.0


def test_similarity_shape_errors():
    a = mask_of([True, False])
    with pytest.raises(ShapeMismatchError):
        mask_similarity(a, mask_of([True, False], [True]))
    with pytest.raises(ShapeMismatchError):
        mask_similarity(a, mask_of([True, False, True]))


@settings(max_examples=60)
@given(
    bits=st.lists(
        st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=24
    )
)
def test_similarity_symmetry_and_triangle(bits):
    va, vb, vc = (np.array([t[i] for t in bits]) for i in range(3))
    a, b, c = mask_of(va), mask_of(vb), mask_of(vc)
    assert mask_similarity(a, b) == mask_similarity(b, a)
    assert 0.0 <= mask_similarity(a, b) <= 100.0
    assert mask_distance(a, c) <= mask_distance(a, b) + mask_distance(b, c) + 1e-12


def test_mask_window_fifo():
    with pytest.raises(ConfigError):
        MaskWindow(capacity=0)
    w = MaskWindow(capacity=2)
    m1, m2, m3 = (mask_of([i % 2 == 0, True]) for i in range(3))
    w = w.push(m1)
    assert not w.full
    w = w.push(m2).push(m3)
    assert w.full
    assert w.masks == (m2, m3)


def test_eb_step_distances_and_convergence():
    base = [True] * 100 + [False] * 100

    def flipped(*idx):
        v = list(base)
        for i in idx:
            v[i] = not v[i]
        return mask_of(v, rate=0.5)

    m1 = mask_of(base, rate=0.5)
    m2 = flipped(0, 1, 2, 3)
    m3 = flipped(0, 4, 5, 6, 7, 8)
    assert mask_distance(m1, m2) == pytest.approx(0.02)
    assert mask_distance(m1, m3) == pytest.approx(0.03)
    assert mask_distance(m2, m3) == pytest.approx(0.04)

    w = MaskWindow(capacity=3)
    w, conv, dist = eb_step(w, m1, eps=0.05)
    assert (conv, dist) == (False, 0.0)
    w, conv, dist = eb_step(w, m2, eps=0.05)
    assert not conv  # window not yet full
    assert dist == pytest.approx(0.02)
    w, conv, dist = eb_step(w, m3, eps=0.05)
    assert conv
    assert dist == pytest.approx(0.04)

    # strict inequality at the threshold
    w2 = MaskWindow(capacity=3)
    for m in (m1, m2):
        w2, _, _ = eb_step(w2, m, eps=0.04)
    w2, conv, dist = eb_step(w2, m3, eps=0.04)
    assert not conv
    assert dist == pytest.approx(0.04)


def test_eb_step_eps_validation():
    with pytest.raises(ConfigError):
        eb_step(MaskWindow(capacity=2), mask_of([True]), eps=0.0)


def _stable_gamma_model():
    model = make_model(widths=(6,), seed=3)
    ai = nn.prunable_layer_indices(model.arch)[0]
    model.gammas[ai][:] = np.arange(1.0, 7.0)
    return model


def test_draw_tickets_early_off_uses_final_epoch(blobs3):
    model = _stable_gamma_model()
    cfg = nn.TrainConfig(schedule=((0, 1e-4),), epochs=6, batch_size=12, seed=4)
    trained, draws, history = draw_tickets(
        model, blobs3, cfg, [0.3, 0.5], eb_window=3, early=False
    )
    assert len(history) == 6
    for rate, draw in draws.items():
        assert draw.epoch == 6
        assert not draw.converged
        assert draw.mask.digest() == extract_mask(trained, rate).digest()


def test_draw_tickets_stabilizes_at_window_size(blobs3):
    model = _stable_gamma_model()
    cfg = nn.TrainConfig(schedule=((0, 1e-4),), epochs=6, batch_size=12, seed=4)
    _, draws, _ = draw_tickets(model, blobs3, cfg, [0.3], eb_window=4, eb_eps=0.1)
    draw = draws[0.3]
    assert draw.converged
    assert draw.epoch == 4
    # well-separated scales never reorder under a tiny step, so the early
    # ticket equals the one-shot ticket
    assert draw.mask.digest() == extract_mask(model, 0.3).digest()


def test_draw_tickets_window_never_fills(blobs3):
    model = _stable_gamma_model()
    cfg = nn.TrainConfig(schedule=((0, 1e-4),), epochs=2, batch_size=12, seed=4)
    _, draws, _ = draw_tickets(model, blobs3, cfg, [0.5], eb_window=5)
    assert not draws[0.5].converged
    assert draws[0.5].epoch == 2


def test_draw_tickets_repeat_is_identical(blobs3):
    model = make_model(widths=(6,), seed=7)
    cfg = nn.TrainConfig(schedule=((0, 0.05),), epochs=4, batch_size=12, seed=7)
    _, draws_a, hist_a = draw_tickets(model, blobs3, cfg, [0.3, 0.7])
    _, draws_b, hist_b = draw_tickets(model, blobs3, cfg, [0.3, 0.7])
    assert hist_a == hist_b
    for rate in (0.3, 0.7):
        assert draws_a[rate].mask.digest() == draws_b[rate].mask.digest()
        assert draws_a[rate].epoch == draws_b[rate].epoch


def test_draw_tickets_empty_rates(blobs3):
    model = make_model(widths=(6,))
    with pytest.raises(ConfigError):
        draw_tickets(model, blobs3, nn.TrainConfig(), [])


def test_apply_mask_zeroes_dead_coordinates(blobs3):
    model = make_model(widths=(4, 3), seed=2)
    cfg = nn.TrainConfig(schedule=((0, 0.05),), epochs=1, batch_size=12, seed=2)
    trained, _ = nn.train(model, None, blobs3, cfg)
    mask = mask_of([True, False, True, True], [True, True, False])
    out = apply_mask(trained, mask)

    assert out.gammas[1][1] == 0.0
    assert not out.weights[0][1, :].any()
    assert out.biases[0][1] == 0.0
    assert not out.w_mom[0][1, :].any()
    assert out.g_mom[1][1] == 0.0
    assert not out.weights[3][:, 1].any()  # consumers of dead unit

    assert out.gammas[4][2] == 0.0
    assert not out.weights[3][2, :].any()
    assert out.biases[3][2] == 0.0
    assert not out.weights[6][:, 2].any()

    # surviving coordinates are untouched
    assert np.array_equal(out.weights[0][0], trained.weights[0][0])
    assert out.gammas[1][0] == trained.gammas[1][0]


def test_apply_mask_leaves_input_alone():
    model = make_model(widths=(4,), seed=1)
    before = flat_params(model)
    apply_mask(model, mask_of([True, False, True, False]))
    assert np.array_equal(flat_params(model), before)


def test_apply_mask_sequential_is_intersection():
    model = make_model(widths=(5, 4), seed=9)
    m1 = mask_of([True, True, False, True, False], [True, False, True, True])
    m2 = mask_of([True, False, True, True, False], [True, True, True, False])
    both = mask_of(
        m1.layers[0] & m2.layers[0], m1.layers[1] & m2.layers[1]
    )
    seq = apply_mask(apply_mask(model, m1), m2)
    direct = apply_mask(model, both)
    assert np.array_equal(flat_params(seq), flat_params(direct))


def test_apply_mask_matches_masked_forward(blobs3):
    model = make_model(widths=(5, 4), seed=6)
    mask = mask_of([True, False, True, True, False], [False, True, True, True])
    hard = nn.forward(apply_mask(model, mask), None, blobs3.images[:8])
    soft = nn.forward(model, mask, blobs3.images[:8])
    assert np.array_equal(hard, soft)


def test_apply_mask_matches_masked_forward_conv():
    arch = (
        L("conv2d", 1, 3, kernel=3),
        L("unit-scale", 3, 3, prunable=True),
        L("relu", 3, 3),
        L("softmax-output", 48, 2),
    )
    model = nn.init_params(arch, (6, 6, 1), seed=4)
    mask = mask_of([True, False, True])
    x = np.random.default_rng(0).random((5, 6, 6, 1))
    hard = nn.forward(apply_mask(model, mask), None, x)
    soft = nn.forward(model, mask, x)
    assert np.array_equal(hard, soft)


def test_apply_mask_shape_errors():
    model = make_model(widths=(4,))
    with pytest.raises(ShapeMismatchError):
        apply_mask(model, mask_of([True, False]))
    with pytest.raises(ShapeMismatchError):
        apply_mask(model, mask_of([True] * 4, [True] * 4))


def test_neuron_overlap_hand_values():
    ref = mask_of([True, True, False, False])
    other = mask_of([True, False, True, False])
    assert neuron_overlap(ref, other) == 50.0
    assert neuron_overlap(ref, ref) == 100.0
    assert neuron_overlap(ref, mask_of([True] * 4)) == 100.0
    assert neuron_overlap(mask_of([True] * 4), ref) == 50.0


def test_neuron_overlap_errors():
    with pytest.raises(UndefinedOverlapError):
        neuron_overlap(mask_of([False, False]), mask_of([True, True]))
    with pytest.raises(ShapeMismatchError):
        neuron_overlap(mask_of([True, True]), mask_of([True, True, True]))


def test_overlap_categories_hand_values():
    benign = mask_of([True, True, False, False])
    backdoor = mask_of([True, False, True, False])
    assert overlap_categories(benign, backdoor) == [
        ["both", "benign-only", "backdoor-only", "neither"]
    ]


@settings(max_examples=40)
@given(bits=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=20))
def test_overlap_categories_partition(bits):
    vb = np.array([t[0] for t in bits])
    vk = np.array([t[1] for t in bits])
    tags = overlap_categories(mask_of(vb), mask_of(vk))[0]
    assert len(tags) == len(bits)
    assert tags.count("both") == int(np.sum(vb & vk))
    assert tags.count("benign-only") == int(np.sum(vb & ~vk))
    assert tags.count("backdoor-only") == int(np.sum(~vb & vk))
    assert tags.count("neither") == int(np.sum(~vb & ~vk))


def test_mask_save_load_roundtrip(tmp_path):
    mask = mask_of(
        [True, False, True, False, True, False, True, False, True, False],
        [False, True, True],
        rate=0.4,
    )
    path = tmp_path / "mask.json"
    save_mask(mask, path, seed=11)
    loaded = load_mask(path)
    assert loaded.digest() == mask.digest()
    assert loaded.rate == 0.4


def test_load_mask_rejects_other_files(tmp_path):
    path = tmp_path / "bogus.json"
    path.write_text('{"format": "something-else"}\n')
    with pytest.raises(ConfigError):
        load_mask(path)
