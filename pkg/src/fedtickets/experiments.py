"""Experiment drivers shared by the CLI and the acceptance suite.

Every driver derives all of its randomness from the scenario's master seed
through labeled child seeds, so a scenario document plus one integer pins
the entire experiment. Benign and attacked arms share the same network
initialization and training seed; only the data differs between them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import (
    ImageDataset,
    PoisonSpec,
    generate_dataset,
    make_asr_testset,
    make_trigger,
    poison_dataset,
)
from .federation import (
    ClientState,
    FederationConfig,
    ServerState,
    detect,
    run_rounds,
)
from .metrics import asr as asr_metric
from .metrics import cda as cda_metric
from .metrics import overlap_curve, spearman_trend
from .provenance import derive_seed
from .scenario import ScenarioConfig, split_dataset
from .tickets import (
    PruneMask,
    TicketDraw,
    apply_mask,
    draw_tickets,
    extract_mask,
    mask_similarity,
    overlap_categories,
)

BENIGN = "benign"


def make_splits(sc: ScenarioConfig):
    """Clean train and test sets for a scenario."""
    d = sc.dataset
    train = generate_dataset(
        d.classes, d.train_per_class, d.image_size,
        seed=derive_seed(sc.seed, "data"),
        channels=d.channels, split="train", noise=d.noise, jitter=d.jitter,
    )
    test = generate_dataset(
        d.classes, d.test_per_class, d.image_size,
        seed=derive_seed(sc.seed, "test"),
        channels=d.channels, split="test", noise=d.noise, jitter=d.jitter,
    )
    return train, test


def trigger_for(sc: ScenarioConfig, kind: str):
    return make_trigger(
        kind=kind,
        size=sc.trigger.size,
        image_size=sc.dataset.image_size,
        channels=sc.dataset.channels,
        corner=sc.trigger.corner,
        seed=derive_seed(sc.seed, "trigger", kind),
    )


@dataclass
class TicketRow:
    """One (setting, rate) cell of the ticket study."""

    setting: str
    rate: float
    drawn_epoch: int
    converged: bool
    cda: float | None = None
    asr: float | None = None
    similarity_to_benign: float | None = None


@dataclass
class TicketStudy:
    config: ScenarioConfig
    draws: dict  # (setting, rate) -> TicketDraw
    rows: list
    asr_sets: dict  # setting -> triggered test set
    test: ImageDataset
    train: ImageDataset
    poisoned_train: dict  # setting -> poisoned dataset
    theta0: nn.ModelParams

    def draw(self, setting: str, rate: float) -> TicketDraw:
        return self.draws[(setting, rate)]

    def row(self, setting: str, rate: float) -> TicketRow:
        for r in self.rows:
            if r.setting == setting and r.rate == rate:
                return r
        raise KeyError((setting, rate))


def run_ticket_study(
    sc: ScenarioConfig,
    kinds=("white-square", "random-square"),
    rates=None,
    retrain: bool = True,
) -> TicketStudy:
    """Draw benign and backdoored tickets from one shared initialization.

    Per attack kind the training set is poisoned at the scenario alpha; all
    arms train with identical seeds so mask differences come only from the
    data. With `retrain` on, each ticket is rewound to the shared init,
    masked, and retrained: on clean data to measure CDA, and (attack arms
    only) on the poisoned data to measure ASR.
    """
    rates = list(sc.rates) if rates is None else list(rates)
    train, test = make_splits(sc)
    theta0 = sc.init_model()
    draw_cfg = sc.train_config("train")

    settings = [BENIGN] + list(kinds)
    datasets = {BENIGN: train}
    asr_sets = {}
    for kind in kinds:
        trig = trigger_for(sc, kind)
        spec = PoisonSpec(
            trigger=trig,
            alpha=sc.poison.alpha,
            target=sc.poison.target,
            seed=derive_seed(sc.seed, "poison"),
        )
        poisoned, _ = poison_dataset(train, spec)
        datasets[kind] = poisoned
        asr_sets[kind] = make_asr_testset(test, trig, sc.poison.target)

    draws = {}
    for setting in settings:
        _, ticket_draws, _ = draw_tickets(
            theta0, datasets[setting], draw_cfg, rates,
            eb_window=sc.eb.window, eb_eps=sc.eb.eps, early=sc.eb.enabled,
        )
        for rate, d in ticket_draws.items():
            draws[(setting, rate)] = d

    rows = []
    for setting in settings:
        for rate in rates:
            d = draws[(setting, rate)]
            row = TicketRow(
                setting=setting, rate=rate, drawn_epoch=d.epoch, converged=d.converged
            )
            if setting != BENIGN:
                row.similarity_to_benign = mask_similarity(
                    draws[(BENIGN, rate)].mask, d.mask
                )
            if retrain:
                start = apply_mask(theta0, d.mask)
                clean_cfg = sc.train_config(
                    "retrain", seed=derive_seed(sc.seed, "retrain", setting, rate, "clean")
                )
                clean_model, _ = nn.train(start, d.mask, train, clean_cfg)
                row.cda = cda_metric(clean_model, d.mask, test)
                if setting == BENIGN:
                    if asr_sets:
                        first = sorted(asr_sets)[0]
                        row.asr = asr_metric(clean_model, d.mask, asr_sets[first])
                else:
                    poison_cfg = sc.train_config(
                        "retrain",
                        seed=derive_seed(sc.seed, "retrain", setting, rate, "poison"),
                    )
                    poison_model, _ = nn.train(start, d.mask, datasets[setting], poison_cfg)
                    row.asr = asr_metric(poison_model, d.mask, asr_sets[setting])
            rows.append(row)

    return TicketStudy(
        config=sc,
        draws=draws,
        rows=rows,
        asr_sets=asr_sets,
        test=test,
        train=train,
        poisoned_train={k: v for k, v in datasets.items() if k != BENIGN},
        theta0=theta0,
    )


@dataclass
class DetectionResult:
    flags: np.ndarray
    scores: np.ndarray
    threshold: float
    matrix: np.ndarray
    poisoned_ids: tuple
    masks: list

    @property
    def flagged_ids(self) -> tuple:
        return tuple(int(i) for i in np.flatnonzero(self.flags))

    @property
    def precision(self) -> float:
        flagged = set(self.flagged_ids)
        if not flagged:
            return 0.0
        return len(flagged & set(self.poisoned_ids)) / len(flagged)

    @property
    def recall(self) -> float:
        truth = set(self.poisoned_ids)
        if not truth:
            return 1.0
        return len(set(self.flagged_ids) & truth) / len(truth)


def run_detection_oneshot(sc: ScenarioConfig) -> DetectionResult:
    """Single-round detection study: shard the data, poison some clients,
    train every client from one shared init, compare their masks.

    All clients share the initialization and training seed, so the benign
    cluster is tight and any structural drift is attributable to poisoning.
    """
    f = sc.federation
    train, _ = make_splits(sc)
    _, shards = split_dataset(train, f.clients, f.val_fraction, derive_seed(sc.seed, "shard"))
    trig = trigger_for(sc, sc.trigger.kind)
    theta0 = sc.init_model()
    cfg = sc.train_config("train", epochs=f.local_epochs)

    masks = []
    for i, shard in enumerate(shards):
        ds = shard
        if i in f.poisoned:
            spec = PoisonSpec(
                trigger=trig,
                alpha=f.client_alpha,
                target=sc.poison.target,
                seed=derive_seed(sc.seed, "client-poison", i),
            )
            ds, _ = poison_dataset(shard, spec)
        trained, _ = nn.train(theta0, None, ds, cfg)
        masks.append(extract_mask(trained, f.rate))

    det = detect(masks, tau=f.tau)
    return DetectionResult(
        flags=det.flags,
        scores=det.scores,
        threshold=det.threshold,
        matrix=det.matrix,
        poisoned_ids=tuple(f.poisoned),
        masks=masks,
    )


@dataclass
class FederationResult:
    server: ServerState
    final_cda: float
    final_asr: float
    poisoned_ids: tuple
    flagged_last_round: tuple


def run_federation(sc: ScenarioConfig, defense: bool | None = None) -> FederationResult:
    """Full multi-round protocol on the scenario's federation layout."""
    f = sc.federation
    defense = f.defense if defense is None else defense
    train, test = make_splits(sc)
    validation, shards = split_dataset(
        train, f.clients, f.val_fraction, derive_seed(sc.seed, "shard")
    )
    trig = trigger_for(sc, sc.trigger.kind)
    asr_set = make_asr_testset(test, trig, sc.poison.target)

    clients = []
    for i, shard in enumerate(shards):
        ds = shard
        poison = None
        if i in f.poisoned:
            poison = PoisonSpec(
                trigger=trig,
                alpha=f.client_alpha,
                target=sc.poison.target,
                seed=derive_seed(sc.seed, "client-poison", i),
            )
            ds, _ = poison_dataset(shard, poison)
        clients.append(
            ClientState(
                client_id=i,
                dataset=ds,
                seed=derive_seed(sc.seed, "client", i),
                poison=poison,
            )
        )

    server = ServerState(global_params=sc.init_model(), validation=validation)
    fed_cfg = FederationConfig(
        rate=f.rate,
        local=sc.train_config("local", epochs=f.local_epochs),
        fine_tune=nn.TrainConfig(
            # warm phase does the decay work, the low-lr tail re-settles CDA
            schedule=((0, f.fine_tune_lr), (2 * f.fine_tune_epochs // 3, f.fine_tune_lr / 5)),
            momentum=sc.train.momentum,
            batch_size=sc.train.batch_size,
            epochs=f.fine_tune_epochs,
            l1_gamma=f.fine_tune_l1,
            seed=0,  # replaced per client+round inside run_rounds
        ),
        tau=f.tau,
    )
    server = run_rounds(
        server, clients, fed_cfg, f.rounds,
        defense=defense, eval_clean=test, eval_asr=asr_set,
    )
    last = server.log[-1]
    return FederationResult(
        server=server,
        final_cda=last.global_cda,
        final_asr=last.global_asr,
        poisoned_ids=tuple(f.poisoned),
        flagged_last_round=tuple(last.flagged),
    )


@dataclass
class OverlapStudy:
    curves: dict  # backdoor rate -> list[(p', overlap)]
    trends: dict  # backdoor rate -> spearman rho
    heatmaps: dict  # rate -> per-layer category lists
    benign_model: nn.ModelParams
    backdoor_model: nn.ModelParams


def run_overlap_study(sc: ScenarioConfig, grid=None) -> OverlapStudy:
    """Train benign and backdoored models to completion, then chart how the
    backdoor ticket's retained units concentrate among benign key neurons."""
    grid = [round(0.1 * i, 1) for i in range(9)] if grid is None else list(grid)
    train, _ = make_splits(sc)
    trig = trigger_for(sc, sc.trigger.kind)
    spec = PoisonSpec(
        trigger=trig,
        alpha=sc.poison.alpha,
        target=sc.poison.target,
        seed=derive_seed(sc.seed, "poison"),
    )
    poisoned, _ = poison_dataset(train, spec)
    theta0 = sc.init_model()
    cfg = sc.train_config("train")
    benign_model, _ = nn.train(theta0, None, train, cfg)
    backdoor_model, _ = nn.train(theta0, None, poisoned, cfg)

    curves, trends, heatmaps = {}, {}, {}
    for p in sc.rates:
        bd_mask = extract_mask(backdoor_model, p)
        curve = overlap_curve(benign_model, bd_mask, grid)
        curves[p] = curve
        trends[p] = spearman_trend(curve)
        heatmaps[p] = overlap_categories(extract_mask(benign_model, p), bd_mask)
    return OverlapStudy(
        curves=curves,
        trends=trends,
        heatmaps=heatmaps,
        benign_model=benign_model,
        backdoor_model=backdoor_model,
    )


@dataclass
class SweepRow:
    alpha: float
    cda: float
    asr: float
    similarity: float


def run_intensity_sweep(sc: ScenarioConfig, alphas=(0.0, 0.01, 0.05, 0.1), rate=None) -> list:
    """One full draw + retrain per poisoning intensity, shared seeds.

    similarity compares each alpha's mask against the alpha = 0 mask at the
    same rate, so the first row reads exactly 100.
    """
    rate = (sorted(sc.rates)[len(sc.rates) // 2] if sc.rates else 0.5) if rate is None else rate
    train, test = make_splits(sc)
    trig = trigger_for(sc, sc.trigger.kind)
    theta0 = sc.init_model()
    draw_cfg = sc.train_config("train")
    asr_set = make_asr_testset(test, trig, sc.poison.target)

    rows = []
    base_mask: PruneMask | None = None
    for alpha in alphas:
        if alpha > 0:
            spec = PoisonSpec(
                trigger=trig, alpha=alpha, target=sc.poison.target,
                seed=derive_seed(sc.seed, "poison"),
            )
            ds, _ = poison_dataset(train, spec)
        else:
            ds = train
        _, draws, _ = draw_tickets(
            theta0, ds, draw_cfg, [rate],
            eb_window=sc.eb.window, eb_eps=sc.eb.eps, early=sc.eb.enabled,
        )
        mask = draws[rate].mask
        if base_mask is None:
            if alpha == 0.0:
                base_mask = mask
            else:
                _, base_draws, _ = draw_tickets(
                    theta0, train, draw_cfg, [rate],
                    eb_window=sc.eb.window, eb_eps=sc.eb.eps, early=sc.eb.enabled,
                )
                base_mask = base_draws[rate].mask
        start = apply_mask(theta0, mask)
        clean_cfg = sc.train_config("retrain", seed=derive_seed(sc.seed, "sweep", alpha, "clean"))
        clean_model, _ = nn.train(start, mask, train, clean_cfg)
        poison_cfg = sc.train_config("retrain", seed=derive_seed(sc.seed, "sweep", alpha, "poison"))
        poison_model, _ = nn.train(start, mask, ds, poison_cfg)
        rows.append(
            SweepRow(
                alpha=float(alpha),
                cda=cda_metric(clean_model, mask, test),
                asr=asr_metric(poison_model, mask, asr_set),
                similarity=mask_similarity(base_mask, mask),
            )
        )
    return rows
