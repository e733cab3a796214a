"""Federated ticket training with a mask-similarity defense.

Each round: every client prunes its model to get a mask, overlays that mask
on the current global weights, trains locally, and returns params + mask.
The server scores each client by its mean mask similarity to the other
clients; robust outliers (median minus tau * MAD) are flagged, fine-tuned on
held-out server data, and only then aggregated. Aggregation averages each
coordinate over the clients whose masks retain it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import ImageDataset, PoisonSpec
from .errors import (
    ClientRoundError,
    InsufficientClientsError,
    ShapeMismatchError,
)
from .tickets import PruneMask, extract_mask, mask_similarity


@dataclass
class ClientState:
    """One participant: its local (possibly poisoned) shard and model state."""

    client_id: int
    dataset: ImageDataset
    seed: int
    poison: PoisonSpec | None = None
    params: nn.ModelParams | None = None
    mask: PruneMask | None = None

    @property
    def is_poisoned(self) -> bool:
        return self.poison is not None


@dataclass
class FederationConfig:
    rate: float
    local: nn.TrainConfig
    fine_tune: nn.TrainConfig
    tau: float = 3.0


@dataclass
class DetectionFlags:
    """Per-client anomaly outcome for one round."""

    flags: np.ndarray
    scores: np.ndarray
    threshold: float
    matrix: np.ndarray


@dataclass
class RoundRecord:
    round_num: int
    client_ids: list
    mask_digests: list
    similarity: np.ndarray
    scores: list
    threshold: float | None
    flagged: list
    global_cda: float | None = None
    global_asr: float | None = None


@dataclass
class ServerState:
    global_params: nn.ModelParams
    validation: ImageDataset
    round_num: int = 0
    log: list = field(default_factory=list)


def client_update(
    client: ClientState,
    global_params: nn.ModelParams,
    rate: float,
    config: nn.TrainConfig,
    round_num: int = 0,
):
    """One local round: prune, overlay the mask on the global weights, train.

    With trained state from a previous round, the mask is pruned from that
    state first and training runs inside it. On a client's first round there
    is nothing to prune yet (its copy of the global weights has constant
    scale factors), so it trains its copy densely and draws the mask from
    the trained result; this is also how the standalone ticket-comparison
    experiment trains its clients. Either way the returned params are
    hard-masked: every dropped coordinate is exactly zero.
    """
    from .tickets import apply_mask

    try:
        if client.params is not None:
            mask = extract_mask(client.params, rate)
            start = apply_mask(global_params, mask)
            start.zero_momentum()
            trained, history = nn.train(start, mask, client.dataset, config)
        else:
            start = global_params.copy()
            start.zero_momentum()
            trained, history = nn.train(start, None, client.dataset, config)
            mask = extract_mask(trained, rate)
        trained = apply_mask(trained, mask)  # keep dropped coords exactly zero
    except Exception as exc:  # noqa: BLE001 - wrap with round context
        raise ClientRoundError(client.client_id, round_num, exc) from exc
    return trained, mask, history


def similarity_matrix(masks) -> np.ndarray:
    k = len(masks)
    sim = np.full((k, k), 100.0)
    for i in range(k):
        for j in range(i + 1, k):
            sim[i, j] = sim[j, i] = mask_similarity(masks[i], masks[j])
    return sim


def detect(masks, tau: float = 3.0) -> DetectionFlags:
    """Flag clients whose masks sit far from the crowd.

    Score_i is the mean similarity of mask i to every other mask (self
    excluded). A client is flagged when its score falls below
    median(scores) - tau * MAD(scores), MAD being the raw median absolute
    deviation. Needs at least 3 clients for the statistics to mean anything.
    """
    k = len(masks)
    if k < 3:
        raise InsufficientClientsError(f"detection needs >= 3 clients, got {k}")
    sim = similarity_matrix(masks)
    scores = (sim.sum(axis=1) - np.diag(sim)) / (k - 1)
    med = float(np.median(scores))
    mad = float(np.median(np.abs(scores - med)))
    threshold = med - tau * mad
    flags = scores < threshold
    return DetectionFlags(flags=flags, scores=scores, threshold=threshold, matrix=sim)


def fine_tune(
    params: nn.ModelParams,
    mask: PruneMask,
    validation: ImageDataset,
    config: nn.TrainConfig,
) -> nn.ModelParams:
    """Continue training a flagged client's model on clean server-held data,
    keeping its mask fixed."""
    from .tickets import apply_mask

    if config.epochs == 0:
        return params.copy()
    # fresh optimizer: the incoming momenta chase the client's own objective
    start = params.copy()
    start.zero_momentum()
    tuned, _ = nn.train(start, mask, validation, config)
    return apply_mask(tuned, mask)


def aggregate_ltns(
    params_list,
    masks_list,
    weights,
    prev_global: nn.ModelParams,
) -> nn.ModelParams:
    """Masked weighted average, coordinate by coordinate.

    A coordinate's new value is the weighted mean over exactly the clients
    whose masks retain it; coordinates no client retains keep their previous
    global value. Weights must be nonnegative and sum to something positive.
    Momentum buffers reset to zero.
    """
    if not params_list:
        raise InsufficientClientsError("no client models to aggregate")
    if not (len(params_list) == len(masks_list) == len(weights)):
        raise ShapeMismatchError(
            "aggregate inputs", len(params_list), (len(masks_list), len(weights))
        )
    weights = np.asarray(weights, dtype=float)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ShapeMismatchError("weights", "nonnegative with positive sum", weights)

    from .tickets import apply_mask

    out = prev_global.copy()
    masked = [apply_mask(p, m) for p, m in zip(params_list, masks_list)]
    coverage = [apply_mask(_ones_like(prev_global), m) for m in masks_list]
    stores = ("weights", "biases", "gammas")
    for store in stores:
        prev_arrs = getattr(prev_global, store)
        for li, prev in enumerate(prev_arrs):
            if prev is None:
                continue
            num = np.zeros_like(prev)
            den = np.zeros_like(prev)
            for w, mp, cov in zip(weights, masked, coverage):
                num += w * getattr(mp, store)[li]
                den += w * getattr(cov, store)[li]
            vals = np.where(den > 0, num / np.where(den > 0, den, 1.0), prev)
            getattr(out, store)[li][...] = vals
    out.zero_momentum()
    return out


def _ones_like(model: nn.ModelParams) -> nn.ModelParams:
    one = model.copy()
    for store in (one.weights, one.biases, one.gammas):
        for arr in store:
            if arr is not None:
                arr.fill(1.0)
    return one


def run_rounds(
    server: ServerState,
    clients,
    config: FederationConfig,
    rounds: int,
    defense: bool = True,
    eval_clean: ImageDataset | None = None,
    eval_asr: ImageDataset | None = None,
) -> ServerState:
    """Drive the per-round protocol; client state commits only on success.

    Every round logs the full pairwise mask-similarity matrix. With the
    defense on, flagged clients are fine-tuned on the server's validation
    shard before aggregation; with it off, detection is skipped entirely and
    all clients aggregate as-is. Global accuracy numbers are measured on the
    dense (unmasked) aggregate.
    """
    if len(clients) < 2:
        raise InsufficientClientsError(f"need >= 2 clients, got {len(clients)}")
    from .provenance import derive_seed

    for _ in range(rounds):
        t = server.round_num
        results = []
        for client in clients:
            round_seed = derive_seed(client.seed, "round", t)
            local_cfg = nn.TrainConfig(
                schedule=config.local.schedule,
                momentum=config.local.momentum,
                batch_size=config.local.batch_size,
                epochs=config.local.epochs,
                l1_gamma=config.local.l1_gamma,
                seed=round_seed,
            )
            params, mask, _ = client_update(
                client, server.global_params, config.rate, local_cfg, round_num=t
            )
            results.append((params, mask))

        masks = [m for _, m in results]
        sim = similarity_matrix(masks)
        flags = np.zeros(len(clients), dtype=bool)
        scores = (sim.sum(axis=1) - np.diag(sim)) / max(len(clients) - 1, 1)
        threshold = None
        if defense:
            det = detect(masks, tau=config.tau)
            flags = det.flags
            scores = det.scores
            threshold = det.threshold

        final_params = []
        for i, (params, mask) in enumerate(results):
            if defense and flags[i]:
                ft_seed = derive_seed(clients[i].seed, "finetune", t)
                ft_cfg = nn.TrainConfig(
                    schedule=config.fine_tune.schedule,
                    momentum=config.fine_tune.momentum,
                    batch_size=config.fine_tune.batch_size,
                    epochs=config.fine_tune.epochs,
                    l1_gamma=config.fine_tune.l1_gamma,
                    seed=ft_seed,
                )
                params = fine_tune(params, mask, server.validation, ft_cfg)
            final_params.append(params)

        sizes = np.array([len(c.dataset) for c in clients], dtype=float)
        new_global = aggregate_ltns(final_params, masks, sizes, server.global_params)

        record = RoundRecord(
            round_num=t,
            client_ids=[c.client_id for c in clients],
            mask_digests=[m.digest() for m in masks],
            similarity=sim,
            scores=[float(s) for s in scores],
            threshold=None if threshold is None else float(threshold),
            flagged=[int(i) for i in np.flatnonzero(flags)],
        )
        if eval_clean is not None:
            from .metrics import cda

            record.global_cda = cda(new_global, None, eval_clean)
        if eval_asr is not None:
            from .metrics import asr

            record.global_asr = asr(new_global, None, eval_asr)

        # commit: nothing above mutated shared state, so a raised error
        # leaves server and clients exactly as they were
        for client, (params, mask) in zip(clients, results):
            client.params = params
            client.mask = mask
        server.global_params = new_global
        server.round_num = t + 1
        server.log.append(record)
    return server
