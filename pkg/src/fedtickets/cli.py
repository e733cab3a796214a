"""Command line experiment runner.

One scenario equals one self-describing output directory: every artifact
carries the master seed and a config hash, and re-running a subcommand into
a fresh directory reproduces its files byte for byte. Exit codes: 0 success,
1 experiment failure, 2 config error.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .data import make_asr_testset, poison_count, poison_dataset, save_dataset
from .errors import ConfigError, FedTicketsError
from .experiments import (
    BENIGN,
    make_splits,
    run_federation,
    run_intensity_sweep,
    run_overlap_study,
    run_ticket_study,
    trigger_for,
)
from .metrics import SimilarityEntry, similarity_table
from .provenance import OutputLock, write_csv, write_json, write_jsonl
from .scenario import ScenarioConfig, load_scenario, save_scenario
from .tickets import draw_tickets, mask_similarity, save_mask
from .verify import run_checks

HEATMAP_COLORS = {
    "both": "#4d8f4d",
    "benign-only": "#7fb3d5",
    "backdoor-only": "#e8a13d",
    "neither": "#e0e0e0",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedtickets",
        description="Federated lottery-ticket backdoor experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, defense=False):
        p.add_argument("--config", help="scenario JSON to load (defaults built in)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (default: scenario out_dir)")
        if defense:
            p.add_argument("--defense", choices=("on", "off"), help="override the defense toggle")

    common(sub.add_parser("generate-data", help="emit the synthetic dataset splits"))
    common(sub.add_parser("ticket", help="benign vs backdoored ticket study"))
    common(sub.add_parser("federate", help="multi-round federation with the defense"), defense=True)
    common(sub.add_parser("overlap", help="key-neuron overlap curves and heatmap"))
    common(sub.add_parser("sweep", help="poisoning intensity sweep"))
    common(sub.add_parser("verify", help="run the built-in self checks"))
    rep = sub.add_parser("report", help="summarize an existing output directory")
    rep.add_argument("--out", required=True, help="output directory to summarize")
    return parser


def _load(args) -> ScenarioConfig:
    sc = load_scenario(args.config) if args.config else ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        sc = replace(sc, seed=args.seed)
    if getattr(args, "out", None):
        sc = replace(sc, out_dir=args.out)
    if getattr(args, "defense", None) is not None:
        sc = replace(sc, federation=replace(sc.federation, defense=args.defense == "on"))
    return sc.validate()


def _prepare_out(sc: ScenarioConfig) -> str:
    out = sc.out_dir
    os.makedirs(out, exist_ok=True)
    doc = sc.to_dict()
    doc.pop("out_dir", None)  # keeps fresh-directory reruns byte-identical
    with open(os.path.join(out, "scenario.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def cmd_generate_data(sc: ScenarioConfig) -> int:
    out = _prepare_out(sc)
    with OutputLock(out):
        train, test = make_splits(sc)
        save_dataset(train, os.path.join(out, "train"), seed=sc.seed)
        save_dataset(test, os.path.join(out, "test"), seed=sc.seed)
        trig = trigger_for(sc, sc.trigger.kind)
        from .data import PoisonSpec
        from .provenance import derive_seed

        spec = PoisonSpec(
            trigger=trig,
            alpha=sc.poison.alpha,
            target=sc.poison.target,
            seed=derive_seed(sc.seed, "poison"),
        )
        poisoned, idx = poison_dataset(train, spec)
        poison_doc = {
            "kind": sc.trigger.kind,
            "size": sc.trigger.size,
            "corner": sc.trigger.corner,
            "alpha": sc.poison.alpha,
            "target": sc.poison.target,
            "count": poison_count(sc.poison.alpha, len(train)),
        }
        save_dataset(poisoned, os.path.join(out, "poisoned-train"), seed=sc.seed,
                     poison_doc=poison_doc)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    print(f"poisoned-train replaces {len(idx)} samples with the {sc.trigger.kind} trigger")
    return 0


def cmd_ticket(sc: ScenarioConfig) -> int:
    out = _prepare_out(sc)
    cfg_hash = sc.hash()
    with OutputLock(out):
        study = run_ticket_study(sc)

        rows = [
            [r.setting, r.rate, r.cda, r.asr]
            for r in study.rows
        ]
        write_csv(os.path.join(out, "metrics.csv"),
                  ["scenario", "p", "cda", "asr"], rows, cfg_hash, sc.seed)

        # benign-benign baseline from an independent redraw of the same seed
        redraw_cfg = sc.train_config("train")
        _, redraws, _ = draw_tickets(
            study.theta0, study.train, redraw_cfg, list(sc.rates),
            eb_window=sc.eb.window, eb_eps=sc.eb.eps, early=sc.eb.enabled,
        )
        entries = []
        for rate in sc.rates:
            entries.append(SimilarityEntry(
                setting=BENIGN, rate=rate, baseline=True,
                similarity=mask_similarity(study.draw(BENIGN, rate).mask, redraws[rate].mask),
            ))
        for r in study.rows:
            if r.setting != BENIGN:
                entries.append(SimilarityEntry(
                    setting=r.setting, rate=r.rate, baseline=False,
                    similarity=r.similarity_to_benign,
                ))
        drift = [
            [t["setting"], t["rate"], t["baseline"], t["mean_similarity"],
             t["avg_decrease"], t["pairs"]]
            for t in similarity_table(entries)
        ]
        write_csv(os.path.join(out, "drift.csv"),
                  ["setting", "rate", "baseline", "mean_similarity", "avg_decrease", "pairs"],
                  drift, cfg_hash, sc.seed)

        mask_dir = os.path.join(out, "masks")
        os.makedirs(mask_dir, exist_ok=True)
        settings = [BENIGN] + sorted(study.asr_sets)
        for (setting, rate), d in sorted(study.draws.items()):
            save_mask(d.mask, os.path.join(mask_dir, f"{setting}-p{rate}.json"), seed=sc.seed)

        for rate in sc.rates:
            masks = [study.draw(s, rate).mask for s in settings]
            matrix = [
                [mask_similarity(a, b) for b in masks]
                for a in masks
            ]
            write_csv(os.path.join(out, f"similarity-p{rate}.csv"),
                      settings, matrix, cfg_hash, sc.seed)
    print(f"ticket study complete: {len(study.rows)} cells -> {out}")
    for r in study.rows:
        sim = "" if r.similarity_to_benign is None else f" sim={r.similarity_to_benign:.2f}"
        print(f"  {r.setting} p={r.rate}: cda={r.cda:.2f} asr={r.asr:.2f}{sim}")
    return 0


def cmd_federate(sc: ScenarioConfig) -> int:
    out = _prepare_out(sc)
    cfg_hash = sc.hash()
    with OutputLock(out):
        res = run_federation(sc)
        records = []
        for rec in res.server.log:
            records.append({
                "round": rec.round_num,
                "client_ids": list(rec.client_ids),
                "mask_digests": list(rec.mask_digests),
                "similarity": rec.similarity.tolist(),
                "scores": rec.scores,
                "threshold": rec.threshold,
                "flagged": rec.flagged,
                "global_cda": rec.global_cda,
                "global_asr": rec.global_asr,
            })
        write_jsonl(os.path.join(out, "rounds.jsonl"), records, cfg_hash, sc.seed)

        last = res.server.log[-1]
        k = len(last.client_ids)
        write_csv(os.path.join(out, "similarity.csv"),
                  [f"c{i}" for i in range(k)],
                  [list(row) for row in last.similarity], cfg_hash, sc.seed)

        poisoned = set(res.poisoned_ids)
        flagged = set(res.flagged_last_round)
        det_rows = [
            [i, last.scores[i], i in flagged, i in poisoned]
            for i in range(k)
        ]
        write_csv(os.path.join(out, "detection.csv"),
                  ["client", "score", "flagged", "poisoned"], det_rows, cfg_hash, sc.seed)

        tp = len(flagged & poisoned)
        precision = tp / len(flagged) if flagged else None
        recall = tp / len(poisoned) if poisoned else None
        write_json(os.path.join(out, "summary.json"), {
            "defense": sc.federation.defense,
            "rounds": sc.federation.rounds,
            "final_cda": res.final_cda,
            "final_asr": res.final_asr,
            "poisoned": sorted(poisoned),
            "flagged_last_round": sorted(flagged),
            "precision": precision,
            "recall": recall,
        }, cfg_hash, sc.seed)

        write_csv(os.path.join(out, "metrics.csv"),
                  ["scenario", "p", "cda", "asr"],
                  [[sc.name, sc.federation.rate, res.final_cda, res.final_asr]],
                  cfg_hash, sc.seed)
    arm = "on" if sc.federation.defense else "off"
    print(f"federation ({sc.federation.rounds} rounds, defense {arm}) -> {out}")
    print(f"  final cda={res.final_cda:.2f} asr={res.final_asr:.2f} "
          f"flagged={sorted(flagged)} poisoned={sorted(poisoned)}")
    return 0


def _heatmap_svg(heatmaps: dict) -> str:
    """Static per-layer unit grids, one block per prune rate, four colors."""
    cell = 14
    pad = 6
    label_w = 80
    legend_h = 26
    blocks = []
    y = legend_h + pad
    width = label_w
    for rate in sorted(heatmaps):
        layers = heatmaps[rate]
        for li, tags in enumerate(layers):
            row_w = label_w + len(tags) * cell + pad
            width = max(width, row_w)
            cells = []
            for ui, tag in enumerate(tags):
                cells.append(
                    f'<rect x="{label_w + ui * cell}" y="{y}" width="{cell - 1}" '
                    f'height="{cell - 1}" fill="{HEATMAP_COLORS[tag]}"/>'
                )
            label = f"p={rate} layer {li}"
            blocks.append(
                f'<text x="4" y="{y + cell - 4}" font-size="10" '
                f'font-family="monospace">{label}</text>' + "".join(cells)
            )
            y += cell + 2
        y += pad
    legend = []
    x = 4
    for tag, color in HEATMAP_COLORS.items():
        legend.append(f'<rect x="{x}" y="6" width="12" height="12" fill="{color}"/>')
        legend.append(
            f'<text x="{x + 16}" y="16" font-size="10" font-family="monospace">{tag}</text>'
        )
        x += 16 + 8 * len(tag) + 14
    width = max(width, x)
    body = "".join(legend) + "".join(blocks)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{y}" '
        f'viewBox="0 0 {width} {y}">{body}</svg>\n'
    )


def cmd_overlap(sc: ScenarioConfig) -> int:
    out = _prepare_out(sc)
    cfg_hash = sc.hash()
    with OutputLock(out):
        study = run_overlap_study(sc)
        for rate, curve in sorted(study.curves.items()):
            write_csv(os.path.join(out, f"overlap-p{rate}.csv"),
                      ["p_prime", "overlap"],
                      [[pp, ov] for pp, ov in curve], cfg_hash, sc.seed)
        write_csv(os.path.join(out, "trends.csv"),
                  ["p", "spearman"],
                  [[rate, rho] for rate, rho in sorted(study.trends.items())],
                  cfg_hash, sc.seed)
        with open(os.path.join(out, "heatmap.svg"), "w") as fh:
            fh.write(_heatmap_svg(study.heatmaps))
    print(f"overlap study -> {out}")
    for rate, rho in sorted(study.trends.items()):
        print(f"  p={rate}: spearman {rho:+.3f}")
    return 0


def cmd_sweep(sc: ScenarioConfig) -> int:
    out = _prepare_out(sc)
    cfg_hash = sc.hash()
    with OutputLock(out):
        rows = run_intensity_sweep(sc)
        write_csv(os.path.join(out, "sweep.csv"),
                  ["alpha", "cda", "asr", "similarity"],
                  [[r.alpha, r.cda, r.asr, r.similarity] for r in rows],
                  cfg_hash, sc.seed)
    print(f"intensity sweep -> {out}")
    for r in rows:
        print(f"  alpha={r.alpha}: cda={r.cda:.2f} asr={r.asr:.2f} sim={r.similarity:.2f}")
    return 0


def cmd_verify() -> int:
    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    passed = sum(ok for _, ok, _ in results)
    print(f"verify: {passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def cmd_report(out: str) -> int:
    if not os.path.isdir(out):
        raise ConfigError(str(out), "output directory not found")
    from .provenance import read_csv

    found = False
    scenario_path = os.path.join(out, "scenario.json")
    if os.path.exists(scenario_path):
        with open(scenario_path) as fh:
            doc = json.load(fh)
        print(f"scenario {doc.get('name')!r} seed={doc.get('seed')}")
        found = True
    for name in ("metrics.csv", "drift.csv", "sweep.csv", "detection.csv", "trends.csv"):
        path = os.path.join(out, name)
        if not os.path.exists(path):
            continue
        meta, header, rows = read_csv(path)
        print(f"{name} ({len(rows)} rows; {'; '.join(meta)})")
        print(f"  {', '.join(header)}")
        for row in rows:
            print(f"  {', '.join(str(v) for v in row)}")
        found = True
    rounds_path = os.path.join(out, "rounds.jsonl")
    if os.path.exists(rounds_path):
        with open(rounds_path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        body = [r for r in lines if "round" in r]
        print(f"rounds.jsonl ({len(body)} rounds)")
        for rec in body:
            print(f"  round {rec['round']}: flagged={rec['flagged']} "
                  f"cda={rec['global_cda']} asr={rec['global_asr']}")
        found = True
    summary_path = os.path.join(out, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            doc = json.load(fh)
        payload = doc.get("payload", doc)
        print("summary.json")
        for key in sorted(payload):
            print(f"  {key}: {payload[key]}")
        found = True
    if not found:
        print(f"no artifacts found in {out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify()
        if args.command == "report":
            return cmd_report(args.out)
        sc = _load(args)
        if args.command == "generate-data":
            return cmd_generate_data(sc)
        if args.command == "ticket":
            return cmd_ticket(sc)
        if args.command == "federate":
            return cmd_federate(sc)
        if args.command == "overlap":
            return cmd_overlap(sc)
        if args.command == "sweep":
            return cmd_sweep(sc)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedTicketsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
