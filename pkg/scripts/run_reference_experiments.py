#!/usr/bin/env python3
"""Regenerate every pinned experiment into one output tree.

Drives the public CLI end to end: dataset emission, the benign-vs-backdoor
ticket study, federation with the defense on and off, key-neuron overlap
curves, and the poisoning-intensity sweep, then prints the report for each
directory. Everything is seeded, so a rerun into a fresh tree reproduces
the same files byte for byte. Takes a few minutes on a laptop.
"""

import argparse
import os

from fedtickets.cli import main as cli
from fedtickets.reference import federation_scenario, reference_scenario
from fedtickets.scenario import save_scenario


def run(argv: list) -> None:
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"step failed with exit code {code}: fedtickets {' '.join(argv)}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="reference-results", help="root output directory")
    root = ap.parse_args().out
    os.makedirs(root, exist_ok=True)

    ticket_cfg = os.path.join(root, "ticket-scenario.json")
    fed_cfg = os.path.join(root, "federation-scenario.json")
    save_scenario(reference_scenario(), ticket_cfg)
    save_scenario(federation_scenario(), fed_cfg)

    print("== self checks ==")
    run(["verify"])

    steps = [
        ("generate-data", ticket_cfg, os.path.join(root, "data"), []),
        ("ticket", ticket_cfg, os.path.join(root, "ticket"), []),
        ("federate", fed_cfg, os.path.join(root, "federate-on"), ["--defense", "on"]),
        ("federate", fed_cfg, os.path.join(root, "federate-off"), ["--defense", "off"]),
        ("overlap", ticket_cfg, os.path.join(root, "overlap"), []),
        ("sweep", ticket_cfg, os.path.join(root, "sweep"), []),
    ]
    for command, cfg, out, extra in steps:
        print(f"\n== {command} -> {out} ==")
        run([command, "--config", cfg, "--out", out, *extra])

    for _, _, out, _ in steps[1:]:
        print(f"\n== report: {out} ==")
        run(["report", "--out", out])


if __name__ == "__main__":
    main()
