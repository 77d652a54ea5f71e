"""Print the checks and headline numbers of every result file in a directory.

    python3 scripts/summarize.py results
"""
import argparse
import json
from pathlib import Path

HEADLINE = {
    "calibrate": ("c", "lam_bar", "C_tau", "K0", "N0", "N1"),
    "splitting": ("E_log_rate_geometric_mean", "E_over_F_log_slope", "one_step_fraction"),
    "pressure": ("P",),
    "toyshift": ("P",),
    "decompose": ("counts",),
    "distortion": ("G_segments", "growth_ratio"),
    "spec-search": ("success_rate",),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("directory", type=Path)
    args = ap.parse_args(argv)
    files = sorted(p for p in args.directory.glob("*.json") if p.name != "calibration.json")
    if not files:
        raise SystemExit(f"no result files in {args.directory}")
    for p in files:
        doc = json.loads(p.read_text())
        name = doc["scenario"]
        print(f"{name}  (config {doc['config_hash'][:12]})")
        for key in HEADLINE.get(name, ()):
            if key in doc["result"]:
                print(f"    {key} = {doc['result'][key]}")
        for check, ok in sorted(doc["checks"].items()):
            print(f"    {'PASS' if ok else 'FAIL'}  {check}")


if __name__ == "__main__":
    main()
