"""Run synth -> impute -> train -> predict -> aggregate -> export -> eval through the CLI."""

import argparse
import json
import sys
import time
from pathlib import Path

from floodsense.cli import run
from floodsense.damage_map import validate_damage_geojson


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="smoke")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--chips", type=int, default=16)
    ap.add_argument("--steps", type=int, default=2)
    ap.add_argument("--imputed-labels", action="store_true", help="train on rasterized imputation output")
    args = ap.parse_args()
    root = Path(args.out)
    ev, rd = str(root / "event"), str(root / "run")
    train = ["train", "--data", ev, "--seed", str(args.seed), "--steps", str(args.steps), "--out", rd]
    if args.imputed_labels:
        train += ["--labels", str(root / "labels" / "assignments.geojson")]
    stages = [
        ["synth", "--seed", str(args.seed), "--chips", str(args.chips), "--out", ev],
        ["impute", "--data", ev, "--out", str(root / "labels")],
        train,
        ["predict", "--data", ev, "--run", rd, "--out", str(root / "preds")],
        ["aggregate", "--pred", str(root / "preds"), "--footprints", f"{ev}/footprints.geojson",
         "--out", str(root / "records.json")],
        ["export", "--records", str(root / "records.json"), "--footprints", f"{ev}/footprints.geojson",
         "--out", str(root / "damage_map.geojson")],
        ["eval", "--data", ev, "--run", rd, "--split", "all", "--out", str(root / "eval.json")],
    ]
    for argv in stages:
        t0 = time.time()
        code = run(argv)
        print(f"{argv[0]:<10} exit {code} ({time.time() - t0:.1f}s)", flush=True)
        if code:
            sys.exit(code)
    obj = json.loads((root / "damage_map.geojson").read_text())
    validate_damage_geojson(obj)
    print(f"damage map: {len(obj['features'])} buildings, schema valid")


if __name__ == "__main__":
    main()
