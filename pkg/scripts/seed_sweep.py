"""Train and evaluate the additive model with and without the consistency loss over several seeds.

Drives the CLI once per (seed, lambda) and prints medians of the report
fields, the same numbers acceptance criteria 5 and 6 look at.

    python3 scripts/seed_sweep.py --seeds 0 1 2 3 4 --out out/sweep
"""

import argparse
import json
import statistics
from pathlib import Path

from compgen import cli

FIELDS = ("id_identifiability", "ood_identifiability", "ood_reconstruction_r2", "id_mse", "ood_mse",
          "id_isolated_error", "ood_isolated_error", "contrast")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="base config; the train.lam field is overridden")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="out/sweep")
    args = ap.parse_args()

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    reports = {}
    for lam in (0.0, 1.0):
        cfg = json.loads(json.dumps(base))
        cfg.setdefault("train", {})["lam"] = lam
        cfg_path = root / f"lam{lam}.json"
        cfg_path.write_text(json.dumps(cfg, indent=2))
        for seed in args.seeds:
            out = root / f"lam{lam}_s{seed}"
            for cmd in ("gen-data", "train", "eval"):
                code = cli.main([cmd, "--config", str(cfg_path), "--out", str(out), "--seed", str(seed), "--quiet"])
                if code != 0:
                    raise SystemExit(f"{cmd} failed for lam={lam} seed={seed} (exit {code})")
            reports[lam, seed] = json.loads((out / "eval" / "report.json").read_text())

    print("\nmedian over seeds", args.seeds)
    print(f"{'field':<24}{'lam=0':>14}{'lam=1':>14}")
    for f in FIELDS:
        m0 = statistics.median(reports[0.0, s][f] for s in args.seeds)
        m1 = statistics.median(reports[1.0, s][f] for s in args.seeds)
        print(f"{f:<24}{m0:>14.5g}{m1:>14.5g}")


if __name__ == "__main__":
    main()
