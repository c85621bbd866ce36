"""Command-line entry point.

Every command writes files under ``--out`` and prints one JSON summary line on
stdout. Wall-clock timestamps go only to ``<out>/run.log``, so all other
outputs are byte-identical across reruns with the same config and seed.

Exit codes:
    0  all requested artifacts written
    2  bad config or usage
    3  I/O failure (missing or malformed dataset / checkpoint file)
    4  training diverged
    5  checkpoint or dataset does not match the config
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import kstest

from . import metrics
from .config import ConfigError, RunConfig
from .model import (Autoencoder, CheckpointError, ConfigMismatchError, check_compatible, load_checkpoint,
                    save_checkpoint)
from .objectives import TrainingDiverged, train
from .scene import DatasetFormatError, generate_dataset, read_dataset, render_flat, sample_in_band
from .seeding import derive_seed, rng_for

log = logging.getLogger("compgen")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5
SPLITS = ("train", "id_test", "ood_test")
LOG_COLUMNS = ("epoch", "l_rec", "l_cons", "contrast")  # no wall-clock column


class DataMismatch(ValueError):
    pass


# --- helpers ------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(args.out) / "data"


def _ckpt_path(args) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(args.out) / "train" / "model.ckpt"


def load_splits(data_dir: Path, rc: RunConfig, splits=SPLITS) -> dict:
    out = {}
    for split in splits:
        ds, header = read_dataset(data_dir / f"{split}.cgl")
        for key in ("N", "K"):
            want = getattr(rc.scene, key)
            if header[key] != want:
                raise DataMismatch(f"{split}.cgl has {key}={header[key]}, config expects {want}")
        out[split] = ds
    return out


def load_model(path: Path, rc: RunConfig) -> Autoencoder:
    ck = load_checkpoint(path)
    check_compatible(rc.model, ck.model)
    return Autoencoder(ck.model, ck.params)


# --- commands -------------------------------------------------------------------

def cmd_gen_data(rc: RunConfig, args) -> dict:
    out = Path(args.out) / "data"
    counts = {s: getattr(rc.data, s) for s in SPLITS}
    generate_dataset(rc.scene, counts, out)
    files = {s: str(out / f"{s}.cgl") for s in SPLITS}
    _write_json(out / "provenance.json", {"config": rc.to_dict(), "counts": counts})
    return {"files": files, "bytes": {s: (out / f"{s}.cgl").stat().st_size for s in SPLITS}}


def train_run(rc: RunConfig, data_dir: Path, out: Path) -> dict:
    """Train on ``data_dir/train.cgl`` and write checkpoint + log into ``out``."""
    x = load_splits(data_dir, rc, ("train",))["train"].observations
    out.mkdir(parents=True, exist_ok=True)
    ck_dir = out / "checkpoints" if rc.train.checkpoint_every else None
    if ck_dir is not None:
        ck_dir.mkdir(exist_ok=True)
    ck, tlog = train(rc.model, rc.train, x, out_dir=ck_dir)
    ck.meta["seed"] = rc.seed
    save_checkpoint(out / "model.ckpt", ck)
    tlog.write_csv(out / "trainlog.csv", columns=LOG_COLUMNS)
    for r in tlog.rows:
        log.info("timing epoch %d: %.3f s", r["epoch"], r["seconds"])
    c = tlog.column("contrast")
    return {"checkpoint": str(out / "model.ckpt"), "final_l_rec": float(tlog.column("l_rec")[-1]),
            "contrast_first": float(c[0]), "contrast_last": float(c[-1])}


def cmd_train(rc: RunConfig, args) -> dict:
    return train_run(rc, _data_dir(args), Path(args.out) / "train")


def cmd_eval(rc: RunConfig, args) -> dict:
    model = load_model(_ckpt_path(args), rc)
    d = load_splits(_data_dir(args), rc, ("id_test", "ood_test"))
    report = metrics.evaluate(model, rc.scene, d["id_test"], d["ood_test"], seed=rc.seed,
                              contrast_codes=rc.eval.contrast_codes)
    out = Path(args.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    return {"report": str(out / "report.json"), "id_identifiability": report.id_identifiability,
            "ood_identifiability": report.ood_identifiability}


def cmd_heatmap(rc: RunConfig, args) -> dict:
    model = load_model(_ckpt_path(args), rc)
    d = load_splits(_data_dir(args), rc, ("id_test", "ood_test"))
    z = np.concatenate([d["id_test"].latents, d["ood_test"].latents])
    mode = args.mode or rc.eval.heatmap_mode
    res = args.resolution or rc.eval.heatmap_resolution
    modes = ("full_ae", "isolated_decoder") if mode == "both" else (mode,)
    out = Path(args.out) / "heatmap"
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for m in modes:
        hm = metrics.heatmap_grid(model, rc.scene, z, resolution=res, mode=m)
        (out / f"{m}.csv").write_text(hm.to_csv())
        (out / f"{m}.pgm").write_bytes(hm.to_pgm())
        files += [str(out / f"{m}.csv"), str(out / f"{m}.pgm")]
    return {"files": files, "resolution": res}


def generator_theory(rc: RunConfig, n: int) -> dict:
    """Diagnostics of the ground-truth renderer at ``n`` random latents."""
    cfg = rc.scene
    K = cfg.K
    f = render_flat(cfg)
    rng = rng_for(rc.seed, "theory/points")
    irr_rng = rng_for(rc.seed, "theory/partitions")
    contrast, hess, comp, irr = [], [], [], []
    for z in rng.random((n, K * cfg.M)):
        contrast.append(metrics.comp_contrast(f, z, K))
        comp.append(metrics.compositionality_check(f, z, K)[0])
        hess.append(metrics.hessian_cross_check(f, z, K))
        irr.append(metrics.irreducibility_check(f, z, K, rng=irr_rng))
    zs = sample_in_band(cfg, rc.eval.ks_samples, rng_for(rc.seed, "theory/ks"))
    ks = [float(kstest(zs[:, k, m], "uniform").statistic) for k in range(K) for m in range(cfg.M)]
    return {"points": n, "contrast_max": float(max(contrast)), "compositional_all": bool(all(comp)),
            "hessian_cross_max": float(max(hess)), "irreducible_all": bool(all(irr)), "ks_max": max(ks)}


def decoder_theory(model: Autoencoder, rc: RunConfig, d: dict) -> dict:
    codes = model.encode(d["id_test"].observations[: rc.eval.contrast_codes])
    f = model.decoder_flat()
    K = model.cfg.K
    flat = codes.reshape(len(codes), -1)
    contrast = [metrics.comp_contrast(f, z, K) for z in flat]
    hess = [metrics.hessian_cross_check(f, z, K) for z in flat[:10]]
    comp = [metrics.compositionality_check(f, z, K)[0] for z in flat]
    return {"contrast_mean": float(np.mean(contrast)), "compositional_fraction": float(np.mean(comp)),
            "hessian_cross_max": float(max(hess)),
            "id_isolated_error": metrics.isolated_decoder_error(model, rc.scene, d["id_test"].latents),
            "ood_isolated_error": metrics.isolated_decoder_error(model, rc.scene, d["ood_test"].latents)}


def cmd_theory_check(rc: RunConfig, args) -> dict:
    report = {"seed": rc.seed, "generator": generator_theory(rc, rc.eval.theory_points)}
    if args.checkpoint:
        model = load_model(Path(args.checkpoint), rc)
        d = load_splits(_data_dir(args), rc, ("id_test", "ood_test"))
        report["decoder"] = decoder_theory(model, rc, d)
    out = Path(args.out) / "theory"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    g = report["generator"]
    return {"report": str(out / "report.json"), "contrast_max": g["contrast_max"],
            "hessian_cross_max": g["hessian_cross_max"]}


REPORT_FIELDS = ("id_identifiability", "ood_identifiability", "id_reconstruction_r2", "ood_reconstruction_r2",
                 "contrast", "id_mse", "ood_mse", "id_isolated_error", "ood_isolated_error")


def _ablate_one(job) -> dict:
    rc, data_dir, out, decoder, lam, idx = job
    run_seed = derive_seed(rc.seed, f"ablate/{idx}")
    run = replace(rc, model=replace(rc.model, decoder=decoder), train=replace(rc.train, lam=lam)).with_seed(run_seed)
    row = {"decoder": decoder, "lam": repr(lam), "seed": str(run_seed), "status": "ok"}
    try:
        train_run(run, data_dir, out)
    except TrainingDiverged as e:
        row["status"] = "diverged"
        row.update({k: "nan" for k in REPORT_FIELDS})
        log.warning("%s lam=%s seed=%d diverged: %s", decoder, lam, run_seed, e)
        return row
    model = load_model(out / "model.ckpt", run)
    d = load_splits(data_dir, run, ("id_test", "ood_test"))
    rep = metrics.evaluate(model, run.scene, d["id_test"], d["ood_test"], seed=run.seed,
                           contrast_codes=run.eval.contrast_codes)
    (out / "report.json").write_text(rep.to_json())
    row.update({k: repr(float(getattr(rep, k))) for k in REPORT_FIELDS})
    return row


def ablation_table(rows: list) -> str:
    """Per-run rows followed by median and IQR rows for each (decoder, lam) cell."""
    cols = ["decoder", "lam", "seed", "status", *REPORT_FIELDS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    cells = sorted({(r["decoder"], r["lam"]) for r in rows}, key=lambda c: (c[0], float(c[1])))
    for dec, lam in cells:
        ok = [r for r in rows if (r["decoder"], r["lam"]) == (dec, lam) and r["status"] == "ok"]
        vals = np.array([[float(r[k]) for k in REPORT_FIELDS] for r in ok]).reshape(len(ok), len(REPORT_FIELDS))
        if len(ok):
            med = np.median(vals, axis=0)
            iqr = np.percentile(vals, 75, axis=0) - np.percentile(vals, 25, axis=0)
        else:
            med = iqr = np.full(len(REPORT_FIELDS), np.nan)
        for name, v in (("median", med), ("iqr", iqr)):
            w.writerow({"decoder": dec, "lam": lam, "seed": name, "status": f"n={len(ok)}",
                        **{k: repr(float(x)) for k, x in zip(REPORT_FIELDS, v)}})
    return buf.getvalue()


def cmd_ablate(rc: RunConfig, args) -> dict:
    data_dir = _data_dir(args)
    load_splits(data_dir, rc)  # fail early on missing or mismatched data
    root = Path(args.out) / "ablate"
    jobs = [(rc, data_dir, root / f"{dec}_lam{lam!r}_s{i}", dec, lam, i)
            for dec in rc.ablate.decoders for lam in rc.ablate.lams for i in range(rc.ablate.seeds)]
    if rc.ablate.workers > 1:
        with ProcessPoolExecutor(rc.ablate.workers) as ex:
            rows = list(ex.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(j) for j in jobs]
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.csv").write_text(ablation_table(rows))
    return {"table": str(root / "ablation.csv"), "runs": len(rows),
            "diverged": sum(r["status"] == "diverged" for r in rows)}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "theory-check": cmd_theory_check, "ablate": cmd_ablate}


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults used for missing keys)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config's seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--quiet", action="store_true", help="no progress logging on stderr")
    p = argparse.ArgumentParser(prog="compgen-cli", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train / ID-test / OOD-test datasets")
    for name, help_ in [("train", "train an autoencoder"), ("eval", "metrics report for a checkpoint"),
                        ("heatmap", "error heatmaps over one latent coordinate"),
                        ("theory-check", "compositionality diagnostics for the generator / a decoder"),
                        ("ablate", "decoder x lambda x seed sweep")]:
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--data", help="dataset directory (default: <out>/data)")
        if name in ("eval", "heatmap", "theory-check"):
            sp.add_argument("--checkpoint", help="checkpoint path (default: <out>/train/model.ckpt)")
        if name == "heatmap":
            sp.add_argument("--mode", choices=("full_ae", "isolated_decoder", "both"))
            sp.add_argument("--resolution", type=int)
    return p


def _setup_logging(out: Path, quiet: bool) -> list:
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.FileHandler(out / "run.log")]
    if not quiet:
        handlers.append(logging.StreamHandler(sys.stderr))
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    return handlers


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    summary = {"command": args.command}
    handlers = []
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed", f"need an integer in [0, 2^64), got {args.seed}")
        rc = RunConfig.load(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handlers = _setup_logging(out, args.quiet)
        log.info("%s seed=%d out=%s", args.command, rc.seed, out)
        summary.update(COMMANDS[args.command](rc, args))
        summary.update(status="ok", seed=rc.seed)
        code = EXIT_OK
    except ConfigError as e:
        summary.update(status="config_error", field=e.field, error=str(e))
        code = EXIT_CONFIG
    except TrainingDiverged as e:
        summary.update(status="diverged", error=str(e))
        code = EXIT_DIVERGED
    except (ConfigMismatchError, DataMismatch) as e:
        summary.update(status="mismatch", error=str(e))
        code = EXIT_MISMATCH
    except (OSError, CheckpointError, DatasetFormatError) as e:
        summary.update(status="io_error", error=str(e))
        code = EXIT_IO
    except ValueError as e:  # remaining validation failures, e.g. a bad --resolution
        summary.update(status="config_error", error=str(e))
        code = EXIT_CONFIG
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()
    print(json.dumps(summary, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
