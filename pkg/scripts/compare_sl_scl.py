"""Train SL and two-stage SCL side by side on synthetic crops and compare them.

    python scripts/compare_sl_scl.py --seeds 0 1 2 --out runs/compare

Writes one run directory per (regime, seed), a pooled ROC table on a fixed FPR
grid, and summary.json with accuracies, AUCs and the ROC dominance fraction.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from facetouch.metrics import tpr_at
from facetouch.synthdata import gen_crop_dataset
from facetouch.training import TrainConfig, desk_encoder, evaluate, train, write_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--sl-loss", choices=("ce", "focal"), default="ce")
    ap.add_argument("--variant", choices=("in", "out"), default="in", help="supcon variant for SCL")
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    a = ap.parse_args()

    grid = np.linspace(0, 1, 101)
    rows, summary = [], {"seeds": a.seeds, "runs": {}}
    for seed in a.seeds:
        ds = gen_crop_dataset(a.n, 0.22, seed=seed)
        (xtr, ytr), (xte, yte) = ds.part("train"), ds.part("test")
        curves = {}
        for regime in ("sl", "scl"):
            cfg = TrainConfig(regime=regime, epochs=a.epochs, batch_size=a.batch_size, seed=seed,
                              loss=a.sl_loss, supcon_variant=a.variant, encoder=desk_encoder(seed=seed))
            t0 = time.perf_counter()
            res = train(xtr, ytr, cfg)
            res.report, res.scores = evaluate(res.model, xte, yte)
            secs = time.perf_counter() - t0
            write_run(a.out / f"{regime}_seed{seed}", res, cfg, ds.manifest["content_hash"], {"seconds": secs})
            curves[regime] = tpr_at(res.report.roc_fpr, res.report.roc_tpr, grid)
            summary["runs"][f"{regime}_seed{seed}"] = {"accuracy": res.report.accuracy, "auc": res.report.auc,
                                                       "f1": res.report.f1, "seconds": round(secs, 1)}
            print(f"seed {seed} {regime:3s} acc {res.report.accuracy:.4f} auc {res.report.auc:.4f} ({secs:.0f}s)",
                  flush=True)
        rows += [(seed, f, s, l) for f, s, l in zip(grid, curves["scl"], curves["sl"])]
        summary["runs"][f"dominance_seed{seed}"] = float(np.mean(curves["scl"] >= curves["sl"]))

    with open(a.out / "roc_grid.csv", "w") as fh:
        fh.write("seed,fpr,tpr_scl,tpr_sl\n")
        fh.writelines(f"{s},{f:.2f},{x!r},{y!r}\n" for s, f, x, y in rows)
    summary["dominance"] = float(np.mean([r[2] >= r[3] for r in rows]))
    for regime in ("sl", "scl"):
        summary[f"{regime}_mean_accuracy"] = float(np.mean([summary["runs"][f"{regime}_seed{s}"]["accuracy"]
                                                             for s in a.seeds]))
    (a.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))


if __name__ == "__main__":
    main()
