"""How often Grad-CAM puts more mass on the head and hands than elsewhere, per stage.

    python scripts/gradcam_focus.py --ckpt runs/compare/scl_seed0/model.ckpt --seed 0

The dataset is regenerated from ``--seed`` (same generator as training); only
correctly classified positives of the test split are scored.
"""
import argparse

import numpy as np

from facetouch.explain import positive_focus
from facetouch.models import load_checkpoint
from facetouch.synthdata import gen_crop_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--limit", type=int)
    a = ap.parse_args()

    model = load_checkpoint(a.ckpt).model()
    ds = gen_crop_dataset(a.n, 0.22, seed=a.seed, size=model.config.input_size)
    idx = ds.indices("test")
    figs = [ds.figures[i] for i in idx]
    for layer in model.stage_names:
        foci = positive_focus(model, ds.images[idx], ds.labels[idx], figs, limit=a.limit, layer=layer)
        ratio = np.mean([f.inside / max(f.outside, 1e-12) for f in foci]) if foci else float("nan")
        print(f"{layer}: {sum(f.focused for f in foci)}/{len(foci)} focused, mean inside/outside {ratio:.2f}")


if __name__ == "__main__":
    main()
