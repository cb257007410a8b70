"""Command-line entry point: ``facetouch <subcommand> [flags] --out DIR``.

Every run writes ``DIR/manifest.json`` holding the subcommand, its resolved
arguments and sha256 digests of its primary outputs. ``--manifest PATH``
replays a previous run from that file alone.

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 invalid config value.
Failures print one JSON line on stderr: ``{"error": kind, "field": ..., "message": ...}``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import re
import sys
from pathlib import Path

import numpy as np

from .autograd import ContractError

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
LOSS_CHOICES = ("ce", "focal", "supcon-printed", "supcon-logout")


class ConfigError(ContractError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field, self.message = field, message


def _fail(kind: str, message: str, field: str | None = None) -> None:
    print(json.dumps({"error": kind, "field": field, "message": message}, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------- config layering

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(tree: dict, key: str, value) -> None:
    """Assign ``tree[a][b] = value`` for key ``a.b``; unknown paths are config errors."""
    parts = key.split(".")
    node = tree
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(".".join(parts[:i + 1]), "unknown config field")
        if i == len(parts) - 1:
            _check_type(key, node[p], value)
            node[p] = value
        else:
            node = node[p]


def _check_type(key: str, default, value) -> None:
    if default is None or isinstance(default, dict):
        if isinstance(default, dict) and not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {value!r}")
        return
    ok = {bool: lambda v: isinstance(v, bool),
          int: lambda v: isinstance(v, int) and not isinstance(v, bool),
          float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
          str: lambda v: isinstance(v, str),
          list: lambda v: isinstance(v, list)}[type(default)]
    if not ok(value):
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict) and v:
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def layer_config(defaults: dict, file: str | None, sets: list[str], flags: dict) -> dict:
    """defaults <- config file (nested or dotted keys) <- --set key=value <- explicit flags."""
    cfg = copy.deepcopy(defaults)
    if file:
        try:
            loaded = json.loads(Path(file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("--config", f"cannot read {file}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("--config", "config file must hold a JSON object")
        for k, v in _flatten(loaded).items():
            set_dotted(cfg, k, v)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), _parse_value(v))
    for k, v in flags.items():
        if v is not None:
            set_dotted(cfg, k, v)
    return cfg


_FIELD = re.compile(r"^([A-Za-z_][\w./]*): (.*)$", re.S)


def _as_config_error(exc: ContractError) -> ConfigError:
    m = _FIELD.match(str(exc))
    return ConfigError(m.group(1), m.group(2)) if m else ConfigError("config", str(exc))


# ---------------------------------------------------------------- manifest

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def finish(out: Path, command: str, args: dict, body: dict, primary: list[Path]) -> dict:
    manifest = {"command": command, "args": args, **body,
                "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(primary)}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _files(root: Path, pattern: str = "*") -> list[Path]:
    return sorted(p for p in root.rglob(pattern) if p.is_file() and p.name != "manifest.json")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(a: dict, out: Path) -> None:
    from .synthdata import SampleLabels, gen_crop_dataset, gen_scene, save_crop_dataset, write_image, write_labels

    if a["scenes"]:
        out.mkdir(parents=True, exist_ok=True)
        truth = []
        for i in range(a["scenes"]):
            s = gen_scene(tuple(a["figures"]), a["occlusion_rate"], seed=a["seed"] * 1_000_003 + i,
                          positive_fraction=a["positive_fraction"])
            write_image(out / f"frame_{i:05d}.pgm", s.image)
            boxes = [("face", b) for b in s.face_boxes] + [("human", b) for b in s.human_boxes]
            truth.append(SampleLabels(i, "test", int(any(s.labels)), boxes))
        write_labels(out / "truth.csv", truth)
        finish(out, "gen-data", a, {"kind": "scenes", "seed": a["seed"]}, _files(out))
        return
    ds = gen_crop_dataset(a["n"], a["positive_fraction"], seed=a["seed"], size=a["size"],
                          hard_fraction=a["hard_fraction"])
    save_crop_dataset(ds, out)
    finish(out, "gen-data", a, ds.manifest, _files(out))


def _resolve_train_config(a: dict):
    from .training import TrainConfig

    flags = {"seed": a["seed"], "epochs": a["epochs"], "batch_size": a["batch_size"], "lr": a["lr"],
             "regime": a["regime"]}
    loss = a["loss"]
    if loss in ("ce", "focal"):
        flags["loss"] = loss
    elif loss is not None:
        flags["supcon_variant"] = "in" if loss == "supcon-printed" else "out"
        if a["regime"] == "sl":
            raise ConfigError("loss", f"{loss} needs --regime scl")
        flags["regime"] = "scl"
    tree = layer_config(TrainConfig().to_dict(), a["config"], a["set"], flags)
    try:
        return TrainConfig.from_dict(tree)
    except ContractError as exc:
        raise _as_config_error(exc) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def cmd_train(a: dict, out: Path) -> None:
    from .synthdata import load_crop_dataset
    from .training import evaluate, train, write_run

    cfg = _resolve_train_config(a)
    ds = load_crop_dataset(a["data"])
    x, y = ds.part("train")
    res = train(x, y, cfg)
    res.report, res.scores = evaluate(res.model, *ds.part("test"))
    body = write_run(out, res, cfg, ds.manifest["content_hash"])
    finish(out, "train", a, body, [out / f for f in ("model.ckpt", "loss.csv", "metrics.json", "roc.csv")])


def cmd_eval(a: dict, out: Path) -> None:
    from .models import load_checkpoint
    from .synthdata import load_crop_dataset
    from .training import evaluate

    model = load_checkpoint(a["ckpt"]).model()
    ds = load_crop_dataset(a["data"])
    x, y = ds.part(a["split"]) if a["split"] != "all" else (ds.images, ds.labels)
    report, scores = evaluate(model, x, y, a["threshold"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_roc_csv(out / "roc.csv")
    idx = ds.indices(a["split"]) if a["split"] != "all" else np.arange(len(ds))
    with open(out / "scores.csv", "w") as fh:
        fh.write("sample_id,label,score\n")
        fh.writelines(f"{i},{int(t)},{float(s)!r}\n" for i, t, s in zip(idx, y, scores))
    finish(out, "eval", a, {"dataset_hash": ds.manifest["content_hash"], "checkpoint_sha256": _sha256(Path(a["ckpt"])),
                            "accuracy": report.accuracy},
           [out / "metrics.json", out / "roc.csv", out / "scores.csv"])


def _pipeline_config(a: dict):
    from .pipeline import PipelineConfig

    try:
        return PipelineConfig(anonymize=not a["no_anonymize"], threshold=a["threshold"], blur_sigma=a["sigma"],
                              attention=a["attention"], fallback=not a["no_fallback"], seed=a["seed"])
    except ContractError as exc:
        raise _as_config_error(exc) from None


def cmd_infer(a: dict, out: Path) -> None:
    from .models import bilinear_resize, load_checkpoint
    from .pipeline import OracleDetector, process_frame
    from .synthdata import read_image, read_labels, write_image

    model = load_checkpoint(a["ckpt"]).model()
    cfg = _pipeline_config(a)
    img = read_image(a["image"])
    out.mkdir(parents=True, exist_ok=True)
    if a["truth"]:
        truth = read_labels(a["truth"])
        if a["index"] not in truth:
            raise ContractError(f"{a['truth']}: no row for sample {a['index']}")
        boxes = truth[a["index"]].boxes
        det = OracleDetector(seed=a["seed"])
        det.register(img, [b for c, b in boxes if c == "face"], [b for c, b in boxes if c == "human"])
        res, annotated = process_frame(img, det, model, cfg, a["index"])
        if res.error:
            raise ContractError(res.error)
        write_image(out / "annotated.ppm", annotated)
        result = {k: v for k, v in res.to_dict().items() if k != "timing_ms"}
        primary = [out / "annotated.ppm", out / "result.json"]
    else:
        gray = img.mean(axis=2) if img.ndim == 3 else img.astype(np.float64)
        s = model.config.input_size
        p = float(model.predict_proba(bilinear_resize(gray / 255.0, s, s)[None])[0])
        result = {"probability": p, "verdict": p >= cfg.threshold, "threshold": cfg.threshold}
        primary = [out / "result.json"]
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    finish(out, "infer", a, {"checkpoint_sha256": _sha256(Path(a["ckpt"]))}, primary)


def cmd_stream(a: dict, out: Path) -> None:
    from .models import load_checkpoint
    from .pipeline import OracleDetector, stream_directory

    model = load_checkpoint(a["ckpt"]).model()
    cfg = _pipeline_config(a)
    detector = None
    if a["miss_rate"] or a["fp_rate"]:
        detector = OracleDetector(a["miss_rate"], a["fp_rate"], a["seed"])
    if detector is not None:
        from .pipeline import FRAME_SUFFIXES
        from .synthdata import read_image, read_labels

        frames = Path(a["frames"])
        truth = read_labels(a["truth"] or frames / "truth.csv")
        paths = sorted(p for p in frames.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
        for i, p in enumerate(paths):
            if i in truth:
                try:
                    img = read_image(p)
                except ContractError:
                    continue
                b = truth[i].boxes
                detector.register(img, [x for c, x in b if c == "face"], [x for c, x in b if c == "human"])
    report = stream_directory(a["frames"], out, model, cfg, detector, a["truth"])
    finish(out, "stream", a, {"frames": report["frames"], "errored": report["errored"]},
           _files(out / "frames"))


def cmd_gradcheck(a: dict, out: Path) -> int:
    from .checks import check_suite

    worst = check_suite(range(a["seeds"]))
    failed = sorted(k for k, v in worst.items() if not v < a["tolerance"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(
        {"tolerance": a["tolerance"], "seeds": a["seeds"], "max_relative_error": worst, "failed": failed},
        indent=2, sort_keys=True) + "\n")
    finish(out, "gradcheck", a, {"passed": not failed}, [out / "gradcheck.json"])
    if failed:
        _fail("gradcheck", f"{len(failed)} check(s) above tolerance {a['tolerance']}: {', '.join(failed)}")
        return EXIT_RUNTIME
    return 0


def cmd_gradcam(a: dict, out: Path) -> None:
    from .explain import attention_focus
    from .models import gradcam, load_checkpoint
    from .synthdata import figure_mask, load_crop_dataset, write_image

    model = load_checkpoint(a["ckpt"]).model()
    ds = load_crop_dataset(a["data"])
    idx = ds.indices(a["split"])[:a["count"]]
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    rows = []
    for i in idx:
        img = ds.images[i]
        cam = gradcam(model, img, 1, a["layer"])
        write_image(out / "maps" / f"{i:06d}.pgm", cam)
        gray = np.repeat(img[..., None], 3, axis=2).astype(np.float64)
        heat = np.zeros_like(gray)
        heat[..., 0] = 255.0
        m = 0.5 * cam[..., None]
        write_image(out / "overlays" / f"{i:06d}.ppm", np.floor(gray * (1 - m) + heat * m + 0.5).astype(np.uint8))
        h, w = img.shape
        inside, outside = attention_focus(cam, figure_mask(ds.figures[i], h, w))
        p = float(model.predict_proba(img[None])[0])
        rows.append(f"{i},{int(ds.labels[i])},{p!r},{inside!r},{outside!r}\n")
    (out / "focus.csv").write_text("sample_id,label,probability,inside,outside\n" + "".join(rows))
    finish(out, "gradcam", a, {"dataset_hash": ds.manifest["content_hash"]},
           _files(out / "maps") + _files(out / "overlays") + [out / "focus.csv"])


REQUIRED = {"train": ("data",), "eval": ("ckpt", "data"), "infer": ("ckpt", "image"),
            "stream": ("ckpt", "frames"), "gradcam": ("ckpt", "data")}
COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "stream": cmd_stream, "gradcheck": cmd_gradcheck, "gradcam": cmd_gradcam}


# ---------------------------------------------------------------- parser

def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=2.0, help="face blur sigma in pixels")
    p.add_argument("--attention", action="store_true", help="overlay Grad-CAM on each crop")
    p.add_argument("--no-anonymize", action="store_true")
    p.add_argument("--no-fallback", action="store_true", help="skip the human detector")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facetouch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")
        p.add_argument("--manifest", help="replay the run recorded in this manifest")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen-data", "generate a synthetic crop dataset or a scene stream")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--positive-fraction", type=float, default=0.22)
    p.add_argument("--hard-fraction", type=float, default=0.4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scenes", type=int, default=0, help="write N scene frames plus truth.csv instead of crops")
    p.add_argument("--occlusion-rate", type=float, default=0.5)
    p.add_argument("--figures", type=int, nargs=2, default=[0, 4], metavar=("LO", "HI"))

    p = add("train", "train a touch classifier (sl or two-stage scl)")
    p.add_argument("--data")
    p.add_argument("--config", help="JSON config; nested objects or dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--regime", choices=("sl", "scl"))
    p.add_argument("--loss", choices=LOSS_CHOICES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = add("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("infer", "classify one image, or run the cascade on one frame with --truth")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--truth", help="labels CSV giving face/human boxes for the oracle detector")
    p.add_argument("--index", type=int, default=0, help="row of --truth describing the image")
    _pipeline_flags(p)

    p = add("stream", "run the cascade over a directory of PPM/PGM frames")
    p.add_argument("--ckpt")
    p.add_argument("--frames")
    p.add_argument("--truth", help="ground-truth CSV (default FRAMES/truth.csv)")
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    _pipeline_flags(p)

    p = add("gradcheck", "finite-difference check of every layer and loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-6)

    p = add("gradcam", "export Grad-CAM maps and overlays for dataset crops")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--layer")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    missing = [f"--{k}" for k in REQUIRED.get(ns.command, ()) if getattr(ns, k) is None]
    if missing and not ns.manifest:
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        sub.print_usage(sys.stderr)
        _fail("usage", f"missing required flag(s): {', '.join(missing)}")
        return EXIT_USAGE
    out = Path(ns.out)
    args = {k: v for k, v in vars(ns).items() if k not in ("out", "manifest", "command")}
    try:
        if ns.manifest:
            recorded = json.loads(Path(ns.manifest).read_text())
            if recorded.get("command") != ns.command:
                raise ConfigError("--manifest", f"manifest is for {recorded.get('command')!r}, not {ns.command!r}")
            args = recorded["args"]
        code = COMMANDS[ns.command](args, out)
        return code or 0
    except ConfigError as exc:
        _fail("config", exc.message, exc.field)
        return EXIT_CONFIG
    except (ContractError, OSError, ValueError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc).replace("\n", " "))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
