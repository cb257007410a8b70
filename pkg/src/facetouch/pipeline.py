"""Runtime cascade: face detector, human fallback, touch classifier, face blur,
optional attention overlay and annotation, over single frames or a frame stream.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .autograd import ContractError
from .models import FaceTouchModel, bilinear_resize, gradcam
from .rng import make_rng
from .synthdata import SceneSample, read_image, read_labels, write_image

RESULT_SCHEMA = 1
PATHS = ("face-path", "human-path", "no-detection")
GREEN = np.array([0, 255, 0], dtype=np.uint8)
RED = np.array([255, 0, 0], dtype=np.uint8)


@dataclass(frozen=True)
class Detection:
    cls: str  # face | human
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h
    confidence: float = 1.0

    def __post_init__(self):
        if self.cls not in ("face", "human"):
            raise ContractError(f"detection class must be face or human, got {self.cls!r}")
        cx, cy, w, h = self.box
        eps = 1e-9
        if not (w > 0 and h > 0 and cx - w / 2 >= -eps and cy - h / 2 >= -eps
                and cx + w / 2 <= 1 + eps and cy + h / 2 <= 1 + eps):
            raise ContractError(f"detection box {self.box} is not inside the image")
        if not (np.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ContractError(f"detection confidence {self.confidence} outside [0, 1]")


class DetectorPort(Protocol):
    def detect(self, image: np.ndarray, cls: str) -> list[Detection]: ...


def image_key(image: np.ndarray) -> str:
    a = np.ascontiguousarray(image)
    return hashlib.sha256(str(a.shape).encode() + str(a.dtype).encode() + a.tobytes()).hexdigest()


class OracleDetector:
    """Returns registered ground-truth boxes, with optional injected misses and false positives.

    Truth is keyed by image content. Unregistered images raise ``LookupError``.
    """

    def __init__(self, miss_rate: float = 0.0, fp_rate: float = 0.0, seed: int = 0):
        if not (0 <= miss_rate <= 1 and 0 <= fp_rate <= 1):
            raise ContractError("miss_rate and fp_rate must lie in [0, 1]")
        self.miss_rate, self.fp_rate, self.seed = miss_rate, fp_rate, seed
        self.truth: dict[str, dict[str, list]] = {}
        self.calls = {"face": 0, "human": 0}

    def register(self, image, faces, humans) -> None:
        self.truth[image_key(image)] = {"face": list(faces), "human": list(humans)}

    def register_scene(self, scene: SceneSample) -> None:
        self.register(scene.image, scene.face_boxes, scene.human_boxes)

    def detect(self, image, cls: str) -> list[Detection]:
        if cls not in self.calls:
            raise ContractError(f"oracle detector has no class {cls!r}")
        self.calls[cls] += 1
        key = image_key(image)
        if key not in self.truth:
            raise LookupError("oracle detector has no ground truth for this frame")
        rng = make_rng(self.seed, "oracle", cls, int(key[:15], 16))
        out = [Detection(cls, tuple(b)) for b in self.truth[key][cls] if not rng.random() < self.miss_rate]
        if rng.random() < self.fp_rate:
            w, h = rng.uniform(0.05, 0.3, 2)
            out.append(Detection(cls, (rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h), 0.5))
        return out


@dataclass
class PipelineConfig:
    anonymize: bool = True
    threshold: float = 0.5
    blur_sigma: float = 2.0
    attention: bool = False
    fallback: bool = True
    face_context: float = 4.25  # crop side / face box side, so the arms are in view
    face_drop: float = 0.11  # crop centre sits this fraction of its side below the face centre
    seed: int = 0

    def __post_init__(self):
        if not self.blur_sigma > 0:
            raise ContractError(f"blur_sigma: must be > 0, got {self.blur_sigma}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"threshold: must lie in (0, 1), got {self.threshold}")
        if not self.face_context >= 1.0:
            raise ContractError(f"face_context: must be >= 1, got {self.face_context}")


@dataclass
class CropRecord:
    box: tuple[float, float, float, float]
    crop_box: tuple[float, float, float, float]  # pixel x0, y0, x1, y1 of the classified region
    probability: float
    verdict: bool
    blur_applied: bool = False
    attention: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"box": list(self.box), "crop_box": list(self.crop_box), "probability": self.probability,
                "verdict": self.verdict, "blur_applied": self.blur_applied,
                "attention": self.attention is not None}


@dataclass
class FrameResult:
    frame_id: int
    path_taken: str | None = None
    records: list[CropRecord] = field(default_factory=list)
    timing_ms: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    frame: np.ndarray | None = field(default=None, repr=False)  # the anonymized frame

    def to_dict(self) -> dict:
        return {"schema_version": RESULT_SCHEMA, "frame_id": self.frame_id, "path_taken": self.path_taken,
                "error": self.error, "records": [r.to_dict() for r in self.records],
                "timing_ms": self.timing_ms}


# ---------------------------------------------------------------- geometry

def box_to_pixels(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Normalized (cx, cy, w, h) to clipped integer pixel bounds [x0, x1) x [y0, y1)."""
    cx, cy, w, h = box
    x0 = int(np.floor((cx - w / 2) * width + 0.5))
    x1 = int(np.floor((cx + w / 2) * width + 0.5))
    y0 = int(np.floor((cy - h / 2) * height + 0.5))
    y1 = int(np.floor((cy + h / 2) * height + 0.5))
    x0, y0 = min(max(x0, 0), width - 1), min(max(y0, 0), height - 1)
    return x0, y0, max(min(x1, width), x0 + 1), max(min(y1, height), y0 + 1)


def extract_crop(gray: np.ndarray, region, out_size: int, keep=None) -> np.ndarray:
    """Bilinear sample of the square pixel ``region`` (x0, y0, x1, y1) to out_size^2.

    Samples outside the image, or outside ``keep`` when given, are zero; this
    is the aspect-preserving zero padding.
    """
    x0, y0, x1, y1 = region
    h, w = gray.shape
    step_x, step_y = (x1 - x0) / out_size, (y1 - y0) / out_size
    xs = x0 + (np.arange(out_size) + 0.5) * step_x - 0.5
    ys = y0 + (np.arange(out_size) + 0.5) * step_y - 0.5
    inside_x = (xs >= -0.5) & (xs <= w - 0.5)
    inside_y = (ys >= -0.5) & (ys <= h - 0.5)
    if keep is not None:
        kx0, ky0, kx1, ky1 = keep
        inside_x &= (xs >= kx0 - 0.5) & (xs <= kx1 - 0.5)
        inside_y &= (ys >= ky0 - 0.5) & (ys <= ky1 - 0.5)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    xl, yl = np.floor(xc).astype(int), np.floor(yc).astype(int)
    xh, yh = np.minimum(xl + 1, w - 1), np.minimum(yl + 1, h - 1)
    fx, fy = (xc - xl)[None, :], (yc - yl)[:, None]
    g = gray.astype(np.float64)
    out = (g[yl][:, xl] * (1 - fy) * (1 - fx) + g[yl][:, xh] * (1 - fy) * fx
           + g[yh][:, xl] * fy * (1 - fx) + g[yh][:, xh] * fy * fx)
    return out * inside_y[:, None] * inside_x[None, :]


def crop_region(det: Detection, width: int, height: int, cfg: PipelineConfig):
    """Square pixel region to classify for a detection, plus the box to keep (None = all)."""
    cx, cy, bw, bh = det.box[0] * width, det.box[1] * height, det.box[2] * width, det.box[3] * height
    if det.cls == "face":
        side = max(bw, bh) * cfg.face_context
        cy = cy + cfg.face_drop * side
        keep = None
    else:
        side = max(bw, bh)
        keep = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
    return (cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2), keep


def _gray(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    g = a.mean(axis=2) if a.ndim == 3 else a
    return g / 255.0 if a.dtype == np.uint8 else g.astype(np.float64)


# ---------------------------------------------------------------- blur

def _gauss_kernel(sigma: float) -> np.ndarray:
    r = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return k / k.sum()


def blur_region(image: np.ndarray, box, sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Gaussian-blur the pixels inside ``box`` and add noise at half the blurred region's std.

    Separable kernel of radius ceil(3 sigma) with edge clamping; pixels outside
    the box are returned bit-identical. Without ``rng`` no noise is added.
    """
    if not sigma > 0:
        raise ContractError(f"blur_region: sigma must be > 0, got {sigma}")
    img = np.asarray(image)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = box_to_pixels(box, w, h)
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    f = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    if f.ndim == 2:
        f = f[..., None]
    ys = np.clip(np.arange(y0 - r, y1 + r), 0, h - 1)
    xs = np.clip(np.arange(x0 - r, x1 + r), 0, w - 1)
    patch = f[ys][:, xs]
    tmp = sum(k[i] * patch[i:i + (y1 - y0)] for i in range(len(k)))
    blurred = sum(k[j] * tmp[:, j:j + (x1 - x0)] for j in range(len(k)))
    if rng is not None:
        std = blurred.std(axis=(0, 1), keepdims=True)
        blurred = blurred + rng.standard_normal(blurred.shape) * (0.5 * std)
    blurred = np.clip(blurred, 0.0, 1.0)
    out = img.copy()
    region = np.floor(blurred * 255.0 + 0.5).astype(np.uint8) if img.dtype == np.uint8 else blurred.astype(img.dtype)
    out[y0:y1, x0:x1] = region if img.ndim == 3 else region[..., 0]
    return out


# ---------------------------------------------------------------- cascade

class _Timer:
    def __init__(self, sink: dict, name: str):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + (time.perf_counter() - self.t) * 1e3


def cascade_step(image, detector: DetectorPort, model: FaceTouchModel, cfg: PipelineConfig,
                 frame_id: int = 0) -> FrameResult:
    """Face detector first; the human detector runs only when no face was found.

    Detector exceptions mark the frame errored instead of propagating.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    res = FrameResult(frame_id)
    t = res.timing_ms
    try:
        with _Timer(t, "detect_face"):
            dets = detector.detect(image, "face")
        path = "face-path"
        if not dets and cfg.fallback:
            with _Timer(t, "detect_human"):
                dets = detector.detect(image, "human")
            path = "human-path"
        if not dets:
            path = "no-detection"
    except Exception as exc:  # noqa: BLE001  any detector failure is contained to this frame
        res.error = f"detector failed: {type(exc).__name__}: {exc}"
        res.frame = image
        return res
    res.path_taken = path

    size = model.config.input_size
    gray = _gray(image)
    with _Timer(t, "classify"):
        crops, regions = [], []
        for d in dets:
            region, keep = crop_region(d, w, h, cfg)
            crops.append(extract_crop(gray, region, size, keep))
            regions.append(region)
        probs = model.predict_proba(np.stack(crops)) if crops else np.zeros(0)
    for d, region, p, crop in zip(dets, regions, probs, crops):
        rec = CropRecord(d.box, tuple(float(v) for v in region), float(p), bool(p >= cfg.threshold))
        if cfg.attention:
            with _Timer(t, "attention"):
                rec.attention = gradcam(model, crop)
        res.records.append(rec)

    frame = image
    if path == "face-path" and cfg.anonymize:
        with _Timer(t, "blur"):
            for k, rec in enumerate(res.records):
                frame = blur_region(frame, rec.box, cfg.blur_sigma, make_rng(cfg.seed, "blur", frame_id, k))
                rec.blur_applied = True
    res.frame = frame
    t["total"] = sum(v for k, v in t.items() if k != "total")
    return res


# ---------------------------------------------------------------- annotate

def _rgb(image) -> np.ndarray:
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.floor(np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8)
    return np.repeat(a[..., None], 3, axis=2) if a.ndim == 2 else a.copy()


STAMP_BITS = 32


def annotate(image, result: FrameResult) -> np.ndarray:
    """RGB copy with red (touch) / green (no touch) box outlines, optional attention
    overlay, and the frame id stamped as bits along the top-left of row 0."""
    if any(r.blur_applied for r in result.records):
        if result.frame is None or np.asarray(image).tobytes() != np.asarray(result.frame).tobytes():
            raise ContractError("annotate: frame with blurred faces expected; got the raw frame")
    out = _rgb(image)
    h, w = out.shape[:2]
    for rec in result.records:
        x0, y0, x1, y1 = box_to_pixels(rec.box, w, h)
        if rec.attention is not None:
            m = np.clip(bilinear_resize(rec.attention, y1 - y0, x1 - x0), 0, 1)[..., None] * 0.5
            patch = out[y0:y1, x0:x1].astype(np.float64)
            out[y0:y1, x0:x1] = np.floor(patch * (1 - m) + RED * m + 0.5).astype(np.uint8)
        color = RED if rec.verdict else GREEN
        out[y0, x0:x1] = color
        out[y1 - 1, x0:x1] = color
        out[y0:y1, x0] = color
        out[y0:y1, x1 - 1] = color
    n = min(STAMP_BITS, w)
    bits = (result.frame_id >> np.arange(n)) & 1
    out[0, :n] = (bits * 255).astype(np.uint8)[:, None]
    return out


def read_stamp(image: np.ndarray) -> int:
    row = np.asarray(image)[0, :STAMP_BITS, 0]
    return int(sum(1 << i for i, v in enumerate(row) if v >= 128))


# ---------------------------------------------------------------- streams

def process_frame(image, detector, model, cfg, frame_id: int) -> tuple[FrameResult, np.ndarray]:
    res = cascade_step(image, detector, model, cfg, frame_id)
    t0 = time.perf_counter()
    out = annotate(res.frame, res)
    res.timing_ms["annotate"] = (time.perf_counter() - t0) * 1e3
    return res, out


def throughput_report(results: list[FrameResult], wall_s: float) -> dict:
    stages: dict[str, list[float]] = {}
    for r in results:
        for k, v in r.timing_ms.items():
            stages.setdefault(k, []).append(v)
    n = len(results)
    return {
        "frames": n,
        "errored": sum(r.error is not None for r in results),
        "wall_seconds": max(wall_s, 1e-9),
        "fps_end_to_end": n / max(wall_s, 1e-9),
        "stages": {k: {"calls": len(v), "mean_ms": max(float(np.mean(v)), 1e-9),
                       "fps": len(v) / max(sum(v) / 1e3, 1e-9)} for k, v in sorted(stages.items())},
    }


def run_stream(frames: Iterable, detector: DetectorPort, model: FaceTouchModel, cfg: PipelineConfig,
               sink=None) -> tuple[list[FrameResult], dict]:
    """Process ``(frame_id, image_or_loader)`` pairs in order.

    A loader is a zero-argument callable; if it raises, or the frame size differs
    from the first frame, that frame's result is marked errored and the stream goes on.
    ``sink(result, annotated_or_None)`` is called in input order.
    """
    results = []
    shape = None
    t0 = time.perf_counter()
    for frame_id, src in frames:
        try:
            image = src() if callable(src) else np.asarray(src)
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise ContractError(f"frame size {image.shape} differs from stream size {shape}")
        except Exception as exc:  # noqa: BLE001
            res = FrameResult(frame_id, error=f"unreadable frame: {exc}")
            results.append(res)
            if sink:
                sink(res, None)
            continue
        res, out = process_frame(image, detector, model, cfg, frame_id)
        results.append(res)
        if sink:
            sink(res, out)
    return results, throughput_report(results, time.perf_counter() - t0)


FRAME_SUFFIXES = (".ppm", ".pgm")


def stream_directory(in_dir, out_dir, model: FaceTouchModel, cfg: PipelineConfig,
                     detector: DetectorPort | None = None, truth_csv=None) -> dict:
    """Frames in lexical order -> annotated PPMs, results.jsonl, throughput.json.

    Without ``detector``, an oracle is built from ``truth_csv`` (labels schema,
    sample_id = frame index in lexical order).
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    paths = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        raise ContractError(f"{in_dir}: no .ppm/.pgm frames")
    if detector is None:
        truth_csv = Path(truth_csv) if truth_csv else in_dir / "truth.csv"
        detector = OracleDetector(seed=cfg.seed)
        truth = read_labels(truth_csv)
        for i, p in enumerate(paths):
            if i in truth:
                try:
                    img = read_image(p)
                except ContractError:
                    continue
                boxes = truth[i].boxes
                detector.register(img, [b for c, b in boxes if c == "face"], [b for c, b in boxes if c == "human"])
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    lines = []

    def sink(res: FrameResult, annotated):
        lines.append(json.dumps({**res.to_dict(), "source": paths[res.frame_id].name}, sort_keys=True))
        if annotated is not None:
            write_image(out_dir / "frames" / (paths[res.frame_id].stem + ".ppm"), annotated)

    results, report = run_stream(((i, (lambda p=p: read_image(p))) for i, p in enumerate(paths)),
                                 detector, model, cfg, sink)
    (out_dir / "results.jsonl").write_text("\n".join(lines) + "\n")
    (out_dir / "throughput.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
