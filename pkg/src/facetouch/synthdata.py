"""Synthetic stick-figure crops and scenes, plus PGM/PPM and label CSV I/O.

Geometry is integer-valued in 1/16-pixel units and every pixel test is an
exact integer comparison at pixel centres, so a seed yields the same bytes
on every platform. A figure is "touching" when a hand centre lies within
the head radius of the head centre.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import ContractError
from .rng import make_rng

SUB = 16
FORMAT_VERSION = 1
BOX_CLASSES = ("face", "human", "hand")
LABEL_HEADER = ["sample_id", "split", "label", "box_class", "cx", "cy", "w", "h"]


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class FigureSpec:
    """One figure; coordinates in 1/16 px relative to the owning canvas."""

    head: tuple[int, int, int]  # cx, cy, r
    torso: tuple[int, int, int, int, int]  # x0, y0, x1, y1, half width
    arms: tuple[tuple[tuple[int, int], ...], ...]  # shoulder, elbow, hand
    arm_half: int
    hand_r: int
    tones: tuple[int, int, int]  # body, skin, hand
    kind: str  # touch | hard | easy
    tile: tuple[int, int, int, int]  # x0, y0, x1, y1 in px, the figure's clip box
    face_visible: bool = True

    @property
    def hands(self) -> list[tuple[int, int]]:
        return [arm[-1] for arm in self.arms]

    @property
    def touching(self) -> bool:
        return touching_from_geometry(self)

    def face_box(self, width: int, height: int) -> tuple[float, float, float, float]:
        cx, cy, r = self.head
        return _norm_box(cx - r, cy - r, cx + r, cy + r, width, height)

    def hand_boxes(self, width: int, height: int) -> list[tuple[float, float, float, float]]:
        return [_norm_box(x - self.hand_r, y - self.hand_r, x + self.hand_r, y + self.hand_r, width, height)
                for x, y in self.hands]

    def human_box(self, width: int, height: int) -> tuple[float, float, float, float]:
        cx, cy, r = self.head
        xs = [cx - r, cx + r, self.torso[0] - self.torso[4], self.torso[0] + self.torso[4]]
        ys = [cy - r, self.torso[3]]
        for arm in self.arms:
            for x, y in arm:
                xs += [x - self.arm_half, x + self.arm_half]
                ys += [y - self.arm_half, y + self.arm_half]
        tx0, ty0, tx1, ty1 = (v * SUB for v in self.tile)
        return _norm_box(max(min(xs), tx0), max(min(ys), ty0), min(max(xs), tx1), min(max(ys), ty1), width, height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FigureSpec":
        return cls(head=tuple(d["head"]), torso=tuple(d["torso"]),
                   arms=tuple(tuple(tuple(p) for p in arm) for arm in d["arms"]),
                   arm_half=d["arm_half"], hand_r=d["hand_r"], tones=tuple(d["tones"]),
                   kind=d["kind"], tile=tuple(d["tile"]), face_visible=d.get("face_visible", True))


def touching_from_geometry(fig: FigureSpec) -> bool:
    cx, cy, r = fig.head
    return any((x - cx) ** 2 + (y - cy) ** 2 <= r * r for x, y in fig.hands)


def _norm_box(x0, y0, x1, y1, width, height):
    """Sub-pixel corners to a clipped, normalized (cx, cy, w, h)."""
    W, H = width * SUB, height * SUB
    x0, x1 = max(0, x0), min(W, x1)
    y0, y1 = max(0, y0), min(H, y1)
    return ((x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)


def _rint(rng, lo, hi) -> int:
    return int(rng.integers(lo, hi + 1))


def _sample_hand(rng, head, tile_sub, kind):
    """Hand centre offset for one arm, by rejection in integer arithmetic."""
    cx, cy, r = head
    x0, y0, x1, y1 = tile_sub
    m = 3 * SUB
    for _ in range(10_000):
        if kind == "touch":
            dx, dy = _rint(rng, -r, r), _rint(rng, -r, r)
            ok = 400 * (dx * dx + dy * dy) <= 289 * r * r  # within 0.85 r
        elif kind == "hard":
            dx, dy = _rint(rng, -2 * r, 2 * r), _rint(rng, -2 * r, r)
            d2 = dx * dx + dy * dy
            ok = 4 * d2 >= 9 * r * r and d2 <= 4 * r * r  # 1.5 r .. 2 r
        else:
            dx, dy = _rint(rng, x0 + m - cx, x1 - m - cx), _rint(rng, y0 + m - cy, y1 - m - cy)
            ok = 100 * (dx * dx + dy * dy) > 484 * r * r  # beyond 2.2 r
        hx, hy = cx + dx, cy + dy
        if ok and x0 + SUB <= hx <= x1 - SUB and y0 + SUB <= hy <= y1 - SUB:
            return hx, hy
    raise RuntimeError(f"could not place a {kind} hand")  # pragma: no cover


def sample_figure(rng, kind: str, tile: tuple[int, int, int, int]) -> FigureSpec:
    """Draw a figure of the given kind inside ``tile`` (pixel box, square)."""
    if kind not in ("touch", "hard", "easy"):
        raise ContractError(f"unknown figure kind {kind!r}")
    tx0, ty0, tx1, ty1 = tile
    size = tx1 - tx0
    u = lambda v: v * size // 64  # noqa: E731  (base geometry is laid out for 64 px)
    ox, oy = tx0 * SUB, ty0 * SUB
    tile_sub = (tx0 * SUB, ty0 * SUB, tx1 * SUB, ty1 * SUB)

    r = u(_rint(rng, 6 * SUB, 9 * SUB))
    cx = ox + u(32 * SUB + _rint(rng, -4 * SUB, 4 * SUB))
    cy = oy + u(_rint(rng, 22 * SUB, 28 * SUB))
    sw = u(_rint(rng, 9 * SUB, 13 * SUB))
    neck = cy + r + u(_rint(rng, 2 * SUB, 4 * SUB))
    torso = (cx, neck + u(2 * SUB), cx + u(_rint(rng, -4 * SUB, 4 * SUB)), oy + u(74 * SUB), sw)
    shoulders = [(cx - sw, neck + u(2 * SUB)), (cx + sw, neck + u(2 * SUB))]

    key = _rint(rng, 0, 1)
    arms = []
    for side, sh in zip((-1, 1), shoulders):
        arm_kind = kind if side == (-1, 1)[key] else "easy"
        hand = _sample_hand(rng, (cx, cy, r), tile_sub, arm_kind)
        bend = u(_rint(rng, 3 * SUB, 9 * SUB))
        elbow = ((sh[0] + hand[0]) // 2 + side * bend, (sh[1] + hand[1]) // 2 + u(_rint(rng, 0, 6 * SUB)))
        arms.append((sh, elbow, hand))

    # hands are dark so a hand over the bright face reads clearly
    tones = (_rint(rng, 80, 135), _rint(rng, 175, 240), _rint(rng, 15, 55))
    return FigureSpec(head=(cx, cy, r), torso=torso, arms=tuple(arms),
                      arm_half=u(_rint(rng, 20, 28)), hand_r=u(_rint(rng, 36, 48)),
                      tones=tones, kind=kind, tile=tile)


# ---------------------------------------------------------------- raster

def _centres(h: int, w: int):
    ys = (np.arange(h, dtype=np.int64) * SUB + SUB // 2)[:, None]
    xs = (np.arange(w, dtype=np.int64) * SUB + SUB // 2)[None, :]
    return ys, xs


def disk_mask(h: int, w: int, cx: int, cy: int, r: int) -> np.ndarray:
    ys, xs = _centres(h, w)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def segment_mask(h: int, w: int, a, b, half: int) -> np.ndarray:
    """Pixels whose centre is within ``half`` of segment ab (capsule), exactly."""
    ys, xs = _centres(h, w)
    px, py = xs - a[0], ys - a[1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    L = dx * dx + dy * dy
    near_a = px * px + py * py <= half * half
    if L == 0:
        return near_a
    t = px * dx + py * dy
    qx, qy = xs - b[0], ys - b[1]
    near_b = qx * qx + qy * qy <= half * half
    cross = px * dy - py * dx
    side = (t > 0) & (t < L) & (cross * cross <= half * half * L)
    return near_a | near_b | side


def figure_mask(fig: FigureSpec, h: int, w: int, parts=("head", "hands")) -> np.ndarray:
    """Boolean mask of the requested parts: head, hands, arms, torso."""
    m = np.zeros((h, w), dtype=bool)
    if "head" in parts:
        m |= disk_mask(h, w, *fig.head)
    if "hands" in parts:
        for x, y in fig.hands:
            m |= disk_mask(h, w, x, y, fig.hand_r)
    if "arms" in parts:
        for arm in fig.arms:
            for a, b in zip(arm[:-1], arm[1:]):
                m |= segment_mask(h, w, a, b, fig.arm_half)
    if "torso" in parts:
        t = fig.torso
        m |= segment_mask(h, w, t[:2], t[2:4], t[4])
    return m


def _paint_background(rng, h: int, w: int) -> np.ndarray:
    base = _rint(rng, 10, 70)
    gx, gy = _rint(rng, -12, 12), _rint(rng, -12, 12)
    ys, xs = np.arange(h, dtype=np.int64)[:, None], np.arange(w, dtype=np.int64)[None, :]
    return base + (gx * xs) // 64 + (gy * ys) // 64 + np.zeros((h, w), dtype=np.int64)


def _paint_figure(canvas: np.ndarray, fig: FigureSpec, rng=None) -> None:
    h, w = canvas.shape
    x0, y0, x1, y1 = fig.tile
    clip = np.zeros((h, w), dtype=bool)
    clip[y0:y1, x0:x1] = True
    body, skin, hand = fig.tones
    t = fig.torso
    canvas[segment_mask(h, w, t[:2], t[2:4], t[4]) & clip] = body
    canvas[disk_mask(h, w, *fig.head) & clip] = skin
    for arm in fig.arms:
        for a, b in zip(arm[:-1], arm[1:]):
            canvas[segment_mask(h, w, a, b, fig.arm_half) & clip] = body
    for x, y in fig.hands:
        canvas[disk_mask(h, w, x, y, fig.hand_r) & clip] = hand
    if not fig.face_visible:
        cx, cy, r = fig.head
        pad = 2 * SUB
        ys, xs = _centres(h, w)
        box = (xs >= cx - r - pad) & (xs <= cx + r + pad) & (ys >= cy - r - pad) & (ys <= cy + r + pad)
        canvas[box & clip] = _rint(rng, 0, 30)


def _finish(rng, canvas: np.ndarray) -> np.ndarray:
    amp = _rint(rng, 3, 10)
    noise = rng.integers(-amp, amp + 1, size=canvas.shape)
    return np.clip(canvas + noise, 0, 255).astype(np.uint8)


def render_crop(fig_rng, size: int, kind: str) -> tuple[np.ndarray, FigureSpec]:
    fig = sample_figure(fig_rng, kind, (0, 0, size, size))
    canvas = _paint_background(fig_rng, size, size)
    _paint_figure(canvas, fig)
    return _finish(fig_rng, canvas), fig


# ---------------------------------------------------------------- crop dataset

@dataclass
class CropDataset:
    images: np.ndarray  # (N, S, S) uint8
    labels: np.ndarray  # (N,) int64, 1 = touching
    split: np.ndarray  # (N,) "train" | "test"
    figures: list[FigureSpec]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        if split not in ("train", "test"):
            raise ContractError(f"split must be 'train' or 'test', got {split!r}")
        return np.flatnonzero(self.split == split)

    def part(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]


def stratified_split(labels: np.ndarray, train_fraction: float, rng) -> np.ndarray:
    split = np.empty(len(labels), dtype="<U5")
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        split[idx[:n_train]] = "train"
        split[idx[n_train:]] = "test"
    return split


def gen_crop_dataset(n: int, positive_fraction: float = 0.22, seed: int = 0, size: int = 64,
                     hard_fraction: float = 0.4, train_fraction: float = 0.8) -> CropDataset:
    """``n`` single-figure crops with round(n * positive_fraction) positives.

    ``hard_fraction`` of the negatives hold a hand close to, but outside, the head.
    """
    if n < 10:
        raise ContractError(f"gen_crop_dataset: n must be >= 10, got {n}")
    if not 0.0 < positive_fraction < 1.0:
        raise ContractError(f"gen_crop_dataset: positive_fraction must lie in (0, 1), got {positive_fraction}")
    if not 0.0 <= hard_fraction <= 1.0:
        raise ContractError(f"gen_crop_dataset: hard_fraction must lie in [0, 1], got {hard_fraction}")
    if size % 16 or size < 32:
        raise ContractError(f"gen_crop_dataset: size must be a multiple of 16 and >= 32, got {size}")
    n_pos = int(round(n * positive_fraction))
    n_hard = int(round((n - n_pos) * hard_fraction))
    kinds = np.array(["touch"] * n_pos + ["hard"] * n_hard + ["easy"] * (n - n_pos - n_hard))
    kinds = kinds[make_rng(seed, "kinds").permutation(n)]

    images = np.empty((n, size, size), dtype=np.uint8)
    figures = []
    for i, kind in enumerate(kinds):
        images[i], fig = render_crop(make_rng(seed, "crop", i), size, str(kind))
        figures.append(fig)
    labels = np.array([int(f.touching) for f in figures], dtype=np.int64)
    split = stratified_split(labels, train_fraction, make_rng(seed, "split"))
    manifest = {
        "format_version": FORMAT_VERSION, "kind": "crops", "seed": seed, "n": n, "size": size,
        "positive_fraction": positive_fraction, "hard_fraction": hard_fraction,
        "train_fraction": train_fraction,
        "counts": {"0": int((labels == 0).sum()), "1": int((labels == 1).sum())},
        "splits": {s: int((split == s).sum()) for s in ("train", "test")},
    }
    ds = CropDataset(images, labels, split, figures, manifest)
    ds.manifest["content_hash"] = content_hash(ds)
    return ds


def crop_label_rows(ds: CropDataset) -> list[dict]:
    rows = []
    for i, fig in enumerate(ds.figures):
        s = ds.images.shape[1]
        boxes = [("face", fig.face_box(s, s)), ("human", fig.human_box(s, s))]
        boxes += [("hand", b) for b in fig.hand_boxes(s, s)]
        for cls, box in boxes:
            rows.append({"sample_id": i, "split": str(ds.split[i]), "label": int(ds.labels[i]),
                         "box_class": cls, "box": box})
    return rows


def _encode_image(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_image(buf, img)
    return buf.getvalue()


def _figures_jsonl(figures) -> bytes:
    return "".join(json.dumps(f.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
                   for f in figures).encode()


def content_hash(ds: CropDataset) -> str:
    """sha256 over every encoded image, the labels CSV and the geometry records."""
    h = hashlib.sha256()
    for img in ds.images:
        h.update(_encode_image(img))
    h.update(labels_csv_bytes(crop_label_rows(ds)))
    h.update(_figures_jsonl(ds.figures))
    return h.hexdigest()


def save_crop_dataset(ds: CropDataset, out) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        (out / "images" / f"{i:06d}.pgm").write_bytes(_encode_image(img))
    (out / "labels.csv").write_bytes(labels_csv_bytes(crop_label_rows(ds)))
    (out / "figures.jsonl").write_bytes(_figures_jsonl(ds.figures))
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_crop_dataset(path, verify: bool = True) -> CropDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContractError(f"{path}: no manifest.json; not a dataset directory")
    manifest = json.loads(mpath.read_text())
    samples = read_labels(path / "labels.csv")
    n = manifest["n"]
    if sorted(samples) != list(range(n)):
        raise ContractError(f"{path}/labels.csv: expected sample ids 0..{n - 1}")
    images = np.stack([read_image(path / "images" / f"{i:06d}.pgm") for i in range(n)])
    figures = [FigureSpec.from_dict(json.loads(line))
               for line in (path / "figures.jsonl").read_text().splitlines()]
    labels = np.array([samples[i].label for i in range(n)], dtype=np.int64)
    split = np.array([samples[i].split for i in range(n)], dtype="<U5")
    ds = CropDataset(images, labels, split, figures, manifest)
    if verify and content_hash(ds) != manifest.get("content_hash"):
        raise ContractError(f"{path}: content hash mismatch; dataset files were modified")
    return ds


# ---------------------------------------------------------------- scenes

@dataclass
class SceneSample:
    image: np.ndarray  # (H, W) uint8
    figures: list[FigureSpec]

    @property
    def face_boxes(self) -> list[tuple[float, float, float, float]]:
        h, w = self.image.shape[:2]
        return [f.face_box(w, h) for f in self.figures if f.face_visible]

    @property
    def human_boxes(self) -> list[tuple[float, float, float, float]]:
        h, w = self.image.shape[:2]
        return [f.human_box(w, h) for f in self.figures]

    @property
    def labels(self) -> list[int]:
        return [int(f.touching) for f in self.figures]

    @property
    def face_visible(self) -> list[bool]:
        return [f.face_visible for f in self.figures]


def gen_scene(figures, occlusion_rate: float, seed: int, tiles: int = 4, tile: int = 64,
              positive_fraction: float = 0.22) -> SceneSample:
    """A (tile x tiles*tile) strip holding figures in distinct tiles.

    ``figures`` is a count or an inclusive (lo, hi) range. Each figure's face
    is independently hidden under an occluder with probability ``occlusion_rate``.
    """
    rng = make_rng(seed, "scene")
    lo, hi = (figures, figures) if np.isscalar(figures) else figures
    if lo < 0 or hi < lo:
        raise ContractError(f"gen_scene: bad figure count {figures!r}")
    if hi > tiles:
        raise ContractError(f"gen_scene: at most {tiles} figures fit, asked for {hi}")
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ContractError(f"gen_scene: occlusion_rate must lie in [0, 1], got {occlusion_rate}")
    k = _rint(rng, lo, hi)
    slots = sorted(rng.permutation(tiles)[:k].tolist())
    canvas = _paint_background(rng, tile, tiles * tile)
    figs = []
    for slot in slots:
        kind = "touch" if rng.random() < positive_fraction else ("hard" if rng.random() < 0.4 else "easy")
        fig = sample_figure(rng, kind, (slot * tile, 0, (slot + 1) * tile, tile))
        if rng.random() < occlusion_rate:
            fig = replace(fig, face_visible=False)
        _paint_figure(canvas, fig, rng)
        figs.append(fig)
    return SceneSample(_finish(rng, canvas), figs)


# ---------------------------------------------------------------- image I/O

class ImageFormatError(ContractError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte {offset})")
        self.offset = offset


def to_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    if not np.issubdtype(a.dtype, np.floating):
        raise ContractError(f"images must be uint8 or float in [0, 1], got {a.dtype}")
    if a.size and (not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0):
        raise ContractError("float images must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_image(dest, img) -> None:
    """PGM (P5) for (H, W), PPM (P6) for (H, W, 3); 8-bit, maxval 255."""
    a = to_uint8(img)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"write_image: need (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    data = magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        Path(dest).write_bytes(data)


def _header_token(raw: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next whitespace-delimited token, skipping comments; returns (tok, start, end)."""
    n = len(raw)
    while pos < n:
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header", start)
    return raw[start:pos], start, pos


def decode_image(raw: bytes) -> np.ndarray:
    if raw[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {raw[:2]!r}, expected P5 or P6", 0)
    channels = 1 if raw[:2] == b"P5" else 3
    pos = 2
    if pos >= len(raw) or not (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
        raise ImageFormatError("expected whitespace after magic", pos)
    values = []
    for field_name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(raw, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{field_name} is not a decimal integer: {tok[:16]!r}", start)
        v = int(tok)
        if field_name == "maxval" and v != 255:
            raise ImageFormatError(f"maxval must be 255, got {v}", start)
        if v <= 0:
            raise ImageFormatError(f"{field_name} must be positive", start)
        values.append(v)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError("expected a single whitespace byte before the raster", pos)
    pos += 1
    w, h, _ = values
    need = w * h * channels
    have = len(raw) - pos
    if have < need:
        raise ImageFormatError(f"truncated raster: {have} of {need} bytes", len(raw))
    if have > need:
        raise ImageFormatError(f"{have - need} trailing bytes after raster", pos + need)
    a = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return a.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def read_image(src) -> np.ndarray:
    """uint8 array from a P5/P6 file; malformed input raises ImageFormatError."""
    raw = src.read() if hasattr(src, "read") else Path(src).read_bytes()
    return decode_image(raw)


# ---------------------------------------------------------------- labels I/O

class LabelFormatError(ContractError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class SampleLabels:
    sample_id: int
    split: str
    label: int
    boxes: list[tuple[str, tuple[float, float, float, float]]] = field(default_factory=list)


def labels_csv_bytes(rows: list[dict]) -> bytes:
    """Rows carry sample_id, split, label and optionally box_class + box (cx, cy, w, h)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for r in rows:
        box = r.get("box")
        coords = ["", "", "", ""] if box is None else [repr(float(v)) for v in box]
        w.writerow([r["sample_id"], r["split"], r["label"], r.get("box_class", "") if box is not None else ""] + coords)
    return buf.getvalue().encode()


def write_labels(path, samples: list[SampleLabels]) -> None:
    rows = []
    for s in samples:
        if not s.boxes:
            rows.append({"sample_id": s.sample_id, "split": s.split, "label": s.label})
        for cls, box in s.boxes:
            rows.append({"sample_id": s.sample_id, "split": s.split, "label": s.label,
                         "box_class": cls, "box": box})
    Path(path).write_bytes(labels_csv_bytes(rows))


def read_labels(path) -> dict[int, SampleLabels]:
    text = Path(path).read_text()
    if not text.strip():
        raise LabelFormatError("empty labels file", 1)
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    unknown = [c for c in header if c not in LABEL_HEADER]
    if unknown:
        raise LabelFormatError(f"unknown column {unknown[0]!r}", 1)
    if header != LABEL_HEADER:
        raise LabelFormatError(f"header must be {','.join(LABEL_HEADER)}", 1)
    out: dict[int, SampleLabels] = {}
    for row in reader:
        line = reader.line_num
        if len(row) != len(LABEL_HEADER):
            raise LabelFormatError(f"expected {len(LABEL_HEADER)} fields, got {len(row)}", line)
        sid, split, label, cls, *coords = row
        try:
            sid_i, label_i = int(sid), int(label)
        except ValueError:
            raise LabelFormatError(f"non-integer sample_id or label: {sid!r}, {label!r}", line) from None
        if split not in ("train", "test"):
            raise LabelFormatError(f"split must be train or test, got {split!r}", line)
        if label_i not in (0, 1):
            raise LabelFormatError(f"label must be 0 or 1, got {label_i}", line)
        s = out.setdefault(sid_i, SampleLabels(sid_i, split, label_i))
        if (s.split, s.label) != (split, label_i):
            raise LabelFormatError(f"sample {sid_i} has conflicting split/label rows", line)
        if cls == "" and all(c == "" for c in coords):
            continue
        if cls not in BOX_CLASSES:
            raise LabelFormatError(f"unknown box class {cls!r}", line)
        try:
            box = tuple(float(c) for c in coords)
        except ValueError:
            raise LabelFormatError(f"non-numeric coordinate in {coords}", line) from None
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in box):
            raise LabelFormatError(f"coordinates must lie in [0, 1], got {box}", line)
        s.boxes.append((cls, box))
    if not out:
        raise LabelFormatError("no samples", 2)
    return out
