"""Action encoder, projection head, classifier head, Grad-CAM and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .autograd import ContractError, ParamSet, Tape, Tensor, backward
from .rng import make_rng


@dataclass
class EncoderConfig:
    input_size: int = 64
    channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    first_stride: int = 1
    proj_dim: int = 128
    proj_dropout: float = 0.5
    hidden: int = 512
    n_classes: int = 2
    zero_init_output: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.first_stride not in (1, 2):
            raise ContractError(f"encoder.first_stride: must be 1 or 2, got {self.first_stride}")
        if self.input_size % (self.first_stride * 2 ** len(self.widths)):
            raise ContractError(f"encoder.input_size: {self.input_size} must be divisible by {self.first_stride * 2 ** len(self.widths)} (first stride times one pool per stage)")
        if not self.widths or min(self.widths) <= 0:
            raise ContractError("encoder.widths: need at least one stage with positive width")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"encoder.dtype: must be float32 or float64, got {self.dtype!r}")

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_params(cfg: EncoderConfig) -> ParamSet:
    """Fan-in scaled uniform init, one RNG substream per parameter."""
    dt = np.dtype(cfg.dtype)
    p = ParamSet()
    cin = cfg.channels
    for i, w in enumerate(cfg.widths, start=1):
        k = cfg.kernel
        p.add(f"enc.conv{i}.W", _he_uniform(make_rng(cfg.seed, "init", f"conv{i}"), (k, k, cin, w), k * k * cin, dt))
        p.add(f"enc.conv{i}.b", np.zeros(w, dtype=dt))
        cin = w
    d = cfg.embed_dim
    p.add("proj.W", _he_uniform(make_rng(cfg.seed, "init", "proj"), (d, cfg.proj_dim), d, dt))
    p.add("proj.b", np.zeros(cfg.proj_dim, dtype=dt))
    p.add("head.hidden.W", _he_uniform(make_rng(cfg.seed, "init", "hidden"), (d, cfg.hidden), d, dt))
    p.add("head.hidden.b", np.zeros(cfg.hidden, dtype=dt))
    if cfg.zero_init_output:
        out_w = np.zeros((cfg.hidden, cfg.n_classes), dtype=dt)
    else:
        out_w = _he_uniform(make_rng(cfg.seed, "init", "out"), (cfg.hidden, cfg.n_classes), cfg.hidden, dt)
    p.add("head.out.W", out_w)
    p.add("head.out.b", np.zeros(cfg.n_classes, dtype=dt))
    return p


class FaceTouchModel:
    """Enc -> (Proj for contrastive training | classifier head for inference)."""

    def __init__(self, config: EncoderConfig, params: ParamSet | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.proj_calls = 0
        self.classify_calls = 0

    @property
    def stage_names(self) -> list[str]:
        return [f"conv{i}" for i in range(1, len(self.config.widths) + 1)]

    def as_input(self, images) -> Tensor:
        """uint8 or [0,1] float images, (N,H,W) or (N,H,W,C), to an NHWC tensor."""
        if isinstance(images, Tensor):
            return images
        x = np.asarray(images)
        if x.dtype == np.uint8:
            x = x.astype(self.config.dtype) / 255.0
        else:
            x = x.astype(self.config.dtype, copy=False)
        if x.ndim == 3 and self.config.channels == 1:
            x = x[..., None]
        s, c = self.config.input_size, self.config.channels
        if x.ndim != 4 or x.shape[1:] != (s, s, c):
            raise ContractError(f"encode: expected images of shape (N, {s}, {s}, {c}), got {x.shape}; resize crops before encoding")
        return Tensor(x)

    def encode(self, images, capture: dict | None = None) -> Tensor:
        """r = Enc(x): conv+ReLU+maxpool per stage, then global average pool.

        Pass a dict as ``capture`` to receive each stage's post-ReLU feature map.
        """
        x = self.as_input(images)
        for i, name in enumerate(self.stage_names):
            stride = self.config.first_stride if i == 0 else 1
            x = ops.conv2d(x, self.params[f"enc.{name}.W"], self.params[f"enc.{name}.b"], stride)
            if capture is not None:
                x = ops.relu(x)
                capture[name] = x
                x = ops.maxpool2(x)
            else:
                # max and relu commute exactly; pooling first touches 4x fewer values
                x = ops.relu(ops.maxpool2(x))
        return ops.global_avg_pool(x)

    def project(self, r: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """z = normalize(dropout(ReLU(W r + b))); only used for contrastive training."""
        self.proj_calls += 1
        h = ops.relu(ops.dense(r, self.params["proj.W"], self.params["proj.b"]))
        h = ops.dropout(h, self.config.proj_dropout, rng, mode == "train")
        return ops.l2_normalize(h)

    def logits(self, r: Tensor) -> Tensor:
        self.classify_calls += 1
        h = ops.relu(ops.dense(r, self.params["head.hidden.W"], self.params["head.hidden.b"]))
        return ops.dense(h, self.params["head.out.W"], self.params["head.out.b"])

    def classify(self, r: Tensor) -> Tensor:
        """(no-touch, touch) probabilities."""
        return ops.softmax(self.logits(r))

    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        """Touch probability per image, eval mode, no tape."""
        images = np.asarray(images)
        out = []
        for i in range(0, len(images), batch_size):
            r = self.encode(images[i:i + batch_size])
            out.append(self.classify(r).data[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images)
        return np.concatenate([self.encode(images[i:i + batch_size]).data
                               for i in range(0, len(images), batch_size)])


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an (H, W) or (H, W, C) array."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx)


def gradcam(model: FaceTouchModel, image, target_class: int = 1, layer: str | None = None) -> np.ndarray:
    """Class-activation map for one image, upsampled to input size and scaled to [0, 1].

    Channel weights are the spatial mean of d(class logit)/d(feature map);
    the map is ReLU of the weighted channel sum. An all-zero map stays zero.
    """
    layer = layer or model.stage_names[-1]
    if layer not in model.stage_names:
        raise ContractError(f"gradcam: {layer!r} is not a convolutional stage; choose from {model.stage_names}")
    x = model.as_input(np.asarray(image)[None])
    x.requires_grad = True
    capture: dict[str, Tensor] = {}
    with Tape() as tape:
        r = model.encode(x, capture)
        score = ops.total(ops.take_column(model.logits(r), target_class))
    backward(tape, score)
    A = capture[layer].data[0]
    dA = capture[layer].grad
    dA = np.zeros_like(A) if dA is None else dA[0]
    weights = dA.mean(axis=(0, 1))
    cam = np.maximum((A * weights).sum(axis=-1), 0.0)
    s = model.config.input_size
    cam = np.maximum(bilinear_resize(cam, s, s), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FTCKPT\x00\x01"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: ParamSet
    provenance: dict = field(default_factory=dict)

    def model(self) -> FaceTouchModel:
        return FaceTouchModel(self.config, self.params)


def save_checkpoint(path, model: FaceTouchModel, provenance: dict | None = None) -> None:
    """Write magic, a length-prefixed JSON header, then raw little-endian tensor bytes.

    Header keys: format_version, config, provenance, tensors (name, dtype,
    shape, trainable, in payload order). Output is byte-deterministic.
    """
    tensors = []
    payload = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "trainable": model.params.is_trainable(name)})
        payload.append(le.tobytes())
    header = json.dumps({"format_version": CKPT_VERSION, "config": model.config.to_dict(),
                         "provenance": provenance or {}, "tensors": tensors},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic at byte 0)")
    off = len(CKPT_MAGIC)
    if len(raw) < off + 8:
        raise ContractError(f"{path}: truncated header length at byte {off}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContractError(f"{path}: corrupt header at byte {off}: {exc}") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    off += hlen
    params = ParamSet()
    for spec in header["tensors"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(raw):
            raise ContractError(f"{path}: tensor {spec['name']} truncated at byte {off}")
        arr = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=off).reshape(spec["shape"])
        params.add(spec["name"], arr.astype(dt.newbyteorder("="), copy=True), spec["trainable"])
        off += n
    if off != len(raw):
        raise ContractError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    return Checkpoint(EncoderConfig.from_dict(header["config"]), params, header["provenance"])
