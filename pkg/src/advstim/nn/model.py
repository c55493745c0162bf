"""Model assembly from an architecture description, plus checkpoint I/O.

The checkpoint container is self-describing: an 8-byte magic, a format
version, a JSON header (architecture, tensor table, training fingerprint) and
a payload of little-endian float32 tensors. Weights pass through float32 at
save time, so load(save(m)) reproduces forward outputs bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, ReLU

MAGIC = b"ADVSTCK1"
FORMAT_VERSION = 1

# fixed affine input normalization: models consume [0, 255] intensities but
# compute on (x - MEAN) / SCALE; part of the differentiated chain
INPUT_MEAN = 127.5
INPUT_SCALE = 127.5


@dataclass(frozen=True)
class ArchSpec:
    """Architecture: input geometry, fine-class count, and a layer list.

    Layer entries are (kind, options) pairs:
      ("conv", {"out": 8, "kernel": 5, "stride": 2})
      ("relu", {})
      ("maxpool", {"size": 2}) / ("avgpool", {"size": 2})
      ("flatten", {})
      ("dense", {"out": 16})
    The retina flag marks models that expect retina-blurred input; either way
    the input dims are the post-crop dims.
    """

    input_hw: tuple[int, int]
    in_channels: int
    n_fine: int
    layers: tuple[tuple[str, dict], ...]
    retina: bool = False

    def to_json_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "in_channels": self.in_channels,
            "n_fine": self.n_fine,
            "layers": [[kind, dict(opts)] for kind, opts in self.layers],
            "retina": self.retina,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            input_hw=tuple(d["input_hw"]),
            in_channels=int(d["in_channels"]),
            n_fine=int(d["n_fine"]),
            layers=tuple((kind, dict(opts)) for kind, opts in d["layers"]),
            retina=bool(d.get("retina", False)),
        )


def _build_layers(arch: ArchSpec):
    """Instantiate layers, checking shape flow; returns (layers, final_dim)."""
    h, w = arch.input_hw
    c = arch.in_channels
    flat: int | None = None
    built = []
    for i, (kind, opts) in enumerate(arch.layers):
        if kind == "conv":
            if flat is not None:
                raise ValueError(f"layer {i}: conv after flatten")
            layer = Conv2D(c, int(opts["out"]), int(opts["kernel"]), int(opts.get("stride", 1)))
            h, w = layer.out_hw(h, w)
            c = layer.out_channels
        elif kind == "relu":
            layer = ReLU()
        elif kind in ("maxpool", "avgpool"):
            if flat is not None:
                raise ValueError(f"layer {i}: pooling after flatten")
            size = int(opts.get("size", 2))
            layer = MaxPool2D(size) if kind == "maxpool" else AvgPool2D(size)
            if h % size or w % size:
                raise ValueError(f"layer {i}: pool size {size} does not divide {h}x{w}")
            h, w = h // size, w // size
        elif kind == "flatten":
            if flat is not None:
                raise ValueError(f"layer {i}: duplicate flatten")
            layer = Flatten()
            flat = h * w * c
        elif kind == "dense":
            if flat is None:
                raise ValueError(f"layer {i}: dense before flatten")
            layer = Dense(flat, int(opts["out"]))
            flat = layer.out_dim
        else:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
        built.append(layer)
    if flat is None:
        raise ValueError("architecture must end in flatten + dense")
    if flat != arch.n_fine:
        raise ValueError(f"final width {flat} != fine-class count {arch.n_fine}")
    return built


@dataclass
class Model:
    arch: ArchSpec
    layers: list = field(repr=False)
    meta: dict = field(default_factory=dict)

    @staticmethod
    def build(arch: ArchSpec, seed: int | None = None) -> "Model":
        layers = _build_layers(arch)
        model = Model(arch=arch, layers=layers)
        if seed is not None:
            model.init_params(seed)
        return model

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init_params"):
                layer.init_params(rng)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        h, w = self.arch.input_hw
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (h, w, self.arch.in_channels):
            raise ValueError(
                f"expected input ({h}, {w}, {self.arch.in_channels}), got {x.shape}"
            )
        return np.asarray(x, dtype=np.float64)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch (N,H,W,C) or single image (H,W,C)."""
        single = np.ndim(x) == 3
        out = (self._check_input(x) - INPUT_MEAN) / INPUT_SCALE
        for layer in self.layers:
            out, _ = layer.forward(out)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite logits")
        return out[0] if single else out

    def forward_cached(self, x: np.ndarray):
        out = (self._check_input(x) - INPUT_MEAN) / INPUT_SCALE
        caches = []
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward(self, dlogits: np.ndarray, caches, want_param_grads: bool = False):
        """VJP: upstream gradient on logits -> gradient on the input batch.

        Returns (dx, grads) where grads maps "i.name" -> array for trainable
        layers when want_param_grads is set, else an empty dict.
        """
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, dparams = self.layers[i].backward(d, caches[i])
            if want_param_grads:
                for name, g in dparams.items():
                    grads[f"{i}.{name}"] = g
        return d / INPUT_SCALE, grads

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def set_param(self, key: str, value: np.ndarray) -> None:
        idx, name = key.split(".")
        layer = self.layers[int(idx)]
        current = layer.params()[name]
        if current.shape != value.shape:
            raise ValueError(f"shape mismatch for {key}: {current.shape} vs {value.shape}")
        setattr(layer, name, np.asarray(value, dtype=np.float64))

    def quantize_weights_f32(self) -> None:
        """Round all weights through float32 (the checkpoint precision)."""
        for key, arr in self.named_params().items():
            self.set_param(key, arr.astype(np.float32).astype(np.float64))


def input_gradient(model: Model, image: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of <dlogits, logits(image)> wrt the image (single image)."""
    logits, caches = model.forward_cached(image)
    if dlogits.shape != logits[0].shape:
        raise ValueError(f"dlogits shape {dlogits.shape} != logits {logits[0].shape}")
    dx, _ = model.backward(dlogits[None], caches)
    return dx[0]


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.named_params())
    params = model.named_params()
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch.to_json_dict(),
        "meta": model.meta,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    for n in names:
        buf.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = len(MAGIC) + 8
    if len(blob) < off + header_len:
        raise ValueError("truncated checkpoint header")
    header = json.loads(blob[off : off + header_len].decode("utf-8"))
    off += header_len
    arch = ArchSpec.from_json_dict(header["arch"])
    model = Model.build(arch)
    model.meta = header.get("meta", {})
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if len(blob) < off + nbytes:
            raise ValueError("truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=off)
        model.set_param(entry["name"], arr.reshape(shape).astype(np.float64))
        off += nbytes
    if off != len(blob):
        raise ValueError("checkpoint payload has trailing bytes")
    return model
