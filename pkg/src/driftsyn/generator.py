"""UNet-like conditional generator c_hat = f(m, eps) and its checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"DRFTCKPT"
    u32       format version (currently 1)
    u64       header length L
    L bytes   UTF-8 JSON header: {"spec": {...}, "seed": int,
              "params": [{"name", "shape", "offset", "count"}, ...], "extra": {...}}
    payload   float64 little-endian blobs, concatenated in header order;
              offsets/counts are in elements from the start of the payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"DRFTCKPT"
FORMAT_VERSION = 1


class GeneratorError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class GeneratorSpec:
    cond_channels: int = 1
    noise_channels: int = 1
    base_width: int = 16
    depth: int = 3
    noise_scale: float = 1.0
    slope: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise GeneratorError(f"depth must be >= 1, got {self.depth}")
        if self.noise_channels < 1:
            raise GeneratorError(f"noise_channels must be >= 1, got {self.noise_channels}")
        if self.noise_scale < 0:
            raise GeneratorError(f"noise_scale must be >= 0, got {self.noise_scale}")

    @property
    def in_channels(self) -> int:
        return self.cond_channels + self.noise_channels

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    def check_size(self, h: int, w: int) -> None:
        f = 2**self.depth
        if h % f or w % f:
            ph, pw = (-h) % f, (-w) % f
            raise GeneratorError(
                f"spatial size {h}x{w} is not divisible by 2^depth={f}; "
                f"pad by {ph} rows and {pw} columns (e.g. with crop_or_pad)"
            )


def param_shapes(spec: GeneratorSpec) -> dict[str, tuple]:
    ws = spec.widths()
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    conv("enc0a", spec.in_channels, ws[0])
    conv("enc0b", ws[0], ws[0])
    for lvl in range(1, spec.depth + 1):
        conv(f"down{lvl}", ws[lvl - 1], ws[lvl])
        conv(f"enc{lvl}", ws[lvl], ws[lvl])
    for lvl in range(spec.depth, 0, -1):
        conv(f"up{lvl}", ws[lvl], ws[lvl - 1])
        conv(f"dec{lvl}", 2 * ws[lvl - 1], ws[lvl - 1])
    conv("out", ws[0], 1)
    return shapes


def init_params(spec: GeneratorSpec, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            gain = np.sqrt(2.0 / (1.0 + spec.slope**2))
            data = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)
            if name == "out.w":
                data *= 0.1
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Generator:
    """Conditional generator. ``forward_passes`` counts network evaluations."""

    def __init__(self, spec: GeneratorSpec, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.params = params if params is not None else init_params(spec, seed)
        self.forward_passes = 0
        self.use_skips = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, x, name, stride=1):
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def _act(self, x):
        return T.leaky_relu(x, self.spec.slope)

    def forward(self, m: Tensor, eps: Tensor) -> Tensor:
        """One network evaluation on (N, C, H, W) inputs."""
        spec = self.spec
        self.forward_passes += 1
        x = T.concat([m, T.scale(eps, spec.noise_scale)], axis=1)
        h = self._act(self._conv(self._act(self._conv(x, "enc0a")), "enc0b"))
        skips = [h]
        for lvl in range(1, spec.depth + 1):
            h = self._act(self._conv(h, f"down{lvl}", stride=2))
            h = self._act(self._conv(h, f"enc{lvl}"))
            skips.append(h)
        skips.pop()
        for lvl in range(spec.depth, 0, -1):
            h = self._act(self._conv(T.upsample2x(h), f"up{lvl}"))
            skip = skips.pop()
            if not self.use_skips:
                skip = Tensor(np.zeros_like(skip.data))
            h = self._act(self._conv(T.concat([h, skip], axis=1), f"dec{lvl}"))
        return self._conv(h, "out")

    def _prepare(self, m, eps):
        m_arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
        squeeze = m_arr.ndim == 2
        if m_arr.ndim == 2:
            m_arr = m_arr[None, None]
        elif m_arr.ndim == 3:
            m_arr = m_arr[:, None]
        if m_arr.ndim != 4 or m_arr.shape[1] != self.spec.cond_channels:
            raise GeneratorError(f"condition must be (N, {self.spec.cond_channels}, H, W), got {m_arr.shape}")
        n, _, h, w = m_arr.shape
        self.spec.check_size(h, w)
        want = (n, self.spec.noise_channels, h, w)
        e = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
        if e.shape != want:
            if e.size == np.prod(want):
                e = e.reshape(want)
            else:
                raise GeneratorError(f"noise must have shape {want}, got {e.shape}")
        mt = m if isinstance(m, Tensor) and m.shape == m_arr.shape else Tensor(m_arr)
        et = eps if isinstance(eps, Tensor) and eps.shape == want else Tensor(e)
        return mt, et, squeeze

    def generate(self, m, eps, grad: bool = False):
        """Synthesize from condition ``m`` ((H, W), (N, H, W) or (N, 1, H, W)) and noise ``eps``.

        Exactly one forward pass. With ``grad=False`` returns a numpy array of m's
        spatial shape without recording; with ``grad=True`` returns a Tensor on the tape.
        """
        mt, et, squeeze = self._prepare(m, eps)
        if grad:
            return self.forward(mt, et)
        with T.no_grad():
            out = self.forward(mt, et).data
        return out[0, 0] if squeeze else out

    def noise(self, shape_hw, n: int = 1, seed=None, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng(seed)
        return rng.standard_normal((n, self.spec.noise_channels, *shape_hw))

    def save(self, path, extra: dict | None = None) -> None:
        save_params(path, self.spec, self.params, seed=self.seed, extra=extra)

    @classmethod
    def load(cls, path, spec: GeneratorSpec | None = None) -> "Generator":
        spec_loaded, params, seed, _ = load_params(path, spec)
        return cls(spec_loaded, params, seed=seed)


def save_params(path, spec: GeneratorSpec, params: dict[str, Tensor], seed: int = 0, extra=None) -> None:
    manifest = []
    offset = 0
    for name, p in params.items():
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "count": p.size})
        offset += p.size
    header = json.dumps(
        {"spec": asdict(spec), "seed": int(seed), "params": manifest, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    return _read(path, header_only=True)[0]


def _read(path, header_only=False):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    pos += 12
    if len(raw) < pos + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    header = json.loads(raw[pos : pos + hlen].decode())
    pos += hlen
    return header, raw[pos:]


def load_params(path, spec: GeneratorSpec | None = None):
    """Return (spec, params, seed, extra). If ``spec`` is given, shapes must match it."""
    header, payload = _read(path)
    stored = GeneratorSpec(**header["spec"])
    use = spec if spec is not None else stored
    expected = param_shapes(use)
    total = sum(e["count"] for e in header["params"])
    if len(payload) != 8 * total:
        raise TruncatedCheckpointError(
            f"{path}: payload has {len(payload)} bytes, expected {8 * total}"
        )
    names = [e["name"] for e in header["params"]]
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names)) or sorted(set(names) - set(expected))
        raise CheckpointShapeError(f"{path}: parameter set mismatch at {missing[0]}")
    values = np.frombuffer(payload, dtype="<f8")
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointShapeError(
                f"{path}: parameter {e['name']} has shape {shape}, spec expects {expected[e['name']]}"
            )
        data = values[e["offset"] : e["offset"] + e["count"]].reshape(shape).astype(np.float64)
        params[e["name"]] = Tensor(data, requires_grad=True, name=e["name"])
    return use, params, header["seed"], header.get("extra", {})
