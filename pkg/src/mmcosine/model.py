"""Uni-modal MLP encoders and the three two-stream fusion variants."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_MAGIC = b"MMCCKPT1"


class FusionKind(enum.Enum):
    MID_CONCAT = "concat"
    FILM = "film"
    GATED = "gated"

    @classmethod
    def parse(cls, value) -> FusionKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown fusion kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    output_dim: int = 32

    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class ModelConfig:
    audio: EncoderConfig
    visual: EncoderConfig
    n_classes: int
    fusion: FusionKind = FusionKind.MID_CONCAT
    aux_heads: bool = False

    def __post_init__(self):
        if self.audio.output_dim != self.visual.output_dim:
            raise ValueError(
                f"encoder output widths differ: audio {self.audio.output_dim}, "
                f"visual {self.visual.output_dim}"
            )
        object.__setattr__(self, "fusion", FusionKind.parse(self.fusion))

    @property
    def width(self) -> int:
        return self.audio.output_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        enc = lambda e: EncoderConfig(e["input_dim"], tuple(e["hidden_dims"]), e["output_dim"])
        return cls(enc(d["audio"]), enc(d["visual"]), d["n_classes"],
                   FusionKind.parse(d["fusion"]), d.get("aux_heads", False))


@dataclass
class FeatureBlocks:
    block_a: Tensor
    block_v: Tensor
    provenance: FusionKind = FusionKind.MID_CONCAT

    def __post_init__(self):
        if self.block_a.shape != self.block_v.shape:
            raise ad.ShapeError(
                f"feature blocks disagree: {self.block_a.shape} vs {self.block_v.shape}"
            )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All trainable tensors in a fixed insertion order (the checkpoint order)."""
    p: dict[str, Tensor] = {}

    def put(name, values):
        p[name] = Tensor(values, requires_grad=True, name=name)

    for tag, enc in (("enc_a", cfg.audio), ("enc_v", cfg.visual)):
        for i, (fi, fo) in enumerate(enc.layer_sizes()):
            put(f"{tag}.w{i}", _uniform(rng, fi, (fi, fo)))
            put(f"{tag}.b{i}", _uniform(rng, fi, (fo,)))
    d, n = cfg.width, cfg.n_classes
    if cfg.fusion is FusionKind.FILM:
        for tag in ("film_a", "film_v"):
            put(f"{tag}.gamma_w", _uniform(rng, d, (d, d)))
            # start near the identity modulation
            put(f"{tag}.gamma_b", 1.0 + _uniform(rng, d, (d,)))
            put(f"{tag}.beta_w", _uniform(rng, d, (d, d)))
            put(f"{tag}.beta_b", _uniform(rng, d, (d,)))
    elif cfg.fusion is FusionKind.GATED:
        put("gate.w", _uniform(rng, 2 * d, (2 * d, d)))
        put("gate.b", _uniform(rng, 2 * d, (d,)))
    put("head.w_a", _uniform(rng, 2 * d, (d, n)))
    put("head.w_v", _uniform(rng, 2 * d, (d, n)))
    put("head.b", _uniform(rng, 2 * d, (n,)))
    if cfg.aux_heads:
        put("aux.w_a", _uniform(rng, d, (d, n)))
        put("aux.w_v", _uniform(rng, d, (d, n)))
    return p


def mlp(x: Tensor, params: dict[str, Tensor], tag: str, n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{tag}.w{i}"]), params[f"{tag}.b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def encode(x_a, x_v, params: dict[str, Tensor], cfg: ModelConfig) -> FeatureBlocks:
    x_a = x_a if isinstance(x_a, Tensor) else Tensor(x_a)
    x_v = x_v if isinstance(x_v, Tensor) else Tensor(x_v)
    for x, enc, tag in ((x_a, cfg.audio, "audio"), (x_v, cfg.visual, "visual")):
        if x.values.ndim != 2 or x.shape[1] != enc.input_dim:
            raise ad.ShapeError(
                f"encode: {tag} input shape {x.shape} does not match input_dim {enc.input_dim}"
            )
    phi_a = mlp(x_a, params, "enc_a", len(cfg.audio.layer_sizes()))
    phi_v = mlp(x_v, params, "enc_v", len(cfg.visual.layer_sizes()))
    return FeatureBlocks(phi_a, phi_v, FusionKind.MID_CONCAT)


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def fuse(blocks: FeatureBlocks, kind, params: dict[str, Tensor]) -> FeatureBlocks:
    """Turn encoder outputs into the two streams seen by the head.

    FiLM: stream 1 is the visual feature modulated by audio, stream 2 the
    audio feature modulated by visual.  Gated: a sigmoid gate computed from
    both features splits weight between them as ``z`` and ``1 - z``.
    """
    kind = FusionKind.parse(kind)
    phi_a, phi_v = blocks.block_a, blocks.block_v
    if kind is FusionKind.MID_CONCAT:
        return FeatureBlocks(phi_a, phi_v, kind)
    if kind is FusionKind.FILM:
        def film(cond, target, tag):
            gamma = _affine(cond, params[f"{tag}.gamma_w"], params[f"{tag}.gamma_b"])
            beta = _affine(cond, params[f"{tag}.beta_w"], params[f"{tag}.beta_b"])
            return ad.add(ad.mul(gamma, target), beta)

        return FeatureBlocks(film(phi_a, phi_v, "film_a"), film(phi_v, phi_a, "film_v"), kind)
    if kind is FusionKind.GATED:
        z = ad.sigmoid(_affine(ad.concat(phi_a, phi_v), params["gate.w"], params["gate.b"]))
        one_minus_z = ad.add(ad.scale(z, -1.0), Tensor(np.ones(z.shape)))
        return FeatureBlocks(ad.mul(z, phi_a), ad.mul(one_minus_z, phi_v), kind)
    raise ValueError(f"unknown fusion kind {kind!r}")


def forward_features(x_a, x_v, params, cfg: ModelConfig) -> FeatureBlocks:
    return fuse(encode(x_a, x_v, params, cfg), cfg.fusion, params)


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Gradient-free copies, for evaluation passes that must not build tapes."""
    return {k: Tensor(v.values, name=k) for k, v in params.items()}


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """Length-prefixed layout; see README for the byte format."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", t.values.ndim))
        out.append(struct.pack(f"<{t.values.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an MMCCKPT1 checkpoint")
    off = 8

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", buf, off)
        off += 4
        return v

    n_meta = u32()
    meta = json.loads(buf[off : off + n_meta].decode())
    off += n_meta
    params: dict[str, Tensor] = {}
    for _ in range(u32()):
        n_name = u32()
        name = buf[off : off + n_name].decode()
        off += n_name
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = Tensor(vals.astype(np.float64), requires_grad=True, name=name)
    return params, meta


def check_compatible(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """Raise naming the first tensor whose presence or shape disagrees with ``cfg``."""
    expected = init_params(cfg, np.random.default_rng(0))
    for name, t in expected.items():
        if name not in params:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if params[name].shape != t.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {params[name].shape}, expected {t.shape}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ValueError(f"checkpoint has unexpected tensor {extra[0]!r}")


def param_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.values).tobytes())
    return h.hexdigest()
