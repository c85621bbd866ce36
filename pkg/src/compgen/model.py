"""MLP autoencoder with K slot codes and interchangeable slot decoders.

Parameters live in one flat float64 buffer; every named weight is a reshaped
view into it, so the optimizer works on the flat vector directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DECODER_KINDS = ("additive", "masked_softmax", "masked_sigmoid")
CKPT_MAGIC = b"CGCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    def __init__(self, field_name, expected, found):
        self.field = field_name
        super().__init__(f"config mismatch on field {field_name!r}: expected {expected!r}, found {found!r}")


@dataclass(frozen=True)
class ModelConfig:
    N: int = 64
    K: int = 2
    M_hat: int = 3
    enc_hidden: tuple = (128, 128)
    dec_hidden: tuple = (128, 128)
    decoder: str = "additive"
    shared_decoder: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.decoder not in DECODER_KINDS:
            raise ValueError(f"decoder: expected one of {DECODER_KINDS}, got {self.decoder!r}")
        object.__setattr__(self, "enc_hidden", tuple(self.enc_hidden))
        object.__setattr__(self, "dec_hidden", tuple(self.dec_hidden))

    @property
    def enc_widths(self) -> list[int]:
        return [self.N, *self.enc_hidden, self.K * self.M_hat]

    @property
    def dec_widths(self) -> list[int]:
        out = self.N if self.decoder == "additive" else 2 * self.N
        return [self.M_hat, *self.dec_hidden, out]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _mlp_layout(prefix: str, widths: list[int]) -> list[tuple[str, tuple]]:
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out += [(f"{prefix}.{i}.W", (a, b)), (f"{prefix}.{i}.b", (b,))]
    return out


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    layout = _mlp_layout("enc", cfg.enc_widths)
    if cfg.shared_decoder:
        layout += _mlp_layout("dec", cfg.dec_widths)
    else:
        for k in range(cfg.K):
            layout += _mlp_layout(f"dec{k}", cfg.dec_widths)
    return layout


class ModelParams:
    """Named float64 arrays backed by a single flat buffer."""

    def __init__(self, layout: list[tuple[str, tuple]], flat: np.ndarray | None = None):
        self.layout = [(n, tuple(s)) for n, s in layout]
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(size)
        if flat.shape != (size,):
            raise ValueError(f"flat buffer has shape {flat.shape}, layout needs ({size},)")
        self.flat = flat
        self._views = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self._views[name] = flat[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name):
        return name in self._views

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def copy(self) -> "ModelParams":
        return ModelParams(self.layout, self.flat.copy())

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Wrap every array as a Tensor; as tape leaves if ``tape`` is given."""
        if tape is None:
            return {n: Tensor(v) for n, v in self._views.items()}
        return {n: tape.param(v, name=n) for n, v in self._views.items()}

    def gather_grads(self, bound: dict[str, Tensor], grads: dict) -> np.ndarray:
        out = np.zeros_like(self.flat)
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            g = grads.get(bound[name])
            if g is not None:
                out[off:off + n] = g.ravel()
            off += n
        return out


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    """Uniform fan-in init: weights and biases in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params = ModelParams(param_layout(cfg))
    for name, shape in params.layout:
        fan_in = shape[0] if name.endswith(".W") else params[name[:-1] + "W"].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


def _as_bound(params) -> dict[str, Tensor]:
    return params.bind() if isinstance(params, ModelParams) else params


def _mlp(P: dict[str, Tensor], prefix: str, x, n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = ad.linear(h, P[f"{prefix}.{i}.W"], P[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            h = ad.elu(h)
    return h


def encode(params, x, cfg: ModelConfig) -> Tensor:
    """Observations (B, N) -> slot codes (B, K, M_hat)."""
    P = _as_bound(params)
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.N:
        raise ad.ShapeError("encode", x.shape, (None, cfg.N))
    out = _mlp(P, "enc", x, len(cfg.enc_widths) - 1)
    return out.reshape(x.shape[0], cfg.K, cfg.M_hat)


def _slot_outputs(P, zhat: Tensor, cfg: ModelConfig) -> list[Tensor]:
    if zhat.ndim != 3 or zhat.shape[1:] != (cfg.K, cfg.M_hat):
        raise ad.ShapeError("decode", zhat.shape, (None, cfg.K, cfg.M_hat))
    n_layers = len(cfg.dec_widths) - 1
    B = zhat.shape[0]
    if cfg.shared_decoder:
        flat = _mlp(P, "dec", zhat.reshape(B * cfg.K, cfg.M_hat), n_layers)
        out = flat.reshape(B, cfg.K, cfg.dec_widths[-1])
        return [out[:, k, :] for k in range(cfg.K)]
    return [_mlp(P, f"dec{k}", zhat[:, k, :], n_layers) for k in range(cfg.K)]


def decode_additive(params, zhat, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Returns (x_hat (B, N), slot_renders (B, K, N)); x_hat is the slot sum."""
    renders = ad.stack(_slot_outputs(_as_bound(params), ad.as_tensor(zhat), cfg), axis=1)
    return ad.sum_(renders, axis=1), renders


def decode_masked(params, zhat, cfg: ModelConfig, kind: str = "softmax") -> tuple[Tensor, Tensor, Tensor]:
    """Masked decoder; returns (x_hat, masks, appearances), each slot-stacked.

    ``softmax`` normalizes mask logits across slots per pixel, ``sigmoid``
    squashes each slot's logits on their own.
    """
    outs = _slot_outputs(_as_bound(params), ad.as_tensor(zhat), cfg)
    N = cfg.N
    logits = ad.stack([o[:, :N] for o in outs], axis=1)
    appear = ad.sigmoid(ad.stack([o[:, N:] for o in outs], axis=1))
    if kind == "softmax":
        masks = ad.softmax(logits, axis=1)
    elif kind == "sigmoid":
        masks = ad.sigmoid(logits)
    else:
        raise ValueError(f"mask kind must be softmax or sigmoid, got {kind!r}")
    return ad.sum_(masks * appear, axis=1), masks, appear


def decode(params, zhat, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Dispatch on ``cfg.decoder``; returns (x_hat, per-slot contributions)."""
    if cfg.decoder == "additive":
        return decode_additive(params, zhat, cfg)
    x_hat, masks, appear = decode_masked(params, zhat, cfg, cfg.decoder.split("_")[1])
    return x_hat, masks * appear


class Autoencoder:
    """Numpy-facing convenience wrapper used by evaluation code."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def encode(self, x) -> np.ndarray:
        return encode(self.params, np.asarray(x, dtype=np.float64), self.cfg).data

    def decode(self, zhat) -> np.ndarray:
        return decode(self.params, np.asarray(zhat, dtype=np.float64), self.cfg)[0].data

    def slot_contributions(self, zhat) -> np.ndarray:
        return decode(self.params, np.asarray(zhat, dtype=np.float64), self.cfg)[1].data

    def reconstruct(self, x) -> np.ndarray:
        return self.decode(self.encode(x))

    def decoder_flat(self):
        """Decoder as a function of flat codes (..., K·M_hat) for Jacobian tools."""
        K, Mh = self.cfg.K, self.cfg.M_hat

        def f(zf):
            zf = np.asarray(zf, dtype=np.float64)
            lead = zf.shape[:-1]
            out = self.decode(zf.reshape(-1, K, Mh))
            return out.reshape(lead + (self.cfg.N,))
        return f


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ModelConfig
    params: ModelParams
    step: int = 0
    rng_digest: str = ""
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # additional named arrays, e.g. optimizer moments


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {"model": ckpt.model.to_dict(), "step": ckpt.step,
              "rng_digest": ckpt.rng_digest, "meta": ckpt.meta}
    cfg_bytes = json.dumps(header, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_bytes)), cfg_bytes]
    arrays = [(n, ckpt.params[n]) for n in ckpt.params.names]
    arrays += sorted(ckpt.extra.items())
    for name, arr in arrays:
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f8").ravel()
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", a.size), a.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()

    def need(off, n, what):
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what} at offset {off}")

    need(0, 12, "header")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    need(12, clen, "config block")
    try:
        header = json.loads(raw[12:12 + clen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt config block at offset 12: {e}") from None
    off = 12 + clen
    arrays = {}
    while off < len(raw):
        need(off, 4, "array name length")
        (nlen,) = struct.unpack_from("<I", raw, off)
        need(off + 4, nlen + 8, "array name")
        name = raw[off + 4: off + 4 + nlen].decode()
        (count,) = struct.unpack_from("<Q", raw, off + 4 + nlen)
        start = off + 12 + nlen
        need(start, 8 * count, f"array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64)
        off = start + 8 * count
    cfg = ModelConfig.from_dict(header["model"])
    params = ModelParams(param_layout(cfg))
    for name, shape in params.layout:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name!r} (file truncated at offset {off}?)")
        if arrays[name].size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: array {name!r} has {arrays[name].size} values, expected {shape}")
        params[name][...] = arrays[name].reshape(shape)
    extra = {n: a for n, a in arrays.items() if n not in params}
    return Checkpoint(model=cfg, params=params, step=header["step"],
                      rng_digest=header["rng_digest"], meta=header.get("meta", {}), extra=extra)


def check_compatible(expected: ModelConfig, found: ModelConfig) -> None:
    """Raise :class:`ConfigMismatchError` naming the first differing field."""
    for f in fields(ModelConfig):
        if f.name == "init_seed":
            continue
        a, b = getattr(expected, f.name), getattr(found, f.name)
        if a != b:
            raise ConfigMismatchError(f.name, a, b)
