"""Ground-truth generative process: K objects rendered as bumps on a 1-D pixel strip.

Each object lives in its own sub-strip, so the renderer is a sum of slot
functions with disjoint pixel supports. Training latents come from a band
around the diagonal of the latent hypercube; every slot marginal still covers
[0, 1], so the band is slot-supported.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CGL1"
_HEADER = struct.Struct("<4sIIIIB")
REGION_CODES = {"ID": 0, "OOD": 1}


class SamplerError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    K: int = 2
    M: int = 2
    N: int = 64
    w: float = 0.08
    delta: float = 0.125
    # rejection distance between positions; only used when shared_range is on
    min_sep: float = 0.2
    shared_range: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.M != 2:
            raise ValueError(f"M: the bump renderer has exactly 2 latents per slot, got {self.M}")
        if self.K * self.M > self.N:
            raise ValueError(f"N: need K*M <= N, got K*M={self.K * self.M} > N={self.N}")
        if not 0 < self.w < 1 / (4 * self.K):
            raise ValueError(f"w: need 0 < w < 1/(4K) = {1 / (4 * self.K)}, got {self.w}")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta: need 0 < delta <= 1, got {self.delta}")

    @property
    def band(self) -> float:
        return np.sqrt(2.0) * self.delta

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    latents: np.ndarray  # (count, K, M)
    observations: np.ndarray  # (count, N)
    region: str

    def __len__(self):
        return len(self.latents)


# --- support band -----------------------------------------------------------

def in_band(z, delta: float) -> np.ndarray | bool:
    """Band membership: every latent coordinate differs across slots by at most sqrt(2)·delta.

    ``z`` is (K, M) or a batch (..., K, M); returns a bool or bool array.
    """
    z = np.asarray(z, dtype=np.float64)
    spread = z.max(axis=-2) - z.min(axis=-2)
    ok = np.all(spread <= np.sqrt(2.0) * delta, axis=-1)
    return bool(ok) if ok.ndim == 0 else ok


def _accept(cfg: SceneConfig, z: np.ndarray) -> np.ndarray:
    if not cfg.shared_range or cfg.K < 2:
        return np.ones(len(z), dtype=bool)
    pos = z[..., 0]
    gaps = np.abs(pos[:, :, None] - pos[:, None, :])
    gaps[:, np.arange(cfg.K), np.arange(cfg.K)] = np.inf
    return gaps.min(axis=(1, 2)) >= cfg.min_sep


def _rejection(cfg: SceneConfig, count: int, rng: np.random.Generator, want_in: bool,
               max_draws: int = 10**6) -> np.ndarray:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    out, have, draws = [], 0, 0
    chunk = max(1024, 2 * count)
    while have < count:
        z = rng.random((chunk, cfg.K, cfg.M))
        draws += chunk
        keep = (in_band(z, cfg.delta) == want_in) & _accept(cfg, z)
        if keep.any():
            out.append(z[keep])
            have += int(keep.sum())
        if draws >= max_draws and have / draws < 1e-4:
            raise SamplerError(
                f"acceptance rate {have / draws:.2e} after {draws} draws "
                f"(delta={cfg.delta}, {'in-band' if want_in else 'out-of-band'} region is degenerate)")
    return np.concatenate(out)[:count]


def sample_in_band(cfg: SceneConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the diagonal band, shape (count, K, M)."""
    return _rejection(cfg, count, rng, True)


def sample_ood(cfg: SceneConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the complement of the band."""
    return _rejection(cfg, count, rng, False)


# --- renderer ---------------------------------------------------------------

def pixel_centers(cfg: SceneConfig) -> np.ndarray:
    return (np.arange(cfg.N) + 0.5) / cfg.N


def object_center(cfg: SceneConfig, k: int, p):
    """Bump center for 0-based slot ``k`` at normalized position ``p``."""
    if cfg.shared_range:
        return cfg.w + (1.0 - 2 * cfg.w) * np.asarray(p)
    return k / cfg.K + cfg.w + (1.0 / cfg.K - 2 * cfg.w) * np.asarray(p)


def render_object(cfg: SceneConfig, k: int, z_k) -> np.ndarray:
    """Render one object (0-based slot ``k``); ``z_k`` is (M,) or (B, M)."""
    z_k = np.asarray(z_k, dtype=np.float64)
    p, a = z_k[..., 0:1], z_k[..., 1:2]
    c = object_center(cfg, k, p)
    amp = 0.5 + 0.5 * a
    d = pixel_centers(cfg) - c
    inside = np.abs(d) < cfg.w
    prof = np.cos(np.pi * np.where(inside, d, 0.0) / (2 * cfg.w)) ** 4
    return np.where(inside, amp * prof, 0.0)


def render(cfg: SceneConfig, z) -> np.ndarray:
    """Pixelwise sum of all object renders; ``z`` is (K, M) or (B, K, M)."""
    z = np.asarray(z, dtype=np.float64)
    x = render_object(cfg, 0, z[..., 0, :])
    for k in range(1, cfg.K):
        x = x + render_object(cfg, k, z[..., k, :])
    return x


def render_flat(cfg: SceneConfig):
    """``render`` over flat latent vectors (..., K·M), for Jacobian tools."""
    def f(zf):
        zf = np.asarray(zf, dtype=np.float64)
        return render(cfg, zf.reshape(zf.shape[:-1] + (cfg.K, cfg.M)))
    return f


# --- datasets ---------------------------------------------------------------

def make_dataset(cfg: SceneConfig, count: int, region: str, rng: np.random.Generator) -> Dataset:
    if region not in REGION_CODES:
        raise ValueError(f"region must be ID or OOD, got {region!r}")
    z = sample_in_band(cfg, count, rng) if region == "ID" else sample_ood(cfg, count, rng)
    return Dataset(latents=z, observations=render(cfg, z), region=region)


def write_dataset(path, ds: Dataset, cfg: SceneConfig) -> None:
    path = Path(path)
    count = len(ds)
    header = _HEADER.pack(MAGIC, count, cfg.K, cfg.M, cfg.N, REGION_CODES[ds.region])
    lat = ds.latents.reshape(count, cfg.K * cfg.M).astype("<f8")
    obs = ds.observations.reshape(count, cfg.N).astype("<f8")
    body = np.concatenate([lat, obs], axis=1)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body.tobytes())
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"failed writing dataset {path}: {e}") from e


def read_dataset(path) -> tuple[Dataset, dict]:
    """Read a dataset file; returns the dataset and the header fields."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"failed reading dataset {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count, K, M, N, tag = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if tag not in (0, 1):
        raise DatasetFormatError(f"{path}: bad region tag {tag} at offset {_HEADER.size - 1}")
    rec = K * M + N
    expected = _HEADER.size + 8 * rec * count
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(count, rec).astype(np.float64)
    ds = Dataset(latents=body[:, : K * M].reshape(count, K, M),
                 observations=body[:, K * M:].copy(),
                 region="ID" if tag == 0 else "OOD")
    return ds, {"count": count, "K": K, "M": M, "N": N, "region": ds.region}


def dataset_nbytes(cfg: SceneConfig, count: int) -> int:
    return _HEADER.size + 8 * count * (cfg.K * cfg.M + cfg.N)


SPLIT_REGIONS = {"train": "ID", "id_test": "ID", "ood_test": "OOD"}


def make_splits(cfg: SceneConfig, counts: dict, seeds: dict | None = None) -> dict:
    """Sample the train / id_test / ood_test splits in memory.

    ``seeds`` maps split name to an RNG seed; by default each split gets a
    stream derived from ``cfg.seed``.
    """
    from .seeding import derive_seed

    out = {}
    for split, region in SPLIT_REGIONS.items():
        seed = seeds[split] if seeds else derive_seed(cfg.seed, f"data/{split}")
        out[split] = make_dataset(cfg, counts[split], region, np.random.default_rng(seed))
    return out


def generate_dataset(cfg: SceneConfig, counts: dict, out_dir, seeds: dict | None = None) -> dict:
    """Sample the three splits and write them as ``<split>.cgl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = make_splits(cfg, counts, seeds)
    for split, ds in result.items():
        write_dataset(out_dir / f"{split}.cgl", ds, cfg)
    return result
