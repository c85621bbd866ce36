"""Training losses (reconstruction, compositional consistency) and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assignment import hungarian_batch
from .autodiff import AdamState, Tape, adam_step
from .model import Checkpoint, ModelConfig, ModelParams, decode, encode, init_params, save_checkpoint
from .seeding import derive_seed, rng_digest, rng_for

log = logging.getLogger(__name__)

GRAD_MODES = ("encoder_only", "full")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    warmup: int = 50
    lam: float = 1.0
    batch_size: int = 64
    lr: float = 1e-3
    grad_mode: str = "encoder_only"
    lr_schedule: str = "constant"  # or "warmup_decay": doubling warmup then halving every 50 epochs
    contrast_codes: int = 100
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup <= self.epochs:
            raise ValueError(f"warmup: need 0 <= warmup <= epochs, got {self.warmup} / {self.epochs}")
        if self.lam < 0:
            raise ValueError(f"lam: must be >= 0, got {self.lam}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode: expected one of {GRAD_MODES}, got {self.grad_mode!r}")
        if self.lr_schedule not in ("constant", "warmup_decay"):
            raise ValueError(f"lr_schedule: unknown schedule {self.lr_schedule!r}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size: need >= 2, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "l_rec", "l_cons", "contrast", "seconds")

    def append(self, **row):
        self.rows.append({c: row[c] for c in self.COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path, columns=None) -> None:
        # pass columns without "seconds" for a byte-reproducible file
        cols = tuple(columns or self.COLUMNS)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"] if c == "epoch" else repr(float(r[c])) for c in cols])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.rows.append({"epoch": int(r["epoch"]),
                                 **{c: float(r.get(c, "nan")) for c in cls.COLUMNS[1:]}})
        return out


# --- losses -----------------------------------------------------------------

def rec_loss(params, x, cfg: ModelConfig) -> ad.Tensor:
    """Batch mean of the squared L2 reconstruction error."""
    x = ad.as_tensor(x)
    x_hat, _ = decode(params, encode(params, x, cfg), cfg)
    return ad.sq_error(x_hat, x) * (1.0 / x.shape[0])


def reconstruction_error(x_hat, x) -> ad.Tensor:
    x = ad.as_tensor(x)
    return ad.sq_error(x_hat, x) * (1.0 / x.shape[0])


@dataclass(frozen=True)
class RecombinationPlan:
    a: np.ndarray  # (B,) row indices of the first source
    b: np.ndarray  # (B,) row indices of the second source
    rho: np.ndarray  # (B, K) selectors in {1, 2}


def sample_plan(batch: int, K: int, rng: np.random.Generator, count: int | None = None) -> RecombinationPlan:
    count = batch if count is None else count
    a = rng.integers(0, batch, size=count)
    b = rng.integers(0, batch, size=count)
    rho = rng.integers(1, 3, size=(count, K))
    return RecombinationPlan(a, b, rho)


def recombine(z_a, z_b, rho) -> np.ndarray:
    """Slot k from ``z_a`` where rho_k == 1, else from ``z_b``. Works batched."""
    z_a, z_b, rho = np.asarray(z_a), np.asarray(z_b), np.asarray(rho)
    if z_a.shape != z_b.shape:
        raise ad.ShapeError("recombine", z_a.shape, z_b.shape)
    return np.where((rho == 1)[..., None], z_a, z_b)


def apply_plan(zhat: np.ndarray, plan: RecombinationPlan) -> np.ndarray:
    return recombine(zhat[plan.a], zhat[plan.b], plan.rho)


def normalize_codes(z: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Z-score each latent dimension over batch and slots (numpy twin of ``ad.zscore``)."""
    mu = z.mean(axis=(0, 1), keepdims=True)
    std = np.sqrt(((z - mu) ** 2).mean(axis=(0, 1), keepdims=True))
    return (z - mu) / np.maximum(std, floor)


def matched_consistency(target: np.ndarray, reencoded) -> ad.Tensor:
    """Normalize both code stacks, Hungarian-match slots per sample, return mean matched squared distance.

    ``target`` (B, K, D) is a constant; ``reencoded`` may carry gradients.
    """
    reencoded = ad.as_tensor(reencoded)
    if target.shape != reencoded.shape:
        raise ad.ShapeError("matched_consistency", target.shape, reencoded.shape)
    B, K, _ = target.shape
    t = normalize_codes(target)
    r = ad.zscore(reencoded, axis=(0, 1))
    cost = ((t[:, :, None, :] - r.data[:, None, :, :]) ** 2).sum(axis=-1)
    perm = hungarian_batch(cost)
    r_matched = r[np.arange(B)[:, None], perm]
    return ad.sq_error(r_matched, t) * (1.0 / (B * K))


def cons_loss(params, x, rng: np.random.Generator, cfg: ModelConfig, grad_mode: str = "encoder_only",
              zhat: np.ndarray | None = None, bound_const=None) -> ad.Tensor:
    """Compositional consistency loss on recombined codes of the batch ``x``.

    ``zhat`` may pass in already-computed codes of ``x``. The recombined codes
    are constants; in ``encoder_only`` mode the decoded images are too.
    """
    x = np.asarray(ad.as_tensor(x).data)
    B = x.shape[0]
    if B < 2:
        raise ValueError(f"consistency loss needs a batch of at least 2, got {B}")
    if zhat is None:
        zhat = encode(params, x, cfg).data
    plan = sample_plan(B, cfg.K, rng)
    z_prime = apply_plan(zhat, plan)
    if grad_mode == "encoder_only":
        const = bound_const if bound_const is not None else (
            params.bind() if isinstance(params, ModelParams) else {n: ad.detach(t) for n, t in params.items()})
        x_prime = decode(const, z_prime, cfg)[0].data
    elif grad_mode == "full":
        x_prime = decode(params, z_prime, cfg)[0]
    else:
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    return matched_consistency(z_prime, encode(params, x_prime, cfg))


# --- contrast used for logging ---------------------------------------------

def decoder_contrast(params: ModelParams, cfg: ModelConfig, codes: np.ndarray, h: float = 1e-4) -> float:
    """Mean compositional contrast of the decoder over codes (n, K, M_hat)."""
    from .metrics import contrast_from_jacobian

    bound = params.bind()

    def f(zf):
        return decode(bound, zf.reshape(-1, cfg.K, cfg.M_hat), cfg)[0].data

    J = ad.jacobian_fd_batch(f, codes.reshape(len(codes), -1), h)
    return float(np.mean([contrast_from_jacobian(j, cfg.K) for j in J]))


# --- training loop ----------------------------------------------------------

def lr_at(tcfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch."""
    if tcfg.lr_schedule == "constant":
        return tcfg.lr
    lo = 1e-7
    ramp = lo * 2.0 ** epoch
    if ramp < tcfg.lr:
        return ramp
    peak_epoch = int(np.ceil(np.log2(tcfg.lr / lo)))
    return max(lo, tcfg.lr * 0.5 ** ((epoch - peak_epoch) // 50))


def train(model_cfg: ModelConfig, tcfg: TrainConfig, x_train: np.ndarray, out_dir=None,
          callback=None, init: Checkpoint | None = None) -> tuple[Checkpoint, TrainLog]:
    """Adam on shuffled minibatches; rec-only before ``warmup``, rec + lam·cons after.

    ``callback(epoch, params)`` runs after every epoch on a frozen copy.
    Deterministic given ``tcfg.seed`` and ``model_cfg.init_seed``.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.ndim != 2 or x_train.shape[1] != model_cfg.N:
        raise ValueError(f"training data has shape {x_train.shape}, model expects N={model_cfg.N}")
    params = init.params.copy() if init is not None else init_params(model_cfg)
    state = AdamState.zeros(params.flat.size, lr=tcfg.lr)
    start_epoch = 0
    if init is not None and "adam.m" in init.extra:
        state.m[:] = init.extra["adam.m"]
        state.v[:] = init.extra["adam.v"]
        state.step = init.step
        start_epoch = int(init.meta.get("epoch", 0))
    probe_rng = np.random.default_rng(derive_seed(tcfg.seed, "train/probe"))
    probe = x_train[probe_rng.choice(len(x_train), size=min(tcfg.contrast_codes, len(x_train)), replace=False)]
    cons_probe_rng_seed = derive_seed(tcfg.seed, "train/probe-cons")
    n_batches = len(x_train) // tcfg.batch_size
    trainlog = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(start_epoch, tcfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at(tcfg, epoch)
        use_cons = epoch >= tcfg.warmup and tcfg.lam > 0
        # per-epoch streams make a resumed run identical to an uninterrupted one
        shuffle_rng = rng_for(tcfg.seed, f"train/shuffle/{epoch}")
        cons_rng = rng_for(tcfg.seed, f"train/cons/{epoch}")
        order = shuffle_rng.permutation(len(x_train))
        rec_sum = 0.0
        for bi in range(n_batches):
            xb = x_train[order[bi * tcfg.batch_size:(bi + 1) * tcfg.batch_size]]
            tape = Tape()
            P = params.bind(tape)
            zhat = encode(P, xb, model_cfg)
            x_hat, _ = decode(P, zhat, model_cfg)
            l_rec = reconstruction_error(x_hat, xb)
            loss = l_rec
            if use_cons:
                l_cons = cons_loss(P, xb, cons_rng, model_cfg, tcfg.grad_mode, zhat=zhat.data,
                                   bound_const=params.bind())
                loss = l_rec + l_cons * tcfg.lam
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {bi + 1}: {float(loss.data)}")
            grads = tape.backward(loss)
            try:
                adam_step(state, params.flat, params.gather_grads(P, grads))
            except FloatingPointError as e:
                raise TrainingDiverged(f"epoch {epoch + 1}, step {bi + 1}: {e}") from None
            rec_sum += float(l_rec.data)

        frozen = params.copy()
        probe_codes = encode(frozen, probe, model_cfg).data
        l_cons_probe = float(cons_loss(frozen, probe, np.random.default_rng(cons_probe_rng_seed),
                                       model_cfg, zhat=probe_codes).data)
        contrast = decoder_contrast(frozen, model_cfg, probe_codes)
        trainlog.append(epoch=epoch + 1, l_rec=rec_sum / n_batches, l_cons=l_cons_probe,
                        contrast=contrast, seconds=time.perf_counter() - t0)
        log.info("epoch %d  l_rec %.5f  l_cons %.5f  contrast %.4g", epoch + 1,
                 rec_sum / n_batches, l_cons_probe, contrast)
        if callback is not None:
            callback(epoch + 1, frozen)
        if out_dir is not None and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt",
                            _checkpoint(model_cfg, params, state, epoch + 1, shuffle_rng, tcfg))

    final_rng = rng_for(tcfg.seed, f"train/shuffle/{tcfg.epochs}")
    return _checkpoint(model_cfg, params, state, tcfg.epochs, final_rng, tcfg), trainlog


def _checkpoint(model_cfg, params, state, epoch, rng, tcfg) -> Checkpoint:
    return Checkpoint(model=model_cfg, params=params.copy(), step=state.step,
                      rng_digest=rng_digest(rng), meta={"epoch": epoch, "train": tcfg.to_dict()},
                      extra={"adam.m": state.m.copy(), "adam.v": state.v.copy()})
