"""Evaluation: compositional contrast, theory diagnostics, identifiability and reconstruction scores."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .assignment import hungarian, hungarian_batch
from .autodiff import jacobian_fd
from .scene import SceneConfig, in_band, render, render_object


# --- Jacobian-based diagnostics ---------------------------------------------

def slot_gradient_norms(J: np.ndarray, K: int) -> np.ndarray:
    """Per-pixel, per-slot gradient norms (N, K) from a Jacobian (N, K·D)."""
    N, KD = J.shape
    return np.linalg.norm(J.reshape(N, K, KD // K), axis=-1)


def contrast_from_jacobian(J: np.ndarray, K: int) -> float:
    norms = slot_gradient_norms(J, K)
    # sum_{k<j} a_k a_j = ((sum a)^2 - sum a^2) / 2, per pixel
    total = (norms.sum(axis=1) ** 2 - (norms ** 2).sum(axis=1)) / 2.0
    return float(max(total.sum(), 0.0))


def comp_contrast(f, z, K: int, h: float = 1e-4) -> float:
    """Compositional contrast of ``f`` at ``z``: sum over pixels and slot pairs of gradient-norm products.

    ``f`` takes a flat latent vector of length K·D.
    """
    J = jacobian_fd(f, np.ravel(z), h)
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian in comp_contrast")
    return contrast_from_jacobian(J, K)


@dataclass
class InfluenceSets:
    sets: list  # sets[k] = sorted pixel indices influenced by slot k

    def overlap(self) -> bool:
        seen = set()
        for s in self.sets:
            if seen.intersection(s):
                return True
            seen.update(s)
        return False


def influence_sets(J: np.ndarray, K: int, tau: float = 1e-8) -> InfluenceSets:
    norms = slot_gradient_norms(J, K)
    return InfluenceSets([np.flatnonzero(norms[:, k] > tau).tolist() for k in range(K)])


def compositionality_check(f, z, K: int, tau: float = 1e-8, h: float = 1e-4) -> tuple[bool, InfluenceSets]:
    """True iff no pixel is influenced by two different slots at ``z``."""
    sets = influence_sets(jacobian_fd(f, np.ravel(z), h), K, tau)
    return not sets.overlap(), sets


def numerical_rank(A: np.ndarray, rtol: float = 1e-8) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _partitions(idx: list, rng, n_random: int, exhaustive: bool):
    n = len(idx)
    if n < 2:  # no split into two non-empty parts
        return
    if exhaustive and n <= 12:
        # every bipartition once: fix the first element in S1
        for mask in range(1 << (n - 1)):
            s1 = [idx[0]] + [idx[i] for i in range(1, n) if mask >> (i - 1) & 1]
            if len(s1) < n:
                yield s1
        return
    for i in range(n):
        yield [idx[i]]
    for _ in range(n_random):
        pick = rng.random(n) < 0.5
        if pick.all() or not pick.any():
            pick[rng.integers(n)] = not pick[0]
            if pick.all() or not pick.any():
                continue
        yield [idx[i] for i in range(n) if pick[i]]


def irreducibility_check(f, z, K: int, n_random: int = 64, rng=None, tau: float = 1e-8,
                         h: float = 1e-4, exhaustive: bool = False, J: np.ndarray | None = None) -> bool:
    """Rank inequality rank(D_S1) + rank(D_S2) > rank(D_Ik) on sampled bipartitions of each influence set.

    Samples all singleton-vs-rest splits plus ``n_random`` random splits per
    slot (all splits when ``exhaustive`` and |I_k| <= 12).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if J is None:
        J = jacobian_fd(f, np.ravel(z), h)
    sets = influence_sets(J, K, tau)
    ok = True
    for k, I in enumerate(sets.sets):
        if not I:
            warnings.warn(f"slot {k} influences no pixel; irreducibility holds vacuously", stacklevel=2)
            continue
        full = numerical_rank(J[I])
        Iset = set(I)
        for s1 in _partitions(I, rng, n_random, exhaustive):
            s2 = sorted(Iset.difference(s1))
            if numerical_rank(J[s1]) + numerical_rank(J[s2]) <= full:
                ok = False
                break
    return ok


def hessian_cross_check(f, z, K: int, h: float = 1e-3) -> float:
    """Max |d²f_n / dz_a dz_b| over outputs and coordinate pairs in different slots."""
    z = np.asarray(z, dtype=np.float64).ravel()
    D = z.size // K
    worst = 0.0
    for a in range(z.size):
        for b in range(a + 1, z.size):
            if a // D == b // D:
                continue
            ea, eb = np.zeros_like(z), np.zeros_like(z)
            ea[a] = h
            eb[b] = h
            d2 = (np.asarray(f(z + ea + eb)) - np.asarray(f(z + ea - eb))
                  - np.asarray(f(z - ea + eb)) + np.asarray(f(z - ea - eb))) / (4 * h * h)
            worst = max(worst, float(np.max(np.abs(d2))))
    return worst


# --- regression and scores --------------------------------------------------

@dataclass
class KernelRidgeModel:
    X: np.ndarray
    alpha: np.ndarray
    y_mean: np.ndarray
    bandwidth: float
    ridge: float


def rbf_kernel(A, B, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth ** 2))


def median_bandwidth(X) -> float:
    d = pdist(X)
    return max(float(np.median(d)) if d.size else 1.0, 1e-6)


def kernel_ridge_fit(X, Y, bandwidth: float | None = None, ridge: float = 1e-3) -> KernelRidgeModel:
    """RBF kernel ridge with a mean offset: (K + ridge·I) alpha = Y - mean(Y)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 2:
        raise ValueError(f"kernel ridge needs at least 2 points, got {len(X)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("kernel ridge inputs must be finite")
    bw = median_bandwidth(X) if bandwidth is None else bandwidth
    y_mean = Y.mean(axis=0)
    G = rbf_kernel(X, X, bw)
    G[np.diag_indices_from(G)] += ridge
    alpha = cho_solve(cho_factor(G), Y - y_mean)
    return KernelRidgeModel(X=X, alpha=alpha, y_mean=y_mean, bandwidth=bw, ridge=ridge)


def kernel_ridge_predict(model: KernelRidgeModel, X) -> np.ndarray:
    return rbf_kernel(np.asarray(X, dtype=np.float64), model.X, model.bandwidth) @ model.alpha + model.y_mean


def r2_score(y_true, y_pred) -> float:
    """Coefficient of determination; per-column average for 2-D targets.

    A zero-variance column scores 1 if predicted exactly, else -inf.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.ndim == 1:
        y_true, y_pred = y_true[:, None], y_pred[:, None]
    sse = ((y_true - y_pred) ** 2).sum(axis=0)
    sst = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    scores = []
    for e, t in zip(sse, sst):
        if t == 0:
            scores.append(1.0 if e == 0 else -np.inf)
        else:
            scores.append(1.0 - e / t)
    return float(np.mean(scores))


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (train - mu) / sd, (test - mu) / sd


def slot_identifiability(inferred, gt, seed: int = 0, max_points: int = 2000,
                         test_frac: float = 0.2) -> tuple[float, tuple, np.ndarray]:
    """Held-out R² of predicting each ground-truth slot from each inferred slot, Hungarian-matched.

    Returns (mean matched R², perm, R) where R[i, j] scores inferred slot j ->
    ground-truth slot i and perm[i] is the inferred slot matched to gt slot i.
    """
    inferred = np.asarray(inferred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n, K = gt.shape[:2]
    if n < 100:
        raise ValueError(f"slot_identifiability needs at least 100 points, got {n}")
    for i in range(K):
        if np.any(gt[:, i].std(axis=0) < 1e-12):
            raise ValueError(f"ground-truth slot {i} has a degenerate (zero-variance) coordinate")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[:max_points]
    n_test = max(1, int(round(test_frac * len(idx))))
    fit, test = idx[n_test:], idx[:n_test]
    R = np.zeros((K, K))
    targets = gt.reshape(n, -1)
    M = gt.shape[2]
    for j in range(K):
        Xf, Xt = _standardize(inferred[fit, j], inferred[test, j])
        # one solve covers every ground-truth slot as a separate target block
        pred = kernel_ridge_predict(kernel_ridge_fit(Xf, targets[fit]), Xt)
        for i in range(K):
            R[i, j] = r2_score(gt[test, i], pred[:, i * M:(i + 1) * M])
    a = hungarian(-R)
    return float(np.mean([R[i, a.perm[i]] for i in range(K)])), a.perm, R


def reconstruction_r2(model, x) -> float:
    """1 - MSE / pixel variance of the data (variance about the mean image)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = model.reconstruct(x)
    mse = np.mean((x_hat - x) ** 2)
    var = np.mean((x - x.mean(axis=0)) ** 2)
    return float(1.0 - mse / var) if var > 0 else (1.0 if mse == 0 else -np.inf)


def per_sample_mse(model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.mean((model.reconstruct(x) - x) ** 2, axis=1)


def isolated_decoder_errors(model, cfg: SceneConfig, z) -> np.ndarray:
    """Per-point decoder-only reconstruction error ||g_hat(z') - g(z)||² / N.

    In-band points use the full autoencoder error. For out-of-band points each
    object j is encoded from a diagonal partner image (every slot set to z_j,
    always in band); the slot rendering object j is found by Hungarian
    matching of decoder slot renders against ground-truth object renders, and
    the matched codes are assembled into z'.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    n, K, _ = z.shape
    x = render(cfg, z)
    errors = np.empty(n)
    ib = in_band(z, cfg.delta)
    ib = np.atleast_1d(ib)
    if ib.any():
        errors[ib] = per_sample_mse(model, x[ib])
    ood = np.flatnonzero(~ib)
    if len(ood) == 0:
        return errors
    zo = z[ood]  # (m, K, M)
    m = len(zo)
    partners = np.repeat(zo[:, :, None, :], K, axis=2)  # partners[:, j] = K copies of z_j
    part_x = render(cfg, partners.reshape(m * K, K, -1))
    codes = model.encode(part_x)  # (m*K, K, Mh)
    contrib = model.slot_contributions(codes).reshape(m, K, K, cfg.N)  # [point, partner j, slot s]
    gt_obj = np.stack([render_object(cfg, i, partners[:, :, i, :].reshape(m * K, -1)) for i in range(K)],
                      axis=1).reshape(m, K, K, cfg.N)  # [point, partner j, object i]
    cost = ((gt_obj[:, :, :, None, :] - contrib[:, :, None, :, :]) ** 2).mean(axis=-1)  # [pt, j, obj, slot]
    within = hungarian_batch(cost.reshape(m * K, K, K)).reshape(m, K, K)
    slot_of = within[:, np.arange(K), np.arange(K)]  # slot carrying object j in partner j
    codes = codes.reshape(m, K, K, -1)
    z_prime = np.empty((m, K, codes.shape[-1]))
    for p in range(m):
        s = slot_of[p]
        if len(set(s.tolist())) < K:
            cross = cost[p, np.arange(K), np.arange(K)]  # [partner j, slot] for object j
            s = np.array(hungarian(cross).perm)
        z_prime[p, s] = codes[p, np.arange(K), s]
    x_hat = model.decode(z_prime)
    errors[ood] = np.mean((x_hat - x[ood]) ** 2, axis=1)
    return errors


def isolated_decoder_error(model, cfg: SceneConfig, z) -> float:
    return float(np.mean(isolated_decoder_errors(model, cfg, z)))


# --- heatmaps ---------------------------------------------------------------

@dataclass
class Heatmap:
    values: np.ndarray  # (G, G); -1 where empty
    region: np.ndarray  # (G, G) "ID" / "OOD"
    counts: np.ndarray

    def to_csv(self) -> str:
        G = len(self.values)
        lines = ["row,col,value,region"]
        for r in range(G):
            for c in range(G):
                lines.append(f"{r},{c},{self.values[r, c]!r},{self.region[r, c]}")
        return "\n".join(lines) + "\n"

    def to_pgm(self) -> bytes:
        """8-bit P5 image; 255 is the max non-empty cell value (recorded in a header comment)."""
        G = len(self.values)
        filled = self.counts > 0
        vmax = float(self.values[filled].max()) if filled.any() else 0.0
        scaled = np.zeros((G, G))
        if vmax > 0:
            scaled[filled] = self.values[filled] / vmax * 255.0
        img = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
        return f"P5\n# max={vmax!r}\n{G} {G}\n255\n".encode() + img[::-1].tobytes()


def heatmap_grid(model, cfg: SceneConfig, z, resolution: int = 16, mode: str = "full_ae",
                 coord: int = 1, slots: tuple = (0, 1)) -> Heatmap:
    """Mean per-pixel MSE binned by one latent coordinate of two slots.

    Cells are labelled ID when their center lies in the band of the projected
    coordinates; points whose own region disagrees with their cell's are
    dropped so the two regions stay visually separate.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    z = np.asarray(z, dtype=np.float64)
    if mode == "full_ae":
        err = per_sample_mse(model, render(cfg, z))
    elif mode == "isolated_decoder":
        err = isolated_decoder_errors(model, cfg, z)
    else:
        raise ValueError(f"mode must be full_ae or isolated_decoder, got {mode!r}")
    G = resolution
    centers = (np.arange(G) + 0.5) / G
    cell_id = np.abs(centers[:, None] - centers[None, :]) <= cfg.band
    u, v = z[:, slots[0], coord], z[:, slots[1], coord]
    rows = np.clip((v * G).astype(int), 0, G - 1)
    cols = np.clip((u * G).astype(int), 0, G - 1)
    point_id = np.atleast_1d(in_band(z, cfg.delta))
    keep = cell_id[rows, cols] == point_id
    sums = np.zeros((G, G))
    counts = np.zeros((G, G), dtype=int)
    np.add.at(sums, (rows[keep], cols[keep]), err[keep])
    np.add.at(counts, (rows[keep], cols[keep]), 1)
    values = np.where(counts > 0, sums / np.maximum(counts, 1), -1.0)
    return Heatmap(values=values, region=np.where(cell_id, "ID", "OOD"), counts=counts)


# --- full report ------------------------------------------------------------

@dataclass
class MetricsReport:
    id_identifiability: float
    ood_identifiability: float
    id_reconstruction_r2: float
    ood_reconstruction_r2: float
    contrast: float
    id_mse: float
    ood_mse: float
    id_isolated_error: float
    ood_isolated_error: float
    permutation: list
    ood_permutation: list
    seed: int = 0
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(model, cfg: SceneConfig, id_test, ood_test, seed: int = 0, contrast_codes: int = 100) -> MetricsReport:
    """Full report over ID / OOD test datasets (objects with ``latents`` and ``observations``)."""
    zi, xi = id_test.latents, id_test.observations
    zo, xo = ood_test.latents, ood_test.observations
    ci, co = model.encode(xi), model.encode(xo)
    id_r2, perm, _ = slot_identifiability(ci, zi, seed=seed)
    ood_r2, ood_perm, _ = slot_identifiability(co, zo, seed=seed)
    notes = []
    if id_r2 < 0.9:
        notes.append(f"ID identifiability {id_r2:.3f} < 0.9; isolated decoder error assumes ID slot identifiability")
    codes = ci[:contrast_codes]
    from .autodiff import jacobian_fd_batch

    J = jacobian_fd_batch(model.decoder_flat(), codes.reshape(len(codes), -1), 1e-4)
    contrast = float(np.mean([contrast_from_jacobian(j, model.cfg.K) for j in J]))
    return MetricsReport(
        id_identifiability=id_r2, ood_identifiability=ood_r2,
        id_reconstruction_r2=reconstruction_r2(model, xi), ood_reconstruction_r2=reconstruction_r2(model, xo),
        contrast=contrast,
        id_mse=float(per_sample_mse(model, xi).mean()), ood_mse=float(per_sample_mse(model, xo).mean()),
        id_isolated_error=isolated_decoder_error(model, cfg, zi),
        ood_isolated_error=isolated_decoder_error(model, cfg, zo),
        permutation=[int(p) for p in perm], ood_permutation=[int(p) for p in ood_perm],
        seed=seed, warnings=notes)
