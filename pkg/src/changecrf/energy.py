"""Terms of the joint Gibbs energy over the image label y and pixel labels h.

    E(y, h | x) = Phi_l(y) + sum_j u_j(h_j) + sum_j psi_u(h_j, y, delta_j)
                  + sum_{j<k} (a_ap k_ap(f_j, f_k) + a_sm k_sm(f_j, f_k)) [h_j != h_k]

``k_ap`` and ``k_sm`` are unit-bandwidth Gaussians on features that are
divided by their bandwidths in :func:`kernel_features`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .types import ImagePair, as_labeling, difference_map

COMPAT_VARIANTS = ("as-printed", "difference-increasing")
TAU_POLICIES = ("knn", "fixed")
BRUTEFORCE_LIMIT = 10_000


@dataclass(frozen=True)
class CrfParams:
    alpha_ap: float = 5.0
    alpha_sm: float = 3.0
    theta_alpha: float = 60.0  # spatial bandwidth of the appearance kernel, px
    theta_beta: float = 0.13  # colour bandwidth, channels in [0, 1]
    theta_gamma: float = 3.0  # spatial bandwidth of the smoothness kernel, px
    gamma: float = 10.0
    clamp: float = 10.0  # energy of h_j = 1 when y = 0
    compat_variant: str = "as-printed"
    mf_iters: int = 10
    lambda_tol: float = 1e-6
    tau_policy: str = "knn"
    tau: float | None = None
    knn_k: int = 6

    def __post_init__(self):
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha_ap < 0 or self.alpha_sm < 0:
            raise ValueError("kernel weights must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.clamp > 0:
            raise ValueError("clamp energy must be positive")
        if self.compat_variant not in COMPAT_VARIANTS:
            raise ValueError(f"compat_variant must be one of {COMPAT_VARIANTS}")
        if int(self.mf_iters) != self.mf_iters or self.mf_iters < 1:
            raise ValueError("mf_iters must be a positive integer")
        if not self.lambda_tol > 0:
            raise ValueError("lambda_tol must be positive")
        if self.tau_policy not in TAU_POLICIES:
            raise ValueError(f"tau_policy must be one of {TAU_POLICIES}")
        if self.tau_policy == "fixed" and (self.tau is None or not 0.0 < self.tau < 1.0):
            raise ValueError("a fixed tau must lie in (0, 1)")
        if self.knn_k < 1:
            raise ValueError("knn_k must be at least 1")

    @property
    def alpha_total(self) -> float:
        return self.alpha_ap + self.alpha_sm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CrfParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown CRF parameters: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class KernelFeatures:
    appearance: np.ndarray  # (m, 5): x, y over theta_alpha; r, g, b over theta_beta
    smoothness: np.ndarray  # (m, 2): x, y over theta_gamma
    source: str = "a"


def kernel_features(image: np.ndarray, params: CrfParams, source: str = "a") -> KernelFeatures:
    """Bandwidth-scaled features for the appearance and smoothness kernels.

    ``x`` is the column index and ``y`` the row index.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    rows, cols = np.mgrid[0:h, 0:w]
    xy = np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)
    appearance = np.column_stack([xy / params.theta_alpha, image.reshape(-1, 3) / params.theta_beta])
    return KernelFeatures(appearance, xy / params.theta_gamma, source)


def compat_energy_pixel(h: int, y: int, delta: float, params: CrfParams) -> float:
    """Coupling energy between one pixel label and the image label."""
    if delta < 0:
        raise ValueError("colour difference must be non-negative")
    if h not in (0, 1) or y not in (0, 1):
        raise ValueError("labels must be 0 or 1")
    if y == 0:
        return 0.0 if h == 0 else params.clamp
    if h == 1:
        return 0.0
    decay = math.exp(-params.gamma * delta)
    if params.compat_variant == "as-printed":
        return 1.0 + decay
    return 1.0 + (1.0 - decay)


def compat_energy(y: int, delta: np.ndarray, params: CrfParams) -> np.ndarray:
    """Vectorised coupling energies, shape ``delta.shape + (2,)``."""
    delta = np.asarray(delta, dtype=np.float64)
    out = np.zeros(delta.shape + (2,))
    if y == 0:
        out[..., 1] = params.clamp
        return out
    if y != 1:
        raise ValueError("image label must be 0 or 1")
    decay = np.exp(-params.gamma * delta)
    if params.compat_variant == "as-printed":
        out[..., 0] = 1.0 + decay
    else:
        out[..., 0] = 2.0 - decay
    return out


def effective_unary(unary: np.ndarray, y: int, pair: ImagePair, params: CrfParams) -> np.ndarray:
    """Pixel unary plus coupling energy, flattened row-major to (m, 2)."""
    unary = np.asarray(unary, dtype=np.float64)
    h, w = pair.shape
    if unary.shape != (h, w, 2):
        raise ValueError(f"unary field shape {unary.shape} does not match pair {(h, w, 2)}")
    a = unary + compat_energy(y, difference_map(pair), params)
    return a.reshape(-1, 2)


def kernel_matrix(feats: KernelFeatures, params: CrfParams) -> np.ndarray:
    """Dense weighted Potts kernel, zero on the diagonal.  O(m^2) memory."""
    m = feats.appearance.shape[0]
    if m > BRUTEFORCE_LIMIT:
        raise ValueError(f"{m} pixels exceeds the brute-force limit of {BRUTEFORCE_LIMIT}")
    weight = np.zeros((m, m))
    for alpha, f in ((params.alpha_ap, feats.appearance), (params.alpha_sm, feats.smoothness)):
        if alpha == 0:
            continue
        sq = np.sum(f**2, axis=1)
        dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
        weight += alpha * np.exp(-0.5 * dist2)
    np.fill_diagonal(weight, 0.0)
    return weight


def pairwise_energy_bruteforce(
    labels: np.ndarray, feats_ap: np.ndarray, feats_sm: np.ndarray, params: CrfParams
) -> float:
    """Sum over pixel pairs j < k of the kernel weight where labels disagree."""
    labels = np.asarray(labels).ravel()
    feats = KernelFeatures(np.asarray(feats_ap, float), np.asarray(feats_sm, float))
    if labels.shape[0] != feats.appearance.shape[0]:
        raise ValueError("label count does not match feature rows")
    weight = kernel_matrix(feats, params)
    h = labels.astype(np.float64)
    # each unordered disagreeing pair appears twice in the full matrix
    disagree = h[:, None] != h[None, :]
    return float(0.5 * np.sum(weight[disagree]))


def image_energy(y: int, score: float | None) -> float:
    """Image-level unary: negative log-probability of ``y`` under the classifier score."""
    if score is None:
        return 0.0
    p = min(max(float(score), 1e-12), 1.0 - 1e-12)
    return -math.log(p) if y == 1 else -math.log(1.0 - p)


def total_energy(
    labels: np.ndarray,
    y: int,
    unary: np.ndarray,
    pair: ImagePair,
    params: CrfParams,
    image_score: float | None = None,
    source: str = "a",
) -> float:
    """Full energy of a labeling; the pairwise term uses ``source``'s edges."""
    h, w = pair.shape
    labels = as_labeling(labels, (h, w)).ravel()
    a = effective_unary(unary, y, pair, params)
    unary_part = float(np.sum(a[np.arange(a.shape[0]), labels]))
    feats = kernel_features(pair.image(source), params, source)
    pairwise = pairwise_energy_bruteforce(labels, feats.appearance, feats.smoothness, params)
    return image_energy(y, image_score) + unary_part + pairwise
