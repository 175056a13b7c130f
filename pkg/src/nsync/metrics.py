"""Sample-quality metrics over a frozen stand-in feature extractor.

* KID: unbiased MMD^2 with the cubic polynomial kernel ``(a.b/d + 1)^3``.
* CMMD: unbiased MMD^2 with a Gaussian RBF kernel (median-heuristic
  bandwidth by default).
* FID: Frechet distance between Gaussian fits.
* CSD: mean cosine similarity between generated features and the mean test
  feature.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist, pdist

from nsync.errors import NumericalError

log = logging.getLogger(__name__)

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed random two-layer map ``tanh(x W1 + b1) W2``; never trained."""

    d_in: int = 64
    d_hidden: int = 64
    d_f: int = 32
    seed: int = 0

    def weights(self):
        rng = np.random.default_rng([self.seed, 104729])
        w1 = rng.standard_normal((self.d_in, self.d_hidden)) / np.sqrt(self.d_in)
        b1 = 0.1 * rng.standard_normal(self.d_hidden)
        w2 = rng.standard_normal((self.d_hidden, self.d_f)) / np.sqrt(self.d_hidden)
        return w1, b1, w2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d_in:
            raise ValueError(f"extractor expects {self.d_in}-dim samples, got {x.shape[1]}")
        w1, b1, w2 = self.weights()
        return np.tanh(x @ w1 + b1) @ w2


def extract_features(samples, extractor: FeatureExtractor) -> np.ndarray:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("no samples to featurize")
    return extractor(x)


# ---------------------------------------------------------------------------
# MMD


def _check_rows(X, Y, minimum=2):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] < minimum or Y.shape[0] < minimum:
        raise ValueError(f"need at least {minimum} rows in each set, got {X.shape[0]} and {Y.shape[0]}")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("feature dimensions differ")
    return X, Y


def mmd2_unbiased(X, Y, kernel: Kernel) -> float:
    """Unbiased U-statistic estimate of squared MMD.

    Within-set sums exclude the diagonal; the cross term uses all pairs.
    """
    X, Y = _check_rows(X, Y)
    # canonical argument order makes the estimate bitwise symmetric
    if (X.shape[0], X.tobytes()) > (Y.shape[0], Y.tobytes()):
        X, Y = Y, X
    m, n = X.shape[0], Y.shape[0]
    kxx = kernel(X, X)
    kyy = kernel(Y, Y)
    kxy = kernel(X, Y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    sxy = kxy.sum() / (m * n)
    return float(sxx + syy - 2.0 * sxy)


def polynomial_kernel(d: int, degree: int = 3, coef0: float = 1.0) -> Kernel:
    return lambda a, b: (a @ b.T / d + coef0) ** degree


def rbf_kernel(sigma: float) -> Kernel:
    if not sigma > 0:
        raise ValueError(f"RBF bandwidth must be positive, got {sigma}")
    return lambda a, b: np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * sigma * sigma))


def median_bandwidth(X, Y) -> float:
    pooled = np.concatenate([X, Y])
    d = pdist(pooled)
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d))


def kid(X, Y, n_blocks: int | None = None) -> float:
    """Polynomial-kernel MMD^2 over the full sets, or averaged over
    ``n_blocks`` contiguous row blocks of each set."""
    X, Y = _check_rows(X, Y)
    kernel = polynomial_kernel(X.shape[1])
    if n_blocks is None or n_blocks <= 1:
        return mmd2_unbiased(X, Y, kernel)
    xs = np.array_split(X, n_blocks)
    ys = np.array_split(Y, n_blocks)
    if min(len(b) for b in xs + ys) < 2:
        raise ValueError(f"{n_blocks} blocks leave fewer than 2 rows per block")
    return float(np.mean([mmd2_unbiased(a, b, kernel) for a, b in zip(xs, ys)]))


def cmmd(X, Y, sigma: float | None = None) -> float:
    """RBF-kernel MMD^2; ``sigma=None`` uses the pooled median distance."""
    X, Y = _check_rows(X, Y)
    if sigma is None:
        sigma = median_bandwidth(X, Y)
    return mmd2_unbiased(X, Y, rbf_kernel(sigma))


# ---------------------------------------------------------------------------
# FID


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the product's square root is taken from the eigenvalues of
    the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``, which has the same spectrum
    as ``S1 S2``. Negative eigenvalues from round-off are clamped at 0.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    try:
        root1 = _psd_sqrt(sigma1)
        mid = root1 @ sigma2 @ root1
        eig = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed in FID: {exc}") from exc
    if eig.min() < -1e-8:
        log.warning("FID: clamping negative eigenvalue %.3e of the covariance product", eig.min())
    tr_covmean = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)


def fid(X, Y) -> float:
    X, Y = _check_rows(X, Y)
    return frechet_distance(
        X.mean(axis=0), np.cov(X, rowvar=False, ddof=1), Y.mean(axis=0), np.cov(Y, rowvar=False, ddof=1)
    )


# ---------------------------------------------------------------------------
# CSD


def csd_score(X_gen, X_test) -> float:
    X_gen = np.atleast_2d(np.asarray(X_gen, dtype=np.float64))
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if X_gen.shape[0] == 0 or X_test.shape[0] == 0:
        raise ValueError("CSD needs non-empty feature sets")
    center = X_test.mean(axis=0)
    cnorm = np.linalg.norm(center)
    if cnorm == 0:
        raise ValueError("mean test feature has zero norm")
    norms = np.linalg.norm(X_gen, axis=1)
    if np.any(norms == 0):
        raise ValueError("a generated feature vector has zero norm")
    return float(np.mean(X_gen @ center / (norms * cnorm)))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    csd: float
    cmmd: float
    kid: float
    fid: float
    n_generated: int
    n_test: int
    extractor_seed: int
    cmmd_sigma: float
    pairing: str = "one generated sample per test caption"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    CSV_FIELDS = ("csd", "cmmd", "kid", "fid", "n_generated", "n_test", "extractor_seed", "cmmd_sigma")

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def evaluate(
    generated: np.ndarray,
    test: np.ndarray,
    extractor: FeatureExtractor | None = None,
    cmmd_sigma: float | None = None,
    kid_blocks: int | None = None,
) -> MetricsReport:
    extractor = extractor or FeatureExtractor(d_in=np.atleast_2d(test).shape[1])
    fg = extract_features(generated, extractor)
    ft = extract_features(test, extractor)
    if not (np.all(np.isfinite(fg)) and np.all(np.isfinite(ft))):
        raise NumericalError("non-finite features; generated samples contain NaN or inf")
    sigma = cmmd_sigma if cmmd_sigma is not None else median_bandwidth(fg, ft)
    return MetricsReport(
        csd=csd_score(fg, ft),
        cmmd=cmmd(fg, ft, sigma),
        kid=kid(fg, ft, kid_blocks),
        fid=fid(fg, ft),
        n_generated=int(fg.shape[0]),
        n_test=int(ft.shape[0]),
        extractor_seed=extractor.seed,
        cmmd_sigma=float(sigma),
    )
