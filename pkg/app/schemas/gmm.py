import enum
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.schemas.layout import CategoryLabel, CategoryRegistry


class CovarianceType(str, enum.Enum):
    FULL = "full"
    DIAG = "diag"


class GmmVariant(str, enum.Enum):
    # (1) co-occurrences copied from the seed ground-truth layout
    DRAFT_FROM_GT = "draft_from_gt"
    # (2) co-occurrences sampled from a mixture fitted on per-image category counts
    FITTED_COOCCURRENCE = "fitted_cooccurrence"


class GaussianMixture(BaseModel):
    model_config = ConfigDict(frozen=True)

    weights: Tuple[float, ...]
    means: Tuple[Tuple[float, ...], ...]
    # Stored as full matrices in both modes; diagonal mode keeps off-diagonals at zero
    covariances: Tuple[Tuple[Tuple[float, ...], ...], ...]
    covariance_type: CovarianceType = CovarianceType.FULL
    log_likelihood_trace: Tuple[float, ...] = ()
    converged: bool = False

    @model_validator(mode="after")
    def check_parameters(self):
        weights = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        k = len(weights)
        if k < 1:
            raise ValueError("a mixture needs at least one component")
        if means.ndim != 2 or means.shape[0] != k:
            raise ValueError(f"expected {k} mean vectors, got shape {means.shape}")
        d = means.shape[1]
        if covs.shape != (k, d, d):
            raise ValueError(f"expected covariances of shape {(k, d, d)}, got {covs.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {weights.tolist()}")
        for index, cov in enumerate(covs):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"covariance {index} is not symmetric")
            if self.covariance_type is CovarianceType.DIAG and np.any(cov[~np.eye(d, dtype=bool)] != 0):
                raise ValueError(f"covariance {index} has off-diagonal entries in diagonal mode")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {index} is not positive definite")
        return self

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.asarray(self.weights, dtype=float),
            np.asarray(self.means, dtype=float),
            np.asarray(self.covariances, dtype=float),
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        weights, means, covs = self.arrays()
        components = rng.choice(len(weights), size=n, p=weights)
        return np.stack([rng.multivariate_normal(means[k], covs[k]) for k in components])


class GmmEnsemble(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: GmmVariant
    categories: CategoryRegistry
    per_category: Dict[int, GaussianMixture]
    cooccurrence_model: Optional[GaussianMixture] = None
    # Category id of each dimension of the co-occurrence count vectors
    cooccurrence_categories: Tuple[int, ...] = ()
    # Boxes are fitted as (x/W, y/H, w/W, h/H)
    normalization: Literal["unit_frame"] = "unit_frame"
    components: int = 3
    seed: int = 0

    @model_validator(mode="after")
    def consistent(self):
        known = {c.id for c in self.categories.categories}
        missing = set(self.per_category) - known
        if missing:
            raise ValueError(f"mixtures for unregistered categories {sorted(missing)}")
        if self.variant is GmmVariant.FITTED_COOCCURRENCE and self.cooccurrence_model is None:
            raise ValueError("fitted_cooccurrence ensembles need a co-occurrence model")
        if self.cooccurrence_model is not None and self.cooccurrence_model.dim != len(self.cooccurrence_categories):
            raise ValueError("co-occurrence model dimension does not match its category list")
        return self

    def mixture_for(self, category: CategoryLabel) -> Optional[GaussianMixture]:
        return self.per_category.get(category.id)
