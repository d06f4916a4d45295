"""Spatial prior extrapolation with an ensemble of per-category Gaussian mixtures."""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from app.core.errors import InvalidArgument
from app.core.seeding import derive_seed
from app.schemas.gmm import CovarianceType, GaussianMixture, GmmEnsemble, GmmVariant
from app.schemas.layout import (
    BBox,
    CategoryLabel,
    CategoryRegistry,
    FewShotSet,
    ImageFrame,
    Layout,
    LayoutOrigin,
    LayoutSource,
)

logger = logging.getLogger(__name__)

COVARIANCE_FLOOR = 1e-4


def normalize_box(box: BBox, frame: ImageFrame) -> np.ndarray:
    return np.array([box.x / frame.width, box.y / frame.height, box.w / frame.width, box.h / frame.height])


def denormalize_box(vector: np.ndarray, frame: ImageFrame) -> BBox:
    x, y, w, h = (float(v) for v in vector)
    return BBox(x=x * frame.width, y=y * frame.height, w=w * frame.width, h=h * frame.height)


def _log_gaussian(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = X.shape[1]
    chol = linalg.cholesky(cov, lower=True)
    solved = linalg.solve_triangular(chol, (X - mean).T, lower=True)
    return -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(solved**2, axis=0)


def _weighted_log_prob(X, weights, means, covs) -> np.ndarray:
    return np.stack(
        [np.log(weights[k]) + _log_gaussian(X, means[k], covs[k]) for k in range(len(weights))], axis=1
    )


def _kmeans_pp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        index = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[index])
    return np.asarray(centers)


def _m_step(X, resp, covariance_type: CovarianceType, floor: float):
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = X - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        cov = 0.5 * (cov + cov.T)
        if covariance_type is CovarianceType.DIAG:
            cov = np.diag(np.diag(cov))
            collapsed = np.diag(cov).min() < floor
        else:
            collapsed = np.linalg.eigvalsh(cov).min() < floor
        if collapsed:
            cov = cov + floor * np.eye(d)
        covs[k] = cov
    return weights, means, covs


def fit_gmm(
    samples: Union[Sequence[Sequence[float]], np.ndarray],
    K: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    rng_seed: int = 0,
    covariance_type: CovarianceType = CovarianceType.FULL,
    floor: float = COVARIANCE_FLOOR,
) -> GaussianMixture:
    """EM fit seeded by k-means++.

    Covariances whose smallest eigenvalue drops below `floor` get `floor` added
    to the diagonal. Stops after `max_iters` M-steps, when the log-likelihood
    improves by less than `tol`, or before a step that would lower it, so the
    recorded trace never decreases.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2:
        raise InvalidArgument(f"samples must be a 2-D array, got shape {X.shape}")
    if K < 1:
        raise InvalidArgument(f"K must be >= 1, got {K}")
    if X.shape[0] < K:
        raise InvalidArgument(f"{X.shape[0]} samples cannot support K={K} components")
    covariance_type = CovarianceType(covariance_type)
    rng = np.random.default_rng(rng_seed)

    centers = _kmeans_pp_centers(X, K, rng)
    nearest = np.argmin(((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(K)[nearest]
    weights, means, covs = _m_step(X, resp, covariance_type, floor)

    log_prob = _weighted_log_prob(X, weights, means, covs)
    norm = logsumexp(log_prob, axis=1)
    ll = float(norm.sum())
    trace: List[float] = [ll]
    converged = False
    for _ in range(max_iters):
        resp = np.exp(log_prob - norm[:, None])
        candidate = _m_step(X, resp, covariance_type, floor)
        candidate_log_prob = _weighted_log_prob(X, *candidate)
        candidate_norm = logsumexp(candidate_log_prob, axis=1)
        candidate_ll = float(candidate_norm.sum())
        if candidate_ll < ll:
            # Only a floored covariance can lower the likelihood; keep the previous parameters
            logger.debug("EM step lowered the log-likelihood by %g, stopping", ll - candidate_ll)
            converged = True
            break
        weights, means, covs = candidate
        log_prob, norm = candidate_log_prob, candidate_norm
        gain, ll = candidate_ll - ll, candidate_ll
        trace.append(ll)
        if gain < tol:
            converged = True
            break

    weights = weights / weights.sum()
    return GaussianMixture(
        weights=tuple(weights.tolist()),
        means=tuple(tuple(m) for m in means.tolist()),
        covariances=tuple(tuple(tuple(row) for row in cov) for cov in covs.tolist()),
        covariance_type=covariance_type,
        log_likelihood_trace=tuple(trace),
        converged=converged,
    )


def cooccurrence_vectors(fewshot: FewShotSet, category_ids: Sequence[int]) -> np.ndarray:
    position = {cid: j for j, cid in enumerate(category_ids)}
    counts = np.zeros((len(fewshot.layouts), len(category_ids)))
    for i, layout in enumerate(fewshot.layouts):
        for obj in layout.objects:
            counts[i, position[obj.category.id]] += 1
    return counts


def fit_ensemble(
    fewshot: FewShotSet,
    K: int = 3,
    variant: GmmVariant = GmmVariant.DRAFT_FROM_GT,
    rng_seed: int = 0,
    covariance_type: CovarianceType = CovarianceType.FULL,
    max_iters: int = 100,
    tol: float = 1e-6,
    floor: float = COVARIANCE_FLOOR,
    workers: int = 1,
) -> GmmEnsemble:
    if not fewshot.layouts:
        raise InvalidArgument("cannot fit an ensemble on an empty few-shot set")
    variant = GmmVariant(variant)

    vectors: Dict[int, List[np.ndarray]] = {}
    for layout in fewshot.layouts:
        for obj in layout.objects:
            vectors.setdefault(obj.category.id, []).append(normalize_box(obj.bbox, layout.image_frame))
    present = [c for c in fewshot.categories.categories if c.id in vectors]

    def fit_category(category: CategoryLabel) -> GaussianMixture:
        samples = np.asarray(vectors[category.id])
        k = min(K, len(samples))
        return fit_gmm(
            samples, k, max_iters=max_iters, tol=tol,
            rng_seed=derive_seed(rng_seed, "gmm", category.id),
            covariance_type=covariance_type, floor=floor,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            mixtures = list(pool.map(fit_category, present))
    else:
        mixtures = [fit_category(c) for c in present]

    cooccurrence_model = None
    cooccurrence_categories: Tuple[int, ...] = ()
    if variant is GmmVariant.FITTED_COOCCURRENCE:
        cooccurrence_categories = tuple(c.id for c in present)
        counts = cooccurrence_vectors(fewshot, cooccurrence_categories)
        cooccurrence_model = fit_gmm(
            counts, min(K, len(counts)), max_iters=max_iters, tol=tol,
            rng_seed=derive_seed(rng_seed, "cooccurrence"),
            covariance_type=covariance_type, floor=floor,
        )

    logger.info("fitted %d category mixtures (variant %s)", len(mixtures), variant.value)
    return GmmEnsemble(
        variant=variant,
        categories=CategoryRegistry(categories=tuple(present)),
        per_category={c.id: m for c, m in zip(present, mixtures)},
        cooccurrence_model=cooccurrence_model,
        cooccurrence_categories=cooccurrence_categories,
        components=K,
        seed=rng_seed,
    )


def _box_is_valid(v: np.ndarray, min_size: float) -> bool:
    x, y, w, h = v
    return w >= min_size and h >= min_size and x >= 0 and y >= 0 and x + w <= 1 and y + h <= 1


def repair_box(v: np.ndarray, min_size: float) -> np.ndarray:
    x, y, w, h = (float(c) for c in v)
    w = min(max(w, min_size), 1.0)
    h = min(max(h, min_size), 1.0)
    x = min(max(x, 0.0), 1.0 - w)
    y = min(max(y, 0.0), 1.0 - h)
    return np.array([x, y, w, h])


def _sample_box(mixture: GaussianMixture, rng, retries: int, min_size: float) -> Tuple[np.ndarray, int]:
    vector = None
    for attempt in range(retries):
        vector = mixture.sample(1, rng)[0]
        if _box_is_valid(vector, min_size):
            return vector, attempt
    if vector is None:
        vector = mixture.sample(1, rng)[0]
    return repair_box(vector, min_size), retries


def _draft_counts(ensemble: GmmEnsemble, rng, retries: int) -> Optional[List[CategoryLabel]]:
    for _ in range(retries):
        counts = np.rint(ensemble.cooccurrence_model.sample(1, rng)[0])
        counts = np.clip(counts, 0, None).astype(int)
        if counts.sum() == 0:
            continue
        draft = []
        for category_id, count in zip(ensemble.cooccurrence_categories, counts):
            draft.extend([ensemble.categories.by_id(category_id)] * int(count))
        return draft
    return None


def sample_layouts(
    ensemble: GmmEnsemble,
    fewshot: FewShotSet,
    alpha: int,
    rng_seed: int = 0,
    box_retries: int = 10,
    min_box_fraction: float = 0.02,
    draft_retries: int = 100,
) -> List[Layout]:
    """Sample alpha layouts per ground-truth layout, ordered repeat-major."""
    if alpha < 1:
        raise InvalidArgument(f"augmentation ratio must be >= 1, got {alpha}")

    gt_boxes: Dict[int, List[Tuple[BBox, ImageFrame]]] = {}
    for layout in fewshot.layouts:
        for obj in layout.objects:
            gt_boxes.setdefault(obj.category.id, []).append((obj.bbox, layout.image_frame))

    out = []
    for repeat in range(alpha):
        for index, seed_layout in enumerate(fewshot.layouts):
            seed = derive_seed(rng_seed, "gmm-sample", repeat, index)
            rng = np.random.default_rng(seed)
            fallbacks = []
            if ensemble.variant is GmmVariant.FITTED_COOCCURRENCE:
                draft = _draft_counts(ensemble, rng, draft_retries)
                if draft is None:
                    fallbacks.append("cooccurrence: only empty drafts, copied ground-truth counts")
                    draft = [o.category for o in seed_layout.objects]
            else:
                draft = [o.category for o in seed_layout.objects]

            frame = seed_layout.image_frame
            objects, resamples = [], 0
            for category in draft:
                mixture = ensemble.mixture_for(category)
                if mixture is None:
                    candidates = gt_boxes.get(category.id)
                    if not candidates:
                        fallbacks.append(f"{category.name}: no mixture and no ground-truth box, dropped")
                        continue
                    box, source_frame = candidates[int(rng.integers(len(candidates)))]
                    vector = repair_box(normalize_box(box, source_frame), min_box_fraction)
                    fallbacks.append(f"{category.name}: copied a ground-truth box")
                else:
                    vector, attempts = _sample_box(mixture, rng, box_retries, min_box_fraction)
                    resamples += attempts
                objects.append((category, denormalize_box(vector, frame)))

            if fallbacks:
                logger.warning("layout %d repeat %d: %s", index, repeat, "; ".join(fallbacks))
            out.append(
                Layout.from_objects(
                    frame,
                    objects,
                    LayoutSource.GMM_GENERATED,
                    origin=LayoutOrigin(
                        parent_index=index,
                        seed=seed,
                        retries=resamples,
                        fallback="; ".join(fallbacks) or None,
                    ),
                )
            )
    return out


def save_ensemble(ensemble: GmmEnsemble, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ensemble.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_ensemble(path: Union[str, Path]) -> GmmEnsemble:
    return GmmEnsemble.model_validate_json(Path(path).read_text(encoding="utf-8"))
