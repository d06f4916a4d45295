"""End-to-end augmentation: layouts, images, scores and the picked dataset.

A run directory holds:
    config.json         the resolved configuration
    layouts.json        SPE output, reused while its fingerprint matches
    gmm_ensemble.json   fitted mixtures (GMM methods only)
    images/             {layout_id}_{sample_idx}.png for every synthesized sample
    provenance.db       one row per image; a rerun skips layouts whose rows are complete
    dataset.json        picked samples as COCO, merged with the real few-shot data
    scores.jsonl        one line per sample
    summary.json        mLACS and CS-Crop aggregates
    provenance.jsonl    export of provenance.db
    heatmaps/           per-category box heatmaps (ground truth and generated)
"""
import contextlib
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict

from app.core.config import DEFAULT_SWEEP, EPOCH_RESCALING_NOTE, Picking, PipelineConfig, SpeMethod
from app.core.errors import AugmentError, ConfigError, InvalidArgument, PipelineAborted, ScoringError, SpeAborted
from app.core.seeding import derive_seed, stable_hash
from app.database import open_provenance_db
from app.models.provenance import ProvenanceRecord
from app.schemas.gmm import GmmVariant
from app.schemas.layout import CategoryLabel, FewShotSet, Layout, LayoutOrigin
from app.schemas.scoring import CategoryScore, GeneratedSample, SampleScore
from app.schemas.synthesis import SynthesisRequest
from app.services import spe_gmm, spe_llm
from app.services.annotations import emit_coco, fewshot_base, load_coco, oversample_gtos
from app.services.completion import CompletionBackend, MockCompletionBackend, OpenAICompletionBackend
from app.services.heatmap import write_heatmaps
from app.services.lacs import cs_crop, mlacs, rank_indices, score_images, score_sample
from app.services.lis_backend import (
    HttpSynthesisBackend,
    MockSynthesisBackend,
    SubprocessSynthesisBackend,
    SynthesisBackend,
    build_lis_prompt,
    check_batch,
    load_image,
    save_png,
)
from app.services.scorers import ImageTextScorer, MockScorer, make_scorer

logger = logging.getLogger(__name__)

IMAGE_DIR = "images"
DETECTOR_NOTE = "Detector training is not performed; the report lists dataset statistics only."


class PipelineBackends(NamedTuple):
    synthesis: SynthesisBackend
    scorer: ImageTextScorer
    completion: Optional[CompletionBackend] = None


class AugmentedDataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_dir: str
    dataset_path: str
    scores_path: str
    summary_path: str
    provenance_path: str
    heatmap_dir: Optional[str] = None
    summary: dict
    synthesis_calls: int = 0


def build_backends(config: PipelineConfig) -> PipelineBackends:
    if config.mock:
        return PipelineBackends(
            synthesis=MockSynthesisBackend(config.lis.hallucination_rate),
            scorer=MockScorer(),
            completion=MockCompletionBackend(
                response_dir=config.llm.response_dir, canvas=spe_llm.as_canvas(config.canvas)
            ),
        )

    completion = None
    if config.spe_method is SpeMethod.LLM:
        completion = OpenAICompletionBackend(
            base_url=config.llm.endpoint,
            model=config.llm.model,
            api_key_env=config.llm.api_key_env,
            timeout=config.llm.timeout,
        )
    if config.lis.endpoint:
        synthesis = HttpSynthesisBackend(
            config.lis.endpoint, api_key_env=config.lis.api_key_env, timeout=config.lis.timeout
        )
    elif config.lis.command:
        synthesis = SubprocessSynthesisBackend(config.lis.command, timeout=config.lis.timeout)
    else:
        raise ConfigError("no synthesis backend configured: set lis.endpoint or lis.command, or use mock mode")
    return PipelineBackends(
        synthesis=synthesis,
        scorer=make_scorer(config.scorer.model_id, config.scorer.device),
        completion=completion,
    )


def layout_id(index: int) -> str:
    return f"L{index:06d}"


def load_fewshot(config: PipelineConfig) -> FewShotSet:
    if not config.annotations_path:
        raise ConfigError("annotations_path is required")
    for path in (config.annotations_path, config.shot_list_path):
        if path and not Path(path).exists():
            raise ConfigError(f"input file {path} does not exist")
    fewshot = load_coco(
        config.annotations_path,
        shot_list=config.shot_list_path,
        shots=config.shots,
        category_filter=config.category_filter,
    )
    if not fewshot.layouts:
        raise ConfigError(f"no annotated images left in {config.annotations_path} after filtering")
    return fewshot


def _file_digest(path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def spe_fingerprint(config: PipelineConfig, alpha: int) -> str:
    parts = {
        "method": config.spe_method.value,
        "alpha": alpha,
        "seed": config.seed,
        "mock": config.mock,
        "annotations": _file_digest(config.annotations_path),
        "shot_list": _file_digest(config.shot_list_path),
        "shots": config.shots,
        "category_filter": config.category_filter,
    }
    if config.spe_method is SpeMethod.LLM:
        parts["llm"] = config.llm.model_dump(mode="json", exclude={"workers", "timeout"})
    elif config.spe_method in (SpeMethod.GMM_V1, SpeMethod.GMM_V2):
        parts["gmm"] = config.gmm.model_dump(mode="json", exclude={"workers"})
    return stable_hash(json.dumps(parts, sort_keys=True))


def _run_spe(
    config: PipelineConfig, fewshot: FewShotSet, backends: PipelineBackends, out_dir: Path, alpha: int
) -> Tuple[List[Layout], str]:
    method = config.spe_method
    if method is SpeMethod.GTOS:
        return oversample_gtos(fewshot, alpha, derive_seed(config.seed, "gtos")), "gtos"

    if method is SpeMethod.LLM:
        if backends.completion is None:
            raise ConfigError("the llm method needs a completion backend")
        layouts = spe_llm.generate_layouts(
            fewshot,
            backends.completion,
            alpha,
            batch_size=config.llm.example_batch_size,
            max_retries=config.llm.max_retries,
            rng_seed=config.seed,
            canvas=config.canvas,
            temperature=config.llm.temperature,
            max_tokens=config.llm.max_tokens,
            template=spe_llm.load_template(config.llm.template_path),
            workers=config.llm.workers,
        )
        return layouts, backends.completion.backend_id

    variant = GmmVariant.DRAFT_FROM_GT if method is SpeMethod.GMM_V1 else GmmVariant.FITTED_COOCCURRENCE
    settings = config.gmm
    ensemble = spe_gmm.fit_ensemble(
        fewshot,
        K=settings.components,
        variant=variant,
        rng_seed=derive_seed(config.seed, "gmm-fit"),
        covariance_type=settings.covariance_type,
        max_iters=settings.max_iters,
        tol=settings.tol,
        floor=settings.reg,
        workers=settings.workers,
    )
    spe_gmm.save_ensemble(ensemble, out_dir / "gmm_ensemble.json")
    layouts = spe_gmm.sample_layouts(
        ensemble,
        fewshot,
        alpha,
        rng_seed=derive_seed(config.seed, "gmm-sample"),
        box_retries=settings.box_retries,
        min_box_fraction=settings.min_box_fraction,
    )
    return layouts, f"gmm:{variant.value}:K{settings.components}"


def extrapolate_layouts(
    config: PipelineConfig,
    fewshot: FewShotSet,
    backends: PipelineBackends,
    out_dir: Union[str, Path],
    alpha: Optional[int] = None,
) -> Tuple[List[Layout], str]:
    """SPE stage; the result is cached in layouts.json under a fingerprint of its inputs."""
    out_dir = Path(out_dir)
    alpha = alpha or config.alpha
    fingerprint = spe_fingerprint(config, alpha)
    cache = out_dir / "layouts.json"
    if cache.exists():
        cached = json.loads(cache.read_text(encoding="utf-8"))
        if cached.get("fingerprint") == fingerprint:
            logger.info("reusing %d cached layouts from %s", len(cached["layouts"]), cache)
            return [Layout.model_validate(item) for item in cached["layouts"]], cached["spe_backend"]

    try:
        layouts, spe_backend = _run_spe(config, fewshot, backends, out_dir, alpha)
    except SpeAborted as err:
        raise PipelineAborted("layout extrapolation failed", [], err) from err

    out_dir.mkdir(parents=True, exist_ok=True)
    cache.write_text(
        json.dumps(
            {
                "fingerprint": fingerprint,
                "spe_backend": spe_backend,
                "layouts": [layout.model_dump(mode="json") for layout in layouts],
            }
        ),
        encoding="utf-8",
    )
    logger.info("extrapolated %d layouts with %s", len(layouts), spe_backend)
    return layouts, spe_backend


# Synthesis and scoring

class _Job(NamedTuple):
    index: int
    layout_id: str
    layout: Layout
    seed: int
    key: str


def request_key(layout_id: str, seed: int, batch_size: int, layout: Layout) -> str:
    return stable_hash("lis", layout_id, seed, batch_size, layout.model_dump_json())[:32]


def _category_json(score: CategoryScore) -> dict:
    return {"category_id": score.category.id, **score.report()}


def _sample_from_record(record: ProvenanceRecord) -> GeneratedSample:
    per_category = tuple(
        CategoryScore(
            category=CategoryLabel(id=item["category_id"], name=item["name"]),
            cs=item["cs"],
            cs_mask=item["cs_mask"],
            delta=item["delta"],
        )
        for item in json.loads(record.per_category)
    )
    return GeneratedSample(
        layout_id=record.layout_id,
        sample_index=record.sample_index,
        file_name=record.file_name,
        score=SampleScore(sample_ref=Path(record.file_name).stem, per_category=per_category, lacs=record.lacs),
        cs_crop=record.cs_crop,
    )


def _reusable(records: Sequence[ProvenanceRecord], job: _Job, batch_size: int, out_dir: Path) -> bool:
    return (
        len(records) == batch_size
        and all(r.request_key == job.key for r in records)
        and sorted(r.sample_index for r in records) == list(range(batch_size))
        and all((out_dir / r.file_name).exists() for r in records)
    )


def synthesize_and_score(
    config: PipelineConfig,
    fewshot: FewShotSet,
    layouts: Sequence[Layout],
    backends: PipelineBackends,
    out_dir: Path,
    session_factory,
    batch_size: int,
    spe_backend: str,
) -> Tuple[List[List[GeneratedSample]], int]:
    """Synthesize and score one batch per layout; returns samples per layout and the number of new batches."""
    scorer = backends.scorer
    results: Dict[str, List[GeneratedSample]] = {}
    pending: List[_Job] = []

    db = session_factory()
    try:
        existing: Dict[str, List[ProvenanceRecord]] = {}
        for record in db.query(ProvenanceRecord).all():
            existing.setdefault(record.layout_id, []).append(record)

        for index, layout in enumerate(layouts):
            lid = layout_id(index)
            seed = derive_seed(config.seed, "lis", lid)
            job = _Job(index, lid, layout, seed, request_key(lid, seed, batch_size, layout))
            records = existing.get(lid, [])
            if _reusable(records, job, batch_size, out_dir):
                results[lid] = [_sample_from_record(r) for r in sorted(records, key=lambda r: r.sample_index)]
                continue
            if records:
                logger.info("discarding %d stale records of %s", len(records), lid)
                for record in records:
                    db.delete(record)
                db.commit()
            pending.append(job)
    finally:
        db.close()
    logger.info("%d of %d layouts already synthesized, %d to go", len(results), len(layouts), len(pending))

    scoring_lock = contextlib.nullcontext() if scorer.thread_safe else threading.Lock()

    def work(job: _Job):
        request = SynthesisRequest(
            layout=job.layout,
            prompt=build_lis_prompt(job.layout, config.lis.style_suffix, config.lis.prompt_prefix),
            batch_size=batch_size,
            steps=config.lis.steps,
            guidance_scale=config.lis.guidance_scale,
            grounding_alpha=config.lis.grounding_alpha,
            mis_fraction=config.lis.mis_fraction,
            seed=job.seed,
        )
        batch = check_batch(backends.synthesis.synthesize(request))
        refs = [f"{job.layout_id}_{j}" for j in range(batch_size)]
        with scoring_lock:
            scores = score_images(scorer, batch.images, job.layout, refs)
            crops = [cs_crop(scorer, image, job.layout, fewshot.categories) for image in batch.images]
        return batch, scores, crops

    def commit(job: _Job, batch, scores, crops) -> List[GeneratedSample]:
        origin = job.layout.origin or LayoutOrigin()
        samples = []
        db = session_factory()
        try:
            for j, (image, score, crop) in enumerate(zip(batch.images, scores, crops)):
                file_name = f"{IMAGE_DIR}/{job.layout_id}_{j}.png"
                save_png(image, out_dir / file_name)
                metadata = batch.metadata[j] if j < len(batch.metadata) else {}
                db.add(
                    ProvenanceRecord(
                        layout_id=job.layout_id,
                        request_key=job.key,
                        sample_index=j,
                        file_name=file_name,
                        layout_source=job.layout.source.value,
                        parent_index=origin.parent_index,
                        spe_seed=origin.seed,
                        spe_backend=spe_backend,
                        spe_retries=origin.retries,
                        fallback=origin.fallback,
                        lis_seed=job.seed,
                        lis_backend=batch.backend_id,
                        scorer=scorer.scorer_id,
                        lacs=score.lacs,
                        cs_crop=crop,
                        per_category=json.dumps([_category_json(c) for c in score.per_category]),
                        hallucinations=json.dumps(metadata.get("hallucinations", [])),
                        picked=False,
                    )
                )
                samples.append(
                    GeneratedSample(
                        layout_id=job.layout_id, sample_index=j, file_name=file_name, score=score, cs_crop=crop
                    )
                )
            db.commit()
        finally:
            db.close()
        return samples

    window = config.lis.max_in_flight * 2
    with ThreadPoolExecutor(max_workers=config.lis.max_in_flight) as pool:
        for start in range(0, len(pending), window):
            futures = [(job, pool.submit(work, job)) for job in pending[start:start + window]]
            for job, future in futures:
                try:
                    batch, scores, crops = future.result()
                except AugmentError as err:
                    for _, other in futures:
                        other.cancel()
                    completed = sorted(results)
                    logger.error("synthesis of %s failed: %s", job.layout_id, err)
                    raise PipelineAborted(f"synthesis of {job.layout_id} failed: {err}", completed, err) from err
                results[job.layout_id] = commit(job, batch, scores, crops)

    return [results[layout_id(i)] for i in range(len(layouts))], len(pending)


# Picking and emission

def pick_samples(samples: Sequence[GeneratedSample], top_n: int, picking: Picking = Picking.LACS) -> List[GeneratedSample]:
    if picking is Picking.FIRST:
        if not 1 <= top_n <= len(samples):
            raise InvalidArgument(f"top_n must lie in [1, {len(samples)}], got {top_n}")
        return list(samples[:top_n])
    return [samples[i] for i in rank_indices([s.score.lacs for s in samples], top_n)]


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _relative(path: Path, start: Path) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")


def emit_dataset(
    picked_by_layout: Sequence[Sequence[GeneratedSample]],
    layouts: Sequence[Layout],
    fewshot: FewShotSet,
    merge_real: bool,
    dataset_path: Path,
    image_root: Path,
) -> Path:
    """COCO file of the picked samples; image paths are relative to the dataset file."""
    chosen, file_names = [], []
    for index, picks in enumerate(picked_by_layout):
        for sample in picks:
            chosen.append(layouts[index])
            file_names.append(_relative(image_root / sample.file_name, dataset_path.parent))
    base = fewshot_base(fewshot) if merge_real else None
    return emit_coco(chosen, file_names, dataset_path, base=base, categories=fewshot.categories)


def summarize(all_samples: Sequence[GeneratedSample], picked: Sequence[GeneratedSample]) -> dict:
    crops = [s.cs_crop for s in picked if s.cs_crop is not None]
    return {
        "mlacs": mlacs([s.score for s in picked]),
        "mlacs_all": mlacs([s.score for s in all_samples]),
        "cs_crop": sum(crops) / len(crops) if crops else None,
        "n_samples": len(all_samples),
        "n_picked": len(picked),
        "picked_fraction": len(picked) / len(all_samples),
    }


def write_scores(samples: Sequence[GeneratedSample], picked_refs: set, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            record = sample.model_copy(update={"picked": sample.sample_ref in picked_refs}).report()
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def export_provenance(session_factory, picked_files: set, path: Path) -> Path:
    db = session_factory()
    try:
        records = db.query(ProvenanceRecord).order_by(ProvenanceRecord.layout_id, ProvenanceRecord.sample_index).all()
        for record in records:
            picked = record.file_name in picked_files
            if bool(record.picked) != picked:
                record.picked = picked
        db.commit()
        with path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
    finally:
        db.close()
    return path


def _flatten(nested: Sequence[Sequence[GeneratedSample]]) -> List[GeneratedSample]:
    return [sample for group in nested for sample in group]


def _prepare(config: PipelineConfig, backends: Optional[PipelineBackends], out_dir: Path, alpha: int, batch_size: int):
    backends = backends or build_backends(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", config.model_dump(mode="json"))
    fewshot = load_fewshot(config)
    layouts, spe_backend = extrapolate_layouts(config, fewshot, backends, out_dir, alpha)
    engine, session_factory = open_provenance_db(out_dir)
    try:
        samples, calls = synthesize_and_score(
            config, fewshot, layouts, backends, out_dir, session_factory, batch_size, spe_backend
        )
    except Exception:
        engine.dispose()
        raise
    return fewshot, layouts, samples, calls, engine, session_factory


def run(config: PipelineConfig, backends: Optional[PipelineBackends] = None) -> AugmentedDataset:
    out_dir = Path(config.out_dir)
    fewshot, layouts, samples, calls, engine, session_factory = _prepare(
        config, backends, out_dir, config.alpha, config.lis_batch
    )
    try:
        picked_by_layout = [pick_samples(group, config.top_n, config.picking) for group in samples]
        picked = _flatten(picked_by_layout)
        all_samples = _flatten(samples)

        dataset_path = emit_dataset(
            picked_by_layout, layouts, fewshot, config.merge_real, out_dir / "dataset.json", out_dir
        )
        scores_path = write_scores(all_samples, {s.sample_ref for s in picked}, out_dir / "scores.jsonl")
        provenance_path = export_provenance(
            session_factory, {s.file_name for s in picked}, out_dir / "provenance.jsonl"
        )

        heatmap_dir = out_dir / "heatmaps"
        categories = fewshot.present_categories()
        write_heatmaps(fewshot.layouts, categories, heatmap_dir, "ground_truth", config.heatmap_resolution)
        write_heatmaps(layouts, categories, heatmap_dir, "generated", config.heatmap_resolution)

        summary = {
            **summarize(all_samples, picked),
            "spe_method": config.spe_method.value,
            "alpha": config.alpha,
            "lis_batch": config.lis_batch,
            "top_n": config.top_n,
            "picking": config.picking.value,
            "n_real_layouts": len(fewshot.layouts),
            "n_generated_layouts": len(layouts),
            "n_generated_images": len(picked),
            "merge_real": config.merge_real,
        }
        summary_path = _write_json(out_dir / "summary.json", summary)
    finally:
        engine.dispose()

    logger.info(
        "run finished: %d generated images, mLACS %.4f (all samples %.4f)",
        len(picked), summary["mlacs"], summary["mlacs_all"],
    )
    return AugmentedDataset(
        out_dir=str(out_dir),
        dataset_path=str(dataset_path),
        scores_path=str(scores_path),
        summary_path=str(summary_path),
        provenance_path=str(provenance_path),
        heatmap_dir=str(heatmap_dir),
        summary=summary,
        synthesis_calls=calls,
    )


def sweep_ratios(config: PipelineConfig, backends: Optional[PipelineBackends] = None) -> dict:
    """One dataset per augmentation ratio, all cut from the stream generated for the largest ratio."""
    alphas = sorted(set(config.sweep or DEFAULT_SWEEP))
    out_dir = Path(config.out_dir)
    fewshot, layouts, samples, calls, engine, session_factory = _prepare(
        config, backends, out_dir, alphas[-1], config.lis_batch
    )
    try:
        n_real = len(fewshot.layouts)
        picked_by_layout = [pick_samples(group, config.top_n, config.picking) for group in samples]
        per_alpha = []
        for alpha in alphas:
            count = alpha * n_real
            dataset_path = emit_dataset(
                picked_by_layout[:count],
                layouts[:count],
                fewshot,
                config.merge_real,
                out_dir / "sweep" / f"alpha_{alpha}" / "dataset.json",
                out_dir,
            )
            stats = summarize(_flatten(samples[:count]), _flatten(picked_by_layout[:count]))
            per_alpha.append(
                {
                    "alpha": alpha,
                    "n_generated_layouts": count,
                    "n_generated_images": stats["n_picked"],
                    "dataset": _relative(dataset_path, out_dir),
                    **stats,
                }
            )
        largest = _flatten(picked_by_layout)
        export_provenance(session_factory, {s.file_name for s in largest}, out_dir / "provenance.jsonl")
    finally:
        engine.dispose()

    report = {
        "alphas": alphas,
        "per_alpha": per_alpha,
        "spe_method": config.spe_method.value,
        "n_real_layouts": n_real,
        "top_n": config.top_n,
        "note": DETECTOR_NOTE,
    }
    _write_json(out_dir / "sweep_report.json", report)
    logger.info("sweep over %s finished (%d new synthesis batches)", alphas, calls)
    return report


def topn_study(config: PipelineConfig, backends: Optional[PipelineBackends] = None) -> dict:
    """One dataset per top-n value, picked from a single synthesis run with batch size topn_batch."""
    if not config.topn_study:
        raise ConfigError("topn_study needs a non-empty list of top-n values")
    batch_size = config.topn_batch
    too_large = [n for n in config.topn_study if n > batch_size]
    if too_large:
        raise ConfigError(f"top-n values {too_large} exceed the study batch size {batch_size}")
    values = sorted(set(config.topn_study))
    out_dir = Path(config.out_dir) / "topn"
    fewshot, layouts, samples, calls, engine, session_factory = _prepare(
        config, backends, out_dir, config.alpha, batch_size
    )
    try:
        all_samples = _flatten(samples)
        per_n = []
        for n in values:
            picked_by_layout = [pick_samples(group, n, config.picking) for group in samples]
            dataset_path = emit_dataset(
                picked_by_layout, layouts, fewshot, config.merge_real,
                out_dir / f"top_{n}" / "dataset.json", out_dir,
            )
            stats = summarize(all_samples, _flatten(picked_by_layout))
            per_n.append(
                {
                    "top_n": n,
                    "per_layout": n,
                    "n_generated_images": stats["n_picked"],
                    "dataset": _relative(dataset_path, out_dir),
                    **stats,
                }
            )
        reference = [pick_samples(group, min(config.top_n, batch_size), config.picking) for group in samples]
        export_provenance(session_factory, {s.file_name for s in _flatten(reference)}, out_dir / "provenance.jsonl")
    finally:
        engine.dispose()

    report = {
        "batch_size": batch_size,
        "values": values,
        "per_top_n": per_n,
        "alpha": config.alpha,
        "spe_method": config.spe_method.value,
        "metadata": {"epoch_rescaling": EPOCH_RESCALING_NOTE, "detector_training": DETECTOR_NOTE},
    }
    _write_json(out_dir / "topn_report.json", report)
    logger.info("top-n study over %s finished (%d new synthesis batches)", values, calls)
    return report


def score_dataset(
    annotations_path: Union[str, Path],
    scorer: ImageTextScorer,
    out_dir: Union[str, Path],
    image_root: Optional[Union[str, Path]] = None,
) -> dict:
    """LACS and CS-Crop for every annotated image of an existing COCO file."""
    annotations_path = Path(annotations_path)
    image_root = Path(image_root) if image_root else annotations_path.parent
    out_dir = Path(out_dir)
    dataset = load_coco(annotations_path)

    scores: List[SampleScore] = []
    crops = []
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "scores.jsonl").open("w", encoding="utf-8") as handle:
        for layout in dataset.layouts:
            try:
                image = load_image(image_root / layout.image_ref)
            except OSError as err:
                raise ScoringError(f"cannot read image {layout.image_ref}: {err}") from err
            frame = layout.image_frame
            if image.shape[:2] != (frame.height, frame.width):
                raise ScoringError(
                    f"{layout.image_ref} is {image.shape[1]}x{image.shape[0]}, annotations say {frame.width}x{frame.height}"
                )
            score = score_sample(scorer, image, layout, sample_ref=layout.image_ref)
            crop = cs_crop(scorer, image, layout, dataset.categories)
            scores.append(score)
            crops.append(crop)
            handle.write(
                json.dumps(
                    {
                        "sample_ref": score.sample_ref,
                        "per_category": [c.report() for c in score.per_category],
                        "lacs": score.lacs,
                        "cs_crop": crop,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    summary = {
        "mlacs": mlacs(scores),
        "cs_crop": sum(crops) / len(crops),
        "n_samples": len(scores),
        "scorer": scorer.scorer_id,
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


def dataset_heatmaps(
    annotations_path: Union[str, Path],
    out_dir: Union[str, Path],
    resolution: Tuple[int, int] = (64, 64),
    label: str = "dataset",
) -> Dict[str, Tuple[Path, Path]]:
    dataset = load_coco(annotations_path)
    return write_heatmaps(dataset.layouts, dataset.present_categories(), out_dir, label, resolution)
