import json
import threading
from collections import Counter
from pathlib import Path

import pytest

from app.core.errors import BackendError, ConfigError, PipelineAborted
from app.services import pipeline, scorers
from app.services.lis_backend import MockSynthesisBackend
from app.services.pipeline import PipelineBackends
from app.services.scorers import MockScorer


class FlakySynthesis:
    """Mock renderer that fails once its call budget is spent."""

    deterministic = True

    def __init__(self, healthy_calls: int):
        self.inner = MockSynthesisBackend()
        self.backend_id = self.inner.backend_id
        self.healthy_calls = healthy_calls
        self.calls = 0
        self._lock = threading.Lock()

    def synthesize(self, request):
        with self._lock:
            self.calls += 1
            failing = self.calls > self.healthy_calls
        if failing:
            raise BackendError("diffusion server went away")
        return self.inner.synthesize(request)


class ExplodingCompletion:
    backend_id = "exploding"
    deterministic = True

    def complete(self, prompt, max_tokens, temperature, seed):
        raise AssertionError("the completion backend must not be called")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_jsonl(path) -> list:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]


def generated_files(dataset: dict, n_real: int = 10) -> list:
    return [image["file_name"] for image in dataset["images"][n_real:]]


def test_default_run_produces_one_image_per_layout(make_config):
    config = make_config(alpha=4, lis_batch=5, top_n=1)
    result = pipeline.run(config)

    dataset = read_json(result.dataset_path)
    assert len(dataset["images"]) == 50
    assert all(image["file_name"].startswith("images/") for image in dataset["images"][10:])
    assert len(read_jsonl(result.scores_path)) == 200
    provenance = read_jsonl(result.provenance_path)
    assert len(provenance) == 200
    assert sum(record["picked"] for record in provenance) == 40
    assert Counter(record["layout_id"] for record in provenance)["L000000"] == 5
    assert all(record["spe_backend"] == "gtos" for record in provenance)

    summary = result.summary
    assert summary["n_generated_images"] == 40
    assert summary["n_generated_layouts"] == 40
    assert summary["n_samples"] == 200
    assert summary["mlacs"] >= summary["mlacs_all"]
    assert result.synthesis_calls == 40
    assert (Path(result.out_dir) / "images" / "L000039_4.png").exists()
    assert read_json(result.summary_path) == summary


def test_picked_images_are_the_best_of_their_batch(make_config):
    result = pipeline.run(make_config(alpha=1, lis_batch=5, top_n=1))
    by_layout = {}
    for record in read_jsonl(result.scores_path):
        by_layout.setdefault(record["layout_id"], []).append(record)
    for records in by_layout.values():
        picked = [r for r in records if r["picked"]]
        assert len(picked) == 1
        assert picked[0]["lacs"] == max(r["lacs"] for r in records)


def test_identical_configs_give_identical_outputs(make_config):
    first = pipeline.run(make_config("first", alpha=2))
    second = pipeline.run(make_config("second", alpha=2))
    for name in ("dataset.json", "scores.jsonl", "summary.json"):
        assert (Path(first.out_dir) / name).read_bytes() == (Path(second.out_dir) / name).read_bytes()


def test_rerun_reuses_committed_batches(make_config):
    config = make_config(alpha=2)
    first = pipeline.run(config)
    backend = MockSynthesisBackend()
    second = pipeline.run(config, PipelineBackends(synthesis=backend, scorer=MockScorer()))
    assert backend.calls == 0
    assert second.synthesis_calls == 0
    assert Path(second.dataset_path).read_bytes() == Path(first.dataset_path).read_bytes()
    assert second.summary == first.summary


def test_interrupted_run_resumes_without_duplicates(make_config):
    config = make_config(alpha=4, lis={"max_in_flight": 1})
    with pytest.raises(PipelineAborted) as info:
        pipeline.run(config, PipelineBackends(synthesis=FlakySynthesis(healthy_calls=5), scorer=MockScorer()))
    assert info.value.completed_layout_ids == [f"L{i:06d}" for i in range(5)]

    backend = MockSynthesisBackend()
    result = pipeline.run(config, PipelineBackends(synthesis=backend, scorer=MockScorer()))
    assert backend.calls == 35
    provenance = read_jsonl(result.provenance_path)
    assert len(provenance) == 200
    assert len({record["file_name"] for record in provenance}) == 200

    fresh = pipeline.run(make_config("fresh", alpha=4))
    assert Path(result.dataset_path).read_bytes() == Path(fresh.dataset_path).read_bytes()


def test_top_n_keeps_several_images_per_layout(make_config):
    result = pipeline.run(make_config(alpha=2, lis_batch=5, top_n=3))
    dataset = read_json(result.dataset_path)
    assert len(dataset["images"]) == 10 + 20 * 3
    assert result.summary["picked_fraction"] == pytest.approx(0.6)


def test_generated_only_dataset(make_config):
    result = pipeline.run(make_config(alpha=1, merge_real=False))
    dataset = read_json(result.dataset_path)
    assert len(dataset["images"]) == 10
    assert [image["id"] for image in dataset["images"]] == list(range(1, 11))
    assert [c["name"] for c in dataset["categories"]] == ["cat", "dog", "car", "apple"]


def test_first_picking_ignores_scores(make_config):
    result = pipeline.run(make_config(alpha=1, top_n=2, picking="first"))
    files = generated_files(read_json(result.dataset_path))
    assert len(files) == 20
    assert all(name.endswith(("_0.png", "_1.png")) for name in files)


@pytest.mark.parametrize("method", ["gmm1", "gmm2", "llm"])
def test_other_extrapolation_methods(make_config, method):
    result = pipeline.run(make_config(method, spe_method=method, alpha=1, lis_batch=2))
    provenance = read_jsonl(result.provenance_path)
    assert len(provenance) == 20
    expected_source = {"gmm1": "gmm_generated", "gmm2": "gmm_generated", "llm": "llm_generated"}[method]
    assert {record["layout_source"] for record in provenance} <= {expected_source, "oversampled"}
    assert (Path(result.out_dir) / "gmm_ensemble.json").exists() == method.startswith("gmm")


def test_layouts_are_cached_between_runs(make_config):
    config = make_config(spe_method="llm", alpha=1, lis_batch=2)
    first = pipeline.run(config)
    backends = PipelineBackends(synthesis=MockSynthesisBackend(), scorer=MockScorer(), completion=ExplodingCompletion())
    second = pipeline.run(config, backends)
    assert second.summary == first.summary


def test_heatmaps_are_written(make_config):
    result = pipeline.run(make_config(alpha=1, heatmap_resolution=(16, 12)))
    names = {path.name for path in Path(result.heatmap_dir).iterdir()}
    for label in ("ground_truth", "generated"):
        for stem in ("1_cat", "2_dog", "3_car", "4_apple"):
            assert f"{label}_{stem}.png" in names
            assert f"{label}_{stem}.json" in names


def test_sweep_datasets_are_prefixes(make_config):
    config = make_config("sweep", sweep=[4, 1, 2])
    report = pipeline.sweep_ratios(config)
    assert report["alphas"] == [1, 2, 4]
    out_dir = Path(config.out_dir)
    files = {}
    for entry in report["per_alpha"]:
        dataset = read_json(out_dir / entry["dataset"])
        files[entry["alpha"]] = generated_files(dataset)
        assert len(dataset["images"]) == 10 + entry["alpha"] * 10
        assert entry["n_generated_images"] == entry["alpha"] * 10
    assert files[2][:10] == files[1]
    assert files[4][:20] == files[2]
    assert read_json(out_dir / "sweep_report.json") == report


def test_topn_study_picks_nested_sets(make_config):
    config = make_config("study", alpha=1, topn_study=[8, 1, 4], topn_batch=8)
    report = pipeline.topn_study(config)
    assert report["values"] == [1, 4, 8]
    assert report["batch_size"] == 8
    assert "epochs" in report["metadata"]["epoch_rescaling"]

    out_dir = Path(config.out_dir) / "topn"
    picked = {}
    for entry in report["per_top_n"]:
        dataset = read_json(out_dir / entry["dataset"])
        picked[entry["top_n"]] = set(generated_files(dataset))
        assert len(picked[entry["top_n"]]) == entry["top_n"] * 10
    assert picked[1] <= picked[4] <= picked[8]

    mlacs = [entry["mlacs"] for entry in report["per_top_n"]]
    assert mlacs[0] >= mlacs[1] - 1e-12
    assert mlacs[1] >= mlacs[2] - 1e-12
    assert report["per_top_n"][2]["mlacs"] == pytest.approx(report["per_top_n"][2]["mlacs_all"])


def test_topn_study_needs_values(make_config):
    with pytest.raises(ConfigError):
        pipeline.topn_study(make_config())


def test_missing_annotations_is_a_config_error(make_config, tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run(make_config(annotations_path=str(tmp_path / "nope.json")))


def test_real_backends_need_an_endpoint(make_config):
    with pytest.raises(ConfigError):
        pipeline.run(make_config(mock=False))


def test_score_dataset_on_a_generated_only_run(make_config, tmp_path):
    run = pipeline.run(make_config(alpha=1, merge_real=False))
    summary = pipeline.score_dataset(run.dataset_path, MockScorer(), tmp_path / "scores")
    assert summary["n_samples"] == 10
    assert summary["mlacs"] == pytest.approx(run.summary["mlacs"])
    assert len(read_jsonl(tmp_path / "scores" / "scores.jsonl")) == 10


def test_scorer_device_reaches_the_clip_scorer(make_config, monkeypatch):
    built = []

    class RecordingClip:
        thread_safe = False

        def __init__(self, model_id, device="cpu"):
            built.append((model_id, device))
            self.scorer_id = f"clip:{model_id}"

    monkeypatch.setattr(scorers, "ClipScorer", RecordingClip)
    config = make_config(
        mock=False,
        lis={"endpoint": "http://localhost:9000/generate"},
        scorer={"model_id": "openai/clip-vit-base-patch32", "device": "cuda:1"},
    )
    backends = pipeline.build_backends(config)
    assert isinstance(backends.scorer, RecordingClip)
    assert built == [("openai/clip-vit-base-patch32", "cuda:1")]
