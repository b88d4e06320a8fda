import json

import numpy as np
import pytest

from gdl import experiments as ex
from gdl.config import config_from_dict
from gdl.tasks import GmmTask, sample_component

TINY = config_from_dict({
    "schedule": {"T": 100},
    "task": {"train_size": 400},
    "diffusion": {"hidden_dims": [16], "train": {"iterations": 30}},
    "guidance_net": {"hidden_dims": [16], "train": {"iterations": 30}},
    "experts": {"count": 2, "kt_dataset_size": 100, "train": {"iterations": 10}},
    "sampler": {"steps": 4},
    "metrics": {"samples_per_target": 6, "holdout_size": 50},
})


@pytest.fixture(scope="module")
def setup():
    sched = ex.build_schedule(TINY)
    model, _ = ex.train_diffusion(TINY, sched)
    return sched, model


def test_parse_method():
    assert ex.parse_method("ppap-5") == ("ppap", 5)
    assert ex.parse_method("naive") == ("naive", 1)
    assert ex.method_mode("multi-10") == "multi_expert"
    for bad in ("ppap", "multi-0", "ppap-x", "fancy"):
        with pytest.raises(ValueError):
            ex.parse_method(bad)


def test_table1_methods_follow_expert_count():
    assert ex.table1_methods(TINY) == ["naive", "single", "ppap-2", "multi-2"]


def test_build_method_shapes(setup):
    sched, model = setup
    data = ex.teacher_data(TINY, 0)
    teacher = ex.train_guidance_teacher(TINY, 0, "class_nll", data)
    kt = ex.kt_dataset(TINY, sched, model, 0)
    assert ex.build_method(TINY, sched, "ppap-3", teacher, 0, kt_data=kt).rank == 4
    assert ex.build_method(TINY, sched, "multi-2", teacher, 0, data=data).rank is None
    assert ex.build_method(TINY, sched, "tcond", teacher, 0, data=data).spec.time_embed_dim == 16
    with pytest.raises(ValueError):
        ex.build_method(TINY, sched, "ppap-2", teacher, 0)
    with pytest.raises(ValueError):
        ex.build_method(TINY, sched, "single", teacher, 0)


def test_guidance_output_dims():
    assert [ex.guidance_output_dim(TINY, k) for k in ("class_nll", "regression_l1", "dense_l1")] == [8, 2, 16]


def test_evaluate_exact_component_draws():
    task = GmmTask()
    rep = ex.evaluate_class_samples(task, {k: sample_component(task, k, 4000, seed=k) for k in (0, 5)})
    assert rep.target_accuracy > 0.99 and rep.frechet < 0.01
    with pytest.raises(ValueError, match="no samples"):
        ex.evaluate_class_samples(task, {0: np.zeros((0, 2))})


def test_descriptor_scores_at_target():
    dt = ex.build_descriptor_task(TINY)
    x = np.tile(dt.gmm.means[2], (5, 1))
    assert ex.descriptor_l1(dt, x, dt.target_descriptor(2)) < 1e-12
    assert ex.map_agreement(dt, x, dt.target_map(2)) == 1.0


@pytest.mark.parametrize("name", ex.PIPELINES)
def test_pipelines_run_and_save(setup, tmp_path, name):
    sched, model = setup
    res = ex.run_pipeline(name, TINY, sched, model, [0, 1], out_dir=str(tmp_path))
    path = res.save(str(tmp_path), TINY)
    summary = json.loads(open(f"{path}/summary.json").read())
    assert summary["format_version"] == 1 and summary["summary"]
    assert json.loads(open(f"{path}/config.json").read())["experts"]["count"] == 2
    assert {r["seed"] for r in res.rows} == {0, 1}


def test_pipeline_result_stats():
    res = ex.PipelineResult("x", [{"setting": "a", "seed": 0, "m": 1.0}, {"setting": "a", "seed": 1, "m": 3.0}])
    assert res.mean("a", "m") == 2.0
    assert res.summary()["a"]["m"]["std"] == pytest.approx(np.sqrt(2.0))
    with pytest.raises(KeyError):
        res.mean("b", "m")


def test_unknown_pipeline(setup):
    with pytest.raises(ValueError):
        ex.run_pipeline("table9", TINY, *setup, [0])
