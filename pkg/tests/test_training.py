import math

import numpy as np
import pytest

from gdl import tensor as tn
from gdl.experts import ExpertBank
from gdl.io import load_dataset, save_dataset
from gdl.networks import MLP, EpsilonModel, MlpSpec
from gdl.samplers import SamplerConfig, sample
from gdl.schedule import expert_range, make_linear_schedule, q_sample
from gdl.tasks import GmmTask, bayes_posterior, sample_gmm
from gdl.training import (AdamW, TrainConfig, TrainingDiverged, generate_kt_dataset, kt_loss,
                          teacher_outputs, train_epsilon, train_experts_data_free,
                          train_experts_supervised, train_teacher)
from gdl.tensor import Tensor

T = 100


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(T, 1e-3, 0.2)


@pytest.fixture(scope="module")
def gmm_data():
    return sample_gmm(GmmTask(), 4000, seed=0)


@pytest.fixture(scope="module")
def teacher(gmm_data):
    x, y = gmm_data
    net = MLP(MlpSpec(2, (32, 32), 8), np.random.default_rng(0))
    train_teacher(net, x, y, TrainConfig(iterations=600, learning_rate=3e-3, weight_decay=0.0))
    return net


def fresh_bank(teacher, n=4, rank=4):
    return ExpertBank(teacher.clone(), n, T, rank=rank, seed=1)


def test_kt_loss_zero_when_equal():
    z = np.array([[0.3, -1.2, 2.0]])
    assert kt_loss(z, Tensor(z)).item() == pytest.approx(0.0, abs=1e-15)


def test_kt_loss_regression_mean_l1():
    assert kt_loss([[1.0, 2.0]], Tensor([[1.0, 2.0]]), "regression_l1").item() == 0.0
    assert kt_loss([[1.0, 2.0]], Tensor([[0.0, 0.0]]), "regression_l1").item() == 1.5


def test_kt_loss_temperature_applies_to_teacher_only():
    # softmax([1, 0]) against the uniform student, from the KL definition
    p = 1.0 / (1.0 + math.exp(-1.0))
    expected = p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))
    assert expected == pytest.approx(0.1109441, abs=1e-7)
    got = kt_loss([[2.0, 0.0]], Tensor([[0.0, 0.0]]), "class_nll", temperature=2.0).item()
    assert got == pytest.approx(expected, abs=1e-14)


def test_kt_loss_rejects_bad_temperature():
    with pytest.raises(ValueError):
        kt_loss([[1.0]], Tensor([[1.0]]), temperature=0.0)


def test_kt_loss_teacher_detached():
    teacher = Tensor([[1.0, 0.5]], requires_grad=True)
    student = Tensor([[0.0, 0.0]], requires_grad=True)
    with tn.GradTape():
        tn.backward(kt_loss(teacher, student))
    assert teacher.grad is None
    assert student.grad is not None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="hinge")


def test_adamw_decoupled_decay():
    p = Tensor(np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_zero_iterations_leave_model_unchanged(sched):
    m = EpsilonModel.create(1, (8,), 4)
    before = {k: v.tobytes() for k, v in m.net.state_dict().items()}
    assert train_epsilon(sched, m, np.ones((10, 1)), TrainConfig(iterations=0)) == []
    assert before == {k: v.tobytes() for k, v in m.net.state_dict().items()}


def test_epsilon_training_deterministic(sched):
    curves = []
    for _ in range(2):
        m = EpsilonModel.create(1, (8,), 4)
        curves.append(train_epsilon(sched, m, np.ones((10, 1)), TrainConfig(iterations=20, batch_size=16)))
    assert curves[0] == curves[1]


def test_epsilon_training_rejects_empty(sched):
    with pytest.raises(ValueError):
        train_epsilon(sched, EpsilonModel.create(1, (8,), 4), np.zeros((0, 1)), TrainConfig())


def test_divergence_is_reported(sched):
    m = EpsilonModel.create(1, (8,), 4)
    with pytest.raises(TrainingDiverged):
        train_epsilon(sched, m, np.full((10, 1), np.nan), TrainConfig(iterations=3))


def test_constant_dataset_concentrates(sched):
    m = EpsilonModel.create(1, (32, 32), 8, seed=0)
    cfg = TrainConfig(iterations=800, batch_size=64, learning_rate=3e-3, weight_decay=0.0, lr_schedule="cosine")
    train_epsilon(sched, m, np.full((64, 1), 2.0), cfg)
    x = sample(sched, m, None, None, SamplerConfig("ddim", 20, 0.0, 0), 5000, 1).x0
    assert abs(x.mean() - 2.0) < 0.1


def test_teacher_is_accurate(teacher, gmm_data):
    x, _ = sample_gmm(GmmTask(), 2000, seed=9)
    with tn.no_grad():
        pred = np.argmax(teacher(x).data, axis=1)
    assert np.mean(pred == np.argmax(bayes_posterior(GmmTask(), x), axis=1)) > 0.95


def test_supervised_isolation_and_ranges(sched, teacher, gmm_data):
    x, y = gmm_data
    bank = fresh_bank(teacher)
    backbone = {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    others = {n: {k: v.tobytes() for k, v in bank.adapter(n).state_dict().items()} for n in (1, 3, 4)}
    draws = []
    train_experts_supervised(sched, bank, x, y, TrainConfig(iterations=40, learning_rate=1e-2),
                             experts=[2], on_draw=lambda n, t: draws.append((n, t.copy())))
    lo, hi = expert_range(4, T, 2)
    assert draws and all(n == 2 and t.min() >= lo and t.max() <= hi for n, t in draws)
    for n in (1, 3, 4):
        assert others[n] == {k: v.tobytes() for k, v in bank.adapter(n).state_dict().items()}
    assert backbone == {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    xs = np.random.default_rng(0).normal(size=(8, 2))
    assert not np.array_equal(bank.forward(xs, 2).data, bank.forward(xs).data)
    assert np.array_equal(bank.forward(xs, 3).data, bank.forward(xs).data)


def test_supervised_rejects_bad_labels(sched, teacher, gmm_data):
    x, _ = gmm_data
    with pytest.raises(ValueError):
        train_experts_supervised(sched, fresh_bank(teacher), x, np.full(len(x), 9), TrainConfig(iterations=4))


def test_low_noise_expert_beats_high_noise_expert_on_clean_data(sched, gmm_data):
    x, y = gmm_data
    untrained = MLP(MlpSpec(2, (32, 32), 8), np.random.default_rng(3))
    bank = ExpertBank(untrained, 4, T, rank=None, seed=1)
    train_experts_supervised(sched, bank, x, y, TrainConfig(iterations=1600, learning_rate=3e-3, weight_decay=0.0))
    xe, ye = sample_gmm(GmmTask(), 2000, seed=5)
    with tn.no_grad():
        acc = [np.mean(np.argmax(bank.forward(xe, n).data, axis=1) == ye) for n in (1, 4)]
    assert acc[0] > acc[1]


def test_data_free_keeps_backbone_and_starts_at_zero_loss(sched, teacher, gmm_data):
    x, _ = gmm_data
    bank = fresh_bank(teacher)
    target = teacher_outputs(bank, x[:256])
    with tn.no_grad():
        for n in range(1, 5):
            assert kt_loss(target, bank.forward(x[:256], n)).item() == pytest.approx(0.0, abs=1e-14)
    before = {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    curves = train_experts_data_free(sched, bank, x, TrainConfig(iterations=80, learning_rate=1e-2))
    assert before == {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    assert all(p.grad is None for p in bank.backbone.parameters())
    assert curves[1][-1] < curves[1][0] + 1e-12


def test_data_free_is_deterministic(sched, teacher, gmm_data):
    x, _ = gmm_data
    states = []
    for _ in range(2):
        bank = fresh_bank(teacher)
        train_experts_data_free(sched, bank, x, TrainConfig(iterations=20, learning_rate=1e-2))
        states.append({k: v.tobytes() for k, v in bank.state_dict().items()})
    assert states[0] == states[1]


def test_data_free_ranges(sched, teacher, gmm_data):
    x, _ = gmm_data
    seen = {}
    train_experts_data_free(sched, fresh_bank(teacher), x, TrainConfig(iterations=40),
                            on_draw=lambda n, t: seen.setdefault(n, []).append(t))
    for n, ts in seen.items():
        lo, hi = expert_range(4, T, n)
        allt = np.concatenate(ts)
        assert allt.min() >= lo and allt.max() <= hi


def test_kt_dataset_empty_and_reproducible(sched, tmp_path):
    m = EpsilonModel.create(2, (8,), 4)
    empty = generate_kt_dataset(sched, m, 0, TrainConfig())
    save_dataset(tmp_path / "e.gdl", empty)
    x0, y, header = load_dataset(tmp_path / "e.gdl")
    assert x0.shape == (0, 2) and y is None and header["format_version"] == 1
    for name in ("a", "b"):
        save_dataset(tmp_path / f"{name}.gdl", generate_kt_dataset(sched, m, 300, TrainConfig(seed=4), chunk=128))
    assert (tmp_path / "a.gdl").read_bytes() == (tmp_path / "b.gdl").read_bytes()


def test_q_sample_used_for_training_inputs(sched):
    # sanity: the expert input at the top of its range is mostly noise
    x0 = np.ones((2000, 2))
    xt = q_sample(sched, x0, T, np.random.default_rng(0).standard_normal(x0.shape))
    assert abs(xt.mean()) < 0.1
