import itertools

import numpy as np
import pytest

from gdl import tensor as tn
from gdl.experts import AdapterStateError, ExpertBank, LoraAdapter
from gdl.networks import MLP, EpsilonModel, MlpSpec, time_embedding


def make_bank(n=3, rank=4, seed=0, T=100):
    net = MLP(MlpSpec(2, (64, 64), 8), np.random.default_rng(seed))
    return ExpertBank(net, n, T, rank=rank, seed=seed)


def perturb(bank):
    # make every adapter non-trivial so merge tests are meaningful
    rng = np.random.default_rng(99)
    for adapter in bank.adapters:
        for p in adapter.params.values():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)


def test_time_embedding_zero():
    np.testing.assert_array_equal(time_embedding(0, 6), [0, 1, 0, 1, 0, 1])


def test_time_embedding_deterministic():
    assert time_embedding(17, 16).tobytes() == time_embedding(17, 16).tobytes()


def test_time_embedding_distinct():
    emb = np.stack([time_embedding(t, 16, 100) for t in range(1, 101)])
    for i, j in itertools.combinations(range(100), 2):
        assert np.max(np.abs(emb[i] - emb[j])) > 1e-9


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        time_embedding(3, 5)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(2, (0,), 3)
    with pytest.raises(ValueError):
        MlpSpec(2, (4,), 3, time_embed_dim=3)


def test_epsilon_model_shape_contract():
    with pytest.raises(ValueError):
        EpsilonModel(MlpSpec(2, (8,), 3, time_embed_dim=4))
    m = EpsilonModel.create(2, (8,), 4)
    assert m.predict_eps(np.zeros((5, 2)), 3).shape == (5, 2)


def test_state_dict_roundtrip():
    a = MLP(MlpSpec(2, (8,), 3), np.random.default_rng(0))
    b = MLP(MlpSpec(2, (8,), 3), np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(2).normal(size=(4, 2))
    assert a(x).data.tobytes() == b(x).data.tobytes()


def test_with_time_embedding_is_neutral():
    net = MLP(MlpSpec(2, (8,), 3), np.random.default_rng(0))
    tnet = net.with_time_embedding(8)
    x = np.random.default_rng(1).normal(size=(4, 2))
    np.testing.assert_array_equal(net(x).data, tnet(x, 37).data)


@pytest.mark.parametrize("rank", [0, 4, None])
def test_zero_init_neutrality(rank):
    bank = make_bank(rank=rank)
    x = np.random.default_rng(5).normal(size=(16, 2))
    base = bank.forward(x).data
    for n in range(1, 4):
        assert np.array_equal(bank.forward(x, n).data, base)


def test_default_alpha():
    assert make_bank().alpha == 8.0
    assert make_bank().adapters[0].scale == 2.0


def test_merge_unmerge_restores_bitwise():
    bank = make_bank()
    perturb(bank)
    before = {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    bank.merge(2)
    bank.unmerge()
    after = {k: v.tobytes() for k, v in bank.backbone.state_dict().items()}
    assert before == after


def test_merged_matches_on_the_fly():
    bank = make_bank()
    perturb(bank)
    x = np.random.default_rng(6).normal(size=(32, 2))
    for n in (1, 2, 3):
        ref = bank.forward(x, n).data
        bank.merge(n)
        got = bank.forward(x, n).data
        bank.unmerge()
        assert np.max(np.abs(got - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_merge_state_errors():
    bank = make_bank()
    bank.merge(1)
    with pytest.raises(AdapterStateError):
        bank.merge(2)
    with pytest.raises(AdapterStateError):
        bank.forward(np.zeros((1, 2)), 2)
    with pytest.raises(AdapterStateError):
        bank.forward(np.zeros((1, 2)))
    bank.unmerge()
    with pytest.raises(AdapterStateError):
        bank.unmerge()


def test_parameter_count_bias_only():
    bank = make_bank(rank=0)
    vec = sum(bank.backbone.params[k].size for k in bank.backbone.vector_names())
    assert bank.parameter_count()[0] == vec


def test_parameter_count_linear_in_rank():
    vec = make_bank(rank=0).parameter_count()[0]
    r4 = make_bank(rank=4).parameter_count()[0] - vec
    r8 = make_bank(rank=8).parameter_count()[0] - vec
    assert r8 == 2 * r4


def test_parameter_count_default_classifier():
    # layers 2->64, 64->64, 64->8: r(d + k) per layer plus biases and norm gain/shift
    lora = 4 * (64 + 2) + 4 * (64 + 64) + 4 * (8 + 64)
    vectors = (64 + 64 + 8) + 2 * (64 + 64)
    per_expert, backbone = make_bank().parameter_count()
    assert per_expert == lora + vectors == 1456
    assert backbone == 2 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8 + vectors - (64 + 64 + 8)


def test_adapter_rejects_negative_rank():
    with pytest.raises(ValueError):
        LoraAdapter(MLP(MlpSpec(2, (4,), 2)), rank=-1)


def test_bank_state_dict_roundtrip():
    a = make_bank(seed=0)
    perturb(a)
    b = make_bank(seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(7).normal(size=(4, 2))
    for n in (None, 1, 2, 3):
        assert a.forward(x, n).data.tobytes() == b.forward(x, n).data.tobytes()


def test_evaluation_counter():
    bank = make_bank()
    with tn.no_grad():
        for n in (None, 1, 2):
            bank.forward(np.zeros((1, 2)), n)
    assert bank.evaluations == 3
