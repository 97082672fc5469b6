import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnalign import tensor as T
from attnalign.attention import (
    AttentionConfig,
    AttentionModule,
    aggregate_values,
    attention_block,
    attention_scores,
    export_attention_map,
    objectness_map,
    project_qkv,
    read_pgm,
)
from attnalign.tensor import ConfigurationError, DropoutStream, Tensor

from helpers import check_gradients


def make_module(c=4, heads=2, hidden=16, seed=0, dropout=0.1):
    cfg = AttentionConfig(embed_dim=c, value_dim=c, num_heads=heads, ffn_hidden=hidden, dropout_p=dropout)
    return AttentionModule(cfg, np.random.default_rng(seed))


def test_config_defaults_follow_detr_setting():
    cfg = AttentionConfig(embed_dim=256, value_dim=256)
    assert (cfg.num_heads, cfg.ffn_hidden, cfg.dropout_p) == (8, 2048, 0.1)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        AttentionConfig(embed_dim=10, value_dim=8, num_heads=4)


def test_project_zero_input_gives_biases():
    m = make_module()
    for lin in (m.query, m.key, m.value):
        lin.bias.data = np.arange(4, dtype=float) + 1
    q, k, v = project_qkv(Tensor(np.zeros((2, 2, 4))), m)
    for out in (q, k, v):
        assert out.shape == (4, 4)
        np.testing.assert_array_equal(out.data, np.tile(np.arange(4.0) + 1, (4, 1)))


def test_project_rejects_channel_mismatch():
    with pytest.raises(ConfigurationError):
        project_qkv(Tensor(np.zeros((2, 2, 3))), make_module())


@pytest.mark.parametrize("seed", range(10))
def test_projection_gradient(seed):
    rng = np.random.default_rng(seed)
    m = make_module(seed=seed)
    f = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(6, 4)))
    loss = lambda: T.sum((lambda q, k, v: q * k + v)(*project_qkv(f, m)) * proj)  # noqa: E731
    assert check_gradients(loss, [f, m.query.weight, m.key.weight, m.value.bias]) < 1e-4


def test_zero_query_key_gives_uniform_scores():
    s = attention_scores(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))), num_heads=1)
    np.testing.assert_allclose(s.data, 0.25)


def test_dominant_pair_saturates():
    q = np.zeros((3, 1))
    k = np.zeros((3, 1))
    q[0, 0], k[2, 0] = 50.0, 1.0
    s = attention_scores(Tensor(q), Tensor(k), 1).data[0]
    assert s[0, 2] > 1 - 1e-12


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_random_scores_rows_sum_to_one(heads):
    rng = np.random.default_rng(heads)
    q, k = Tensor(rng.normal(size=(9, 8))), Tensor(rng.normal(size=(9, 8)))
    s = attention_scores(q, k, heads).data
    assert s.shape == (heads, 9, 9)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_objectness_of_one_hot_scores_is_degenerate_zero():
    out = objectness_map(Tensor(np.eye(4)), 2, 2)
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_objectness_min_max_algebra():
    scores = np.zeros((4, 4))
    # the diagonal carries each row's maximum: 0.5, 0.6, 0.7, 0.8
    for i, m in enumerate([0.5, 0.6, 0.7, 0.8]):
        scores[i, i] = m
        scores[i, (i + 1) % 4] = 1 - m
    out = objectness_map(Tensor(scores), 2, 2).data
    np.testing.assert_allclose(out, [[0.0, 1 / 3], [2 / 3, 1.0]], atol=1e-12)


def test_objectness_random_maps_span_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(100):
        hw = 9
        heads = int(rng.integers(1, 4))
        scores = T.softmax(Tensor(rng.normal(size=(heads, hw, hw)) * 3), axis=-1)
        out = objectness_map(scores, 3, 3).data
        assert out.min() == 0.0 and out.max() == 1.0
        assert ((out >= 0) & (out <= 1)).all()


def test_uniform_scores_average_value_rows():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(5, 4))
    out = aggregate_values(Tensor(np.full((1, 5, 5), 0.2)), Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-12)


def test_one_hot_scores_permute_value_rows():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(4, 6))
    perm = np.array([2, 0, 3, 1])
    scores = np.eye(4)[perm][None].repeat(2, axis=0)
    out = aggregate_values(Tensor(scores), Tensor(v)).data
    np.testing.assert_array_equal(out, v[perm])


@pytest.mark.parametrize("seed", range(10))
def test_attended_features_gradient(seed):
    rng = np.random.default_rng(seed)
    m = make_module(seed=seed)
    f = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(3, 3, 4)))
    assert check_gradients(lambda: T.sum(attention_block(f, m, False).attended * proj), [f, m.out_proj.weight]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_attention_block_gradient(seed):
    rng = np.random.default_rng(seed)
    m = make_module(c=8, heads=2, hidden=32, seed=seed)
    f = Tensor(rng.normal(size=(4, 4, 8)), requires_grad=True)
    p_out = Tensor(rng.normal(size=(4, 4, 8)))
    p_obj = Tensor(rng.normal(size=(4, 4)))

    def loss():
        r = attention_block(f, m, True, DropoutStream(seed))
        return T.sum(r.output * p_out) + T.sum(r.objectness * p_obj)

    tensors = [f, m.query.weight, m.key.weight, m.value.weight, m.ffn_in.weight, m.norm2.weight]
    assert check_gradients(loss, tensors, np.random.default_rng(seed), max_probes=40) < 1e-4


def test_inference_is_deterministic_and_shape_preserving():
    rng = np.random.default_rng(0)
    m = make_module(c=8, heads=8, hidden=16).eval()
    f = Tensor(rng.normal(size=(2, 4, 4, 8)))
    a, b = m(f), m(f)
    np.testing.assert_array_equal(a.output.data, b.output.data)
    assert a.attended.shape == f.shape and a.output.shape == f.shape
    assert a.objectness.shape == (2, 4, 4)
    assert a.scores.shape == (2, 8, 16, 16)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    m = make_module(c=4, heads=2, hidden=8, seed=seed % 7).eval()
    f = rng.normal(size=(3, 3, 4))
    perm = rng.permutation(9)
    a = m(Tensor(f))
    b = m(Tensor(f.reshape(9, 4)[perm].reshape(3, 3, 4)))
    np.testing.assert_allclose(b.scores.data, a.scores.data[:, perm][:, :, perm], atol=1e-12)
    np.testing.assert_allclose(b.objectness.data.reshape(9), a.objectness.data.reshape(9)[perm], atol=1e-9)
    np.testing.assert_allclose(b.output.data.reshape(9, 4), a.output.data.reshape(9, 4)[perm], atol=1e-9)


def test_export_writes_pgm_and_csv(tmp_path):
    values = np.linspace(0, 1, 16).reshape(4, 4)
    pgm, csv = export_attention_map(tmp_path, 1, 250, values)
    assert pgm.name == "attn_s1_iter250.pgm" and csv.name == "attn_s1_iter250.csv"
    raw = pgm.read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n")
    back = read_pgm(pgm)
    assert back.min() == 0 and back.max() == 1
    np.testing.assert_allclose(np.loadtxt(csv, delimiter=","), values)
