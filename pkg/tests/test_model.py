import json

import numpy as np
import pytest

from session_coder import numerics as nx
from session_coder.data import CODES
from session_coder.model import (
    ModelConfig,
    ModelFormatError,
    ModeError,
    attention,
    bigru_forward,
    forward,
    gru_scan,
    gru_step,
    heads_forward,
    init_params,
    load_model,
    mlp_head,
    multi_task_forward,
    predict_total,
    save_model,
    single_task_forward,
)
from session_coder.numerics import GradTape, ShapeError, finite_diff_check


def tiny(mode="multi_task", d=8, m=4, seed=0):
    cfg = ModelConfig(mode=mode, d=d, hidden_units=4, attention_units=3, mlp_units=5, meta_width=m, max_len=16)
    return init_params(cfg, seed)


def test_parameter_shapes_and_zero_biases():
    params = tiny()
    named = {p.name: p for p in params.named_parameters()}
    assert len(named) == 18 + 7 * len(CODES)
    assert params.gru_fwd.W_z.shape == (8, 4) and params.gru_fwd.U_z.shape == (4, 4)
    att = params.attention["ag"]
    assert att.W_a.shape == (8, 3) and att.v_a.shape == (3,)
    assert params.mlp["ag"].W1.shape == (8 + 4, 5) and params.mlp["ag"].W2.shape == (5, 1)
    assert all(not p.data.any() for n, p in named.items() if ".b" in n or n.endswith("b_z"))


def test_init_is_deterministic_per_seed():
    a, b, c = tiny(seed=1).state(), tiny(seed=1).state(), tiny(seed=2).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_gru_scan_matches_stepwise_gru(rng):
    params = tiny().gru_fwd
    X = rng.normal(size=(2, 5, 8))
    lengths = np.array([5, 3])
    order = np.array([[0, 1, 2, 3, 4], [0, 1, 2, 0, 0]])
    out = gru_scan(X, order, lengths, params).data
    for b in range(2):
        h = np.zeros(4)
        for t in range(lengths[b]):
            h = gru_step(X[b, t], h, params).data
            np.testing.assert_allclose(out[b, t], h, rtol=0, atol=1e-14)
    assert not out[1, 3:].any()


def test_gru_step_shape_error():
    with pytest.raises(ShapeError):
        gru_step(np.zeros(7), np.zeros(4), tiny().gru_fwd)


def test_bigru_backward_direction_reads_reversed(rng):
    params = tiny()
    X = rng.normal(size=(4, 8))
    H = bigru_forward(X, np.ones(4), params.gru_fwd, params.gru_bwd).data
    h = np.zeros(4)
    for t in (3, 2, 1, 0):
        h = gru_step(X[t], h, params.gru_bwd).data
    np.testing.assert_allclose(H[0, 4:], h, atol=1e-14)


def test_stacked_heads_match_per_head_reference(rng):
    params = tiny()
    X = rng.normal(size=(3, 6, 8))
    mask = np.array([[1] * 6, [1] * 4 + [0] * 2, [1] * 2 + [0] * 4], dtype=bool)
    meta = rng.normal(size=(3, 4))
    H = bigru_forward(X, mask, params.gru_fwd, params.gru_bwd)
    out, alpha, context = heads_forward(H, mask, meta, params)
    for i, code in enumerate(CODES):
        ctx, a = attention(H, mask, params.attention[code])
        y = mlp_head(ctx, meta, params.mlp[code])
        np.testing.assert_allclose(alpha.data[:, i], a.data, atol=1e-14)
        np.testing.assert_allclose(out.data[:, i], y.data.reshape(-1), atol=1e-13)


@pytest.mark.parametrize("mode", ["single_task", "multi_task"])
def test_padding_invariance_is_exact(mode, rng):
    params = tiny(mode)
    X = rng.normal(size=(5, 8))
    meta = rng.normal(size=4)
    y1, t1 = forward(X, np.ones(5), meta, params)
    Xp = np.vstack([X, rng.normal(size=(7, 8))])
    y2, t2 = forward(Xp, np.r_[np.ones(5), np.zeros(7)], meta, params)
    np.testing.assert_array_equal(y1.data, y2.data)
    for h in params.config.heads:
        np.testing.assert_array_equal(t1.alphas[h][0], t2.alphas[h][0, :5])
        assert not t2.alphas[h][0, 5:].any()


def test_batched_forward_matches_single_sessions(rng):
    params = tiny()
    X = rng.normal(size=(2, 6, 8))
    mask = np.array([[1] * 6, [1] * 3 + [0] * 3])
    meta = rng.normal(size=(2, 4))
    batch, _ = forward(X, mask, meta, params)
    for b in range(2):
        n = int(mask[b].sum())
        y, _ = forward(X[b, :n], np.ones(n), meta[b], params)
        np.testing.assert_allclose(batch.data[b], y.data, atol=1e-13)


@pytest.mark.parametrize("mode", ["single_task", "multi_task"])
def test_full_model_gradients(mode, rng):
    params = tiny(mode)
    X = rng.normal(size=(2, 5, 8))
    mask = np.array([[1] * 5, [1] * 3 + [0] * 2])
    meta = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, len(params.config.heads)))

    def loss():
        y, _ = forward(X, mask, meta, params)
        return nx.reduce_sum(y.reshape(2, -1) * w)

    assert finite_diff_check(loss, params.named_parameters()) <= 1e-4


def test_no_metadata_model(rng):
    params = tiny("single_task", m=0)
    p, _ = single_task_forward(rng.normal(size=(4, 8)), np.ones(4), None, params)
    assert 0.0 < p.item() < 1.0
    with pytest.raises(ShapeError):
        single_task_forward(rng.normal(size=(4, 8)), np.ones(4), np.ones(3), params)


def test_mode_checks(rng):
    with pytest.raises(ModeError):
        multi_task_forward(rng.normal(size=(4, 8)), np.ones(4), np.zeros(4), tiny("single_task"))
    with pytest.raises(ModeError):
        ModelConfig(mode="both")


def test_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        forward(rng.normal(size=(4, 7)), np.ones(4), np.zeros(4), tiny())


def test_predict_total_clamps():
    clamped, total, label = predict_total([7.0, -1.0] + [4.0] * 9)
    assert clamped[0] == 6.0 and clamped[1] == 0.0 and total == 42.0 and label == 1
    assert predict_total([3.5] * 11)[2] == 0


def test_save_load_round_trip_is_exact(tmp_path, rng):
    params = tiny()
    path = tmp_path / "m.json"
    save_model(params, path)
    loaded = load_model(path, expected_mode="multi_task")
    X = rng.normal(size=(5, 8))
    a, _ = forward(X, np.ones(5), np.ones(4), params)
    b, _ = forward(X, np.ones(5), np.ones(4), loaded)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ModeError):
        load_model(path, expected_mode="single_task")


def test_load_rejects_bad_files(tmp_path):
    path = tmp_path / "m.json"
    save_model(tiny(), path)
    doc = json.loads(path.read_text())
    doc["format_version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(path)
    doc["format_version"] = 1
    doc["tensors"]["gru_fwd.W_z"]["shape"] = [4, 8]
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_gradients_flow_to_every_parameter(rng):
    params = tiny()
    X = rng.normal(size=(2, 5, 8))
    with GradTape() as tape:
        y, _ = forward(X, np.ones((2, 5)), rng.normal(size=(2, 4)), params)
        loss = nx.reduce_sum(nx.square(y))
    tape.backward(loss)
    assert all(np.any(p.grad != 0) for p in params.named_parameters())
