import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refseg import model as mdl
from refseg.data import build_benchmark
from refseg.errors import BadLabel, RefSegError, ShapeMismatch
from refseg.training import (
    ABLATION_ROWS,
    GRAD_CHECK_PIECES,
    TrainConfig,
    TrainData,
    ablation_config,
    bce_loss,
    check_arrays,
    cross_entropy_loss,
    grad_check,
    grid_class_targets,
    grid_targets,
    sgd_step,
    train_full,
)


def test_bce_examples():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _ = bce_loss(y.copy(), y)
    assert 0 <= loss < 1e-6
    loss, _ = bce_loss(np.full((2, 2), 0.5), y)
    assert abs(loss - math.log(2)) < 1e-12
    with pytest.raises(ShapeMismatch):
        bce_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, (3, 4))
    y = rng.random((3, 4))
    _, g = bce_loss(p, y)
    err = check_arrays(lambda: bce_loss(p, y)[0], {"p": p}, {"p": g})
    assert err < 1e-4


def test_cross_entropy_examples():
    loss, g = cross_entropy_loss(np.full(4, 0.25), 2)
    assert abs(loss - math.log(4)) < 1e-12
    assert np.allclose(g, [0.25, 0.25, -0.75, 0.25])
    loss, _ = cross_entropy_loss(np.array([0.0, 1.0]), 1)
    assert loss < 1e-12
    with pytest.raises(BadLabel):
        cross_entropy_loss(np.full(3, 1 / 3), 3)


def test_sgd_examples():
    x = np.array([1.0])
    v = {}
    for expect in (0.8, 0.64):
        sgd_step({"x": x}, {"x": 2 * x}, 0.1, v, momentum=0.0)
        assert abs(x[0] - expect) < 1e-15
    x = np.array([3.0])
    v = {"x": np.array([1.0])}
    sgd_step({"x": x}, {"x": np.zeros(1)}, 0.1, v, momentum=0.9)
    assert v["x"][0] == 0.9 and x[0] == 3.9
    with pytest.raises(ShapeMismatch):
        sgd_step({"x": x}, {"x": np.zeros(2)}, 0.1, {}, 0.9)


def test_grid_targets_constant_and_range():
    assert np.allclose(grid_targets(np.ones((64, 64)), 16, 16), 1.0)
    assert np.all(grid_targets(np.zeros((64, 64)), 16, 16) == 0.0)
    m = np.zeros((64, 64))
    m[10:30, 20:50] = 1
    t = grid_targets(m, 16, 16)
    assert t.min() >= 0 and t.max() <= 1
    lab = np.random.default_rng(0).integers(0, 5, (32, 32))
    q = grid_class_targets(lab, 5, 8, 8)
    assert np.allclose(q.sum(-1), 1.0)


@pytest.mark.parametrize("piece", GRAD_CHECK_PIECES)
def test_grad_check_pieces(piece):
    for seed in range(3):
        assert grad_check(piece, seed) < 1e-4


def test_config_validation():
    with pytest.raises(RefSegError):
        TrainConfig(lr=0)
    with pytest.raises(RefSegError):
        TrainConfig(epochs=0)
    with pytest.raises(RefSegError):
        TrainConfig(category_path=False, baseline_path=False)
    with pytest.raises(RefSegError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    c = TrainConfig.from_dict({"lr": 0.2, "seed": 4})
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_baseline_row_is_all_components_off():
    off = TrainConfig(pretrained_embedding=False, synthesized_expressions=False, category_path=False)
    assert ablation_config(TrainConfig(), ABLATION_ROWS[0][0]) == off
    assert len(ABLATION_ROWS) == 5


SMALL = dict(epochs=3, pretrain_epochs=1, batch_size=8, hidden=8, mlp_hidden=8, head_hidden=8,
             category_hidden=8, conv1=4, conv2=4, embedding_dim=8, lr=0.1)


@pytest.fixture(scope="module")
def tiny():
    b = build_benchmark(1, n_train=24, n_test=6, n_vision=10, embedding_dim=8)
    return b, TrainData(b.catalog, b.train, b.vision, b.test, b.vectors)


def test_training_deterministic(tiny, tmp_path):
    _, data = tiny
    cfg = TrainConfig(**SMALL)
    m1, h1 = train_full(cfg, data)
    m2, h2 = train_full(cfg, data)
    mdl.save_checkpoint(m1, tmp_path / "a.bin")
    mdl.save_checkpoint(m2, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert h1.json_lines() == h2.json_lines()
    assert len(h1.loss) == len(h1.val_overall_iou) == len(h1.alpha) == cfg.epochs


def test_fixed_embedding_untouched_and_alpha_inside(tiny):
    b, data = tiny
    m, h = train_full(TrainConfig(**SMALL), data)
    assert np.array_equal(m.embedding[:-1], b.vectors.vectors)
    assert all(0.0 < a < 1.0 for a in h.alpha)


def test_learned_embedding_moves(tiny):
    _, data = tiny
    cfg = TrainConfig(**{**SMALL, "pretrained_embedding": False})
    m, _ = train_full(cfg, data)
    assert m.embedding_trainable
    rng = np.random.default_rng(0)
    fresh = mdl.ModelBundle.init(rng, m.dims, vocab=m.vocab)
    assert not np.array_equal(fresh.embedding, m.embedding)


def test_path_override_trains_alpha_only(tiny):
    _, data = tiny

    def oracle_baseline(batch, out, y):
        return y, np.full_like(y, 0.5)

    cfg = TrainConfig(**{**SMALL, "lr": 0.5})
    m, h = train_full(cfg, data, path_override=oracle_baseline)
    assert h.alpha[-1] > 0.5
