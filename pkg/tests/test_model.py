import math
import struct

import numpy as np
import pytest

from geniepath import autodiff as ad
from geniepath.autodiff import Tape, Tensor
from geniepath.data import Dataset
from geniepath.graph import build_graph, disjoint_union, permute_nodes
from geniepath.model import (Adam, CheckpointError, Model, ModelConfig, TrainingDiverged,
                             compute_metrics, evaluate, load_checkpoint, masked_loss,
                             model_grad_check, save_checkpoint, train)

from conftest import random_graph
from oracles import dense_forward

VARIANTS = ["geniepath", "geniepath-lazy", "gcn", "gcn-mean", "breadth-only"]


def randomized(model, rng, scale=0.7):
    model.load_params({k: rng.normal(0, scale, v.shape) for k, v in model.params.items()})
    return model


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_matches_dense_oracle(variant, rng):
    g = random_graph(rng, 8)
    X = rng.normal(size=(8, 5))
    model = randomized(Model(ModelConfig(variant=variant, depth=3, hidden=4), 5, 3), rng)
    logits = model.forward(g, X).logits.data
    expected = dense_forward(variant, 3, model.params, g, X)
    assert np.max(np.abs(logits - expected)) < 1e-9


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_params_give_uniform_softmax(variant, rng):
    model = Model(ModelConfig(variant=variant, depth=1, hidden=3), 4, 3)
    model.load_params({k: np.zeros_like(v) for k, v in model.params.items()})
    logits = model.forward(random_graph(rng, 5), rng.normal(size=(5, 4))).logits.data
    np.testing.assert_array_equal(logits, 0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_relabelling_permutes_logits(variant, rng):
    g = random_graph(rng, 10)
    X = rng.normal(size=(10, 3))
    model = randomized(Model(ModelConfig(variant=variant, depth=2, hidden=4), 3, 2), rng)
    perm = rng.permutation(10)
    Xp = np.empty_like(X)
    Xp[perm] = X
    base = model.forward(g, X).logits.data
    moved = model.forward(permute_nodes(g, perm), Xp).logits.data
    np.testing.assert_allclose(moved[perm], base, atol=1e-12)


def test_forward_shape_errors(rng):
    model = Model(ModelConfig(depth=1, hidden=2), 3, 2)
    with pytest.raises(ValueError):
        model.forward(random_graph(rng, 4), rng.normal(size=(4, 5)))
    with pytest.raises(ValueError):
        model.forward(random_graph(rng, 4), rng.normal(size=(3, 3)))


def test_config_validation():
    for bad in ({"variant": "gat"}, {"depth": 0}, {"hidden": 0}, {"lr": 0.0}, {"residual": "x"}):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_bias_and_residual_params(rng):
    m = Model(ModelConfig(variant="geniepath", depth=2, hidden=3, bias=True, residual="concat"), 4, 2)
    assert m.params["layer1.W_res"].shape == (6, 3)
    assert m.params["layer0.b_i"].shape == (1, 3)
    assert m.forward(random_graph(rng, 5), rng.normal(size=(5, 4))).logits.shape == (5, 2)


# ---------------------------------------------------------------- loss

def test_uniform_logits_loss_is_log_c():
    loss = masked_loss(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]), np.ones(3, bool), "multi-class")
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_confident_correct_logits_loss_vanishes():
    Z = np.array([[40.0, 0.0], [0.0, 40.0]])
    assert masked_loss(Tensor(Z), np.array([0, 1]), np.ones(2, bool), "multi-class").item() < 1e-15


def test_two_node_cross_entropy_fixture():
    Z = np.array([[1.0, 0.0], [0.0, 2.0]])
    # -1/2 [log(e/(e+1)) + log(1/(1+e^2))]
    expected = -0.5 * (math.log(math.e / (math.e + 1)) + math.log(1 / (1 + math.e ** 2)))
    loss = masked_loss(Tensor(Z), np.array([0, 0]), np.ones(2, bool), "multi-class")
    assert loss.item() == pytest.approx(expected, abs=1e-15)


def test_masked_loss_empty_mask():
    with pytest.raises(ValueError):
        masked_loss(Tensor(np.zeros((2, 2))), np.array([0, 1]), np.zeros(2, bool), "multi-class")


def test_l2_covers_weight_matrices_only():
    w = {"layer0.W": Tensor([[1.0, 2.0]]), "layer0.v": Tensor([[5.0]]), "output.b": Tensor([[3.0]])}
    base = masked_loss(Tensor(np.zeros((1, 2))), np.array([0]), np.ones(1, bool), "multi-class").item()
    loss = masked_loss(Tensor(np.zeros((1, 2))), np.array([0]), np.ones(1, bool), "multi-class",
                       w, l2_penalty=0.1).item()
    assert loss - base == pytest.approx(0.1 * 5.0, abs=1e-15)


# ---------------------------------------------------------------- adam

def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([[1.0, -2.0, 0.5]])}
    Adam(lr=0.01).step(p, {"w": np.array([[3.0, -0.2, 1e-3]])})
    np.testing.assert_allclose(p["w"], [[0.99, -1.99, 0.49]], atol=1e-7)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = Adam(lr=0.1)
    for _ in range(5):
        opt.step(p, {"w": np.zeros((1, 2))})
    np.testing.assert_array_equal(p["w"], [[1.0, -2.0]])


def test_adam_three_step_trace():
    grads = [0.5, -1.0, 2.0]
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([[1.0]])}
    opt = Adam(lr=lr)
    for g in grads:
        opt.step(p, {"w": np.array([[g]])})
    assert p["w"][0, 0] == pytest.approx(x, abs=1e-15)


def test_adam_rejects_non_finite():
    with pytest.raises(ad.NonFiniteError):
        Adam().step({"w": np.zeros((1, 1))}, {"w": np.array([[np.nan]])})


# ---------------------------------------------------------------- training

def separable_dataset(rng, n_per=15, classes=3):
    graphs, X, y = [], [], []
    for c in range(classes):
        graphs.append(random_graph(rng, n_per, p=0.2))
        feat = np.zeros((n_per, classes))
        feat[:, c] = 1.0
        X.append(feat + rng.normal(0, 0.05, size=feat.shape))
        y.append(np.full(n_per, c))
    g = disjoint_union(graphs)
    n = g.num_nodes
    order = rng.permutation(n)
    train_m = np.zeros(n, bool)
    val_m = np.zeros(n, bool)
    test_m = np.zeros(n, bool)
    train_m[order[: n // 2]] = True
    val_m[order[n // 2: 3 * n // 4]] = True
    test_m[order[3 * n // 4:]] = True
    return Dataset(g, np.vstack(X), np.concatenate(y), train_m, val_m, test_m, "multi-class", classes)


def test_train_separable_reaches_high_accuracy(rng):
    ds = separable_dataset(rng)
    cfg = ModelConfig(variant="geniepath", depth=1, hidden=8, epochs=200, lr=0.01, patience=200)
    model = Model(cfg, 3, 3)
    _, history = train(model, ds, cfg)
    accs = [r["value"] for r in history if r["split"] == "train" and r["metric"] == "accuracy"]
    assert max(accs) >= 0.99
    losses = [r["value"] for r in history if r["split"] == "train" and r["metric"] == "loss"]
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))


def test_zero_epochs_records_initial_metrics_only(rng):
    ds = separable_dataset(rng)
    cfg = ModelConfig(depth=1, hidden=4, epochs=0)
    model = Model(cfg, 3, 3)
    before = {k: v.copy() for k, v in model.params.items()}
    _, history = train(model, ds, cfg)
    assert {r["epoch"] for r in history} == {0}
    assert {r["split"] for r in history} == {"train", "val"}
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_training_is_deterministic(rng):
    ds = separable_dataset(rng)
    cfg = ModelConfig(variant="geniepath-lazy", depth=2, hidden=4, epochs=15, seed=7)
    runs = []
    for _ in range(2):
        model = Model(cfg, 3, 3)
        params, history = train(model, ds, cfg)
        runs.append((history, params))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()


def test_divergence_reports_epoch(rng):
    ds = separable_dataset(rng)
    cfg = ModelConfig(variant="gcn", depth=1, hidden=4, epochs=5, lr=1e306)
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged) as info:
        train(Model(cfg, 3, 3), ds, cfg)
    assert info.value.epoch == 1


def test_task_mismatch_rejected(rng):
    ds = separable_dataset(rng)
    cfg = ModelConfig(task="multi-label", epochs=1)
    with pytest.raises(ValueError):
        train(Model(cfg, 3, 3), ds, cfg)


def test_inductive_test_split_never_reads_training_graphs(rng):
    parts = [random_graph(rng, 6) for _ in range(4)]
    g = disjoint_union(parts)
    X = rng.normal(size=(24, 3))
    y = rng.integers(0, 2, size=24)
    masks = [np.zeros(24, bool) for _ in range(3)]
    masks[0][:12] = True     # graphs 0, 1
    masks[1][12:18] = True   # graph 2
    masks[2][18:] = True     # graph 3
    ds = Dataset(g, X, y, *masks, "multi-class", 2, inductive=True)
    view = ds.view("test")
    assert view.info["nodes"].tolist() == list(range(18, 24))
    model = randomized(Model(ModelConfig(depth=2, hidden=3), 3, 2), rng)
    before = evaluate(model, ds, "test")
    # rewire and re-feature the training graphs: test metrics must not move
    X2 = X.copy()
    X2[:12] = rng.normal(size=(12, 3)) * 100
    rewired = disjoint_union([build_graph([(0, k) for k in range(1, 6)], 6)] * 2 + parts[2:])
    ds2 = Dataset(rewired, X2, y, *masks, "multi-class", 2, inductive=True)
    assert evaluate(model, ds2, "test") == before


# ---------------------------------------------------------------- metrics

def test_metrics_perfect_and_wrong():
    Z = np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]])
    m = compute_metrics(Z, np.array([0, 1, 0]), np.ones(3, bool), "multi-class")
    assert (m.accuracy, m.micro_f1, m.macro_f1) == (1.0, 1.0, 1.0)
    m = compute_metrics(Z, np.array([1, 0, 1]), np.ones(3, bool), "multi-class")
    assert m.accuracy == 0.0


def test_argmax_ties_go_to_lowest_class():
    m = compute_metrics(np.zeros((2, 3)), np.array([0, 0]), np.ones(2, bool), "multi-class")
    assert m.accuracy == 1.0


def test_multilabel_micro_f1_confusion_fixture():
    # node 0: predicts {0}, truth {0} -> TP; predicts {1}, truth {} -> FP
    # node 1: predicts {}, truth {1} -> FN
    Z = np.array([[5.0, 5.0], [-5.0, -5.0]])
    Y = np.array([[1, 0], [0, 1]])
    m = compute_metrics(Z, Y, np.ones(2, bool), "multi-label")
    # micro: precision 1/2, recall 1/2
    assert m.micro_f1 == pytest.approx(0.5)
    assert m.accuracy == 0.0
    # macro: class 0 F1 = 1, class 1 F1 = 0
    assert m.macro_f1 == pytest.approx(0.5)
    perfect = compute_metrics(np.where(Y == 1, 3.0, -3.0), Y, np.ones(2, bool), "multi-label")
    assert (perfect.accuracy, perfect.micro_f1) == (1.0, 1.0)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("task", ["multi-class", "multi-label"])
def test_full_model_gradients(variant, task, rng):
    g = random_graph(rng, 6, p=0.4)
    X = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, size=6) if task == "multi-class" else rng.integers(0, 2, size=(6, 3))
    cfg = ModelConfig(variant=variant, depth=2, hidden=3, task=task, l2_penalty=0.01,
                      activation="tanh", bias=variant == "gcn-mean",
                      residual="concat" if variant == "breadth-only" else "none")
    model = randomized(Model(cfg, 4, 3), rng)
    res = model_grad_check(model, g, X, labels, np.array([1, 1, 0, 1, 1, 1], bool))
    assert res.max_rel_error < 1e-5, res


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, rng):
    model = randomized(Model(ModelConfig(variant="geniepath-lazy", depth=2, hidden=3), 4, 2), rng)
    path = tmp_path / "m.gnpk"
    save_checkpoint(path, model.params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(model.params)
    for k in loaded:
        assert loaded[k].tobytes() == model.params[k].tobytes()


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "m.gnpk"
    save_checkpoint(path, {"ab": np.array([[1.5, -2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"GNPK"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert struct.unpack("<I", raw[8:12]) == (2,)
    assert raw[12:14] == b"ab"
    assert struct.unpack("<QQ", raw[14:30]) == (1, 2)
    assert struct.unpack("<2d", raw[30:46]) == (1.5, -2.0)
    assert len(raw) == 46


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.gnpk"
    bad.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    save_checkpoint(bad, {"w": np.ones((2, 2))})
    bad.write_bytes(bad.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)


def test_checkpoint_shape_mismatch_rejected(rng):
    model = Model(ModelConfig(depth=1, hidden=3), 4, 2)
    params = dict(model.params)
    params["output.W"] = np.zeros((3, 5))
    with pytest.raises(ValueError, match="shape"):
        Model(ModelConfig(depth=1, hidden=3), 4, 2, params)
