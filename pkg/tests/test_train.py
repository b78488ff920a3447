"""Optimizer, checkpointing, evaluation, and the sequential training loop."""

import json
import os

import numpy as np
import pytest

from lungseg3d.autograd import Var
from lungseg3d.data import SplitManifest, make_phantom, save_sample
from lungseg3d.networks import NetworkConfig, build_network
from lungseg3d.train import (LOG_HEADER, AdamState, TrainState, adam_step,
                             evaluate, load_checkpoint, save_checkpoint,
                             train, train_step, _epoch_order)

MICRO = [2, 4, 8, 16]


def _nodule_config(dims=(32, 32, 32)):
    return NetworkConfig(stage_channels=MICRO, input_geometry=(1,) + dims)


def _phantom_dir(tmp_path, seeds=(0, 1, 2, 3), dims=(32, 32, 32)):
    d = tmp_path / "samples"
    ids = []
    for seed in seeds:
        s = make_phantom("nodule", dims, seed)
        save_sample(s, d)
        ids.append(s.id)
    return d, ids


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_matches_hand_rolled_recurrence():
    # drive one parameter through 10 steps of g = 2x on f(x) = x^2 and
    # compare against an independently coded Adam recurrence
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    p = Var(np.asarray([1.5]), name="x")
    st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)

    x = 1.5
    m = v = 0.0
    for t in range(1, 11):
        g = 2.0 * float(p.data[0])
        adam_step([p], [np.asarray([g])], st)

        gm = 2.0 * x
        m = b1 * m + (1 - b1) * gm
        v = b2 * v + (1 - b2) * gm * gm
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        assert abs(float(p.data[0]) - x) <= 1e-12
    assert st.t == 10


def test_adam_first_step_is_lr_sized():
    p = Var(np.asarray([0.0, 0.0]), name="w")
    st = AdamState(lr=1e-4)
    adam_step([p], [np.asarray([3.0, -0.25])], st)
    # bias correction makes |update| = lr/(1 + eps/|g|) on step one
    assert np.allclose(p.data, [-1e-4, 1e-4], atol=1e-8)


def test_adam_none_gradient_means_zero_update():
    p = Var(np.asarray([1.0]), name="w")
    st = AdamState()
    adam_step([p], [None], st)
    assert p.data[0] == 1.0


def test_adam_validates_inputs():
    p = Var(np.zeros(2), name="w")
    with pytest.raises(ValueError):
        adam_step([p], [], AdamState())
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState())


def test_adam_state_keyed_by_name_across_rebuilds():
    st = AdamState()
    p1 = Var(np.zeros(2), name="w")
    adam_step([p1], [np.ones(2)], st)
    assert "w" in st.m and "w" in st.v
    p2 = Var(p1.data.copy(), name="w")  # rebuilt Var, same name
    adam_step([p2], [np.ones(2)], st)
    assert st.t == 2 and len(st.m) == 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = _nodule_config()
    net = build_network("nodule", cfg, seed=3)
    adam = AdamState(lr=2e-4)
    params = list(net.params())
    sample = make_phantom("nodule", (32, 32, 32), 0)
    train_step(net, params, sample, adam, np.random.default_rng(0))

    state = TrainState(net=net, kind="nodule", config=cfg, adam=adam,
                       epoch=4, seed=3, best_val_dice=0.25)
    ck = tmp_path / "ck"
    save_checkpoint(ck, state)
    back = load_checkpoint(ck)

    assert back.kind == "nodule" and back.epoch == 4 and back.seed == 3
    assert back.best_val_dice == 0.25
    assert back.adam.lr == 2e-4 and back.adam.t == 1
    want = {p.name: p.data for p in net.params()}
    got = {p.name: p.data for p in back.net.params()}
    assert want.keys() == got.keys()
    for name in want:
        assert np.array_equal(want[name], got[name]), name
        assert want[name].shape == got[name].shape  # incl. 0-d attn scale
    for name in adam.m:
        assert np.array_equal(adam.m[name], back.adam.m[name])
        assert np.array_equal(adam.v[name], back.adam.v[name])
    for bn_a, bn_b in zip(net.batchnorms(), back.net.batchnorms()):
        assert np.array_equal(bn_a.state.running_mean, bn_b.state.running_mean)
        assert np.array_equal(bn_a.state.running_var, bn_b.state.running_var)


def test_checkpoint_missing_tensor_rejected(tmp_path):
    cfg = _nodule_config()
    net = build_network("nodule", cfg, seed=0)
    state = TrainState(net=net, kind="nodule", config=cfg, adam=AdamState(),
                       epoch=0, seed=0, best_val_dice=0.0)
    ck = tmp_path / "ck"
    save_checkpoint(ck, state)
    manifest = json.loads((ck / "manifest.json").read_text())
    first = next(iter(net.params())).name
    del manifest["tensors"][first]
    (ck / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_checkpoint(ck)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_evaluate_scores_each_id(tmp_path):
    d, ids = _phantom_dir(tmp_path, seeds=(0, 1))
    net = build_network("nodule", _nodule_config(), seed=0)
    agg, rows = evaluate(net, ids, d)
    assert [r["id"] for r in rows] == ids
    for r in rows:
        for key in ("dice", "iou", "precision", "recall"):
            assert 0.0 <= r[key] <= 1.0
    assert agg.dice_score == pytest.approx(
        np.mean([r["dice"] for r in rows]))
    empty_agg, empty_rows = evaluate(net, [], d)
    assert empty_rows == [] and empty_agg.dice_score == 0.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_epoch_order_deterministic_and_epoch_sensitive():
    ids = [f"s{i}" for i in range(8)]
    assert _epoch_order(ids, 0, 0) == _epoch_order(ids, 0, 0)
    assert sorted(_epoch_order(ids, 0, 0)) == sorted(ids)
    assert _epoch_order(ids, 0, 0) != _epoch_order(ids, 0, 1)


def test_train_writes_log_and_checkpoints(tmp_path):
    d, ids = _phantom_dir(tmp_path, seeds=(0, 1, 2))
    man = SplitManifest(train=ids[:2], val=[ids[2]], test=[], seed=0)
    out = tmp_path / "run"
    state = train("nodule", man, d, out, _nodule_config(), epochs=2, seed=0)

    log = (out / "log.csv").read_text(encoding="ascii").splitlines()
    assert log[0] == LOG_HEADER == "epoch,train_loss,val_dice,val_iou"
    assert len(log) == 3
    for i, line in enumerate(log[1:]):
        fields = line.split(",")
        assert fields[0] == str(i)
        assert all(np.isfinite(float(v)) for v in fields[1:])
    assert (out / "best" / "manifest.json").exists()
    assert (out / "last" / "manifest.json").exists()
    assert state.epoch == 1
    last = load_checkpoint(out / "last")
    assert last.adam.t == 4  # 2 samples x 2 epochs


def _dir_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


def test_train_reruns_byte_identical(tmp_path):
    d, ids = _phantom_dir(tmp_path, seeds=(0, 1, 2))
    man = SplitManifest(train=ids[:2], val=[ids[2]], test=[], seed=0)
    a = train("nodule", man, d, tmp_path / "a", _nodule_config(), epochs=1,
              seed=7)
    b = train("nodule", man, d, tmp_path / "b", _nodule_config(), epochs=1,
              seed=7)
    files_a = _dir_bytes(tmp_path / "a")
    files_b = _dir_bytes(tmp_path / "b")
    assert files_a.keys() == files_b.keys()
    for name in files_a:
        assert files_a[name] == files_b[name], name


def test_train_resume_continues_epoch_count(tmp_path):
    d, ids = _phantom_dir(tmp_path, seeds=(0, 1, 2))
    man = SplitManifest(train=ids[:2], val=[ids[2]], test=[], seed=0)
    out = tmp_path / "run"
    train("nodule", man, d, out, _nodule_config(), epochs=1, seed=0)
    state = train("nodule", man, d, out, _nodule_config(), epochs=3, seed=0,
                  resume_from=out / "last")
    assert state.epoch == 2
    log = (out / "log.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in log[1:]] == ["0", "1", "2"]
    with pytest.raises(ValueError):
        train("lung", man, d, out, _nodule_config(), epochs=4, seed=0,
              resume_from=out / "last")


def test_train_missing_sample_raises(tmp_path):
    d, ids = _phantom_dir(tmp_path, seeds=(0,))
    man = SplitManifest(train=["ghost"], val=[], test=[], seed=0)
    with pytest.raises(RuntimeError):
        train("nodule", man, d, tmp_path / "x", _nodule_config(), epochs=1,
              seed=0)
