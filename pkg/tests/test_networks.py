"""Network assemblies: geometry contracts, determinism, config validation."""

import numpy as np
import pytest

from lungseg3d import autograd as ag
from lungseg3d.autograd import Var
from lungseg3d.networks import (NetworkConfig, build_network,
                                lung_default_config, nodule_default_config,
                                predict_volume)

MICRO = [2, 4, 8, 16]


def _lung(geometry=(1, 7, 12, 10), seed=0):
    cfg = NetworkConfig(stage_channels=MICRO, input_geometry=geometry)
    return build_network("lung", cfg, seed)


def _nodule(geometry=(1, 16, 16, 16), seed=0, window=(1, 1, 1), rate=0.2):
    cfg = NetworkConfig(stage_channels=MICRO, input_geometry=geometry,
                        attn_window=window, dropout_rate=rate)
    return build_network("nodule", cfg, seed)


def test_build_network_rejects_unknown_kind():
    cfg = NetworkConfig(stage_channels=MICRO, input_geometry=(1, 16, 16, 16))
    with pytest.raises(ValueError):
        build_network("liver", cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=[2, 4, 8], input_geometry=(1, 16, 16, 16))
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=MICRO, input_geometry=(16, 16, 16))
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=MICRO, input_geometry=(1, 16, 16, 16),
                      attn_window=(0, 1, 1))
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=MICRO, input_geometry=(1, 16, 16, 16),
                      dropout_rate=1.0)
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=MICRO, input_geometry=(1, 16, 16, 16),
                      output_channels=2)


def test_default_configs():
    lung = lung_default_config()
    assert lung.stage_channels == [32, 64, 128, 256]
    assert lung.input_geometry == (1, 23, 300, 300)
    nod = nodule_default_config()
    assert nod.stage_channels == [16, 32, 64, 128]
    assert nod.input_geometry == (1, 64, 64, 64)


# ---------------------------------------------------------------------------
# lung network
# ---------------------------------------------------------------------------

def test_lung_round_trips_awkward_geometry():
    # 7x12x10 is not divisible by 16; the net pads to 16^3 internally and
    # crops back, so output spatial dims equal input spatial dims.
    net = _lung()
    x = Var(np.random.default_rng(0).standard_normal(
        (2, 1, 7, 12, 10)).astype(np.float32))
    p, trace = net.forward(x, "train")
    assert p.shape == (2, 1, 7, 12, 10)
    assert p.data.min() > 0.0 and p.data.max() < 1.0
    # four stride-2 encoders halve the padded 16^3 grid each time
    enc_spatial = [tuple(e.data.shape[2:]) for e in trace.encoders]
    assert enc_spatial == [(8, 8, 8), (4, 4, 4), (2, 2, 2), (1, 1, 1)]
    assert trace.bottleneck.data.shape[2:] == (1, 1, 1)
    dec_spatial = [tuple(d.data.shape[2:]) for d in trace.decoders]
    assert dec_spatial == [(2, 2, 2), (4, 4, 4), (8, 8, 8), (16, 16, 16)]
    assert len(trace.gates) == 4


def test_lung_eval_forward_deterministic():
    net = _lung()
    x = Var(np.random.default_rng(1).standard_normal(
        (1, 1, 7, 12, 10)).astype(np.float32))
    net.forward(x, "train")  # populate running stats
    p1, _ = net.forward(x, "eval")
    p2, _ = net.forward(x, "eval")
    assert np.array_equal(p1.data, p2.data)


def test_lung_rejects_channel_mismatch():
    net = _lung()
    with pytest.raises(ValueError):
        net.forward(Var(np.zeros((1, 2, 7, 12, 10), dtype=np.float32)),
                    "train")


def test_lung_param_count_independent_of_spatial_size():
    count = lambda net: sum(p.data.size for p in net.params())
    a = _lung(geometry=(1, 7, 12, 10))
    b = _lung(geometry=(1, 23, 48, 48))
    assert count(a) == count(b)


def test_lung_param_names_unique():
    names = [p.name for p in _lung().params()]
    assert len(names) == len(set(names))
    assert all(name for name in names)


def test_fresh_nets_start_near_background_prior():
    # heads are biased negative at init so untrained output is mostly
    # background instead of p = 0.5 everywhere
    net = _lung()
    x = Var(np.random.default_rng(2).standard_normal(
        (1, 1, 7, 12, 10)).astype(np.float32))
    p, _ = net.forward(x, "train")
    assert float(p.data.mean()) < 0.35

    nod = _nodule()
    xn = Var(np.random.default_rng(3).standard_normal(
        (1, 1, 16, 16, 16)).astype(np.float32))
    pn = nod.forward(xn, "train", np.random.default_rng(0))
    assert float(pn.data.mean()) < 0.35


# ---------------------------------------------------------------------------
# nodule network
# ---------------------------------------------------------------------------

def test_nodule_shape_contract_and_range():
    net = _nodule()
    x = Var(np.random.default_rng(4).standard_normal(
        (2, 1, 16, 16, 16)).astype(np.float32))
    p = net.forward(x, "train", np.random.default_rng(0))
    assert p.shape == (2, 1, 16, 16, 16)
    assert p.data.min() > 0.0 and p.data.max() < 1.0


def test_nodule_rejects_indivisible_geometry():
    with pytest.raises(ValueError):
        _nodule(geometry=(1, 24, 24, 24))  # 24 % 16 != 0
    net = _nodule()
    with pytest.raises(ValueError):
        net.forward(Var(np.zeros((1, 1, 24, 24, 24), dtype=np.float32)),
                    "train", np.random.default_rng(0))


def test_nodule_rejects_window_not_dividing_bottleneck():
    # 32^3 input gives a 2^3 bottleneck; a 4-wide window cannot tile it
    with pytest.raises(ValueError):
        _nodule(geometry=(1, 32, 32, 32), window=(4, 4, 4))


def test_nodule_eval_forward_deterministic():
    net = _nodule(rate=0.5)
    x = Var(np.random.default_rng(5).standard_normal(
        (1, 1, 16, 16, 16)).astype(np.float32))
    net.forward(x, "train", np.random.default_rng(0))
    p1 = net.forward(x, "eval")
    p2 = net.forward(x, "eval")
    assert np.array_equal(p1.data, p2.data)


def test_nodule_param_names_unique():
    names = [p.name for p in _nodule().params()]
    assert len(names) == len(set(names))


def test_nodule_batchnorms_enumerated():
    net = _nodule()
    bns = list(net.batchnorms())
    # 5 double-conv encoder/bottleneck blocks + 4 decoder blocks, 2 BNs each
    assert len(bns) == 18
    assert len({bn.name for bn in bns}) == 18


# ---------------------------------------------------------------------------
# predict_volume
# ---------------------------------------------------------------------------

def test_predict_volume_threshold_semantics():
    net = _nodule()
    x = np.random.default_rng(6).standard_normal(
        (1, 1, 16, 16, 16)).astype(np.float32)
    mask = predict_volume(net, x, 0.5)
    vals = np.unique(mask.data)
    assert set(vals.tolist()) <= {0.0, 1.0}
    prob = net.forward(Var(x), "eval").data
    assert np.array_equal(mask.data, (prob >= 0.5).astype(np.float32))


def test_predict_volume_threshold_monotonic():
    net = _lung()
    x = np.random.default_rng(7).standard_normal(
        (1, 1, 7, 12, 10)).astype(np.float32)
    lo = predict_volume(net, x, 0.05).data
    hi = predict_volume(net, x, 0.6).data
    # raising the threshold never adds foreground voxels
    assert np.all(hi <= lo)


def test_predict_volume_rejects_bad_threshold():
    net = _nodule()
    x = np.zeros((1, 1, 16, 16, 16), dtype=np.float32)
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            predict_volume(net, x, bad)


def test_predict_volume_leaves_no_graph():
    net = _nodule()
    x = np.zeros((1, 1, 16, 16, 16), dtype=np.float32)
    predict_volume(net, x, 0.5)
    assert ag.grad_on()  # context manager restored recording
