"""Adam optimizer, the sequential training loop, checkpointing, evaluation.

Training iterates samples one at a time, reshuffling order each epoch from
the run seed. After every epoch the validation split is scored at threshold
0.5 and the best-by-validation-Dice checkpoint is retained alongside the
rolling last checkpoint. Everything downstream of (seed, manifest, config)
is deterministic, so logs and checkpoints are byte-identical across reruns.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .data import SplitManifest, load_sample
from .losses import SegMetrics, combined_term, seg_metrics
from .networks import NetworkConfig, build_network, predict_volume
from .tensor import load_array, save_array

LOG_HEADER = "epoch,train_loss,val_dice,val_iou"


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState) -> None:
    """One Adam update over parallel lists of parameter Vars and gradients."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for var, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(var.data)
        g = np.asarray(g)
        if g.shape != var.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape "
                             f"{var.data.shape} for {var.name!r}")
        m = state.m.get(var.name)
        if m is None:
            m = state.m[var.name] = np.zeros_like(var.data)
            state.v[var.name] = np.zeros_like(var.data)
        v = state.v[var.name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        var.data[...] = var.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TrainState:
    net: object
    kind: str
    config: NetworkConfig
    adam: AdamState
    epoch: int
    seed: int
    best_val_dice: float


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _named_tensors(net):
    for var in net.params():
        yield var.name, var.data, "parameter"
    for bn in net.batchnorms():
        yield f"{bn.name}.running_mean", bn.state.running_mean, "running_stat"
        yield f"{bn.name}.running_var", bn.state.running_var, "running_stat"


def save_checkpoint(ckpt_dir, state: TrainState) -> None:
    """Manifest JSON plus one raw/json tensor pair per named buffer."""
    os.makedirs(ckpt_dir, exist_ok=True)
    tensors = {}
    for name, arr, role in _named_tensors(state.net):
        save_array(arr, os.path.join(ckpt_dir, name))
        tensors[name] = {"file": name, "role": role}
    for name, buf in state.adam.m.items():
        fname = f"adam.m.{name}"
        save_array(buf, os.path.join(ckpt_dir, fname))
        tensors[fname] = {"file": fname, "role": "adam_moment1"}
    for name, buf in state.adam.v.items():
        fname = f"adam.v.{name}"
        save_array(buf, os.path.join(ckpt_dir, fname))
        tensors[fname] = {"file": fname, "role": "adam_moment2"}
    manifest = {
        "kind": state.kind,
        "config": {
            "stage_channels": state.config.stage_channels,
            "input_geometry": list(state.config.input_geometry),
            "attn_window": list(state.config.attn_window),
            "dropout_rate": state.config.dropout_rate,
            "output_channels": state.config.output_channels,
        },
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps,
                 "t": state.adam.t},
        "epoch": state.epoch,
        "seed": state.seed,
        "best_val_dice": state.best_val_dice,
        "tensors": tensors,
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w",
              encoding="ascii") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(ckpt_dir) -> TrainState:
    """Rebuild the network and optimizer state from a checkpoint directory."""
    with open(os.path.join(ckpt_dir, "manifest.json"), "r",
              encoding="ascii") as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    config = NetworkConfig(stage_channels=cfg["stage_channels"],
                           input_geometry=tuple(cfg["input_geometry"]),
                           attn_window=tuple(cfg["attn_window"]),
                           dropout_rate=cfg["dropout_rate"],
                           output_channels=cfg["output_channels"])
    net = build_network(manifest["kind"], config, manifest["seed"])
    tensors = manifest["tensors"]

    for var in net.params():
        if var.name not in tensors:
            raise ValueError(f"checkpoint missing parameter {var.name!r}")
        arr = load_array(os.path.join(ckpt_dir, tensors[var.name]["file"]))
        if arr.shape != var.data.shape:
            raise ValueError(f"checkpoint shape {arr.shape} != expected "
                             f"{var.data.shape} for {var.name!r}")
        var.data = arr
    for bn in net.batchnorms():
        bn.state.running_mean = load_array(
            os.path.join(ckpt_dir, f"{bn.name}.running_mean"))
        bn.state.running_var = load_array(
            os.path.join(ckpt_dir, f"{bn.name}.running_var"))

    a = manifest["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                     eps=a["eps"], t=a["t"])
    for name, entry in tensors.items():
        if entry["role"] == "adam_moment1":
            adam.m[name[len("adam.m."):]] = load_array(
                os.path.join(ckpt_dir, entry["file"]))
        elif entry["role"] == "adam_moment2":
            adam.v[name[len("adam.v."):]] = load_array(
                os.path.join(ckpt_dir, entry["file"]))
    return TrainState(net=net, kind=manifest["kind"], config=config,
                      adam=adam, epoch=manifest["epoch"],
                      seed=manifest["seed"],
                      best_val_dice=manifest["best_val_dice"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(net, ids, sample_dir, threshold: float = 0.5):
    """Score each sample at the threshold; returns (mean SegMetrics, rows)."""
    rows = []
    for sid in ids:
        sample = load_sample(sample_dir, sid)
        pred = predict_volume(net, sample.image, threshold)
        metrics = seg_metrics(pred, sample.mask)
        row = {"id": sid}
        row.update(metrics.as_dict())
        rows.append(row)
    if not rows:
        return SegMetrics(0.0, 0.0, 0.0, 0.0), rows
    agg = SegMetrics(
        dice_score=float(np.mean([r["dice"] for r in rows])),
        iou=float(np.mean([r["iou"] for r in rows])),
        precision=float(np.mean([r["precision"] for r in rows])),
        recall=float(np.mean([r["recall"] for r in rows])),
    )
    return agg, rows


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _epoch_order(train_ids, seed: int, epoch: int):
    rng = np.random.default_rng([int(seed), 0xE70C, int(epoch)])
    return [train_ids[i] for i in rng.permutation(len(train_ids))]


def train_step(net, params, sample, adam: AdamState, drop_rng) -> float:
    """Forward, combined loss, backward, one Adam update. Returns the loss."""
    x = Var(sample.image.data)
    p = net.probability(x, "train", drop_rng)
    loss = combined_term(p, sample.mask.data)
    ag.zero_grads(params)
    ag.run_backward(loss)
    adam_step(params, [v.grad for v in params], adam)
    return float(loss.data)


def train(kind: str, manifest: SplitManifest, sample_dir, out_dir,
          config: NetworkConfig, epochs: int = 100, lr: float = 1e-4,
          seed: int = 0, threshold: float = 0.5,
          resume_from=None) -> TrainState:
    """Run the full loop; writes log.csv, best/ and last/ checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.kind != kind:
            raise ValueError(f"checkpoint is for {state.kind!r}, not {kind!r}")
        start_epoch = state.epoch + 1
        if not os.path.exists(log_path):
            with open(log_path, "w", encoding="ascii") as fh:
                fh.write(LOG_HEADER + "\n")
    else:
        net = build_network(kind, config, seed)
        state = TrainState(net=net, kind=kind, config=config,
                           adam=AdamState(lr=lr), epoch=-1, seed=seed,
                           best_val_dice=-1.0)
        start_epoch = 0
        with open(log_path, "w", encoding="ascii") as fh:
            fh.write(LOG_HEADER + "\n")

    params = list(state.net.params())
    for epoch in range(start_epoch, epochs):
        order = _epoch_order(manifest.train, state.seed, epoch)
        losses = []
        for step, sid in enumerate(order):
            try:
                sample = load_sample(sample_dir, sid)
            except (OSError, ValueError) as exc:
                raise RuntimeError(f"failed to load sample {sid!r}: {exc}") from exc
            drop_rng = np.random.default_rng(
                [state.seed, 0xD409, epoch, step])
            losses.append(train_step(state.net, params, sample, state.adam,
                                     drop_rng))
        train_loss = float(np.mean(losses)) if losses else 0.0

        agg, _ = evaluate(state.net, manifest.val, sample_dir, threshold)
        state.epoch = epoch
        if agg.dice_score > state.best_val_dice:
            state.best_val_dice = agg.dice_score
            save_checkpoint(os.path.join(out_dir, "best"), state)
        save_checkpoint(os.path.join(out_dir, "last"), state)
        with open(log_path, "a", encoding="ascii") as fh:
            fh.write(f"{epoch},{train_loss!r},{agg.dice_score!r},"
                     f"{agg.iou!r}\n")
    return state
