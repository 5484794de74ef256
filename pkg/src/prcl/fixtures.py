"""Desk-scale reference networks shipped as checkpoint files.

* ``mlp``: 4 dense layers on two-moons.
* ``resmlp``: 6 residual blocks on 10-class Gaussian blobs.
* ``convnet``: 2 convolutions, global pooling and a dense head on 8x8 digits.

Each fixture regenerates its dataset from a pinned seed.  The training part
is split into a calibration head and an evaluation remainder; a held-out test
part is kept for generalization checks.  ``python3 -m prcl.fixtures`` retrains and rewrites
the checkpoint files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, generate_dataset
from .network import (LayerSpec, Network, build_network, conv, dense, global_avg_pool, load_checkpoint,
                      relu, residual_block, save_checkpoint, train)


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    loss_kind: str
    data_kind: str
    n_train: int
    n_test: int
    data_seed: int
    init_seed: int
    # (lr, epochs) stages of full-batch momentum descent
    schedule: tuple[tuple[float, int], ...]
    data_params: dict = field(default_factory=dict)
    calib: int = 256
    input_shape: tuple[int, ...] | None = None


FIXTURES = {
    "mlp": FixtureSpec(
        "mlp",
        (dense(2, 16), relu(), dense(16, 16), relu(), dense(16, 16), relu(), dense(16, 2)),
        "softmax_cross_entropy", "two_moons", 2048, 4096, 11, 3,
        ((0.1, 1000), (0.03, 1000)),
        {"noise": 0.15},
    ),
    "resmlp": FixtureSpec(
        "resmlp",
        (dense(8, 16), relu(), *[residual_block(width=16) for _ in range(6)], dense(16, 10)),
        "softmax_cross_entropy", "gaussian_blobs", 4000, 4096, 5, 7,
        ((0.05, 800), (0.02, 800)),
        {"classes": 10, "dim": 8, "separation": 1.5},
    ),
    "convnet": FixtureSpec(
        "convnet",
        (conv(1, 8), relu(), conv(8, 16, stride=2), relu(), global_avg_pool(), dense(16, 10)),
        "softmax_cross_entropy", "digits8x8", 600, 1024, 2, 4,
        ((0.1, 1500), (0.03, 1500), (0.01, 1500)),
        input_shape=(1, 8, 8),
    ),
}


def fixture_names() -> list[str]:
    return list(FIXTURES)


def _spec(name: str) -> FixtureSpec:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose one of {', '.join(FIXTURES)}")
    return FIXTURES[name]


def split_train(train_set: Dataset, calib: int) -> dict[str, Dataset]:
    """Calibration = the first ``calib`` training samples; evaluation = the rest."""
    if not 1 <= calib < train_set.m:
        raise ValueError(f"calibration size {calib} must be in [1, {train_set.m - 1}]")
    idx = np.arange(train_set.m)
    return {"calib": train_set.subset(idx[:calib], "calib"), "eval": train_set.subset(idx[calib:], "eval")}


def fixture_data(name: str, calib: int | None = None) -> dict[str, Dataset]:
    """``train``, ``calib``, ``eval`` and held-out ``test`` splits.

    Calibration and evaluation samples are disjoint parts of the training set,
    the data on which the network sits at a stationary point of the loss.
    """
    s = _spec(name)
    full = generate_dataset(s.data_kind, s.n_train + s.n_test, s.data_seed, **s.data_params)
    idx = np.arange(full.m)
    train_set = full.subset(idx[:s.n_train], "train")
    out = {"train": train_set, "test": full.subset(idx[s.n_train:], "test")}
    out.update(split_train(train_set, s.calib if calib is None else calib))
    return out


def fixture_path(name: str) -> Path:
    _spec(name)
    return Path(str(resources.files("prcl") / "fixture_data" / f"{name}.prcl"))


def load_fixture(name: str) -> Network:
    return load_checkpoint(fixture_path(name))


def train_fixture(name: str, log=print) -> Network:
    s = _spec(name)
    data = fixture_data(name)["train"]
    net = build_network(s.layers, s.loss_kind, s.init_seed, s.input_shape)
    for lr, epochs in s.schedule:
        ck = train(net, data, opt="momentum", lr=lr, epochs=epochs, grad_norm_target=1e-6)
        if log:
            log(f"{name}: lr={lr} loss={ck.meta['final_loss']:.6f} grad_norm={ck.meta['grad_norm']:.3e}")
    net.meta["fixture"] = name
    net.meta["grad_norm_target"] = 1e-3
    return net


def accuracy(net: Network, data: Dataset) -> float:
    from .network import forward_capture
    _, sites = forward_capture(net, data)
    return float(np.mean(np.argmax(sites[-1], axis=1) == data.labels))


def main(names: list[str] | None = None) -> None:
    for name in names or FIXTURES:
        net = train_fixture(name)
        path = fixture_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path, net.meta)
        print(f"{name}: wrote {path} (train accuracy {accuracy(net, fixture_data(name)['train']):.3f})")


if __name__ == "__main__":
    import sys
    main(sys.argv[1:])
