"""SGD with momentum that records a checkpointed trajectory."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import FlatParams, Graph, ParamLayout, forward_loss, init_params, value_and_gradient
from ..errors import ConfigError, FormatError, NumericError, TrainingDiverged
from .checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from .data import Dataset

log = logging.getLogger(__name__)

# LeNet-style defaults; 0.01 also trains well on the synthetic data
DEFAULT_LR = 0.001
DEFAULT_MOMENTUM = 0.9
DEFAULT_BATCH = 256


@dataclass
class OptimizerConfig:
    learning_rate: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    batch_size: int = DEFAULT_BATCH
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 1

    def validate(self) -> "OptimizerConfig":
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, epochs and checkpoint_every must be >= 1")
        return self


@dataclass
class Snapshot:
    iteration: int
    params: FlatParams
    loss: float
    # (epoch, batch index) the loss was measured on
    batch: tuple = (0, 0)


@dataclass
class Trajectory:
    snapshots: list
    model_spec: dict = field(default_factory=dict)
    optimizer: OptimizerConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        its = [s.iteration for s in self.snapshots]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ConfigError("snapshot iterations must be strictly increasing")
        if self.snapshots:
            lay = self.snapshots[0].params.layout
            for s in self.snapshots[1:]:
                s.params.check_layout(lay, "snapshot")

    def __len__(self):
        return len(self.snapshots)

    @property
    def layout(self) -> ParamLayout:
        return self.snapshots[0].params.layout

    @property
    def final(self) -> FlatParams:
        return self.snapshots[-1].params

    def matrix(self) -> np.ndarray:
        """Snapshots stacked as rows, shape [n, N]."""
        return np.stack([s.params.values for s in self.snapshots])


def train_sgd(model: Graph, dataset: Dataset, cfg: OptimizerConfig, init: FlatParams | None = None,
              init_seed: int = 0) -> Trajectory:
    """Minibatch SGD with momentum: u <- mu*u + g; theta <- theta - lr*u, u starting at 0.

    A snapshot (parameters before the update, loss on that step's batch) is
    kept every ``checkpoint_every`` iterations, plus the final parameters with
    their loss on the last batch.
    """
    cfg.validate()
    if init is None:
        init = init_params(model, init_seed)
    init.check_layout(model.layout, "initial parameters")
    theta = init.values.copy()
    u = np.zeros_like(theta)
    snaps: list[Snapshot] = []
    meta = {"dataset": dict(dataset.meta), "init_seed": init_seed}

    def trajectory():
        return Trajectory(snaps, dict(model.spec), cfg, meta)

    t = 0
    last = None
    for epoch in range(cfg.epochs):
        for bi, batch in enumerate(dataset.batches(cfg.batch_size, cfg.seed, epoch)):
            try:
                loss, g = value_and_gradient(model, theta, batch)
            except NumericError as exc:
                raise TrainingDiverged(f"iteration {t}: {exc}", trajectory()) from exc
            if t % cfg.checkpoint_every == 0:
                snaps.append(Snapshot(t, FlatParams(theta.copy(), model.layout), loss, (epoch, bi)))
            u = cfg.momentum * u + g.values
            theta = theta - cfg.learning_rate * u
            last = (epoch, bi, batch)
            t += 1
    epoch, bi, batch = last
    try:
        loss = forward_loss(model, theta, batch)
    except NumericError as exc:
        raise TrainingDiverged(f"final point: {exc}", trajectory()) from exc
    snaps.append(Snapshot(t, FlatParams(theta, model.layout), loss, (epoch, bi)))
    log.info("trained %d iterations, final batch loss %.6g", t, loss)
    return trajectory()


def expected_snapshot_count(total_iters: int, every: int) -> int:
    return -(-total_iters // every) + 1


def save_trajectory(directory, traj: Trajectory, extra: dict | None = None) -> Path:
    """Write ``iter_%06d.gvck`` files (with layout sidecars) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in traj.snapshots:
        name = checkpoint_name(s.iteration)
        save_checkpoint(d / name, s.params)
        entries.append({"iteration": s.iteration, "file": name, "loss": s.loss, "batch": list(s.batch)})
    manifest = {
        "model": traj.model_spec,
        "optimizer": asdict(traj.optimizer) if traj.optimizer else None,
        "layout": traj.layout.to_json(),
        "snapshots": entries,
        "meta": traj.meta,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no trajectory manifest in {d}")
    manifest = json.loads(mf.read_text())
    layout = ParamLayout.from_json(manifest["layout"])
    snaps = []
    for e in manifest["snapshots"]:
        p = load_checkpoint(d / e["file"], layout)
        if len(p) != layout.total_count:
            raise FormatError(f"{e['file']} does not match the manifest layout")
        snaps.append(Snapshot(int(e["iteration"]), p, float(e["loss"]), tuple(e.get("batch", (0, 0)))))
    opt = OptimizerConfig(**manifest["optimizer"]) if manifest.get("optimizer") else None
    meta = dict(manifest.get("meta") or {})
    for key in manifest:
        if key not in ("model", "optimizer", "layout", "snapshots", "meta"):
            meta[key] = manifest[key]
    return Trajectory(snaps, manifest.get("model") or {}, opt, meta)
