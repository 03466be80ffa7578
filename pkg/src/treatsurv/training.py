"""MAE training with Adam, evaluation, checkpoints and the fusion ablation.

Checkpoint layout::

    b"CKPT1" | uint64 LE header length | JSON header | float64 LE blobs

The header holds the model config, a parameter manifest (name, shape, byte
offset of the value / first moment / second moment), Adam hyperparameters,
the step and epoch counters and the loss history. Blobs follow in manifest
order: all parameter values, then all first moments, then all second moments.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .conditioning import onehot_matrix
from .data import FoldSplit, normalize_volume, stratified_kfold, survival_array
from .exceptions import ConfigError, FormatError, NumericalError, ShapeError
from .model import FUSION_MODES, SurvivalNet, SurvivalNetConfig, build
from .tensor import Tensor, UnfoldedVolumes, backward, mae, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CKPT1"
_LEN = struct.Struct("<Q")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    k: int = 5
    split_seed: int = 0
    # rescale the head around the training median / mean absolute deviation
    fit_output_scale: bool = True
    model: SurvivalNetConfig = field(default_factory=SurvivalNetConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.model, dict):
            self.model = SurvivalNetConfig.from_dict(self.model)

    @property
    def fusion(self) -> str:
        return self.model.fusion

    def with_fusion(self, fusion: str) -> "TrainConfig":
        return replace(self, model=replace(self.model, fusion=fusion))

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with bias-corrected moments; parameters are updated in place."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.named_params = list(named_params)
        self.lr = float(lr)
        self.betas = tuple(betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for (_, p), m, v in zip(self.named_params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps}


# ---------------------------------------------------------------------------
# inputs


def prepare_volumes(samples) -> np.ndarray:
    return np.stack([normalize_volume(s.volume, s.subject_id) for s in samples])


def unfold_samples(samples, model_config: SurvivalNetConfig) -> UnfoldedVolumes:
    """Normalize and unfold every sample once; index the result per batch."""
    k = model_config.kernel_size
    return UnfoldedVolumes.from_volumes(prepare_volumes(samples), k, k // 2)


def fit_output_calibration(y: np.ndarray) -> tuple:
    center = float(np.median(y))
    spread = float(np.mean(np.abs(y - center)))
    return center, spread if spread > 0 else 1.0


class Trainer:
    """Owns one model, its optimizer, and the epoch counter of a training run.

    Minibatch order in epoch ``e`` is a permutation seeded by ``(seed, e)``,
    so a run restored from a checkpoint continues exactly where it stopped.
    """

    def __init__(self, samples, config: TrainConfig, inputs: UnfoldedVolumes | None = None,
                 net: SurvivalNet | None = None, optimizer: Adam | None = None,
                 epoch: int = 0, history=None):
        if not samples:
            raise ConfigError("cannot train on an empty sample set")
        self.config = config.validate()
        self.samples = list(samples)
        self.targets = survival_array(self.samples)
        self.onehots = onehot_matrix([s.treatment for s in self.samples])
        self.inputs = inputs if inputs is not None else unfold_samples(self.samples, config.model)
        if len(self.inputs) != len(self.samples):
            raise ShapeError(f"{len(self.inputs)} prepared inputs for {len(self.samples)} samples")
        if net is None:
            model_cfg = replace(config.model, seed=config.seed)
            if config.fit_output_scale:
                offset, scale = fit_output_calibration(self.targets)
                model_cfg = replace(model_cfg, output_offset=offset, output_scale=scale)
            net = build(model_cfg)
        self.net = net
        self.optimizer = optimizer or Adam(net.named_parameters(), config.learning_rate, config.betas, config.eps)
        self.epoch = epoch
        self.history = list(history or [])

    def run_epoch(self) -> float:
        n = len(self.samples)
        bs = self.config.batch_size
        order = np.random.default_rng([self.config.seed, self.epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            self.net.zero_grad()
            pred = self.net(self.inputs.take(idx), self.onehots[idx])
            loss = mae(pred, Tensor(self.targets[idx, None]))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {self.epoch + 1}, batch {b}")
            backward(loss)
            self.optimizer.step()
            total += value * len(idx)
        self.epoch += 1
        mean_loss = total / n
        self.history.append(mean_loss)
        return mean_loss

    def run(self, epochs: int | None = None) -> list:
        target = self.epoch + (self.config.epochs if epochs is None else epochs)
        while self.epoch < target:
            loss = self.run_epoch()
            logger.debug("epoch %d train MAE %.3f", self.epoch, loss)
        return self.history

    def save(self, path) -> None:
        save_checkpoint(self.net, self.optimizer, path, epoch=self.epoch, history=self.history,
                        train_config=self.config)

    @classmethod
    def resume(cls, path, samples, config: TrainConfig, inputs=None) -> "Trainer":
        net, state = load_checkpoint(path, config.model)
        optimizer = Adam(net.named_parameters(), **state["optimizer"])
        optimizer.step_count = state["step"]
        optimizer.m = state["m"]
        optimizer.v = state["v"]
        return cls(samples, config, inputs=inputs, net=net, optimizer=optimizer,
                   epoch=state["epoch"], history=state["history"])


def train_fold(train_samples, config: TrainConfig, inputs: UnfoldedVolumes | None = None):
    """Train a fresh model for ``config.epochs``; returns ``(net, loss_history)``."""
    trainer = Trainer(train_samples, config, inputs=inputs)
    trainer.run()
    return trainer.net, trainer.history


# ---------------------------------------------------------------------------
# evaluation


def predict(net: SurvivalNet, samples=None, inputs=None, treatments=None, batch_size: int = 32) -> np.ndarray:
    """Raw predicted days, one per sample, each with its own (or the given) treatment."""
    if inputs is None:
        inputs = unfold_samples(samples, net.config)
    if treatments is None:
        treatments = [s.treatment for s in samples]
    onehots = onehot_matrix(treatments)
    if onehots.shape[0] == 1 and len(inputs) > 1:
        onehots = np.repeat(onehots, len(inputs), axis=0)
    out = np.empty(len(inputs))
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            idx = np.arange(start, min(start + batch_size, len(inputs)))
            out[idx] = net(inputs.take(idx), onehots[idx]).data[:, 0]
    return out


def evaluate(net: SurvivalNet, samples, inputs=None) -> float:
    """Mean absolute error in days over ``samples``."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty sample set")
    pred = predict(net, samples, inputs=inputs)
    return float(np.mean(np.abs(pred - survival_array(samples))))


# ---------------------------------------------------------------------------
# cross-validation and ablation


@dataclass
class RunReport:
    fusion: str
    seed: int
    fold_mae: list
    mean: float
    std: float
    loss_history: list
    runtime_seconds: float
    config: dict

    @classmethod
    def from_folds(cls, fusion, seed, fold_mae, loss_history, runtime, config) -> "RunReport":
        arr = np.asarray(fold_mae, dtype=float)
        return cls(fusion, seed, [float(v) for v in arr], float(arr.mean()), float(arr.std()),
                   loss_history, runtime, config)

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def cross_validate(samples, config: TrainConfig, split: FoldSplit | None = None, inputs=None,
                   checkpoint_dir=None) -> RunReport:
    """Subject-independent K-fold training and testing for one fusion mode and seed."""
    config.validate()
    split = split or stratified_kfold(samples, config.k, config.split_seed)
    inputs = inputs if inputs is not None else unfold_samples(samples, config.model)
    started = time.perf_counter()
    fold_mae, histories = [], []
    for fold in range(split.k):
        train_idx, test_idx = split.indices(samples, fold)
        trainer = Trainer([samples[i] for i in train_idx], config, inputs=inputs.take(train_idx))
        trainer.run()
        fold_mae.append(evaluate(trainer.net, [samples[i] for i in test_idx], inputs=inputs.take(test_idx)))
        histories.append(trainer.history)
        if checkpoint_dir is not None:
            trainer.save(Path(checkpoint_dir) / f"fold{fold}.ckpt")
        logger.info("fusion=%s seed=%d fold=%d test MAE %.2f", config.fusion, config.seed, fold, fold_mae[-1])
    return RunReport.from_folds(config.fusion, config.seed, fold_mae, histories,
                                time.perf_counter() - started, config.to_dict())


@dataclass
class AblationRow:
    fusion: str
    mean: float  # mean over seeds of the per-seed mean fold MAE
    std: float  # population std of the per-seed means
    fold_std: float  # per-seed std across folds, averaged over seeds
    seed_means: list


@dataclass
class AblationReport:
    rows: list
    runs: dict  # fusion -> [RunReport per seed]
    seeds: list
    config: dict

    def row(self, fusion: str) -> AblationRow:
        return next(r for r in self.rows if r.fusion == fusion)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "runs": {f: [r.to_dict() for r in runs] for f, runs in self.runs.items()},
            "seeds": list(self.seeds),
            "config": self.config,
        }

    def table(self) -> str:
        lines = [f"{'Treatment fusion':<18}| MAE (in days)", "-" * 38]
        names = {"none": "none (no treatment)", "concat": "concat", "adain": "adain"}
        for r in self.rows:
            lines.append(f"{names[r.fusion]:<18}| {r.mean:.1f} ± {r.std:.1f}")
        return "\n".join(lines)


def run_ablation(samples, config: TrainConfig, seeds=(0,), modes=FUSION_MODES) -> AblationReport:
    """Same folds, seeds and backbone for every fusion mode; only the treatment pathway differs."""
    config.validate()
    split = stratified_kfold(samples, config.k, config.split_seed)
    inputs = unfold_samples(samples, config.model)
    runs = {}
    for fusion in modes:
        runs[fusion] = [cross_validate(samples, replace(config.with_fusion(fusion), seed=int(s)),
                                       split=split, inputs=inputs) for s in seeds]
    rows = []
    for fusion in modes:
        means = np.array([r.mean for r in runs[fusion]])
        rows.append(AblationRow(fusion, float(means.mean()), float(means.std()),
                                float(np.mean([r.std for r in runs[fusion]])), [float(m) for m in means]))
    return AblationReport(rows, runs, [int(s) for s in seeds], config.to_dict())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: SurvivalNet, optimizer: Adam | None, path, epoch: int = 0, history=None,
                    train_config: TrainConfig | None = None) -> None:
    named = list(net.named_parameters())
    moments = optimizer is not None
    entries, offset = [], 0
    for name, p in named:
        nbytes = p.data.size * 8
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += nbytes
    if moments:
        for entry, (_, p) in zip(entries, named):
            entry["m_offset"] = offset
            offset += p.data.size * 8
        for entry, (_, p) in zip(entries, named):
            entry["v_offset"] = offset
            offset += p.data.size * 8
    header = {
        "model_config": net.config.to_dict(),
        "params": entries,
        "optimizer": optimizer.hyperparameters() if moments else None,
        "step": optimizer.step_count if moments else 0,
        "epoch": int(epoch),
        "history": [float(h) for h in (history or [])],
        "train_config": train_config.to_dict() if train_config is not None else None,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blobs = [p.data for _, p in named]
    if moments:
        blobs += optimizer.m + optimizer.v
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> tuple:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if len(raw) < 5 + _LEN.size:
        raise FormatError(f"{path}: truncated header length", offset=len(raw))
    (length,) = _LEN.unpack_from(raw, 5)
    start = 5 + _LEN.size
    try:
        header = json.loads(raw[start:start + length])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable JSON header", offset=start) from exc
    return header, raw, start + length


def load_checkpoint(path, config: SurvivalNetConfig | None = None):
    """Restore ``(net, state)``; ``state`` carries Adam moments and counters.

    When ``config`` is given, its architecture must reproduce the stored
    parameter manifest exactly.
    """
    header, raw, base = read_checkpoint_header(path)
    stored_cfg = SurvivalNetConfig.from_dict(header["model_config"])
    if config is not None:
        probe = build(replace(config, seed=stored_cfg.seed, output_offset=stored_cfg.output_offset,
                              output_scale=stored_cfg.output_scale))
        expected = {name: tuple(p.shape) for name, p in probe.named_parameters()}
        stored = {e["name"]: tuple(e["shape"]) for e in header["params"]}
        names = list(expected) + [n for n in stored if n not in expected]
        for name in names:
            if expected.get(name) != stored.get(name):
                raise ShapeError(f"checkpoint parameter {name!r}: stored shape {stored.get(name)} "
                                 f"but config expects {expected.get(name)}")
    net = build(stored_cfg)

    def blob(offset, shape):
        count = int(np.prod(shape))
        start = base + offset
        if start + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated parameter data", offset=len(raw))
        return np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)

    params = dict(net.named_parameters())
    if set(params) != {e["name"] for e in header["params"]}:
        raise ShapeError(f"{path}: parameter names do not match the stored model config")
    m, v = [], []
    for e in header["params"]:
        p = params[e["name"]]
        shape = tuple(e["shape"])
        if shape != p.shape:
            raise ShapeError(f"checkpoint parameter {e['name']!r}: stored shape {shape}, model has {p.shape}")
        p.data[...] = blob(e["offset"], shape)
        if header["optimizer"] is not None:
            m.append(blob(e["m_offset"], shape))
            v.append(blob(e["v_offset"], shape))
    order = [name for name, _ in net.named_parameters()]
    position = {e["name"]: i for i, e in enumerate(header["params"])}
    if header["optimizer"] is not None:
        m = [m[position[n]] for n in order]
        v = [v[position[n]] for n in order]
    state = {
        "optimizer": header["optimizer"] or {},
        "step": header["step"],
        "epoch": header["epoch"],
        "history": header["history"],
        "m": m,
        "v": v,
        "train_config": header.get("train_config"),
    }
    return net, state
