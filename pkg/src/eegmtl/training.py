"""Training loop, learning-rate schedule, optimizers, metrics and run reports."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batch_iter
from .model import MTLTransformer, state_dict
from .rng import RngStream
from .tensor import backward, no_grad

logger = logging.getLogger(__name__)

LOSS_KEYS = ("main", "recon", "pupil", "l2", "total")
LR_FORMULA = "lr = base_lr * decay_factor ** floor(epoch / decay_every)"


class NumericAbort(RuntimeError):
    def __init__(self, epoch, batch, detail):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


class NonFiniteGradient(RuntimeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")


@dataclass
class TrainConfig:
    epochs: int = 15
    base_lr: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 6
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    clip_norm: float | None = 1.0
    alpha_recon: float | None = None
    alpha_pupil: float | None = None
    l2_coeff: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``decay_factor`` every ``decay_every`` epochs."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


# -- optimizers ------------------------------------------------------------------
def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)


class SGD:
    def step(self, params: dict, grads: dict, lr: float):
        _check_finite(grads)
        for name, p in params.items():
            p.data = p.data - np.asarray(lr, p.dtype) * grads[name]


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: dict, grads: dict, lr: float):
        _check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def make_optimizer(name):
    return Adam() if name == "adam" else SGD()


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * factor).astype(grads[k].dtype, copy=False)
    return norm


# -- metrics ---------------------------------------------------------------------
def rmse_mm(preds, targets) -> float:
    """Root of the mean squared Euclidean distance between 2-D positions."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if p.shape != t.shape or len(p) == 0:
        raise ValueError(f"rmse_mm needs matching non-empty n x 2 arrays, got {p.shape} and {t.shape}")
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=1))))


def naive_baseline(train_targets, eval_targets) -> float:
    """RMSE of predicting the training-set mean position for every sample."""
    train_targets = np.asarray(train_targets, dtype=np.float64).reshape(-1, 2)
    if len(train_targets) == 0:
        raise ValueError("naive_baseline needs a non-empty training set")
    eval_targets = np.asarray(eval_targets, dtype=np.float64).reshape(-1, 2)
    return rmse_mm(np.broadcast_to(train_targets.mean(axis=0), eval_targets.shape), eval_targets)


def predict(model: MTLTransformer, ds: Dataset, batch_size=256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for batch in batch_iter(ds, batch_size):
            out.append(model.predict_gaze(model.represent(batch.eeg)).data.reshape(-1, 2))
    return np.concatenate(out).astype(np.float64)


def evaluate(model: MTLTransformer, ds: Dataset, batch_size=256) -> float:
    return rmse_mm(predict(model, ds, batch_size), ds.gaze)


def mean_std(values):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# -- reports -----------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: dict
    val_rmse: float
    steps: int


@dataclass
class RunReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = math.inf
    test_rmse: float | None = None
    naive_test_rmse: float | None = None
    seed: int = 0
    config_hash: str = ""
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    lr_formula: str = LR_FORMULA
    wall_time: float = field(default=0.0, compare=False)

    @property
    def lrs(self):
        return [e.lr for e in self.epochs]

    @property
    def val_rmse(self):
        return [e.val_rmse for e in self.epochs]

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)

    def to_table(self) -> str:
        head = "epoch\tlr\t" + "\t".join(f"train_{k}" for k in LOSS_KEYS) + "\tval_rmse_mm"
        rows = [head]
        for e in self.epochs:
            cells = [str(e.epoch), f"{e.lr:.6g}"] + [f"{e.losses[k]:.6g}" for k in LOSS_KEYS] + [f"{e.val_rmse:.4f}"]
            rows.append("\t".join(cells))
        tail = f"# best_epoch={self.best_epoch} best_val_rmse={self.best_val_rmse:.4f}"
        if self.test_rmse is not None:
            tail += f" test_rmse={self.test_rmse:.4f}"
        if self.naive_test_rmse is not None:
            tail += f" naive_test_rmse={self.naive_test_rmse:.4f}"
        return "\n".join(rows + [tail, f"# {self.lr_formula}", f"# seed={self.seed} config={self.config_hash}"]) + "\n"


def config_hash(model_cfg, train_cfg) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- the loop ----------------------------------------------------------------------
def apply_overrides(model: MTLTransformer, cfg: TrainConfig):
    changes = {k: getattr(cfg, k) for k in ("alpha_recon", "alpha_pupil", "l2_coeff") if getattr(cfg, k) is not None}
    if changes:
        model.cfg = model.cfg.replace(**changes)


def train(model: MTLTransformer, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          test_ds: Dataset | None = None, calibrate=True, on_epoch=None, restore_best=True) -> RunReport:
    """Fit ``model`` on ``train_ds``; keep the parameters with the best validation RMSE.

    With ``restore_best`` false the final parameters are kept instead.
    With ``calibrate`` the gaze output buffers are set to the training-split
    mean and standard deviation before the first step. ``cfg.max_steps`` stops
    early (the partially finished epoch is still evaluated).
    """
    start = time.perf_counter()
    apply_overrides(model, cfg)
    if model.cfg.use_pupil and not train_ds.has_pupil:
        raise ValueError("pupil head enabled but the dataset has no pupil targets (has-pupil flag unset)")
    if (train_ds.channels, train_ds.timesteps) != (model.cfg.channels, model.cfg.timesteps):
        raise ValueError(f"dataset geometry {train_ds.channels}x{train_ds.timesteps} does not match model "
                         f"{model.cfg.channels}x{model.cfg.timesteps}")
    if calibrate:
        model.set_target_stats(train_ds.gaze.mean(axis=0), train_ds.gaze.std(axis=0) + 1e-6)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer)
    report = RunReport(seed=cfg.seed, config_hash=config_hash(model.cfg, cfg),
                       model_config=model.cfg.to_dict(), train_config=cfg.to_dict())
    best_state = None
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        model.train()
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        seen = 0
        for bi, batch in enumerate(batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch)):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            model.zero_grad()
            out = model.total_loss(batch.eeg, batch.gaze, batch.pupil if model.cfg.use_pupil else None,
                                   rng=RngStream(cfg.seed, ("dropout", epoch, bi)))
            values = out.loss_values()
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericAbort(epoch, bi, values)
            backward(out.losses["total"])
            grads = {k: p.grad for k, p in params.items()}
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads, lr)
            n = len(batch.indices)
            for k in LOSS_KEYS:
                sums[k] += values[k] * n
            seen += n
            step += 1
        if seen == 0:
            break
        val = evaluate(model, val_ds)
        report.epochs.append(EpochRecord(epoch, lr, {k: sums[k] / seen for k in LOSS_KEYS}, val, step))
        logger.info("epoch %d lr %.3g main %.4g val_rmse %.3f", epoch, lr, sums["main"] / seen, val)
        if on_epoch is not None:
            on_epoch(report.epochs[-1])
        if val < report.best_val_rmse:
            report.best_val_rmse, report.best_epoch = val, epoch
            best_state = {k: v.copy() for k, v in state_dict(model).items()}
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if restore_best and best_state is not None:
        for k, p in params.items():
            p.data = best_state[k]
    model.eval()
    if test_ds is not None:
        report.test_rmse = evaluate(model, test_ds)
        report.naive_test_rmse = naive_baseline(train_ds.gaze, test_ds.gaze)
    report.wall_time = time.perf_counter() - start
    return report


# -- weight sweep ----------------------------------------------------------------------
DEFAULT_WEIGHTS = (0.0, 17.5, 35.0, 70.0, 140.0, 280.0, 560.0)


@dataclass
class SweepRow:
    weight: float
    seed: int
    val_rmse: float | None
    test_rmse: float | None
    error: str = ""


def run_sweep(weights, seeds, make_model, make_data, train_cfg: TrainConfig, target="alpha_recon",
              on_row=None) -> list:
    """Train once per (weight, seed) pair; each seed fixes data, split and init across weights.

    ``make_model(seed, **{target: w})`` builds a fresh model and
    ``make_data(seed)`` returns ``(train, val, test)``. Failed runs are kept as
    rows with ``error`` set. Rows come back sorted by weight, then seed.
    """
    weights = [float(w) for w in weights]
    if not weights:
        raise ValueError("sweep needs at least one weight")
    if any(w < 0 for w in weights):
        raise ValueError(f"sweep weights must be non-negative, got {weights}")
    if any(b <= a for a, b in zip(weights, weights[1:])):
        raise ValueError(f"sweep weights must be strictly increasing, got {weights}")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    if target not in ("alpha_recon", "alpha_pupil"):
        raise ValueError(f"sweep target must be alpha_recon or alpha_pupil, got {target!r}")
    rows = []
    for seed in seeds:
        tr, va, te = make_data(seed)
        for w in weights:
            cfg = dataclasses.replace(train_cfg, seed=seed, **{target: w})
            try:
                rep = train(make_model(seed, **{target: w}), tr, va, cfg, te)
                row = SweepRow(w, seed, rep.best_val_rmse, rep.test_rmse)
            except (NumericAbort, NonFiniteGradient) as exc:
                row = SweepRow(w, seed, None, None, str(exc))
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return sorted(rows, key=lambda r: (r.weight, r.seed))


def sweep_summary(rows) -> dict:
    """Per-weight ``(mean, std, n_ok)`` of test RMSE over successful runs."""
    out = {}
    for w in sorted({r.weight for r in rows}):
        vals = [r.test_rmse for r in rows if r.weight == w and r.test_rmse is not None]
        out[w] = (*mean_std(vals), len(vals)) if vals else (math.nan, math.nan, 0)
    return out


def sweep_csv(rows) -> str:
    lines = ["weight,seed,val_rmse_mm,test_rmse_mm,error"]
    for r in sorted(rows, key=lambda r: (r.weight, r.seed)):
        fmt = lambda v: "" if v is None else repr(float(v))
        lines.append(f"{r.weight!r},{r.seed},{fmt(r.val_rmse)},{fmt(r.test_rmse)},{r.error.replace(',', ';')}")
    return "\n".join(lines) + "\n"
