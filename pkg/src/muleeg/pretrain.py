"""Self-supervised pretraining strategies plus the supervised and random-init
baselines, with checkpointing.

Strategy wiring (``t1``/``t2`` are the two augmented epochs, ``s1``/``s2``
their spectrograms, ``Et``/``Es`` the shared encoders):

* single_time     f1(Et(t1))  vs f2(Et(t2))                      -> l_tt
* single_spec     g1(Es(s1))  vs g2(Es(s2))                      -> l_ss
* cmc             f1(Et(t1))  vs f2(Es(s2))                      -> l_ff
* simple_fusion   f1([Et(t1)|Es(s1)]) vs f2([Et(t2)|Es(s2)])     -> l_ff
* muleeg          f, g, h heads on time, spectrogram and concatenated
                  features -> l_tt, l_ss, l_ff, plus the diverse loss on
                  the f/g outputs
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import N_STAGES, EpochPool
from .encoders import (EncoderConfig, EncoderKind, Preset, ProjectionHeadConfig, build_projection_head,
                       build_spectrogram_encoder, build_time_encoder, concat_features)
from .losses import LossBundle, diverse_loss, nt_xent, total_loss
from .seeding import rng_for, seed_torch
from .transforms import AugmentationConfig, augment_t1, augment_t2, log_stft

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "l_tt", "l_ss", "l_ff", "l_d", "total", "lr")


class StrategyKind(str, Enum):
    SINGLE_TIME = "single_time"
    SINGLE_SPEC = "single_spec"
    CMC = "cmc"
    SIMPLE_FUSION = "simple_fusion"
    MULEEG = "muleeg"
    SUPERVISED = "supervised"
    RANDOM_INIT = "random_init"


SSL_STRATEGIES = (StrategyKind.SINGLE_TIME, StrategyKind.SINGLE_SPEC, StrategyKind.CMC,
                  StrategyKind.SIMPLE_FUSION, StrategyKind.MULEEG)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    strategy: StrategyKind = StrategyKind.MULEEG
    preset: Preset = Preset.PAPER
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 3e-5
    epochs: int = 140
    batch_size: int = 256
    scheduler_factor: float = 0.2
    scheduler_patience: int = 5
    tau: float = 1.0
    tau_d: float = 10.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    use_diverse: bool = True
    use_fusion: bool = True
    share_heads: bool = False
    supervised_view: EncoderKind = EncoderKind.TIME
    width_multiplier: float = 1.0
    projection_dim: int = 128
    feature_dim: int = 256
    seed: int = 0
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        self.strategy = StrategyKind(self.strategy)
        self.preset = Preset(self.preset)
        self.supervised_view = EncoderKind(self.supervised_view)
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        for name in ("lr", "tau", "tau_d", "scheduler_factor", "width_multiplier"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.weight_decay < 0:
            raise ConfigError("lambda1, lambda2 and weight_decay must be non-negative")

    @classmethod
    def for_preset(cls, preset: Preset | str, strategy: StrategyKind | str = StrategyKind.MULEEG,
                   **overrides) -> "PretrainConfig":
        """Defaults per preset. Supervised training runs longer with more patience."""
        preset, strategy = Preset(preset), StrategyKind(strategy)
        supervised = strategy is StrategyKind.SUPERVISED
        if preset is Preset.PAPER:
            base = dict(epochs=300 if supervised else 140, batch_size=256,
                        scheduler_patience=10 if supervised else 5)
        else:
            base = dict(epochs=10, batch_size=128, scheduler_patience=10 if supervised else 5)
        base.update(overrides)
        return cls(strategy=strategy, preset=preset, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- model -----------------------------------------------------------------

def _needs_spec(strategy: StrategyKind, cfg: PretrainConfig) -> bool:
    if strategy is StrategyKind.SUPERVISED:
        return cfg.supervised_view is EncoderKind.SPECTROGRAM
    return strategy in (StrategyKind.SINGLE_SPEC, StrategyKind.CMC, StrategyKind.SIMPLE_FUSION,
                        StrategyKind.MULEEG)


def _head_layout(cfg: PretrainConfig) -> dict[str, int]:
    """Head name -> input width for the configured strategy."""
    heads = _all_heads(cfg)
    if cfg.share_heads:
        heads = {k: v for k, v in heads.items() if not k.endswith("2")}
    return heads


def _all_heads(cfg: PretrainConfig) -> dict[str, int]:
    d = cfg.feature_dim
    s = cfg.strategy
    if s is StrategyKind.SINGLE_TIME:
        return {"f1": d, "f2": d}
    if s is StrategyKind.SINGLE_SPEC:
        return {"g1": d, "g2": d}
    if s is StrategyKind.CMC:
        return {"f1": d, "f2": d}
    if s is StrategyKind.SIMPLE_FUSION:
        return {"f1": 2 * d, "f2": 2 * d}
    if s is StrategyKind.MULEEG:
        heads = {"f1": d, "f2": d, "g1": d, "g2": d}
        if cfg.use_fusion:
            heads.update(h1=2 * d, h2=2 * d)
        return heads
    return {}


class MultiViewModel(nn.Module):
    """Encoders plus whatever heads the strategy uses.

    ``time_encoder`` is always present because downstream evaluation reads
    it; ``spec_encoder`` only when the strategy touches spectrograms.
    """

    def __init__(self, cfg: PretrainConfig):
        super().__init__()
        self.strategy = cfg.strategy
        self.share_heads = cfg.share_heads
        seed = cfg.seed
        enc = dict(preset=cfg.preset, width_multiplier=cfg.width_multiplier, feature_dim=cfg.feature_dim)
        self.time_encoder = build_time_encoder(EncoderConfig(kind=EncoderKind.TIME, **enc), seed=seed)
        self.spec_encoder = (build_spectrogram_encoder(EncoderConfig(kind=EncoderKind.SPECTROGRAM, **enc), seed=seed)
                             if _needs_spec(cfg.strategy, cfg) else None)
        heads = {}
        for name, in_dim in _head_layout(cfg).items():
            hcfg = ProjectionHeadConfig(in_dim=in_dim, out_dim=cfg.projection_dim)
            heads[name] = build_projection_head(hcfg, seed=seed, name=name)
        self.heads = nn.ModuleDict(heads)
        self.classifier = None
        if cfg.strategy is StrategyKind.SUPERVISED:
            seed_torch(seed, "init", "classifier")
            self.classifier = nn.Linear(cfg.feature_dim, N_STAGES)

    def head(self, name: str) -> nn.Module:
        # with shared heads, the "2" branch reuses the "1" parameters
        if self.share_heads and name.endswith("2"):
            name = name[:-1] + "1"
        if name not in self.heads:
            raise ConfigError(f"strategy {self.strategy.value} has no head {name!r}")
        return self.heads[name]

    def encoder(self, view: EncoderKind | str) -> nn.Module:
        view = EncoderKind(view)
        enc = self.time_encoder if view is EncoderKind.TIME else self.spec_encoder
        if enc is None:
            raise ConfigError(f"strategy {self.strategy.value} has no {view.value} encoder")
        return enc


def build_model(cfg: PretrainConfig) -> MultiViewModel:
    return MultiViewModel(cfg)


def encoder_input(view: EncoderKind | str, signals: np.ndarray) -> torch.Tensor:
    """Raw epochs for the time encoder, log-STFT for the spectrogram encoder."""
    if EncoderKind(view) is EncoderKind.SPECTROGRAM:
        signals = log_stft(signals)
    return torch.as_tensor(np.ascontiguousarray(signals), dtype=torch.float32)


# --- one step --------------------------------------------------------------

@dataclass
class Views:
    t1: np.ndarray
    t2: np.ndarray
    _s1: Optional[np.ndarray] = None
    _s2: Optional[np.ndarray] = None

    @property
    def s1(self):
        if self._s1 is None:
            self._s1 = log_stft(self.t1)
        return self._s1

    @property
    def s2(self):
        if self._s2 is None:
            self._s2 = log_stft(self.t2)
        return self._s2


def make_views(batch: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> Views:
    """Two augmented copies of a batch: ``t1 ~ T1`` (jitter, mask), ``t2 ~ T2`` (flip, scale)."""
    batch = np.asarray(batch, dtype=np.float64)
    return Views(augment_t1(batch, aug, rng), augment_t2(batch, aug, rng))


def _t(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def compute_losses(model: MultiViewModel, views: Views, cfg: PretrainConfig) -> dict[str, torch.Tensor]:
    """Forward both branches and return the loss components and ``total`` as tensors."""
    s = cfg.strategy
    zero = torch.zeros(())
    out = {"l_tt": zero, "l_ss": zero, "l_ff": zero, "l_d": zero}
    if s is StrategyKind.SINGLE_TIME:
        et = model.encoder("time")
        out["l_tt"] = nt_xent(model.head("f1")(et(_t(views.t1))), model.head("f2")(et(_t(views.t2))), cfg.tau)
    elif s is StrategyKind.SINGLE_SPEC:
        es = model.encoder("spectrogram")
        out["l_ss"] = nt_xent(model.head("g1")(es(_t(views.s1))), model.head("g2")(es(_t(views.s2))), cfg.tau)
    elif s is StrategyKind.CMC:
        zi = model.head("f1")(model.encoder("time")(_t(views.t1)))
        zj = model.head("f2")(model.encoder("spectrogram")(_t(views.s2)))
        out["l_ff"] = nt_xent(zi, zj, cfg.tau)
    elif s is StrategyKind.SIMPLE_FUSION:
        et, es = model.encoder("time"), model.encoder("spectrogram")
        zi = model.head("f1")(concat_features(et(_t(views.t1)), es(_t(views.s1))))
        zj = model.head("f2")(concat_features(et(_t(views.t2)), es(_t(views.s2))))
        out["l_ff"] = nt_xent(zi, zj, cfg.tau)
    elif s is StrategyKind.MULEEG:
        et, es = model.encoder("time"), model.encoder("spectrogram")
        ft1, ft2 = et(_t(views.t1)), et(_t(views.t2))
        fs1, fs2 = es(_t(views.s1)), es(_t(views.s2))
        zt_i, zt_j = model.head("f1")(ft1), model.head("f2")(ft2)
        zs_i, zs_j = model.head("g1")(fs1), model.head("g2")(fs2)
        out["l_tt"] = nt_xent(zt_i, zt_j, cfg.tau)
        out["l_ss"] = nt_xent(zs_i, zs_j, cfg.tau)
        if cfg.use_fusion:
            zf_i = model.head("h1")(concat_features(ft1, fs1))
            zf_j = model.head("h2")(concat_features(ft2, fs2))
            out["l_ff"] = nt_xent(zf_i, zf_j, cfg.tau)
        if cfg.use_diverse:
            out["l_d"] = diverse_loss(zt_i, zt_j, zs_i, zs_j, cfg.tau_d)
    else:
        raise ConfigError(f"{s.value} is not a self-supervised strategy")
    out["total"] = total_loss(out["l_tt"], out["l_ss"], out["l_ff"], out["l_d"], cfg.lambda1, cfg.lambda2)
    return out


def _bundle(losses: dict[str, torch.Tensor], cfg: PretrainConfig) -> LossBundle:
    return LossBundle(**{k: float(v.detach()) for k, v in losses.items()},
                      lambda1=cfg.lambda1, lambda2=cfg.lambda2, tau=cfg.tau, tau_d=cfg.tau_d)


def check_model(model: MultiViewModel, cfg: PretrainConfig) -> None:
    if model.strategy is not cfg.strategy:
        raise ConfigError(f"model was built for {model.strategy.value}, config asks for {cfg.strategy.value}")
    expected = set(_head_layout(cfg))
    if set(model.heads) != expected:
        raise ConfigError(f"model heads {sorted(model.heads)} do not match {sorted(expected)}")


def training_step(model: MultiViewModel, optimizer: torch.optim.Optimizer, batch: np.ndarray,
                  cfg: PretrainConfig, rng: np.random.Generator) -> LossBundle:
    """Augment ``batch``, compute the strategy's losses and take one optimizer step."""
    if len(batch) < 2:
        raise ValueError("a contrastive step needs at least 2 epochs in the batch")
    check_model(model, cfg)
    model.train()
    losses = compute_losses(model, make_views(batch, cfg.augment, rng), cfg)
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    return _bundle(losses, cfg)


# --- checkpoint ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: PretrainConfig
    model: MultiViewModel
    history: list[dict] = field(default_factory=list)
    subjects: list[str] = field(default_factory=list)
    best_state: Optional[dict] = None

    @property
    def strategy(self) -> StrategyKind:
        return self.config.strategy

    def meta(self) -> dict:
        return {
            "strategy": self.config.strategy.value,
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "git_revision": _git_revision(),
            "epochs_completed": len(self.history),
            "subjects": list(self.subjects),
            "config": self.config.to_dict(),
        }


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOSS_COLUMNS})


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.model.state_dict(), directory / "last.pt")
    torch.save(ckpt.best_state if ckpt.best_state is not None else ckpt.model.state_dict(), directory / "best.pt")
    (directory / "meta.json").write_text(json.dumps(ckpt.meta(), indent=2))
    write_loss_csv(ckpt.history, directory / "losses.csv")
    return directory


def load_checkpoint(directory, which: str = "last") -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    weights = directory / f"{which}.pt"
    if not meta_path.exists() or not weights.exists():
        raise FileNotFoundError(f"no checkpoint at {directory} (need meta.json and {which}.pt)")
    meta = json.loads(meta_path.read_text())
    cfg = PretrainConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    history = []
    loss_csv = directory / "losses.csv"
    if loss_csv.exists():
        with open(loss_csv, newline="") as fh:
            history = [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                       for row in csv.DictReader(fh)]
    return Checkpoint(cfg, model, history, list(meta.get("subjects", [])))


# --- loops -----------------------------------------------------------------

def make_optimizer(params, cfg: PretrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def make_scheduler(optimizer, cfg: PretrainConfig):
    """Cut the learning rate to ``factor`` x after ``patience`` epochs without improvement."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode="min", factor=cfg.scheduler_factor,
                                                      patience=cfg.scheduler_patience)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # batch-norm needs 2+
            yield np.sort(idx)


def _as_pool(data) -> EpochPool:
    if isinstance(data, EpochPool):
        return data
    return EpochPool(list(data))


def pretrain(strategy: StrategyKind | str, data, cfg: PretrainConfig, out_dir=None) -> Checkpoint:
    """Run one pretraining job on the pretext subjects (labels are never read
    except by the supervised baseline)."""
    strategy = StrategyKind(strategy)
    if strategy is not cfg.strategy:
        cfg = PretrainConfig.from_dict({**cfg.to_dict(), "strategy": strategy.value})
    pool = _as_pool(data)
    if len(pool) == 0:
        raise ValueError("pretext group is empty")
    if strategy is StrategyKind.SUPERVISED:
        return supervised_train(cfg.supervised_view, pool, cfg, out_dir)
    model = build_model(cfg)
    ckpt = Checkpoint(cfg, model, [], list(pool.subject_ids))
    if strategy is StrategyKind.RANDOM_INIT:
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir)
        return ckpt
    if len(pool) < 2:
        raise ValueError("need at least 2 pretext epochs")

    optimizer = make_optimizer(model.parameters(), cfg)
    scheduler = make_scheduler(optimizer, cfg)
    best = math.inf
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(("l_tt", "l_ss", "l_ff", "l_d", "total"), 0.0)
        n_steps = 0
        lr = optimizer.param_groups[0]["lr"]
        for b, idx in enumerate(_batches(len(pool), cfg.batch_size, rng_for(cfg.seed, "data", epoch))):
            rng = rng_for(cfg.seed, "augment", cfg.augment.seed, epoch, b)
            bundle = training_step(model, optimizer, pool.signals[idx], cfg, rng)
            if not math.isfinite(bundle.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b}: {bundle.as_dict()} (lr={lr:g})")
            for k in sums:
                sums[k] += getattr(bundle, k)
            n_steps += 1
        row = {"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()}, "lr": lr}
        ckpt.history.append(row)
        log.info("epoch %d total %.4f lr %.2e", epoch, row["total"], lr)
        if row["total"] < best:
            best = row["total"]
            ckpt.best_state = copy.deepcopy(model.state_dict())
        scheduler.step(row["total"])
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt


def fit_classifier(encoder: Optional[nn.Module], classifier: nn.Module, view: EncoderKind | str,
                   signals: np.ndarray, labels: np.ndarray, cfg: PretrainConfig, stream: tuple,
                   features: Optional[torch.Tensor] = None) -> list[dict]:
    """Cross-entropy training of ``classifier`` (and ``encoder`` when given).

    With ``encoder=None`` the classifier is fit on precomputed ``features``
    (the frozen-encoder case). Returns the per-epoch loss history.
    """
    params = list(classifier.parameters()) + ([] if encoder is None else list(encoder.parameters()))
    optimizer = make_optimizer(params, cfg)
    scheduler = make_scheduler(optimizer, cfg)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = len(y)
    history = []
    for epoch in range(cfg.epochs):
        lr = optimizer.param_groups[0]["lr"]
        total, seen = 0.0, 0
        if encoder is not None:
            encoder.train()
        classifier.train()
        for idx in _batches(n, cfg.batch_size, rng_for(cfg.seed, *stream, epoch)):
            if encoder is None:
                logits = classifier(features[idx])
            else:
                logits = classifier(encoder(encoder_input(view, signals[idx])))
            loss = F.cross_entropy(logits, y[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        mean = total / max(seen, 1)
        if not math.isfinite(mean):
            raise TrainingDivergedError(f"non-finite classification loss at epoch {epoch}")
        history.append({"epoch": epoch, "l_tt": 0.0, "l_ss": 0.0, "l_ff": 0.0, "l_d": 0.0, "total": mean, "lr": lr})
        scheduler.step(mean)
    return history


def supervised_train(view: EncoderKind | str, data, cfg: PretrainConfig, out_dir=None) -> Checkpoint:
    """Encoder + linear classifier trained with labels on the pretext group."""
    view = EncoderKind(view)
    cfg = PretrainConfig.from_dict({**cfg.to_dict(), "strategy": StrategyKind.SUPERVISED.value,
                                    "supervised_view": view.value})
    pool = _as_pool(data)
    if len(pool) < 2:
        raise ValueError("need at least 2 labelled epochs for supervised training")
    model = build_model(cfg)
    history = fit_classifier(model.encoder(view), model.classifier, view, pool.signals, pool.labels, cfg,
                             stream=("supervised",))
    ckpt = Checkpoint(cfg, model, history, list(pool.subject_ids))
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt


@torch.no_grad()
def encode(encoder: nn.Module, view: EncoderKind | str, signals: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    """Features from an encoder in inference mode."""
    encoder.eval()
    parts = [encoder(encoder_input(view, signals[i:i + batch_size])) for i in range(0, len(signals), batch_size)]
    if not parts:
        return torch.zeros((0, 0))
    return torch.cat(parts)


def predict(encoder: nn.Module, classifier: nn.Module, view, signals: np.ndarray) -> np.ndarray:
    classifier.eval()
    with torch.no_grad():
        return classifier(encode(encoder, view, signals)).argmax(1).numpy()
