"""End-to-end training loop.

One step: pseudo-label each unlabeled sample from K independent
augmentations (averaged, sharpened, detached), augment labeled samples
with their one-hot labels, MixUp the concatenated batch against a seeded
shuffle of itself, run the dual encoder on the mixed samples, and combine
cross-entropy, squared-L2 and contrastive terms into one gradient step.
All randomness is keyed by (seed, epoch, iteration, ...) counters, so two
runs with one seed produce identical trajectories and a resumed checkpoint
continues exactly.
"""

from __future__ import annotations

import json
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPolicy, augment_he_pair, center_crop, jitter_rgb
from .datapipe import (
    BalancedBatchSampler,
    BatchComposition,
    TileRecord,
    TileSet,
    per_class_metrics,
)
from .errors import ConfigurationError, InvalidInputError, NumericFaultError
from .losses import (
    SslHyperParams,
    average_predictions,
    contrastive_terms,
    mixup,
    sharpen,
    total_loss,
)
from .model import (
    EncoderSpec,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .od_color import RgbImage
from .rng import (
    CHANNEL_E,
    CHANNEL_H,
    CHANNEL_RGB,
    STREAM_AUGMENT,
    STREAM_MIXUP,
    substream,
)
from .separation import separate_tile

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    hyper: SslHyperParams = field(default_factory=SslHyperParams)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    comp: BatchComposition = field(default_factory=lambda: BatchComposition((8, 8, 8, 8), 32))
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    iterations_per_epoch: int = 1000
    patience_epochs: int = 100
    max_epochs: int = 500
    learning_rate: float = 1e-4
    lr_decay_per_epoch: float = 0.97
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    workers: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations_per_epoch < 1 or self.max_epochs < 1:
            raise InvalidInputError("iterations_per_epoch and max_epochs must be positive")
        if self.patience_epochs < 0:
            raise InvalidInputError("patience_epochs must be non-negative")
        if self.workers < 1:
            raise InvalidInputError("workers must be at least 1")
        if self.dtype not in _DTYPES:
            raise InvalidInputError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["comp"]["per_class_labeled"] = list(self.comp.per_class_labeled)
        doc["encoder"]["stage_widths"] = list(self.encoder.stage_widths)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = {
            "hyper": SslHyperParams,
            "augment": AugmentPolicy,
            "comp": BatchComposition,
            "encoder": EncoderSpec,
        }
        kwargs = {}
        for key, sub_cls in known.items():
            if key in doc:
                sub = doc.pop(key)
                _reject_unknown_keys(sub, sub_cls, key)
                kwargs[key] = sub_cls(**sub)
        _reject_unknown_keys(doc, cls, "train")
        kwargs.update(doc)
        return cls(**kwargs)


def _reject_unknown_keys(doc: dict, target_cls, section: str) -> None:
    allowed = set(target_cls.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown keys in [{section}] config: {sorted(unknown)}"
        )


@dataclass
class TrainState:
    global_iteration: int = 0
    epoch: int = 0
    best_val_accuracy: float = float("-inf")
    best_epoch: int = -1
    epochs_since_best: int = 0


class Trainer:
    def __init__(self, config: TrainConfig, tiles: TileSet, out_dir=None):
        self.config = config
        self.tiles = tiles
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = _DTYPES[config.dtype]
        if len(config.comp.per_class_labeled) != tiles.n_classes:
            raise ConfigurationError(
                f"batch composition lists {len(config.comp.per_class_labeled)} classes, "
                f"dataset has {tiles.n_classes}"
            )
        tiles.check_no_slide_leakage()
        self.model = build_model(config.encoder, tiles.n_classes, config.seed, self.dtype)
        self.optimizer, self.scheduler = self._optimizer_factory(self.model)
        self.sampler = BalancedBatchSampler(
            tiles.labeled_pools(),
            list(range(len(tiles.train_unlabeled))),
            config.comp,
            config.seed,
            class_names=tiles.class_names,
        )
        self.state = TrainState()
        self._eval_cache: dict = {}
        self._log_file = None
        # sample prep draws come from counter-keyed streams, so parallel
        # preparation is bitwise identical to serial; deterministic mode
        # still forces a single worker per the concurrency contract
        n_workers = 1 if config.deterministic else config.workers
        self._pool = (
            ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
        )

    # -- construction plumbing ------------------------------------------------

    def _optimizer_factory(self, model):
        optimizer = torch.optim.RMSprop(
            model.parameters(),
            lr=self.config.learning_rate,
            alpha=self.config.rmsprop_alpha,
            eps=self.config.rmsprop_eps,
        )
        scheduler = torch.optim.lr_scheduler.ExponentialLR(
            optimizer, gamma=self.config.lr_decay_per_epoch
        )
        return optimizer, scheduler

    # -- sample preparation ---------------------------------------------------

    def _prepare_pair(self, rec: TileRecord, epoch: int, it: int, position: int, k: int):
        """Jitter RGB, separate through the slide basis, augment H/E crops."""
        cfg = self.config
        img = RgbImage(rec.rgb.astype(np.float64), self.tiles.background_intensity)
        rng_rgb = substream(cfg.seed, STREAM_AUGMENT, epoch, it, position, k, CHANNEL_RGB)
        img = jitter_rgb(img, cfg.augment, rng_rgb)
        basis = self.tiles.bases[rec.sample.slide_id]
        h_full, e_full = separate_tile(img, basis)
        pair = augment_he_pair(
            h_full,
            e_full,
            cfg.augment,
            substream(cfg.seed, STREAM_AUGMENT, epoch, it, position, k, CHANNEL_H),
            substream(cfg.seed, STREAM_AUGMENT, epoch, it, position, k, CHANNEL_E),
        )
        return np.stack([pair.h.values, pair.e.values])

    def _prepare_many(self, jobs: list) -> list:
        """Prepare many (rec, epoch, it, position, k) samples, optionally in
        parallel; output order always matches job order."""
        if self._pool is None:
            return [self._prepare_pair(*job) for job in jobs]
        return list(self._pool.map(lambda job: self._prepare_pair(*job), jobs))

    def _eval_pair(self, rec: TileRecord):
        """Deterministic eval view: no jitter, center crop."""
        img = RgbImage(rec.rgb.astype(np.float64), self.tiles.background_intensity)
        h_full, e_full = separate_tile(img, self.tiles.bases[rec.sample.slide_id])
        crop = self.config.augment.crop_size
        return np.stack(
            [center_crop(h_full.values, crop), center_crop(e_full.values, crop)]
        ).astype(np.float32)

    def pseudo_label_targets(self, records: list, epoch: int, it: int, offset: int):
        """K-augmentation averaged, sharpened, detached targets.

        Returns (inputs, targets): the k=0 view of each sample enters the
        MixUp batch; targets are constants with no gradient history.
        """
        cfg = self.config
        k_views = []
        for k in range(cfg.hyper.num_augmentations):
            views = self._prepare_many(
                [(rec, epoch, it, offset + p, k) for p, rec in enumerate(records)]
            )
            k_views.append(np.stack(views))
        stacked = torch.as_tensor(np.stack(k_views), dtype=self.dtype)  # (K, U, 2, S, S)
        n_u = stacked.shape[1]
        with torch.no_grad():
            flat = stacked.reshape(-1, *stacked.shape[2:])
            _, _, probs = self.model(flat[:, 0:1], flat[:, 1:2])
            probs = probs.reshape(cfg.hyper.num_augmentations, n_u, -1)
            targets = torch.stack(
                [
                    sharpen(average_predictions(probs[:, i]), cfg.hyper.temperature)
                    for i in range(n_u)
                ]
            )
        return stacked[0], targets

    # -- core loop ------------------------------------------------------------

    def train_step(self) -> dict:
        cfg = self.config
        it_global = self.state.global_iteration
        epoch = it_global // cfg.iterations_per_epoch
        it = it_global % cfg.iterations_per_epoch
        labeled_items, unlabeled_items = self.sampler.batch(it_global)

        n_l = len(labeled_items)
        x_labeled = np.stack(
            self._prepare_many(
                [
                    (self.tiles.train_labeled[idx], epoch, it, p, 0)
                    for p, (idx, _) in enumerate(labeled_items)
                ]
            )
        )
        y_labeled = torch.zeros((n_l, self.tiles.n_classes), dtype=self.dtype)
        for row, (_, c) in enumerate(labeled_items):
            y_labeled[row, c] = 1.0
        x_all = torch.as_tensor(x_labeled, dtype=self.dtype)
        y_all = y_labeled
        if unlabeled_items:
            records = [self.tiles.train_unlabeled[i] for i in unlabeled_items]
            x_u, y_u = self.pseudo_label_targets(records, epoch, it, offset=n_l)
            x_all = torch.cat([x_all, x_u])
            y_all = torch.cat([y_all, y_u])

        rng = substream(cfg.seed, STREAM_MIXUP, epoch, it)
        partner = rng.permutation(len(x_all))
        lams = rng.beta(cfg.hyper.mixup_alpha, cfg.hyper.mixup_alpha, size=len(x_all))
        mixed_x, mixed_y = [], []
        for i in range(len(x_all)):
            x_m, y_m, _ = mixup(
                x_all[i],
                x_all[partner[i]],
                y_all[i],
                y_all[partner[i]],
                float(lams[i]),
                i_is_labeled=i < n_l,
            )
            mixed_x.append(x_m)
            mixed_y.append(y_m)
        x_mix = torch.stack(mixed_x)
        y_mix = torch.stack(mixed_y).detach()

        f_h, f_e, preds = self.model(x_mix[:, 0:1], x_mix[:, 1:2])
        terms = contrastive_terms(f_h, f_e, cfg.hyper.margin) if len(x_mix) > 1 else None
        loss, breakdown = total_loss(
            preds[:n_l],
            y_mix[:n_l],
            preds[n_l:] if len(x_mix) > n_l else None,
            y_mix[n_l:] if len(x_mix) > n_l else None,
            terms,
            cfg.hyper,
        )
        if not np.isfinite(breakdown["total"]):
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint_crash.pt")
            raise NumericFaultError(f"training loss at iteration {it_global}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.state.global_iteration += 1
        breakdown["iteration"] = it_global
        breakdown["epoch"] = epoch
        breakdown["lr"] = float(self.optimizer.param_groups[0]["lr"])
        breakdown["n_labeled"] = n_l
        breakdown["n_mixed"] = len(x_mix)
        return breakdown

    def validate_split(self, split: str) -> dict:
        records = getattr(self.tiles, split)
        if not records:
            raise ConfigurationError(f"split {split!r} is empty")
        if split not in self._eval_cache:
            self._eval_cache[split] = np.stack([self._eval_pair(r) for r in records])
        crops = torch.as_tensor(self._eval_cache[split], dtype=self.dtype)
        labels = np.array([r.sample.label for r in records])
        n_classes = self.tiles.n_classes
        confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        with torch.no_grad():
            for start in range(0, len(crops), 64):
                chunk = crops[start : start + 64]
                _, _, probs = self.model(chunk[:, 0:1], chunk[:, 1:2])
                pred = probs.argmax(dim=1).numpy()
                for t, p in zip(labels[start : start + 64], pred):
                    confusion[t, p] += 1
        return per_class_metrics(confusion)

    def run_epoch(self) -> dict:
        cfg = self.config
        for _ in range(cfg.iterations_per_epoch):
            record = self.train_step()
            self._log(record | {"type": "iteration"})
        metrics = self.validate_split("val")
        self.state.epoch += 1
        improved = metrics["balanced_accuracy"] > self.state.best_val_accuracy
        if improved:
            self.state.best_val_accuracy = metrics["balanced_accuracy"]
            self.state.best_epoch = self.state.epoch
            self.state.epochs_since_best = 0
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint_best.pt")
        else:
            self.state.epochs_since_best += 1
        self.scheduler.step()
        record = {
            "type": "epoch",
            "epoch": self.state.epoch,
            "val_balanced_accuracy": metrics["balanced_accuracy"],
            "best_val_balanced_accuracy": self.state.best_val_accuracy,
            "epochs_since_best": self.state.epochs_since_best,
        }
        self._log(record)
        return metrics

    def fit(self) -> dict:
        cfg = self.config
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.out_dir / "train_log.jsonl", "a", encoding="utf-8")
        val_curve = []
        try:
            while self.state.epoch < cfg.max_epochs:
                metrics = self.run_epoch()
                val_curve.append(metrics["balanced_accuracy"])
                if self.out_dir is not None:
                    self.save(self.out_dir / "checkpoint_last.pt")
                if self.state.epochs_since_best > cfg.patience_epochs:
                    break
        finally:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None
        return self._final_report(val_curve)

    def _final_report(self, val_curve) -> dict:
        if self.out_dir is not None and (self.out_dir / "checkpoint_best.pt").exists():
            best = Trainer.resume(self.out_dir / "checkpoint_best.pt", self.tiles)
            best._eval_cache = self._eval_cache
        else:
            best = self
        test_metrics = best.validate_split("test") if self.tiles.test else None
        report = {
            "best_epoch": self.state.best_epoch,
            "epochs_run": self.state.epoch,
            "best_val_balanced_accuracy": self.state.best_val_accuracy,
            "val_curve": val_curve,
            "test": test_metrics,
            "config": self.config.to_dict(),
            "environment": {
                "python": platform.python_version(),
                "torch": torch.__version__,
                "numpy": np.__version__,
                "platform": platform.platform(),
            },
        }
        if self.out_dir is not None:
            with open(self.out_dir / "report.json", "w", encoding="utf-8") as f:
                json.dump(report, f, indent=2)
            self._plot_curves(val_curve)
        return report

    def _plot_curves(self, val_curve) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        log_path = self.out_dir / "train_log.jsonl"
        totals = []
        if log_path.exists():
            with open(log_path, "r", encoding="utf-8") as f:
                for line in f:
                    rec = json.loads(line)
                    if rec.get("type") == "iteration":
                        totals.append(rec["total"])
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(totals)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        fig.tight_layout()
        fig.savefig(self.out_dir / "curve_loss.png")
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(np.arange(1, len(val_curve) + 1), val_curve, marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("val balanced accuracy")
        fig.tight_layout()
        fig.savefig(self.out_dir / "curve_accuracy.png")
        plt.close(fig)

    def _log(self, record: dict) -> None:
        if self._log_file is not None:
            self._log_file.write(json.dumps(record) + "\n")
            self._log_file.flush()

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.model,
            self.optimizer,
            self.scheduler,
            extra={
                "state": asdict(self.state),
                "train_config": self.config.to_dict(),
            },
        )

    @classmethod
    def resume(cls, path, tiles: TileSet, out_dir=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; the loss trajectory continues
        exactly because all sampling is a pure function of the counters."""
        payload = torch.load(path, weights_only=False)
        config = TrainConfig.from_dict(payload["extra"]["train_config"])
        trainer = cls(config, tiles, out_dir=out_dir)
        model, optimizer, scheduler, extra = load_checkpoint(
            path, trainer._optimizer_factory
        )
        trainer.model = model
        trainer.optimizer = optimizer
        trainer.scheduler = scheduler
        trainer.state = TrainState(**extra["state"])
        return trainer
