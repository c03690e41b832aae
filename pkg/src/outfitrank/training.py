"""Two-stage training: general model on mixed users, then per-user fine-tuning."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Parameter, Tensor
from .catalog import Dataset
from .layers import FEATURE_NET, MATCHING_NET, linear
from .metrics import Metrics, RankedList, aggregate
from .models import FashionNet, pair_forward, rank_loss, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("whole", "partial", "direct")


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, where: str, checkpoint: Path | None):
        self.epoch, self.where, self.checkpoint = epoch, where, checkpoint
        super().__init__(f"training diverged in epoch {epoch} ({where}); last good state: {checkpoint}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 30
    epochs: int = 18
    # slow pretrained features, fast fresh heads; a faster feature net overfits desk-scale data
    base_lr: float = 0.001
    fresh_lr_multiplier: float = 100.0
    finetune_lr_drop: float = 3.0
    momentum: float = 0.9
    weight_decay: float = 0.002
    neutrals_per_positive: int = 6
    seed: int = 0
    mode: str = "whole"
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0 or self.neutrals_per_positive < 1:
            raise ConfigurationError("epochs must be >= 0 and neutrals_per_positive >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.base_lr < 0 or self.fresh_lr_multiplier < 0 or self.finetune_lr_drop <= 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    def stage_one_lr(self) -> dict[str, float]:
        return {FEATURE_NET: self.base_lr, MATCHING_NET: self.base_lr * self.fresh_lr_multiplier}

    def finetune_lr(self) -> dict[str, float]:
        lr = {g: v / self.finetune_lr_drop for g, v in self.stage_one_lr().items()}
        if self.mode == "partial":
            lr[FEATURE_NET] = 0.0
        return lr


@dataclass
class LossCurve:
    epochs: list[int]
    losses: list[float]
    wall: list[float]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "wall_time_s"])
            for e, l, t in zip(self.epochs, self.losses, self.wall):
                w.writerow([e, f"{l:.8f}", f"{t:.3f}"])


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def sample_pairs(positives: np.ndarray, neutrals: np.ndarray, k: int = 6, seed: int = 0,
                 epoch: int = 0) -> np.ndarray:
    """(len(positives) * k, 2) array of (preferred, other) record ids in a shuffled order.

    Each positive gets k distinct neutrals (with replacement only if fewer than k exist);
    the draw is fresh every epoch and fixed by (seed, epoch)."""
    positives, neutrals = np.asarray(positives), np.asarray(neutrals)
    if len(positives) == 0 or len(neutrals) == 0:
        raise ValueError("sample_pairs needs non-empty positive and neutral lists")
    rng = _rng(seed, 31, epoch)
    if len(neutrals) >= k:
        # k distinct neutrals per positive via argsort of random keys
        picks = np.argsort(rng.random((len(positives), len(neutrals))), axis=1)[:, :k]
    else:
        picks = rng.integers(0, len(neutrals), (len(positives), k))
    pairs = np.stack([np.repeat(positives, k), neutrals[picks.reshape(-1)]], axis=1)
    return pairs[rng.permutation(len(pairs))]


def _trainable(network: FashionNet, lr: dict[str, float]) -> list[Parameter]:
    return [p for p in network.params if lr.get(p.group, 0.0) > 0.0]


class _Scorer:
    """Adapter that runs two-tower steps either on images or on frozen precomputed features."""

    def __init__(self, network: FashionNet, dataset: Dataset, frozen_features: bool):
        self.network = network
        self.items = dataset.outfits.items
        self.images = dataset.preprocessed_images()
        self.features = None
        if frozen_features:
            with ad.no_grad():
                self.features = np.concatenate([network.features(self.images[i:i + 512]).data
                                                for i in range(0, len(self.images), 512)])

    def loss(self, pairs: np.ndarray) -> Tensor:
        pos, neg = self.items[pairs[:, 0]], self.items[pairs[:, 1]]
        if self.features is None:
            return pair_forward(self.network, self.images, pos, neg)[2]
        both = np.concatenate([pos, neg])
        uniq, inv = np.unique(both, return_inverse=True)
        s, _ = self.network.head_outputs(Tensor(self.features[uniq]), inv.reshape(both.shape))
        m = len(pos)
        return rank_loss(s[:m], s[m:]).mean()


def _run(network: FashionNet, dataset: Dataset, positives: np.ndarray, neutrals: np.ndarray,
         config: TrainConfig, lr: dict[str, float], seed: int, checkpoint_dir: Path | None = None,
         on_epoch: Callable[[int, float], None] | None = None) -> tuple[LossCurve, OptimizerState]:
    state = OptimizerState(dict(lr), config.momentum, weight_decay=config.weight_decay)
    params = _trainable(network, lr)
    frozen = lr.get(FEATURE_NET, 0.0) == 0.0 and not network.fused
    scorer = _Scorer(network, dataset, frozen_features=frozen)
    k = config.neutrals_per_positive
    t0 = time.perf_counter()
    curve = LossCurve([], [], [])
    with ad.no_grad():
        pairs = sample_pairs(positives, neutrals, k, seed, 0)
        initial = sum(scorer.loss(pairs[i:i + 256]).item() * len(pairs[i:i + 256])
                      for i in range(0, len(pairs), 256)) / len(pairs)
    curve.epochs.append(0), curve.losses.append(initial), curve.wall.append(0.0)
    for epoch in range(1, config.epochs + 1):
        good = network.state()
        good_velocity = {n: v.copy() for n, v in state.velocity.items()}
        pairs = sample_pairs(positives, neutrals, k, seed, epoch)
        total = 0.0
        try:
            for i in range(0, len(pairs), config.batch_size):
                batch = pairs[i:i + config.batch_size]
                loss = scorer.loss(batch)
                if params:
                    ad.sgd_step(params, ad.backward(loss), state)
                total += loss.item() * len(batch)
        except ad.NonFiniteError as err:
            network.load_state(good)
            state.velocity = good_velocity
            path = None
            if checkpoint_dir is not None:
                path = save_checkpoint(network, Path(checkpoint_dir) / f"diverged-epoch{epoch - 1}", state)
            raise TrainingDiverged(epoch, err.where, path) from err
        mean = total / len(pairs)
        curve.epochs.append(epoch), curve.losses.append(mean), curve.wall.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f", epoch, mean)
        if on_epoch:
            on_epoch(epoch, mean)
    return curve, state


def train_stage_one(network: FashionNet, dataset: Dataset, config: TrainConfig = TrainConfig(),
                    checkpoint_dir: Path | None = None, on_epoch=None) -> tuple[LossCurve, OptimizerState]:
    """General model: user identity discarded, every user's positives against the pooled neutrals."""
    t = dataset.outfits
    pos, neu = t.select(split="train", label=1), t.select(split="train", label=0)
    return _run(network, dataset, pos, neu, config, config.stage_one_lr(), config.seed,
                checkpoint_dir, on_epoch)


def fine_tune(network: FashionNet, dataset: Dataset, user: int, config: TrainConfig = TrainConfig(),
              initial: FashionNet | None = None, checkpoint_dir: Path | None = None,
              on_epoch=None) -> tuple[FashionNet, LossCurve, OptimizerState]:
    """Per-user copy of ``network`` trained on that user's own pairs.

    ``whole`` updates everything, ``partial`` freezes the feature network, ``direct``
    starts from ``initial`` (the pre-stage-one parameters) instead of ``network``."""
    if config.mode == "partial" and network.fused:
        raise ConfigurationError("partial fine-tuning needs a separable feature network (variant B or C)")
    if config.mode == "direct":
        if initial is None:
            raise ConfigurationError("direct fine-tuning needs the initial (pre-stage-one) network")
        net = initial.copy()
    else:
        net = network.copy()
    t = dataset.outfits
    pos, neu = t.select(user, "train", 1), t.select(user, "train", 0)
    curve, state = _run(net, dataset, pos, neu, config, config.finetune_lr(), config.seed * 1000 + 7919 + user,
                        checkpoint_dir, on_epoch)
    return net, curve, state


def pretrain_backbone(network: FashionNet, dataset: Dataset, config: TrainConfig = TrainConfig()) -> LossCurve:
    """Auxiliary attribute regression standing in for ImageNet pretraining.

    A temporary linear head maps backbone features of single item images to their
    hidden attributes; only items that appear in training outfits are used and the
    head is discarded. A fused network (variant A) cannot see single items, so a
    3-channel twin is pretrained instead and loaded with its first kernel tiled over
    the item blocks (divided by the item count), the usual way to reuse RGB filters
    on a stacked input."""
    from .layers import Backbone

    rng = _rng(config.seed, 41)
    if network.fused:
        cfg = replace(network.backbone_config, in_channels=3)
        twin = Backbone(cfg, _rng(network.seed, 101), dtype=network.dtype)
        curve = _pretrain(twin, dataset, config, rng, network.dtype)
        n = network.backbone_config.in_channels // 3
        for (w, b), (tw, tb) in zip(network.backbone.convs, twin.convs):
            w.data[...] = np.tile(tw.data, (1, n, 1, 1)) / n if w.shape != tw.shape else tw.data
            b.data[...] = tb.data
        network.backbone.fc_w.data[...] = twin.fc_w.data
        network.backbone.fc_b.data[...] = twin.fc_b.data
        return curve
    return _pretrain(network.backbone, dataset, config, rng, network.dtype)


def _pretrain(backbone, dataset: Dataset, config: TrainConfig, rng: np.random.Generator, dtype) -> LossCurve:
    t = dataset.outfits
    units = np.unique(t.items[t.select(split="train")])
    images = dataset.preprocessed_images()
    attrs = dataset.catalog.attributes.astype(dtype)
    D, k = backbone.config.feature_dim, attrs.shape[1]
    head_w = Parameter((rng.standard_normal((D, k)) * 0.01).astype(dtype), "pretrain.w", FEATURE_NET)
    head_b = Parameter(np.zeros(k, dtype), "pretrain.b", FEATURE_NET)
    params = backbone.params + [head_w, head_b]
    state = OptimizerState({FEATURE_NET: config.pretrain_lr}, config.momentum)
    curve = LossCurve([], [], [])
    t0 = time.perf_counter()
    for epoch in range(1, config.pretrain_epochs + 1):
        order = rng.permutation(len(units))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            ids = units[order[i:i + config.batch_size]]
            err = linear(backbone(Tensor(images[ids])), head_w, head_b) - Tensor(attrs[ids])
            loss = (err * err).mean()
            ad.sgd_step(params, ad.backward(loss), state)
            total += loss.item() * len(ids)
        curve.epochs.append(epoch), curve.losses.append(total / len(units)), curve.wall.append(time.perf_counter() - t0)
        log.info("pretrain epoch %d mse %.5f", epoch, total / len(units))
    return curve


# -- evaluation -------------------------------------------------------------------------

def evaluate_user(network: FashionNet, dataset: Dataset, user: int, split: str = "test") -> Metrics:
    t = dataset.outfits
    ids = t.select(user, split)
    if len(ids) == 0:
        raise ValueError(f"user {user} has no {split} records")
    scores = network.score_batch(dataset.preprocessed_images(), t.items[ids])
    return Metrics.of(RankedList.from_scores(ids, scores, t.label[ids]))


def ranked_list(network: FashionNet, dataset: Dataset, user: int, split: str = "test") -> tuple[RankedList, np.ndarray]:
    t = dataset.outfits
    ids = t.select(user, split)
    scores = network.score_batch(dataset.preprocessed_images(), t.items[ids])
    ranked = RankedList.from_scores(ids, scores, t.label[ids])
    order = np.lexsort((ids, -scores))
    return ranked, scores[order]


def evaluate(networks: dict[int, FashionNet] | FashionNet, dataset: Dataset, split: str = "test"
             ) -> tuple[dict[int, Metrics], Metrics]:
    """Per-user metrics (one network for everyone, or one per user) and their unweighted mean."""
    users = range(len(dataset.users))
    per = {u: evaluate_user(networks[u] if isinstance(networks, dict) else networks, dataset, u, split)
           for u in users}
    return per, aggregate(list(per.values()))


# -- full protocol -----------------------------------------------------------------------

STAGES = ("initial", "stage-one", "stage-two-direct", "stage-two-partial", "stage-two-whole")


def stages_for(variant: str) -> tuple[str, ...]:
    """Report rows that apply to a variant: A gets direct, B/C get partial."""
    if variant == "a":
        return ("initial", "stage-one", "stage-two-direct", "stage-two-whole")
    return ("initial", "stage-one", "stage-two-partial", "stage-two-whole")


@dataclass
class ProtocolResult:
    variant: str
    per_user: dict[str, dict[int, Metrics]]          # first split
    aggregate: dict[str, Metrics]                    # first split
    networks: dict[str, FashionNet | dict[int, FashionNet]]
    curves: dict[str, LossCurve]
    by_split: dict[str, dict[str, Metrics]]          # split -> stage -> aggregate


def run_protocol(dataset: Dataset, variant: str, config: TrainConfig = TrainConfig(),
                 stages: tuple[str, ...] | None = None, splits: tuple[str, ...] = ("test",),
                 build_kw: dict | None = None, keep_networks: bool = False) -> ProtocolResult:
    """Initial -> stage one -> stage-two variants for one architecture, evaluated on each of ``splits``."""
    from .models import build

    stages = stages or stages_for(variant)
    net = build(variant, seed=config.seed, categories=dataset.categories, **(build_kw or {}))
    per, nets, curves = {}, {}, {}
    by_split = {s: {} for s in splits}

    def record(stage, networks):
        for i, split in enumerate(splits):
            users, by_split[split][stage] = evaluate(networks, dataset, split)
            if i == 0:
                per[stage] = users
            log.info("%s %s %s mean NDCG %.4f", variant, stage, split, by_split[split][stage].mean_ndcg)
        if keep_networks:
            nets[stage] = networks

    curves["pretrain"] = pretrain_backbone(net, dataset, config)
    initial = net.copy()
    if "initial" in stages:
        record("initial", initial)
    curves["stage-one"], _ = train_stage_one(net, dataset, config)
    if "stage-one" in stages:
        record("stage-one", net)
    for stage in stages:
        if not stage.startswith("stage-two-"):
            continue
        mode = stage[len("stage-two-"):]
        cfg = replace(config, mode=mode)
        users = {}
        for u in range(len(dataset.users)):
            users[u], curves[f"{stage}.user{u}"], _ = fine_tune(net, dataset, u, cfg, initial=initial)
        record(stage, users)
    return ProtocolResult(variant, per, dict(by_split[splits[0]]), nets, curves, by_split)
