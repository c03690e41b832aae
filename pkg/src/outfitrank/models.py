"""FashionNet A, B and C: networks mapping an outfit's item images to a score s."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Parameter, Tensor, softplus, take_rows
from .catalog import CATEGORIES, category_pairs, pair_key, read_manifest, write_manifest
from .layers import (FEATURE_NET, MATCHING_NET, Backbone, BackboneConfig, LRNConfig, MLP, concat_channels,
                     concat_features, softmax2)

VARIANTS = ("a", "b", "c")
CHECKPOINT_FORMAT = "outfitrank-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VariantMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class MatchingConfig:
    """Hidden widths as multiples of the feature width D; the last layer is always 2-way."""

    hidden_multiplier_b: int = 4
    hidden_multiplier_c: int = 2
    init_std: float = 0.01
    lrn: bool = True

    def widths(self, variant: str, feature_dim: int) -> tuple[int, ...]:
        if variant == "a":
            return (2,)
        m = self.hidden_multiplier_b if variant == "b" else self.hidden_multiplier_c
        return (m * feature_dim, m * feature_dim, 2)


@dataclass
class OutfitScore:
    s: float
    like: float | None = None          # A/B: p(liked)
    dislike: float | None = None
    pair_probs: dict[str, float] = field(default_factory=dict)   # C only


class FashionNet:
    """One architecture instance. Item images arrive as a shared stack plus an
    (n_outfits, N) index table so a backbone pass covers each distinct image once."""

    def __init__(self, variant: str, backbone: BackboneConfig = BackboneConfig(),
                 matching: MatchingConfig = MatchingConfig(), seed: int = 0,
                 categories: Sequence[str] = CATEGORIES, dtype=np.float32):
        variant = variant.lower()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.categories = tuple(categories)
        n = len(self.categories)
        if variant == "a":
            backbone = replace(backbone, in_channels=3 * n)
        elif backbone.in_channels != 3:
            raise ValueError("variants B and C take 3-channel item images")
        self.backbone_config = backbone
        self.matching_config = matching
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 101])
        self.backbone = Backbone(backbone, rng, dtype=self.dtype)
        lrn = LRNConfig() if matching.lrn else None
        D = backbone.feature_dim
        widths = matching.widths(variant, D)
        if variant == "a":
            self.pairs = []
            self.heads = {"head": MLP(D, widths, rng, "head", MATCHING_NET, matching.init_std, self.dtype, lrn)}
        elif variant == "b":
            self.pairs = []
            self.heads = {"joint": MLP(n * D, widths, rng, "joint", MATCHING_NET, matching.init_std, self.dtype, lrn)}
        else:
            self.pairs = category_pairs(self.categories)
            self.heads = {pair_key(p): MLP(2 * D, widths, rng, f"pair.{pair_key(p)}", MATCHING_NET,
                                           matching.init_std, self.dtype, lrn) for p in self.pairs}

    # -- parameters -------------------------------------------------------------

    @property
    def fused(self) -> bool:
        """Variant A has no separable feature network."""
        return self.variant == "a"

    @property
    def params(self) -> list[Parameter]:
        out = list(self.backbone.params)
        for head in self.heads.values():
            out += head.params
        return out

    def params_in(self, group: str) -> list[Parameter]:
        return [p for p in self.params if p.group == group]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params))

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"missing tensor {p.name}")
            if state[p.name].shape != p.shape:
                raise ad.ShapeError(f"load {p.name}", p.shape, state[p.name].shape)
            p.data[...] = state[p.name]

    def copy(self) -> "FashionNet":
        net = FashionNet(self.variant, self.backbone_config_base, self.matching_config, self.seed,
                         self.categories, self.dtype)
        net.load_state(self.state())
        return net

    def astype(self, dtype) -> "FashionNet":
        net = FashionNet(self.variant, self.backbone_config_base, self.matching_config, self.seed,
                         self.categories, dtype)
        net.load_state({k: v.astype(dtype) for k, v in self.state().items()})
        return net

    @property
    def backbone_config_base(self) -> BackboneConfig:
        return replace(self.backbone_config, in_channels=3)

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for p in self.params_in(group):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward ----------------------------------------------------------------

    def features(self, images: Tensor | np.ndarray) -> Tensor:
        """Backbone features (U, D) for a stack of preprocessed item images (B/C)."""
        if self.variant == "a":
            raise TypeError("variant A has no per-item features")
        return self.backbone(_as_tensor(images, self.dtype))

    def head_outputs(self, feats: Tensor, outfit_rows: np.ndarray) -> tuple[Tensor, dict[str, Tensor]]:
        """Score outfits from per-item features. ``outfit_rows`` (n, N) index rows of ``feats``."""
        outfit_rows = np.asarray(outfit_rows)
        per_cat = {cat: take_rows(feats, outfit_rows[:, i]) for i, cat in enumerate(self.categories)}
        if self.variant == "b":
            probs = softmax2(self.heads["joint"](concat_features([per_cat[c] for c in self.categories])))
            return probs[:, 0], {"like": probs[:, 0], "dislike": probs[:, 1]}
        pair_p = {}
        for p in self.pairs:
            key = pair_key(p)
            probs = softmax2(self.heads[key](concat_features([per_cat[p[0]], per_cat[p[1]]])))
            pair_p[key] = probs[:, 0]
        s = pair_p[pair_key(self.pairs[0])]
        for p in self.pairs[1:]:
            s = s + pair_p[pair_key(p)]
        return s, pair_p

    def forward(self, images: np.ndarray, outfits: np.ndarray) -> tuple[Tensor, dict[str, Tensor]]:
        """Scores for outfits given as rows of indices into the ``images`` stack
        (columns in category order). Returns (s (n,), named component outputs)."""
        outfits = np.atleast_2d(np.asarray(outfits, dtype=np.int64))
        if outfits.shape[1] != len(self.categories):
            raise ad.ShapeError("outfit table", outfits.shape, (None, len(self.categories)))
        side = self.backbone_config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, side, side):
            raise ad.ShapeError("item images", images.shape, (None, 3, side, side))
        if self.variant == "a":
            stacks = [Tensor(images[outfits[:, i]].astype(self.dtype, copy=False)) for i in range(outfits.shape[1])]
            probs = softmax2(self.heads["head"](self.backbone(concat_channels(stacks))))
            return probs[:, 0], {"like": probs[:, 0], "dislike": probs[:, 1]}
        uniq, inv = np.unique(outfits, return_inverse=True)
        feats = self.features(images[uniq])
        return self.head_outputs(feats, inv.reshape(outfits.shape))

    def score_batch(self, images: np.ndarray, outfits: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(outfits), batch):
                out.append(self.forward(images, outfits[i:i + batch])[0].data)
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def build(variant: str, backbone: BackboneConfig = BackboneConfig(), matching: MatchingConfig = MatchingConfig(),
          seed: int = 0, categories: Sequence[str] = CATEGORIES, dtype=np.float32) -> FashionNet:
    return FashionNet(variant, backbone, matching, seed, categories, dtype)


def score(network: FashionNet, images: Sequence[np.ndarray]) -> OutfitScore:
    """Score one outfit from its preprocessed item images, one per category in order."""
    side = network.backbone_config.image_size
    images = [np.asarray(im) for im in images]
    if len(images) != len(network.categories):
        raise ValueError(f"expected {len(network.categories)} images, got {len(images)}")
    for im in images:
        if im.shape != (3, side, side):
            raise ad.ShapeError("outfit image", im.shape, (3, side, side))
    stack = np.stack(images)
    with ad.no_grad():
        s, parts = network.forward(stack, np.arange(len(images))[None])
    if network.variant == "c":
        return OutfitScore(float(s.data[0]), pair_probs={k: float(v.data[0]) for k, v in parts.items()})
    return OutfitScore(float(s.data[0]), like=float(parts["like"].data[0]), dislike=float(parts["dislike"].data[0]))


def rank_loss(s_plus, s_minus):
    """log(1 + exp(-(s+ - s-))), elementwise; Tensor in, Tensor out (floats -> float)."""
    if isinstance(s_plus, Tensor) or isinstance(s_minus, Tensor):
        return softplus(ad.sub(s_minus, s_plus))
    x = np.asarray(s_minus, dtype=np.float64) - np.asarray(s_plus, dtype=np.float64)
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def pair_forward(network: FashionNet, images: np.ndarray, preferred: np.ndarray, other: np.ndarray):
    """Two-tower pass over M pairs sharing one parameter set.

    Both towers run as one batched forward over the stacked outfits, so their
    gradients land on the same Parameters. Returns (s+, s-, mean rank loss)."""
    preferred = np.atleast_2d(preferred)
    other = np.atleast_2d(other)
    if preferred.shape != other.shape:
        raise ad.ShapeError("pair_forward", preferred.shape, other.shape)
    m = len(preferred)
    s, _ = network.forward(images, np.concatenate([preferred, other]))
    s_plus, s_minus = s[:m], s[m:]
    return s_plus, s_minus, rank_loss(s_plus, s_minus).mean()


# -- checkpoints ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_checkpoint(network: FashionNet, path: str | Path, optimizer: OptimizerState | None = None,
                    extra: dict[str, str] | None = None) -> Path:
    """Directory with ``manifest.txt`` (key = value) and ``tensors.bin`` (concatenated blobs)."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    bb, mc = network.backbone_config_base, network.matching_config
    items = [("format", CHECKPOINT_FORMAT), ("version", str(CHECKPOINT_VERSION)),
             ("variant", network.variant), ("seed", str(network.seed)), ("dtype", network.dtype.name),
             ("categories", ",".join(network.categories)),
             ("backbone.image_size", str(bb.image_size)), ("backbone.feature_dim", str(bb.feature_dim)),
             ("backbone.widths", ",".join(map(str, bb.widths))), ("backbone.kernel", str(bb.kernel)),
             ("backbone.lrn", ",".join(_fmt(v) for v in (bb.lrn.size, bb.lrn.alpha, bb.lrn.beta, bb.lrn.k))),
             ("matching.hidden_multiplier_b", str(mc.hidden_multiplier_b)),
             ("matching.hidden_multiplier_c", str(mc.hidden_multiplier_c)),
             ("matching.init_std", _fmt(mc.init_std)), ("matching.lrn", str(int(mc.lrn))),
             ("parameter_count", str(network.parameter_count))]
    blobs, offset = [], 0
    for i, p in enumerate(network.params):
        blob = ad.tensor_to_bytes(p.data)
        items.append((f"tensor.{i}", f"{p.name} {p.group} {offset} {len(blob)} {hashlib.sha256(blob).hexdigest()}"))
        blobs.append(blob)
        offset += len(blob)
    if optimizer is not None:
        items.append(("optimizer.momentum", _fmt(optimizer.momentum)))
        items.append(("optimizer.weight_decay", _fmt(optimizer.weight_decay)))
        for g in sorted(optimizer.lr):
            items.append((f"optimizer.lr.{g}", _fmt(optimizer.lr[g])))
        for i, name in enumerate(sorted(optimizer.velocity)):
            blob = ad.tensor_to_bytes(optimizer.velocity[name])
            items.append((f"velocity.{i}", f"{name} {offset} {len(blob)} {hashlib.sha256(blob).hexdigest()}"))
            blobs.append(blob)
            offset += len(blob)
    for k in sorted(extra or {}):
        items.append((f"extra.{k}", str(extra[k])))
    (d / "tensors.bin").write_bytes(b"".join(blobs))
    write_manifest(d / "manifest.txt", items)
    return d


def load_checkpoint(path: str | Path, expect_variant: str | None = None
                    ) -> tuple[FashionNet, OptimizerState | None, dict[str, str]]:
    d = Path(path)
    if not (d / "manifest.txt").exists() or not (d / "tensors.bin").exists():
        raise FileNotFoundError(f"no checkpoint at {d}")
    try:
        m = read_manifest(d / "manifest.txt")
    except ValueError as e:
        raise CorruptCheckpointError(str(e)) from None
    if m.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{d}: not a checkpoint (format={m.get('format')!r})")
    if m.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(f"{d}: checkpoint version {m.get('version')}, expected {CHECKPOINT_VERSION}")
    if expect_variant is not None and m["variant"] != expect_variant.lower():
        raise VariantMismatchError(f"{d}: checkpoint is variant {m['variant']}, expected {expect_variant.lower()}")
    try:
        lrn = [float(x) for x in m["backbone.lrn"].split(",")]
        bb = BackboneConfig(image_size=int(m["backbone.image_size"]), feature_dim=int(m["backbone.feature_dim"]),
                            widths=tuple(int(x) for x in m["backbone.widths"].split(",")),
                            kernel=int(m["backbone.kernel"]),
                            lrn=LRNConfig(int(lrn[0]), lrn[1], lrn[2], lrn[3]))
        mc = MatchingConfig(int(m["matching.hidden_multiplier_b"]), int(m["matching.hidden_multiplier_c"]),
                            float(m["matching.init_std"]), bool(int(m["matching.lrn"])))
        net = FashionNet(m["variant"], bb, mc, int(m["seed"]), tuple(m["categories"].split(",")), m["dtype"])
    except (KeyError, ValueError) as e:
        raise CorruptCheckpointError(f"{d}: bad manifest ({e})") from None
    raw = (d / "tensors.bin").read_bytes()

    def blob(offset: str, length: str, digest: str) -> np.ndarray:
        o, n = int(offset), int(length)
        chunk = raw[o:o + n]
        if len(chunk) != n or hashlib.sha256(chunk).hexdigest() != digest:
            raise CorruptCheckpointError(f"{d}: tensor blob at offset {o} is corrupt")
        try:
            return ad.tensor_from_bytes(chunk, net.dtype)[0]
        except ValueError as e:
            raise CorruptCheckpointError(f"{d}: {e}") from None

    state, groups = {}, {}
    for key, val in m.items():
        if key.startswith("tensor."):
            name, group, off, n, digest = val.split()
            state[name] = blob(off, n, digest)
            groups[name] = group
    for p in net.params:
        if groups.get(p.name) != p.group:
            raise CorruptCheckpointError(f"{d}: group tag mismatch for {p.name}")
    if len(state) != len(net.params):
        raise CorruptCheckpointError(f"{d}: expected {len(net.params)} tensors, found {len(state)}")
    net.load_state(state)
    opt = None
    if "optimizer.momentum" in m:
        lr = {k[len("optimizer.lr."):]: float(v) for k, v in m.items() if k.startswith("optimizer.lr.")}
        opt = OptimizerState(lr, float(m["optimizer.momentum"]),
                             weight_decay=float(m.get("optimizer.weight_decay", "0.0")))
        for key, val in m.items():
            if key.startswith("velocity."):
                name, off, n, digest = val.split()
                opt.velocity[name] = blob(off, n, digest)
    extra = {k[len("extra."):]: v for k, v in m.items() if k.startswith("extra.")}
    return net, opt, extra
