"""Synthetic outfit corpus with a known, pairwise-decomposable ground truth.

Items carry hidden attribute vectors in [-1, 1]^k that are painted into
their images as colored blocks over a category silhouette. Each user owns
one k x k preference matrix per category pair; a user's positive outfits are
the best-scoring draws from a uniform candidate pool and neutral outfits are
uniform random mixes.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import tensor_from_bytes, tensor_to_bytes

CATEGORIES = ("top", "bottom", "shoes")
SPLITS = ("train", "val", "test")
POSITIVE, NEUTRAL = "positive", "neutral"

DESK_POSITIVES = (40, 10, 14)
FULL_SCALE_POSITIVES = (202, 46, 62)

FORMAT = "outfitrank-dataset"
FORMAT_VERSION = 1

# fixed per-component seed keys, mixed with the root seed
SEED_KEYS = {"items": 11, "users": 13, "positives": 17, "neutrals": 19, "split": 23, "noise": 29}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CatalogConfig:
    n_users: int = 8
    items_per_category: int = 300
    n_attributes: int = 8
    image_size: int = 32
    categories: tuple[str, ...] = CATEGORIES
    positives: tuple[int, int, int] = DESK_POSITIVES
    neutral_ratio: int = 6
    candidate_multiplier: int = 50
    shared_taste: float = 0.5
    spectral_bound: float = 1.0
    noise_fraction: float = 0.1
    render_seed: int = 7

    def __post_init__(self):
        if self.n_attributes < 2:
            raise ValueError("need at least 2 latent attributes")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if len(self.categories) < 2 or len(set(self.categories)) != len(self.categories):
            raise ValueError(f"need >= 2 distinct categories, got {self.categories}")
        if len(self.positives) != 3 or min(self.positives) < 0:
            raise ValueError(f"positives must be three non-negative counts, got {self.positives}")
        if not 0.0 <= self.shared_taste <= 1.0:
            raise ValueError("shared_taste must be in [0, 1]")

    @property
    def neutrals(self) -> tuple[int, int, int]:
        return tuple(self.neutral_ratio * n for n in self.positives)

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return category_pairs(self.categories)

    @classmethod
    def paper_scale(cls, **kw) -> "CatalogConfig":
        return cls(positives=FULL_SCALE_POSITIVES, **kw)


def category_pairs(categories) -> list[tuple[str, str]]:
    """Unordered category pairs, each written in alphabetical order."""
    return [tuple(sorted(p)) for p in itertools.combinations(sorted(categories), 2)]


def pair_key(pair: tuple[str, str]) -> str:
    return "+".join(pair)


# -- items ---------------------------------------------------------------------

def _silhouette(category: str, size: int) -> np.ndarray:
    """Boolean S x S mask of a garment-like shape; unknown categories get a hashed blob."""
    y, x = np.mgrid[0:size, 0:size] / size
    if category == "top":
        mask = ((y > 0.15) & (y < 0.85) & (x > 0.28) & (x < 0.72)) | ((y > 0.15) & (y < 0.42) & (x > 0.06) & (x < 0.94))
    elif category == "bottom":
        mask = ((y > 0.08) & (y < 0.3) & (x > 0.25) & (x < 0.75)) | \
               ((y >= 0.3) & (y < 0.95) & (((x > 0.25) & (x < 0.46)) | ((x > 0.54) & (x < 0.75))))
    elif category == "shoes":
        mask = ((y > 0.5) & (y < 0.78) & (((x > 0.06) & (x < 0.46)) | ((x > 0.54) & (x < 0.94)))) | \
               ((y > 0.3) & (y < 0.5) & (((x > 0.06) & (x < 0.2)) | ((x > 0.54) & (x < 0.68))))
    else:
        h = int(hashlib.sha256(category.encode()).hexdigest(), 16)
        cy, cx, r = 0.3 + (h % 40) / 100, 0.3 + (h // 40 % 40) / 100, 0.25
        mask = (y - cy) ** 2 + (x - cx) ** 2 < r * r
    return mask


def _palette(category: str, k: int, render_seed: int) -> np.ndarray:
    # 4 blocks x 3 channels, each a fixed linear read-out of the attributes
    h = int(hashlib.sha256(category.encode()).hexdigest()[:8], 16)
    rng = np.random.default_rng([render_seed, h])
    P = rng.standard_normal((12, k))
    return P / np.abs(P).sum(axis=1, keepdims=True)


def render_item(attributes: np.ndarray, category: str, size: int, render_seed: int = 7) -> np.ndarray:
    """Deterministic 3 x S x S image in [0, 1]: white background, silhouette split
    into quadrant color blocks whose RGB values are linear in the attributes.
    The zero vector renders as the plain mid-gray silhouette."""
    a = np.asarray(attributes, dtype=np.float64)
    colors = 0.5 + 0.45 * (_palette(category, a.size, render_seed) @ a)
    colors = colors.reshape(4, 3)
    mask = _silhouette(category, size)
    half = size // 2
    img = np.ones((3, size, size))
    for q, (r0, c0) in enumerate([(0, 0), (0, half), (half, 0), (half, half)]):
        block = np.zeros((size, size), dtype=bool)
        block[r0:r0 + (half if r0 == 0 else size - half), c0:c0 + (half if c0 == 0 else size - half)] = True
        sel = mask & block
        img[:, sel] = colors[q][:, None]
    return img.astype(np.float32)


@dataclass
class Catalog:
    categories: tuple[str, ...]
    category_of: np.ndarray      # (n_items,) index into categories
    attributes: np.ndarray       # (n_items, k) float64
    images: np.ndarray           # (n_items, 3, S, S) float32

    @property
    def n_items(self) -> int:
        return len(self.category_of)

    def ids(self, category: str) -> np.ndarray:
        return np.flatnonzero(self.category_of == self.categories.index(category))


def generate_catalog(config: CatalogConfig, seed: int) -> Catalog:
    rng = np.random.default_rng([seed, SEED_KEYS["items"]])
    n, k = config.items_per_category, config.n_attributes
    cats, attrs = [], []
    for ci, _ in enumerate(config.categories):
        cats.append(np.full(n, ci, dtype=np.int64))
        attrs.append(rng.uniform(-1.0, 1.0, (n, k)))
    category_of = np.concatenate(cats)
    attributes = np.concatenate(attrs)
    images = np.stack([render_item(a, config.categories[c], config.image_size, config.render_seed)
                       for a, c in zip(attributes, category_of)])
    return Catalog(tuple(config.categories), category_of, attributes, images)


# -- users and the oracle --------------------------------------------------------

@dataclass
class UserProfile:
    id: int
    matrices: dict[str, np.ndarray]   # pair key -> k x k; rows index the pair's first category
    noise: float = 0.0


def _bounded(m: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(m, 2)
    return m * (bound / norm) if norm > bound else m


def generate_users(config: CatalogConfig, seed: int) -> list[UserProfile]:
    """Taste = sqrt(shared) * common + sqrt(1 - shared) * personal, per category pair."""
    rng = np.random.default_rng([seed, SEED_KEYS["users"]])
    k = config.n_attributes
    keys = [pair_key(p) for p in config.pairs]
    common = {key: rng.standard_normal((k, k)) / np.sqrt(k) for key in keys}
    c = config.shared_taste
    users = []
    for u in range(config.n_users):
        mats = {}
        for key in keys:
            personal = rng.standard_normal((k, k)) / np.sqrt(k)
            mats[key] = _bounded(np.sqrt(c) * common[key] + np.sqrt(1 - c) * personal, config.spectral_bound)
        # std of the noise-free score over uniform outfits: Var(a'Wb) = ||W||_F^2 / 9
        std = np.sqrt(sum(np.sum(m * m) for m in mats.values()) / 9.0)
        users.append(UserProfile(u, mats, config.noise_fraction * std))
    return users


def pair_terms(user: UserProfile, attrs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-pair bilinear terms; ``attrs`` maps category -> (n, k) (or (k,))."""
    out = {}
    for key, W in user.matrices.items():
        first, second = key.split("+")
        a, b = np.atleast_2d(attrs[first]), np.atleast_2d(attrs[second])
        out[key] = np.einsum("ni,ij,nj->n", a, W, b)
    return out


def outfit_noise(user: UserProfile, items: np.ndarray, seed: int) -> np.ndarray:
    """One N(0, sigma^2) draw per (user, outfit), keyed by the outfit's item ids."""
    items = np.atleast_2d(items)
    if user.noise == 0.0:
        return np.zeros(len(items))
    return np.array([np.random.default_rng([seed, SEED_KEYS["noise"], user.id, *map(int, row)]).standard_normal()
                     for row in items]) * user.noise


def oracle_score(catalog: Catalog, user: UserProfile, items: np.ndarray, seed: int = 0,
                 noise: bool = True) -> np.ndarray:
    """Ground-truth compatibility g(u, o) for outfits given as rows of item ids
    (columns in catalog category order)."""
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    attrs = {cat: catalog.attributes[items[:, i]] for i, cat in enumerate(catalog.categories)}
    g = sum(pair_terms(user, attrs).values())
    if noise:
        g = g + outfit_noise(user, items, seed)
    return g


def random_outfits(catalog: Catalog, n: int, rng: np.random.Generator) -> np.ndarray:
    cols = [rng.choice(catalog.ids(cat), size=n) for cat in catalog.categories]
    return np.stack(cols, axis=1) if n else np.zeros((0, len(catalog.categories)), dtype=np.int64)


def generate_user_outfits(user: UserProfile, catalog: Catalog, n_pos: int, seed: int,
                          candidate_multiplier: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Top ``n_pos`` of ``n_pos * candidate_multiplier`` uniform candidates by oracle score.
    Returns (items (n_pos, N), scores), best first."""
    if n_pos == 0:
        return np.zeros((0, len(catalog.categories)), dtype=np.int64), np.zeros(0)
    n_cand = n_pos * candidate_multiplier
    per_cat = min(len(catalog.ids(c)) for c in catalog.categories)
    if candidate_multiplier < 1 or per_cat ** len(catalog.categories) < 2 * n_cand:
        raise DatasetError(f"catalog too small for {n_cand} candidate outfits ({per_cat} items per category)")
    rng = np.random.default_rng([seed, SEED_KEYS["positives"], user.id])
    cand = random_outfits(catalog, n_cand, rng)
    scores = oracle_score(catalog, user, cand, seed)
    order = np.lexsort((np.arange(n_cand), -scores))[:n_pos]
    return cand[order], scores[order]


def generate_neutral_outfits(catalog: Catalog, n: int, seed: int, user_id: int = 0) -> np.ndarray:
    """Uniform independent draws per category; per-user streams."""
    rng = np.random.default_rng([seed, SEED_KEYS["neutrals"], user_id])
    return random_outfits(catalog, n, rng)


# -- records and splits -----------------------------------------------------------

@dataclass
class OutfitTable:
    """Column-oriented outfit records; row index == outfit id."""

    user: np.ndarray
    split: np.ndarray     # index into SPLITS
    label: np.ndarray     # 1 positive, 0 neutral
    items: np.ndarray     # (n, N) item ids
    score: np.ndarray     # oracle score (with noise)

    def __len__(self):
        return len(self.user)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def select(self, user: int | None = None, split: str | None = None, label: int | None = None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if user is not None:
            m &= self.user == user
        if split is not None:
            m &= self.split == SPLITS.index(split)
        if label is not None:
            m &= self.label == label
        return np.flatnonzero(m)


def split_dataset(positives: np.ndarray, neutrals: np.ndarray, counts: tuple[int, int, int],
                  neutral_ratio: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Assign split indices to one user's positive and neutral records.

    ``positives``/``neutrals`` are arrays of record ids. Returns split index arrays
    aligned with each input (after a seeded shuffle)."""
    counts = tuple(int(c) for c in counts)
    if len(positives) != sum(counts):
        raise DatasetError(f"{len(positives)} positives do not match split counts {counts}")
    if len(neutrals) != neutral_ratio * sum(counts):
        raise DatasetError(f"{len(neutrals)} neutrals is not {neutral_ratio} x {sum(counts)} positives")
    if np.intersect1d(positives, neutrals).size or len(np.unique(positives)) != len(positives) \
            or len(np.unique(neutrals)) != len(neutrals):
        raise DatasetError("record ids overlap across splits")
    pos_split = np.repeat(np.arange(3), counts)
    neu_split = np.repeat(np.arange(3), [neutral_ratio * c for c in counts])
    return rng.permutation(pos_split), rng.permutation(neu_split)


@dataclass
class Dataset:
    config: CatalogConfig
    seed: int
    catalog: Catalog
    users: list[UserProfile]
    outfits: OutfitTable
    mean_image: np.ndarray = field(repr=False)   # (N, 3, S, S), per-category mean over train records

    @property
    def categories(self) -> tuple[str, ...]:
        return self.config.categories

    def preprocessed_images(self) -> np.ndarray:
        """Item images with their category's mean image subtracted (float32)."""
        return (self.catalog.images - self.mean_image[self.catalog.category_of]).astype(np.float32)

    def counts(self) -> dict[tuple[int, str, int], int]:
        out = {}
        for u in range(len(self.users)):
            for s in SPLITS:
                for lab in (1, 0):
                    out[(u, s, lab)] = len(self.outfits.select(u, s, lab))
        return out


def compute_mean_image(catalog: Catalog, outfits: OutfitTable) -> np.ndarray:
    train = outfits.select(split="train")
    n_cat = len(catalog.categories)
    if len(train) == 0:
        return np.zeros((n_cat,) + catalog.images.shape[1:], dtype=np.float32)
    return np.stack([catalog.images[outfits.items[train, c]].astype(np.float64).mean(axis=0)
                     for c in range(n_cat)]).astype(np.float32)


def generate_dataset(config: CatalogConfig = CatalogConfig(), seed: int = 0) -> Dataset:
    catalog = generate_catalog(config, seed)
    users = generate_users(config, seed)
    n_pos, n_neu = sum(config.positives), sum(config.neutrals)
    user_col, split_col, label_col, item_rows, score_col = [], [], [], [], []
    next_id = 0
    for user in users:
        pos_items, pos_scores = generate_user_outfits(user, catalog, n_pos, seed, config.candidate_multiplier)
        neu_items = generate_neutral_outfits(catalog, n_neu, seed, user.id)
        neu_scores = oracle_score(catalog, user, neu_items, seed) if n_neu else np.zeros(0)
        pos_ids = np.arange(next_id, next_id + n_pos)
        neu_ids = np.arange(next_id + n_pos, next_id + n_pos + n_neu)
        next_id += n_pos + n_neu
        rng = np.random.default_rng([seed, SEED_KEYS["split"], user.id])
        pos_split, neu_split = split_dataset(pos_ids, neu_ids, config.positives, config.neutral_ratio, rng)
        # shuffle rows so record ids carry no label information (ids break score ties)
        perm = rng.permutation(n_pos + n_neu)
        user_col.append(np.full(n_pos + n_neu, user.id))
        split_col.append(np.concatenate([pos_split, neu_split])[perm])
        label_col.append(np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neu, dtype=np.int64)])[perm])
        item_rows.append(np.concatenate([pos_items, neu_items])[perm])
        score_col.append(np.concatenate([pos_scores, neu_scores])[perm])
    outfits = OutfitTable(np.concatenate(user_col).astype(np.int64), np.concatenate(split_col).astype(np.int64),
                          np.concatenate(label_col), np.concatenate(item_rows).astype(np.int64),
                          np.concatenate(score_col))
    return Dataset(config, seed, catalog, users, outfits, compute_mean_image(catalog, outfits))


# -- on-disk format -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _config_items(config: CatalogConfig) -> list[tuple[str, str]]:
    return [
        ("n_users", str(config.n_users)),
        ("items_per_category", str(config.items_per_category)),
        ("n_attributes", str(config.n_attributes)),
        ("image_size", str(config.image_size)),
        ("categories", ",".join(config.categories)),
        ("positives", ",".join(map(str, config.positives))),
        ("neutrals", ",".join(map(str, config.neutrals))),
        ("neutral_ratio", str(config.neutral_ratio)),
        ("candidate_multiplier", str(config.candidate_multiplier)),
        ("shared_taste", _fmt(config.shared_taste)),
        ("spectral_bound", _fmt(config.spectral_bound)),
        ("noise_fraction", _fmt(config.noise_fraction)),
        ("render_seed", str(config.render_seed)),
    ]


def write_manifest(path: Path, items: list[tuple[str, str]]) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items))


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if " = " not in line:
            raise DatasetError(f"{path}:{n}: malformed manifest line")
        k, v = line.split(" = ", 1)
        out[k.strip()] = v.strip()
    return out


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = ds.config
    images = b"".join(tensor_to_bytes(im) for im in ds.catalog.images)
    (d / "images.bin").write_bytes(images)
    (d / "mean_image.bin").write_bytes(tensor_to_bytes(ds.mean_image))
    users = b"".join(tensor_to_bytes(u.matrices[pair_key(p)]) for u in ds.users for p in cfg.pairs)
    (d / "users.bin").write_bytes(users)
    lines = ["id\tcategory\t" + "\t".join(f"a{i}" for i in range(cfg.n_attributes))]
    for i, (c, a) in enumerate(zip(ds.catalog.category_of, ds.catalog.attributes)):
        lines.append(f"{i}\t{cfg.categories[c]}\t" + "\t".join(_fmt(v) for v in a))
    (d / "items.tsv").write_text("\n".join(lines) + "\n")
    t = ds.outfits
    lines = ["id\tuser\tsplit\tlabel\t" + "\t".join(cfg.categories) + "\toracle_score"]
    for i in range(len(t)):
        lines.append(f"{i}\t{t.user[i]}\t{SPLITS[t.split[i]]}\t{POSITIVE if t.label[i] else NEUTRAL}\t"
                     + "\t".join(str(x) for x in t.items[i]) + f"\t{_fmt(t.score[i])}")
    (d / "outfits.tsv").write_text("\n".join(lines) + "\n")
    manifest = [("format", FORMAT), ("version", str(FORMAT_VERSION)), ("seed", str(ds.seed)),
                *_config_items(cfg),
                ("user_noise", ",".join(_fmt(u.noise) for u in ds.users)),
                ("mean_image", "mean_image.bin"), ("images", "images.bin"), ("users", "users.bin"),
                ("items", "items.tsv"), ("outfits", "outfits.tsv"),
                ("images_sha256", hashlib.sha256(images).hexdigest())]
    for u in range(cfg.n_users):
        for s, n_pos, n_neu in zip(SPLITS, cfg.positives, cfg.neutrals):
            manifest.append((f"count.user{u}.{s}", f"{n_pos},{n_neu}"))
    write_manifest(d / "manifest.txt", manifest)
    return d


def config_from_manifest(m: dict[str, str]) -> CatalogConfig:
    ints = lambda s: tuple(int(x) for x in s.split(","))
    return CatalogConfig(
        n_users=int(m["n_users"]), items_per_category=int(m["items_per_category"]),
        n_attributes=int(m["n_attributes"]), image_size=int(m["image_size"]),
        categories=tuple(m["categories"].split(",")), positives=ints(m["positives"]),
        neutral_ratio=int(m["neutral_ratio"]), candidate_multiplier=int(m["candidate_multiplier"]),
        shared_taste=float(m["shared_taste"]), spectral_bound=float(m["spectral_bound"]),
        noise_fraction=float(m["noise_fraction"]), render_seed=int(m["render_seed"]))


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset manifest in {d}")
    m = read_manifest(d / "manifest.txt")
    if m.get("format") != FORMAT or m.get("version") != str(FORMAT_VERSION):
        raise DatasetError(f"unsupported dataset format {m.get('format')}/{m.get('version')}")
    cfg = config_from_manifest(m)
    images_raw = (d / m["images"]).read_bytes()
    if hashlib.sha256(images_raw).hexdigest() != m["images_sha256"]:
        raise DatasetError("image blob checksum mismatch")
    n_items = cfg.items_per_category * len(cfg.categories)
    images, off = [], 0
    for _ in range(n_items):
        im, off = tensor_from_bytes(images_raw, np.float32, off)
        images.append(im)
    mean_image, _ = tensor_from_bytes((d / m["mean_image"]).read_bytes(), np.float32)
    rows = [line.split("\t") for line in (d / m["items"]).read_text().splitlines()[1:]]
    category_of = np.array([cfg.categories.index(r[1]) for r in rows], dtype=np.int64)
    attributes = np.array([[float(x) for x in r[2:]] for r in rows])
    catalog = Catalog(cfg.categories, category_of, attributes, np.stack(images))
    users_raw = (d / m["users"]).read_bytes()
    noise = [float(x) for x in m["user_noise"].split(",")]
    users, off = [], 0
    for u in range(cfg.n_users):
        mats = {}
        for p in cfg.pairs:
            mats[pair_key(p)], off = tensor_from_bytes(users_raw, np.float64, off)
        users.append(UserProfile(u, mats, noise[u]))
    rows = [line.split("\t") for line in (d / m["outfits"]).read_text().splitlines()[1:]]
    n_cat = len(cfg.categories)
    outfits = OutfitTable(
        user=np.array([int(r[1]) for r in rows], dtype=np.int64),
        split=np.array([SPLITS.index(r[2]) for r in rows], dtype=np.int64),
        label=np.array([1 if r[3] == POSITIVE else 0 for r in rows], dtype=np.int64),
        items=np.array([[int(x) for x in r[4:4 + n_cat]] for r in rows], dtype=np.int64).reshape(-1, n_cat),
        score=np.array([float(r[4 + n_cat]) for r in rows]))
    return Dataset(cfg, int(m["seed"]), catalog, users, outfits, mean_image)


def with_counts(config: CatalogConfig, positives) -> CatalogConfig:
    return replace(config, positives=tuple(positives))
