import numpy as np
import pytest
from conftest import TINY
from hypothesis import given, settings, strategies as st
from scipy import stats

from outfitrank.catalog import (CATEGORIES, Catalog, CatalogConfig, DatasetError, UserProfile, category_pairs,
                                generate_catalog, generate_dataset, generate_neutral_outfits,
                                generate_user_outfits, generate_users, load_dataset, oracle_score,
                                random_outfits, render_item, save_dataset, split_dataset)


@pytest.fixture(scope="module")
def small():
    cfg = CatalogConfig(n_users=3, items_per_category=80, image_size=16, positives=(8, 2, 4), noise_fraction=0.0)
    return cfg, generate_catalog(cfg, 1), generate_users(cfg, 1)


def zero_user(k=8):
    return UserProfile(0, {"+".join(p): np.zeros((k, k)) for p in category_pairs(CATEGORIES)})


def one_hot(k, i=0):
    e = np.zeros(k)
    e[i] = 1.0
    return e


def catalog_from(attrs_by_cat):
    attrs = np.concatenate([np.atleast_2d(a) for a in attrs_by_cat])
    cats = np.concatenate([np.full(len(np.atleast_2d(a)), i) for i, a in enumerate(attrs_by_cat)])
    return Catalog(CATEGORIES, cats, attrs, np.zeros((len(attrs), 3, 1, 1), np.float32))


# -- items ------------------------------------------------------------------------------

def test_catalog_is_deterministic(small):
    cfg, cat, _ = small
    again = generate_catalog(cfg, 1)
    assert np.array_equal(cat.attributes, again.attributes) and np.array_equal(cat.images, again.images)
    assert not np.array_equal(cat.attributes, generate_catalog(cfg, 2).attributes)


def test_attributes_in_range(small):
    _, cat, _ = small
    assert cat.attributes.min() >= -1 and cat.attributes.max() <= 1
    assert cat.attributes.shape == (240, 8) and np.bincount(cat.category_of).tolist() == [80, 80, 80]


@pytest.mark.parametrize("category", CATEGORIES)
def test_zero_attributes_render_the_gray_reference(category):
    img = render_item(np.zeros(8), category, 32)
    inside = img[0] != 1.0
    assert inside.any()
    assert np.all(img[:, inside] == 0.5) and np.all(img[:, ~inside] == 1.0)


def test_equal_attributes_give_equal_images(rng):
    a = rng.uniform(-1, 1, 8)
    assert np.array_equal(render_item(a, "top", 32), render_item(a.copy(), "top", 32))
    assert not np.array_equal(render_item(a, "top", 32), render_item(a, "shoes", 32))


def test_attributes_are_linearly_recoverable_from_pixels(small):
    # rendering exposes the attributes: a least-squares read-out of the pixels recovers them
    _, cat, _ = small
    for c in range(3):
        ids = np.flatnonzero(cat.category_of == c)
        X = cat.images[ids].reshape(len(ids), -1).astype(np.float64)
        X = np.hstack([X, np.ones((len(ids), 1))])
        coef, *_ = np.linalg.lstsq(X, cat.attributes[ids], rcond=None)
        assert np.abs(X @ coef - cat.attributes[ids]).max() < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        CatalogConfig(n_attributes=1)
    with pytest.raises(ValueError):
        CatalogConfig(image_size=8)


# -- oracle -------------------------------------------------------------------------------

def test_oracle_zero_matrices_score_zero(rng):
    cat = catalog_from([rng.uniform(-1, 1, (2, 8)) for _ in range(3)])
    assert np.all(oracle_score(cat, zero_user(), np.array([[0, 2, 4], [1, 3, 5]])) == 0.0)


def test_oracle_hand_value():
    user = zero_user()
    user.matrices["bottom+top"] = np.eye(8)
    cat = catalog_from([one_hot(8), one_hot(8), one_hot(8, 3)])
    assert oracle_score(cat, user, np.array([[0, 1, 2]]))[0] == 1.0


def test_oracle_is_pairwise_decomposable(small, rng):
    _, cat, users = small
    user = users[0]
    outfits = random_outfits(cat, 50, rng)
    new_shoes = rng.choice(cat.ids("shoes"), 50)
    swapped = outfits.copy()
    swapped[:, 2] = new_shoes
    diff = oracle_score(cat, user, outfits, noise=False) - oracle_score(cat, user, swapped, noise=False)
    A = cat.attributes
    t, b = A[outfits[:, 0]], A[outfits[:, 1]]
    s_old, s_new = A[outfits[:, 2]], A[new_shoes]
    W_bs, W_st = user.matrices["bottom+shoes"], user.matrices["shoes+top"]
    expected = (np.einsum("ni,ij,nj->n", b, W_bs, s_old - s_new)
                + np.einsum("ni,ij,nj->n", s_old - s_new, W_st, t))
    assert np.allclose(diff, expected, atol=1e-12)


def test_oracle_mean_over_random_outfits_is_zero(small):
    # zero mean holds over item draws, so use a large attribute-only catalog: with 5000 items per
    # category the finite-catalog bias (~1e-4) sits far below the sampling error (~1e-2)
    _, _, users = small
    rng = np.random.default_rng(0)
    cat = catalog_from([rng.uniform(-1, 1, (5000, 8)) for _ in range(3)])
    for user in users:
        g = oracle_score(cat, user, random_outfits(cat, 10_000, rng), noise=False)
        assert abs(g.mean()) < 3 * g.std(ddof=1) / np.sqrt(len(g))


def test_noise_is_fixed_per_user_and_outfit():
    ds = generate_dataset(TINY, seed=3)
    t = ds.outfits
    i = t.select(0)[0]
    again = oracle_score(ds.catalog, ds.users[0], t.items[i:i + 1], ds.seed)
    assert again[0] == t.score[i]


def test_user_matrices_respect_the_spectral_bound():
    cfg = CatalogConfig(n_users=5, spectral_bound=0.7)
    for user in generate_users(cfg, 0):
        assert all(np.linalg.norm(W, 2) <= 0.7 + 1e-12 for W in user.matrices.values())


# -- positives and neutrals -------------------------------------------------------------------

def test_positives_beat_random_outfits_for_every_user(small):
    _, cat, users = small
    rng = np.random.default_rng(1)
    for user in users:
        pos, _ = generate_user_outfits(user, cat, 30, seed=1)
        rand = random_outfits(cat, 2000, rng)
        assert oracle_score(cat, user, pos).mean() > oracle_score(cat, user, rand).mean()


def test_zero_positives_is_empty(small):
    _, cat, users = small
    items, scores = generate_user_outfits(users[0], cat, 0, seed=1)
    assert items.shape == (0, 3) and len(scores) == 0


def test_insufficient_catalog_is_an_error():
    cfg = CatalogConfig(items_per_category=4, n_users=1)
    cat, users = generate_catalog(cfg, 0), generate_users(cfg, 0)
    with pytest.raises(DatasetError):
        generate_user_outfits(users[0], cat, 10, seed=0, candidate_multiplier=20)


def test_users_disagree_on_the_same_pool(small):
    _, cat, users = small
    pool = random_outfits(cat, 500, np.random.default_rng(4))
    a = oracle_score(cat, users[0], pool, noise=False)
    b = oracle_score(cat, users[1], pool, noise=False)
    assert stats.spearmanr(a, b).statistic < 1.0


def test_neutral_counts_and_determinism(small):
    _, cat, _ = small
    n = generate_neutral_outfits(cat, 372, seed=0)
    assert n.shape == (372, 3)
    assert np.array_equal(n, generate_neutral_outfits(cat, 372, seed=0))


def test_neutral_marginals_are_uniform(small):
    _, cat, _ = small
    n = generate_neutral_outfits(cat, 20_000, seed=2)
    for c, name in enumerate(CATEGORIES):
        counts = np.bincount(n[:, c] - cat.ids(name)[0], minlength=80)
        assert stats.chisquare(counts).pvalue > 0.001


def test_min_positive_beats_median_neutral_without_noise():
    cfg = CatalogConfig(n_users=4, items_per_category=100, image_size=16, noise_fraction=0.0)
    ds = generate_dataset(cfg, seed=0)
    t = ds.outfits
    for u in range(4):
        pos, neu = t.score[t.select(u, label=1)], t.score[t.select(u, label=0)]
        assert pos.min() > np.median(neu)


# -- splits and datasets ------------------------------------------------------------------------

def test_full_scale_counts_derive_neutrals():
    cfg = CatalogConfig.paper_scale()
    assert cfg.positives == (202, 46, 62) and cfg.neutrals == (1212, 276, 372)


def test_desk_counts_derive_neutrals():
    assert CatalogConfig().neutrals == (240, 60, 84)


def test_split_assigns_requested_counts(rng):
    pos, neu = np.arange(0, 14), np.arange(14, 98)
    ps, ns = split_dataset(pos, neu, (8, 2, 4), 6, rng)
    assert np.bincount(ps).tolist() == [8, 2, 4] and np.bincount(ns).tolist() == [48, 12, 24]


def test_split_rejects_overlapping_ids(rng):
    with pytest.raises(DatasetError):
        split_dataset(np.arange(0, 14), np.arange(13, 97), (8, 2, 4), 6, rng)


def test_split_rejects_counts_that_do_not_add_up(rng):
    with pytest.raises(DatasetError):
        split_dataset(np.arange(0, 15), np.arange(15, 99), (8, 2, 4), 6, rng)
    with pytest.raises(DatasetError):
        split_dataset(np.arange(0, 14), np.arange(14, 90), (8, 2, 4), 6, rng)


def test_dataset_counts_per_user(tiny_dataset):
    counts = tiny_dataset.counts()
    for u in range(TINY.n_users):
        for split, n_pos in zip(("train", "val", "test"), TINY.positives):
            assert counts[(u, split, 1)] == n_pos and counts[(u, split, 0)] == 6 * n_pos


def test_record_ids_carry_no_label_order(tiny_dataset):
    labels = tiny_dataset.outfits.label[tiny_dataset.outfits.select(0)]
    assert not np.array_equal(labels, np.sort(labels)[::-1])


def test_mean_image_uses_the_training_split(tiny_dataset):
    t = tiny_dataset.outfits
    train = t.select(split="train")
    top_mean = tiny_dataset.catalog.images[t.items[train, 0]].astype(np.float64).mean(axis=0)
    assert np.allclose(tiny_dataset.mean_image[0], top_mean, atol=1e-6)


def test_regeneration_is_bit_identical(tiny_dataset):
    again = generate_dataset(TINY, seed=3)
    t, u = tiny_dataset.outfits, again.outfits
    for col in ("user", "split", "label", "items", "score"):
        assert np.array_equal(getattr(t, col), getattr(u, col))
    assert np.array_equal(tiny_dataset.catalog.images, again.catalog.images)


def test_save_load_save_is_byte_identical(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path / "one")
    loaded = load_dataset(tmp_path / "one")
    save_dataset(loaded, tmp_path / "two")
    for f in sorted(p.name for p in (tmp_path / "one").iterdir()):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes(), f
    assert np.array_equal(loaded.outfits.score, tiny_dataset.outfits.score)


def test_load_rejects_tampered_images(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path / "d")
    blob = bytearray((tmp_path / "d" / "images.bin").read_bytes())
    blob[-1] ^= 1
    (tmp_path / "d" / "images.bin").write_bytes(bytes(blob))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "d")


@settings(max_examples=10)
@given(st.integers(0, 2**16))
def test_any_seed_yields_valid_splits(seed):
    ds = generate_dataset(CatalogConfig(n_users=1, items_per_category=30, image_size=16, positives=(3, 1, 2),
                                        candidate_multiplier=4), seed)
    t = ds.outfits
    assert len(np.unique(t.ids)) == len(t) == 6 * 7
    for s in range(3):
        assert set(t.label[t.split == s]) == {0, 1}
