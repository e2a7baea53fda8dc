"""Dataset generator: determinism, referent uniqueness, centroid, export."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refseg.data import (
    RELATIONS,
    Sample,
    SceneObject,
    SceneSpec,
    export_dataset,
    generate_dataset,
    load_dataset,
    mask_centroid,
    matching_objects,
    relation_holds,
)
from refseg.vocab import CLS, MASK, PAD, MAX_LEN, build_vocabulary, detokenize, tokenize

VOCAB = build_vocabulary()


# ---------------------------------------------------------------------------
# independent expression parser (the exhaustive-match oracle)

REL_WORDS = {
    ("left", "of"): "left",
    ("right", "of"): "right",
    ("above",): "above",
    ("below",): "below",
    ("to", "the", "left", "of"): "left",
    ("to", "the", "right", "of"): "right",
}


def parse_expression(words):
    """Parse generated expressions back into (descriptor, relation, descriptor)."""
    assert words[0] in ("the", "a")
    d1 = (words[1], words[2])
    rest = words[3:]
    if not rest:
        return d1, None, None
    if rest[:2] == ["that", "is"]:
        rest = rest[2:]
    for phrase, rel in REL_WORDS.items():
        if tuple(rest[: len(phrase)]) == phrase:
            tail = rest[len(phrase) :]
            assert tail[0] == "the" and len(tail) == 3
            return d1, rel, (tail[1], tail[2])
    raise AssertionError(f"unparseable expression: {words}")


def brute_force_referents(sample: Sample) -> list[int]:
    """Match the surface expression against every object in the scene."""
    d1, rel, d2 = parse_expression(sample.expression)
    hits = []
    objs = sample.spec.objects
    for i, obj in enumerate(objs):
        if (obj.color, obj.shape) != d1:
            continue
        if rel is None:
            hits.append(i)
            continue
        if any(
            j != i and (o.color, o.shape) == d2 and relation_holds(rel, obj, o)
            for j, o in enumerate(objs)
        ):
            hits.append(i)
    return hits


# ---------------------------------------------------------------------------
# generate_dataset


class TestGenerateDataset:
    def test_determinism_byte_identical(self):
        a = generate_dataset(seed=7, count=1, grid=3, image_size=64)[0]
        b = generate_dataset(seed=7, count=1, grid=3, image_size=64)[0]
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.mask, b.mask)
        assert a.spec == b.spec
        assert a.centroid == b.centroid

    def test_expressions_uniquely_identify_referent(self):
        ds = generate_dataset(seed=7, count=100, grid=3, image_size=64)
        for s in ds:
            assert brute_force_referents(s) == [s.spec.referent], s.expression

    def test_no_empty_or_full_masks(self):
        ds = generate_dataset(seed=3, count=100, grid=3, image_size=64)
        for s in ds:
            assert 0 < int(s.mask.sum()) < s.mask.size

    def test_both_forms_present(self):
        ds = generate_dataset(seed=11, count=20, grid=3, image_size=64)
        rel = [s for s in ds if s.spec.relation is not None]
        simple = [s for s in ds if s.spec.relation is None]
        assert rel and simple

    def test_mask_is_exact_referent_footprint(self):
        ds = generate_dataset(seed=2, count=20, grid=3, image_size=64)
        for s in ds:
            ref = s.spec.objects[s.spec.referent]
            color = np.array(
                {
                    "red": (220, 40, 40),
                    "green": (40, 180, 40),
                    "blue": (40, 40, 220),
                    "yellow": (230, 210, 40),
                }[ref.color],
                dtype=np.float32,
            ) / 255.0
            image_matches = np.all(np.isclose(s.image, color, atol=0), axis=-1)
            # every mask pixel carries the referent color
            assert np.all(image_matches[s.mask.astype(bool)])

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="grid"):
            generate_dataset(seed=0, count=1, grid=1, image_size=64)
        with pytest.raises(ValueError, match="count"):
            generate_dataset(seed=0, count=0, grid=3, image_size=64)
        with pytest.raises(ValueError, match="divisible"):
            generate_dataset(seed=0, count=1, grid=3, image_size=60)

    def test_mask_token_never_in_expressions(self):
        ds = generate_dataset(seed=9, count=50)
        for s in ds:
            assert MASK not in s.tokens

    def test_distinct_cells(self):
        ds = generate_dataset(seed=13, count=50)
        for s in ds:
            cells = [o.cell for o in s.spec.objects]
            assert len(set(cells)) == len(cells)


# ---------------------------------------------------------------------------
# tokenize / detokenize


class TestTokenize:
    def test_basic_layout(self):
        ids = tokenize(["red", "circle"], VOCAB, max_len=6)
        assert ids[0] == CLS
        assert ids[1] == VOCAB.id("red") and ids[2] == VOCAB.id("circle")
        assert ids[3:] == [PAD, PAD, PAD]
        assert len(ids) == 6

    def test_empty_expression(self):
        assert tokenize([], VOCAB, max_len=6) == [CLS] + [PAD] * 5

    def test_unknown_word_named_in_error(self):
        with pytest.raises(KeyError, match="zebra"):
            tokenize(["zebra"], VOCAB, max_len=6)

    def test_too_long(self):
        with pytest.raises(ValueError, match="max_len"):
            tokenize(["red"] * 12, VOCAB, max_len=12)

    def test_round_trip_all_words(self):
        for word in VOCAB.tokens[3:]:
            assert detokenize(tokenize([word], VOCAB), VOCAB) == [word]

    def test_vocab_bijection_contiguous(self):
        assert VOCAB.tokens[PAD] == "<pad>"
        assert VOCAB.tokens[MASK] == "<mask>"
        assert VOCAB.tokens[CLS] == "<cls>"
        assert sorted(VOCAB.index.values()) == list(range(len(VOCAB)))


# ---------------------------------------------------------------------------
# mask_centroid


class TestMaskCentroid:
    def test_all_ones(self):
        assert mask_centroid(np.ones((8, 8), dtype=np.uint8)) == (0.5, 0.5)

    def test_single_pixel_origin(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[0, 0] = 1
        assert mask_centroid(m) == (0.0, 0.0)

    def test_left_half_4x4(self):
        # foreground = columns 0-1 of a 4x4 mask
        m = np.zeros((4, 4), dtype=np.uint8)
        m[:, :2] = 1
        cx, cy = mask_centroid(m)
        # direct evaluation: cols mean (0+1)/2 = 0.5, /(4-1) = 1/6
        assert cx == pytest.approx(1 / 6, abs=1e-15)
        assert cy == pytest.approx(0.5, abs=1e-15)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError, match="foreground"):
            mask_centroid(np.zeros((4, 4), dtype=np.uint8))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_mirror_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((9, 13)) < 0.3).astype(np.uint8)
        if mask.sum() == 0:
            mask[rng.integers(9), rng.integers(13)] = 1
        cx, cy = mask_centroid(mask)
        mx, my = mask_centroid(mask[:, ::-1])
        assert mx == pytest.approx(1 - cx, abs=1e-12)
        assert my == pytest.approx(cy, abs=1e-12)


# ---------------------------------------------------------------------------
# scene semantics


class TestSceneSemantics:
    def test_relation_holds(self):
        a = SceneObject("circle", "red", (0, 0))
        b = SceneObject("square", "blue", (1, 2))
        assert relation_holds("left", a, b)
        assert relation_holds("above", a, b)
        assert not relation_holds("right", a, b)
        assert not relation_holds("below", a, b)

    def test_matching_objects_ambiguous(self):
        objs = (
            SceneObject("circle", "red", (0, 0)),
            SceneObject("circle", "red", (1, 1)),
        )
        spec = SceneSpec(objs, referent=0)
        assert matching_objects(spec) == [0, 1]

    def test_relations_tuple(self):
        assert set(RELATIONS) == {"left", "right", "above", "below"}


# ---------------------------------------------------------------------------
# export / load round trip


def test_export_round_trip(tmp_path):
    ds = generate_dataset(seed=4, count=6)
    export_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.allclose(a.image, b.image, atol=0)  # PNG round trip is lossless
        assert a.expression == b.expression
        assert a.spec == b.spec
        assert a.centroid == pytest.approx(b.centroid)
