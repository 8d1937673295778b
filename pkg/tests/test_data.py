import numpy as np
import pytest

from src.edwh_clipdistill.data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    WORD_TO_ID,
    SceneObject,
    batch_indices,
    batch_iterator,
    class_captions,
    detokenize,
    export_corpus,
    generate_corpus,
    import_corpus,
    make_batch,
    make_views,
    render_scene,
    sample_crop,
    tokenize,
)
from src.edwh_clipdistill.exceptions import IoError, LengthError, RangeError, UnknownWord
from src.edwh_clipdistill.helpers import numpy_rng

from .fixtures import tiny_cfg, tiny_corpus  # noqa


def test_corpus_is_deterministic():
    first = generate_corpus(6, seed=3)
    second = generate_corpus(6, seed=3)

    for a, b in zip(first, second):
        assert a.caption == b.caption
        assert np.array_equal(a.pixels, b.pixels)


def test_corpus_covers_every_class():
    corpus = generate_corpus(24, seed=0)

    singles = {sample.caption for sample in corpus if sample.index % 2 == 0}
    assert singles == set(class_captions())
    assert len(class_captions()) == 12


def test_corpus_samples():
    corpus = generate_corpus(4, seed=0)

    for sample in corpus:
        assert sample.pixels.shape == (64, 64, 3)
        assert sample.pixels.dtype == np.float32
        assert sample.pixels.min() >= 0 and sample.pixels.max() <= 1

    assert len(corpus[0].scene) == 1
    assert len(corpus[1].scene) == 2
    assert " and " in corpus[1].caption
    # left object is named first
    assert corpus[1].scene[0].center[1] < corpus[1].scene[1].center[1]


def test_offset_gives_disjoint_samples():
    train = generate_corpus(8, seed=0)
    heldout = generate_corpus(8, seed=0, offset=8)

    assert {s.index for s in train}.isdisjoint({s.index for s in heldout})

    with pytest.raises(RangeError):
        generate_corpus(0, seed=0)


def test_render_scene():
    canvas = render_scene([SceneObject("circle", "red", (32.0, 32.0), 10.0)], 64)

    assert canvas[32, 32].tolist() == [1.0, 0.0, 0.0]
    assert canvas[0, 0].tolist() == [0.0, 0.0, 0.0]

    triangle = render_scene([SceneObject("triangle", "blue", (32.0, 32.0), 10.0)], 64)
    # apex up: narrow at the top, wide at the bottom
    assert triangle[23].sum() < triangle[41].sum()

    with pytest.raises(UnknownWord):
        render_scene([SceneObject("hexagon", "red", (32.0, 32.0), 10.0)], 64)


def test_tokenize():
    tokens = tokenize("a red circle")

    assert len(tokens.ids) == 16
    assert tokens.ids[:5] == (BOS_ID, WORD_TO_ID["a"], WORD_TO_ID["red"], WORD_TO_ID["circle"], EOS_ID)
    assert set(tokens.ids[5:]) == {PAD_ID}
    assert tokens.eot_index == 4
    assert detokenize(tokens) == "a red circle"


def test_tokenize_longest_caption():
    caption = "a green square and a yellow triangle"

    assert tokenize(caption, context_length=9).eot_index == 8

    with pytest.raises(LengthError):
        tokenize(caption, context_length=8)


def test_tokenize_unknown_word():
    with pytest.raises(UnknownWord):
        tokenize("a purple circle")

    with pytest.raises(UnknownWord):
        tokenize("a <eos> circle")


def test_crop_scale_range():
    rng = numpy_rng(0)
    for _ in range(200):
        crop = sample_crop(rng, 64)
        assert 0.5 <= crop.scale <= 1.0
        assert 0 <= crop.top <= 64 - crop.side
        assert 0 <= crop.left <= 64 - crop.side


def test_make_views():
    sample = generate_corpus(1, seed=0)[0]

    pair = make_views(sample, seed=11)
    again = make_views(sample, seed=11)

    assert np.array_equal(pair.view_u, again.view_u)
    assert np.array_equal(pair.view_v, again.view_v)
    assert pair.view_u.shape == (64, 64, 3)
    assert pair.view_u.min() >= -1 and pair.view_u.max() <= 1

    with pytest.raises(RangeError):
        make_views(sample, seed=0, image_size=128)


def test_batch_indices():
    first_epoch = batch_indices(8, 8, seed=0, step=0)

    assert sorted(first_epoch) == list(range(8))
    assert batch_indices(8, 4, seed=0, step=1) == first_epoch[4:]
    assert batch_indices(8, 4, seed=0, step=1) == batch_indices(8, 4, seed=0, step=1)


def test_make_batch(tiny_cfg, tiny_corpus):
    batch = make_batch(tiny_corpus, tiny_cfg, 0)

    assert tuple(batch.views_u.shape) == (4, 32, 32, 3)
    assert tuple(batch.views_v.shape) == (4, 32, 32, 3)
    assert tuple(batch.tokens.shape) == (4, 16)
    assert batch.eot_index.tolist() == [tokenize(tiny_corpus[i].caption).eot_index for i in batch.indices]


def test_batch_iterator_resumes(tiny_cfg, tiny_corpus):
    steps = [step for step, _ in batch_iterator(tiny_corpus, tiny_cfg, start_step=17)]
    assert steps == [17, 18, 19]

    _, resumed = next(iter(batch_iterator(tiny_corpus, tiny_cfg, start_step=5)))
    direct = make_batch(tiny_corpus, tiny_cfg, 5)
    assert resumed.indices == direct.indices
    assert resumed.views_u.equal(direct.views_u)


def test_export_import(tmp_path):
    corpus = generate_corpus(3, seed=1)
    export_corpus(corpus, tmp_path)

    assert len((tmp_path / "metadata.jsonl").read_text().splitlines()) == 3
    assert (tmp_path / "images" / "000000.png").exists()

    imported = import_corpus(tmp_path)
    for original, loaded in zip(corpus, imported):
        assert loaded.index == original.index
        assert loaded.caption == original.caption
        assert loaded.scene == original.scene
        assert np.array_equal(loaded.pixels, original.pixels)

    with pytest.raises(IoError):
        import_corpus(tmp_path / "missing")
