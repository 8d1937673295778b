import pytest
import torch

from src.edwh_clipdistill.data import PAD_ID, WORD_TO_ID, token_tensors
from src.edwh_clipdistill.exceptions import LengthError, MaskCardinalityError, ShapeError, VocabularyError
from src.edwh_clipdistill.masking import empty_mask
from src.edwh_clipdistill.text import TextEncoder
from src.edwh_clipdistill.vision import VisionEncoder, patchify, unpatchify

from .fixtures import tiny_cfg  # noqa


def _views(batch_size: int, size: int, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch_size, size, size, 3, generator=generator) * 2 - 1


def _first_masked(batch_size: int, num_patches: int, count: int) -> torch.Tensor:
    mask = torch.zeros(batch_size, num_patches, dtype=torch.bool)
    mask[:, :count] = True
    return mask


def test_patchify_layout():
    views = _views(2, 64)
    patches = patchify(views, 8)

    assert tuple(patches.shape) == (2, 64, 192)
    # row-major patches, pixels row-major inside a patch, channels last
    assert torch.equal(patches[0, 0], views[0, :8, :8].reshape(-1))
    assert torch.equal(patches[0, 1], views[0, :8, 8:16].reshape(-1))
    assert torch.equal(patches[1, 8], views[1, 8:16, :8].reshape(-1))
    assert torch.equal(unpatchify(patches, 8), views)


def test_patchify_needs_divisible_images():
    with pytest.raises(ShapeError):
        patchify(_views(1, 30), 8)


def test_vision_encoder_shapes(tiny_cfg):
    torch.manual_seed(0)
    encoder = VisionEncoder(tiny_cfg)

    tokens, record = encoder(_views(3, 32), record_attention=True)

    assert tuple(tokens.shape) == (3, 17, 32)
    assert tuple(record.shape) == (3, tiny_cfg.vision_layers, tiny_cfg.vision_heads, 17)
    assert torch.allclose(record.sum(dim=-1), torch.ones(3, tiny_cfg.vision_layers, tiny_cfg.vision_heads), atol=1e-5)

    _, no_record = encoder(_views(3, 32))
    assert no_record is None


def test_vision_encoder_is_batch_equivariant(tiny_cfg):
    torch.manual_seed(0)
    encoder = VisionEncoder(tiny_cfg)
    views = _views(4, 32)
    order = torch.tensor([2, 0, 3, 1])

    tokens, record = encoder(views, record_attention=True)
    permuted, permuted_record = encoder(views[order], record_attention=True)

    assert torch.allclose(permuted, tokens[order], atol=1e-5)
    assert torch.allclose(permuted_record, record[order], atol=1e-6)


def test_vision_encoder_rejects_bad_masks(tiny_cfg):
    encoder = VisionEncoder(tiny_cfg)
    views = _views(2, 32)

    with pytest.raises(MaskCardinalityError):
        encoder(views, mask=_first_masked(2, 16, 3))

    with pytest.raises(ShapeError):
        encoder(views, mask=_first_masked(2, 15, 8))

    with pytest.raises(ShapeError):
        encoder(_views(2, 64))


def test_empty_mask_is_a_no_op(tiny_cfg):
    encoder = VisionEncoder(tiny_cfg)
    views = _views(2, 32)

    plain, _ = encoder(views)
    unmasked, _ = encoder(views, mask=empty_mask(2, 16))

    assert torch.allclose(plain, unmasked, atol=1e-6)


def test_masked_pixels_are_never_seen(tiny_cfg):
    encoder = VisionEncoder(tiny_cfg)
    views = _views(2, 32)
    mask = _first_masked(2, 16, tiny_cfg.masked_count)

    changed = views.clone()
    # patch 0 (top-left) is masked; scribble over it
    changed[:, :8, :8] = -changed[:, :8, :8]

    before, _ = encoder(views, mask=mask)
    after, _ = encoder(changed, mask=mask)
    assert torch.allclose(before, after, atol=1e-6)

    visible, _ = encoder(changed, mask=_first_masked(2, 16, 0))
    assert not torch.allclose(before, visible, atol=1e-6)


def test_text_encoder(tiny_cfg):
    torch.manual_seed(0)
    encoder = TextEncoder(tiny_cfg)
    tokens, eot = token_tensors(["a red circle", "a blue square and a green triangle"], tiny_cfg.context_length)

    embeds = encoder(tokens, eot)
    assert tuple(embeds.shape) == (2, tiny_cfg.clip_embed_dim)

    # causal: whatever follows <eos> does not change the pooled embedding
    scribbled = tokens.clone()
    scribbled[0, eot[0] + 1 :] = WORD_TO_ID["red"]
    assert torch.allclose(encoder(scribbled, eot)[0], embeds[0], atol=1e-6)

    # but the caption itself does
    other, _ = token_tensors(["a green circle"], tiny_cfg.context_length)
    assert not torch.allclose(encoder(other, eot[:1])[0], embeds[0], atol=1e-6)


def test_text_encoder_is_batch_equivariant(tiny_cfg):
    torch.manual_seed(0)
    encoder = TextEncoder(tiny_cfg)
    captions = ["a red circle", "a blue square and a green triangle", "a green circle"]
    tokens, eot = token_tensors(captions, tiny_cfg.context_length)
    order = torch.tensor([1, 2, 0])

    embeds = encoder(tokens, eot)

    assert torch.allclose(encoder(tokens[order], eot[order]), embeds[order], atol=1e-5)


def test_text_encoder_validates_tokens(tiny_cfg):
    encoder = TextEncoder(tiny_cfg)
    tokens, eot = token_tensors(["a red circle"], tiny_cfg.context_length)

    too_large = tokens.clone()
    too_large[0, 1] = tiny_cfg.vocab_size
    with pytest.raises(VocabularyError):
        encoder(too_large, eot)

    with pytest.raises(LengthError):
        encoder(tokens[:, :8], eot)

    assert int(tokens[0, -1]) == PAD_ID
