# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Synthetic captioned shapes: corpus generation, the closed-vocabulary tokenizer and two-view augmentation.

Everything here is a pure function of its inputs and a seed:
 * sample `i` of a corpus only depends on (seed, i),
 * the views of a sample only depend on the view seed,
 * the batch of a training step only depends on (cfg.seed, step).
"""

import dataclasses
import json
import math
import typing
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import TrainConfig
from .constants import BOS, COLORS, EOS, PAD, SHAPES
from .exceptions import IoError, LengthError, RangeError, UnknownWord
from .helpers import numpy_rng

RGB: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

VOCABULARY: tuple[str, ...] = (PAD, BOS, EOS, "a", "and", *SHAPES, *COLORS)
WORD_TO_ID = {word: idx for idx, word in enumerate(VOCABULARY)}
PAD_ID, BOS_ID, EOS_ID = WORD_TO_ID[PAD], WORD_TO_ID[BOS], WORD_TO_ID[EOS]

MIN_CROP_SCALE = 0.5
MAX_CROP_SCALE = 1.0


@dataclasses.dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    center: tuple[float, float]  # (y, x) in pixels
    size: float  # radius / half side in pixels


@dataclasses.dataclass(frozen=True)
class CaptionedImage:
    """
    One rendered scene: H x W x 3 pixels in [0, 1], its caption and the scene description it was rendered from.
    """

    index: int
    pixels: np.ndarray
    caption: str
    scene: tuple[SceneObject, ...]


@dataclasses.dataclass(frozen=True)
class TokenizedCaption:
    ids: tuple[int, ...]
    eot_index: int


@dataclasses.dataclass(frozen=True)
class CropRecord:
    """
    Everything needed to reproduce one random-resized-crop: area scale, square side, offsets and flip.
    """

    scale: float
    side: int
    top: int
    left: int
    flip: bool


@dataclasses.dataclass(frozen=True)
class ViewPair:
    """
    Two augmented views of the same source image, normalized to [-1, 1], channels last.
    """

    view_u: np.ndarray
    view_v: np.ndarray
    crop_u: CropRecord
    crop_v: CropRecord


@dataclasses.dataclass
class Batch:
    """
    Tensors for one training / evaluation step.
    """

    views_u: torch.Tensor  # B x H x W x 3
    views_v: torch.Tensor
    tokens: torch.Tensor  # B x context_length
    eot_index: torch.Tensor  # B
    indices: list[int]


# ------------------------------------------------------------------------------------------------
# rendering
# ------------------------------------------------------------------------------------------------


def render_scene(scene: typing.Iterable[SceneObject], size: int) -> np.ndarray:
    """
    Rasterize objects (in order, later ones on top) onto a black size x size canvas.
    """
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    for obj in scene:
        dy = yy - obj.center[0]
        dx = xx - obj.center[1]
        r = obj.size
        if obj.shape == "circle":
            inside = dx**2 + dy**2 <= r**2
        elif obj.shape == "square":
            inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        elif obj.shape == "triangle":
            # apex up, base at the bottom
            inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
        else:
            raise UnknownWord(obj.shape)
        canvas[inside] = np.asarray(RGB[obj.color], dtype=np.float32)

    return canvas


def caption_for(scene: typing.Sequence[SceneObject]) -> str:
    """
    Template render: 'a {color} {shape}' or 'a {color} {shape} and a {color} {shape}'.
    """
    return " and ".join(f"a {obj.color} {obj.shape}" for obj in scene)


def class_captions() -> list[str]:
    """
    The 12 single-object captions, shapes major.
    """
    return [f"a {color} {shape}" for shape in SHAPES for color in COLORS]


def scene_for(index: int, seed: int, size: int) -> tuple[SceneObject, ...]:
    """
    Scene layout of sample `index`.

    Even indices hold one object and cycle through all 12 (shape, color) pairs,
    odd indices hold two random objects, one per image half (the left one is named first).
    """
    rng = numpy_rng(seed, index)

    if index % 2 == 0:
        pair = (index // 2) % (len(SHAPES) * len(COLORS))
        shape, color = SHAPES[pair // len(COLORS)], COLORS[pair % len(COLORS)]
        r = float(rng.uniform(0.18, 0.3) * size)
        cy, cx = (float(v) for v in rng.uniform(r, size - r, size=2))
        return (SceneObject(shape, color, (cy, cx), r),)

    objects = []
    for half in (0, 1):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        r = float(rng.uniform(0.12, 0.2) * size)
        low = half * size / 2 + r
        high = (half + 1) * size / 2 - r
        cx = float(rng.uniform(low, max(low, high)))
        cy = float(rng.uniform(r, size - r))
        objects.append(SceneObject(shape, color, (cy, cx), r))
    return tuple(objects)


def render_sample(index: int, seed: int, size: int) -> CaptionedImage:
    scene = scene_for(index, seed, size)
    return CaptionedImage(index=index, pixels=render_scene(scene, size), caption=caption_for(scene), scene=scene)


def generate_corpus(n: int, seed: int, size: int = 64, offset: int = 0) -> list[CaptionedImage]:
    """
    Deterministic corpus of `n` captioned images (sample indices offset .. offset + n - 1).

    With n >= 24 (and offset 0) every single-object (shape, color) pair is present.
    Use a distinct offset to create a held-out set that never overlaps the training samples.
    """
    if n < 1:
        raise RangeError(f"corpus size must be at least 1, got {n}")
    return [render_sample(index, seed, size) for index in range(offset, offset + n)]


# ------------------------------------------------------------------------------------------------
# export / import
# ------------------------------------------------------------------------------------------------


def export_corpus(corpus: typing.Iterable[CaptionedImage], out_dir: str | Path) -> Path:
    """
    Write one png per image plus a metadata.jsonl (id, caption, scene description).
    """
    out_dir = Path(out_dir)
    images = out_dir / "images"
    try:
        images.mkdir(parents=True, exist_ok=True)
        with (out_dir / "metadata.jsonl").open("w") as f:
            for sample in corpus:
                filename = f"{sample.index:06d}.png"
                as_bytes = np.rint(sample.pixels * 255).astype(np.uint8)
                Image.fromarray(as_bytes).save(images / filename)
                record = {
                    "id": sample.index,
                    "file": f"images/{filename}",
                    "caption": sample.caption,
                    "scene": [dataclasses.asdict(obj) for obj in sample.scene],
                }
                f.write(json.dumps(record) + "\n")
    except OSError as e:
        raise IoError(f"could not export corpus to {out_dir}: {e}") from e

    return out_dir


def import_corpus(data_dir: str | Path) -> list[CaptionedImage]:
    """
    Read a directory written by `export_corpus`.

    Pixels are re-rendered from the stored scene description (at the png's size), so the result equals the
    generated corpus exactly; the png only has to exist.
    """
    data_dir = Path(data_dir)
    metadata = data_dir / "metadata.jsonl"
    if not metadata.exists():
        raise IoError(f"no metadata.jsonl in {data_dir}")

    corpus = []
    with metadata.open() as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            scene = tuple(
                SceneObject(obj["shape"], obj["color"], (obj["center"][0], obj["center"][1]), obj["size"])
                for obj in record["scene"]
            )
            try:
                with Image.open(data_dir / record["file"]) as image:
                    size = image.size[0]
            except OSError as e:
                raise IoError(f"could not read {record['file']}: {e}") from e
            pixels = render_scene(scene, size)
            corpus.append(CaptionedImage(index=record["id"], pixels=pixels, caption=record["caption"], scene=scene))

    return corpus


# ------------------------------------------------------------------------------------------------
# tokenizer
# ------------------------------------------------------------------------------------------------


def tokenize(caption: str, context_length: int = 16) -> TokenizedCaption:
    """
    '<bos> word... <eos> <pad>...' padded to context_length.
    """
    words = caption.split()
    unknown = [word for word in words if word not in WORD_TO_ID or word in (PAD, BOS, EOS)]
    if unknown:
        raise UnknownWord(f"not in vocabulary: {unknown}")

    ids = [BOS_ID, *(WORD_TO_ID[word] for word in words), EOS_ID]
    if len(ids) > context_length:
        raise LengthError(f"caption needs {len(ids)} tokens, context_length is {context_length}")

    eot_index = len(ids) - 1
    ids += [PAD_ID] * (context_length - len(ids))
    return TokenizedCaption(ids=tuple(ids), eot_index=eot_index)


def detokenize(tokens: TokenizedCaption) -> str:
    return " ".join(VOCABULARY[idx] for idx in tokens.ids[1 : tokens.eot_index])


def token_tensors(captions: typing.Iterable[str], context_length: int) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Tokenize a list of captions into (ids B x L, eot_index B).
    """
    tokenized = [tokenize(caption, context_length) for caption in captions]
    ids = torch.tensor([t.ids for t in tokenized], dtype=torch.long)
    eot = torch.tensor([t.eot_index for t in tokenized], dtype=torch.long)
    return ids, eot


# ------------------------------------------------------------------------------------------------
# views
# ------------------------------------------------------------------------------------------------


def sample_crop(rng: np.random.Generator, source_size: int) -> CropRecord:
    """
    Square random crop covering between 50% and 100% of the source area, flipped with probability 0.5.

    The recorded scale is the area fraction actually covered by the integer side.
    """
    drawn = rng.uniform(MIN_CROP_SCALE, MAX_CROP_SCALE)
    min_side = math.ceil(math.sqrt(MIN_CROP_SCALE) * source_size)
    side = int(np.clip(round(math.sqrt(drawn) * source_size), min_side, source_size))
    top = int(rng.integers(0, source_size - side + 1))
    left = int(rng.integers(0, source_size - side + 1))
    flip = bool(rng.random() < 0.5)
    return CropRecord(scale=side**2 / source_size**2, side=side, top=top, left=left, flip=flip)


def apply_crop(pixels: np.ndarray, crop: CropRecord, image_size: int) -> np.ndarray:
    """
    Cut out the crop, resize it (bilinear) to image_size and flip it horizontally if requested. Stays in [0, 1].
    """
    region = pixels[crop.top : crop.top + crop.side, crop.left : crop.left + crop.side]
    if crop.side != image_size:
        as_tensor = torch.from_numpy(np.ascontiguousarray(region)).permute(2, 0, 1)[None]
        resized = F.interpolate(as_tensor, size=(image_size, image_size), mode="bilinear", align_corners=False)
        region = resized[0].permute(1, 2, 0).numpy()
    if crop.flip:
        region = region[:, ::-1]
    return np.ascontiguousarray(region, dtype=np.float32)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """
    [0, 1] -> [-1, 1].
    """
    return (pixels * 2 - 1).astype(np.float32)


def full_view(img: CaptionedImage, image_size: int) -> np.ndarray:
    """
    Un-augmented view (whole source, resized and normalized), used for evaluation and visualisation.
    """
    source_size = img.pixels.shape[0]
    crop = CropRecord(scale=1.0, side=source_size, top=0, left=0, flip=False)
    return normalize_pixels(apply_crop(img.pixels, crop, image_size))


def make_views(img: CaptionedImage, seed: int, image_size: int = 64) -> ViewPair:
    """
    Two independent random-resized crops of one image.
    """
    height, width, _ = img.pixels.shape
    if height != width or height < image_size:
        raise RangeError(f"source image must be square and at least {image_size} per side, got {height}x{width}")

    rng = numpy_rng(seed)
    crop_u = sample_crop(rng, height)
    crop_v = sample_crop(rng, height)
    return ViewPair(
        view_u=normalize_pixels(apply_crop(img.pixels, crop_u, image_size)),
        view_v=normalize_pixels(apply_crop(img.pixels, crop_v, image_size)),
        crop_u=crop_u,
        crop_v=crop_v,
    )


# ------------------------------------------------------------------------------------------------
# batching
# ------------------------------------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """
    Corpus indices of the batch at `step`: epoch-wise permutations, each epoch seeded by (seed, epoch).
    """
    indices = []
    for position in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(position, n)
        indices.append(int(numpy_rng(seed, epoch).permutation(n)[offset]))
    return indices


def view_seed(seed: int, step: int, position: int) -> int:
    return int(numpy_rng(seed, step, position).integers(0, 2**31 - 1))


def make_batch(corpus: typing.Sequence[CaptionedImage], cfg: TrainConfig, step: int) -> Batch:
    """
    Assemble the (views, tokens) batch of one training step.
    """
    indices = batch_indices(len(corpus), cfg.batch_size, cfg.seed, step)
    pairs = [
        make_views(corpus[idx], view_seed(cfg.seed, step, position), cfg.image_size)
        for position, idx in enumerate(indices)
    ]
    tokens, eot = token_tensors([corpus[idx].caption for idx in indices], cfg.context_length)
    return Batch(
        views_u=torch.from_numpy(np.stack([pair.view_u for pair in pairs])),
        views_v=torch.from_numpy(np.stack([pair.view_v for pair in pairs])),
        tokens=tokens,
        eot_index=eot,
        indices=indices,
    )


def eval_batch(samples: typing.Sequence[CaptionedImage], cfg: TrainConfig) -> Batch:
    """
    Un-augmented batch (both views are the full image).
    """
    views = torch.from_numpy(np.stack([full_view(sample, cfg.image_size) for sample in samples]))
    tokens, eot = token_tensors([sample.caption for sample in samples], cfg.context_length)
    return Batch(views_u=views, views_v=views, tokens=tokens, eot_index=eot, indices=[s.index for s in samples])


def batch_iterator(
    corpus: typing.Sequence[CaptionedImage],
    cfg: TrainConfig,
    start_step: int = 0,
    stop_step: typing.Optional[int] = None,
) -> typing.Iterator[tuple[int, Batch]]:
    """
    Yield (step, batch) from `start_step` up to `stop_step` (default cfg.total_steps).

    Resuming at step k yields the same batches as an uninterrupted run.
    """
    for step in range(start_step, cfg.total_steps if stop_step is None else stop_step):
        yield step, make_batch(corpus, cfg, step)
