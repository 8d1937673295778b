# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Evaluation of a trained checkpoint: image/text retrieval, zero-shot classification, mask visualisation,
and the loss-weight ablation sweep.
"""

import collections
import dataclasses
import typing
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from tabulate import tabulate

from .checkpoint import TrainState, load_checkpoint
from .config import TrainConfig
from .data import CaptionedImage, class_captions, eval_batch, full_view, token_tensors
from .exceptions import IoError, RangeError
from .masking import attention_values, select_mask
from .trainer import train, with_overrides

Checkpoint: typing.TypeAlias = str | Path | TrainState

# the five columns of the loss-weight ablation: (α₁, α₂, α₃)
ABLATION_ALPHAS: tuple[tuple[float, float, float], ...] = (
    (1.0, 1.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 1.0, 2.0),
    (0.5, 0.5, 0.5),
    (0.0, 0.0, 1.0),
)

GRAY = 0.5


def resolve_state(checkpoint: Checkpoint) -> TrainState:
    if isinstance(checkpoint, TrainState):
        return checkpoint
    return load_checkpoint(checkpoint)


@torch.no_grad()
def encode_images(state: TrainState, samples: typing.Sequence[CaptionedImage]) -> torch.Tensor:
    """
    L2-normalized CLIP image embeddings of the un-augmented, unmasked samples (student encoder).
    """
    batch = eval_batch(samples, state.cfg)
    tokens, _ = state.model.visual(batch.views_u.to(state.model.center.dtype))
    return F.normalize(state.model.clip(tokens), dim=-1)


@torch.no_grad()
def encode_texts(state: TrainState, captions: typing.Sequence[str]) -> torch.Tensor:
    tokens, eot = token_tensors(captions, state.cfg.context_length)
    return F.normalize(state.model.text(tokens, eot), dim=-1)


def topk_hits(similarity: torch.Tensor, query_labels: list[str], key_labels: list[str], k: int) -> float:
    """
    Fraction of queries with a key carrying the same caption among their k most similar keys.

    Equal similarities keep the key order.
    """
    k = min(k, similarity.shape[1])
    ranked = torch.sort(similarity, dim=1, descending=True, stable=True).indices[:, :k]
    hits = [
        any(key_labels[int(j)] == query_labels[i] for j in ranked[i])
        for i in range(similarity.shape[0])
    ]
    return sum(hits) / len(hits)


def chance_top1(captions: typing.Sequence[str]) -> float:
    """
    Mean over queries of the share of keys carrying the query's caption: 1 / n when all captions differ.
    """
    counts = collections.Counter(captions)
    return sum(counts[caption] for caption in captions) / len(captions) ** 2


# ------------------------------------------------------------------------------------------------
# retrieval
# ------------------------------------------------------------------------------------------------


@dataclasses.dataclass
class RetrievalResult:
    n: int
    i2t_top1: float
    t2i_top1: float
    i2t_top5: float
    t2i_top5: float
    # expected top-1 accuracy of a random ranking under caption-equality hits
    chance: float

    def table(self) -> str:
        return tabulate(
            [
                ["image -> text", self.i2t_top1, self.i2t_top5],
                ["text -> image", self.t2i_top1, self.t2i_top5],
            ],
            headers=["direction", "top-1", "top-5"],
            floatfmt=".4f",
        )


def eval_retrieval(checkpoint: Checkpoint, heldout: typing.Sequence[CaptionedImage]) -> RetrievalResult:
    """
    Rank all held-out captions for every image (and vice versa) by cosine similarity.

    Captions are used as plain text. A retrieved item counts as correct when its caption equals the query's
    (synthetic corpora repeat captions).
    """
    if not heldout:
        raise RangeError("need at least one held-out pair")

    state = resolve_state(checkpoint)
    state.model.eval()
    captions = [sample.caption for sample in heldout]

    images = encode_images(state, heldout)
    texts = encode_texts(state, captions)
    similarity = images @ texts.T

    return RetrievalResult(
        n=len(heldout),
        i2t_top1=topk_hits(similarity, captions, captions, 1),
        t2i_top1=topk_hits(similarity.T, captions, captions, 1),
        i2t_top5=topk_hits(similarity, captions, captions, 5),
        t2i_top5=topk_hits(similarity.T, captions, captions, 5),
        chance=chance_top1(captions),
    )


# ------------------------------------------------------------------------------------------------
# zero-shot
# ------------------------------------------------------------------------------------------------


@dataclasses.dataclass
class ZeroShotResult:
    n: int
    top1: float
    per_class: dict[str, float]

    def table(self) -> str:
        rows = [[caption, accuracy] for caption, accuracy in self.per_class.items()]
        rows.append(["overall", self.top1])
        return tabulate(rows, headers=["class", "top-1"], floatfmt=".4f")


def eval_zero_shot(checkpoint: Checkpoint, corpus: typing.Sequence[CaptionedImage]) -> ZeroShotResult:
    """
    Classify the single-object samples of `corpus` against the 12 class captions.
    """
    samples = [sample for sample in corpus if len(sample.scene) == 1]
    if not samples:
        raise RangeError("the corpus holds no single-object samples")

    state = resolve_state(checkpoint)
    state.model.eval()
    labels = class_captions()

    logits = encode_images(state, samples) @ encode_texts(state, labels).T
    predicted = logits.argmax(dim=1).tolist()

    correct: dict[str, list[bool]] = {label: [] for label in labels}
    for sample, prediction in zip(samples, predicted):
        correct[sample.caption].append(labels[prediction] == sample.caption)

    per_class = {label: sum(hits) / len(hits) for label, hits in correct.items() if hits}
    top1 = sum(sum(hits) for hits in correct.values()) / len(samples)
    return ZeroShotResult(n=len(samples), top1=top1, per_class=per_class)


# ------------------------------------------------------------------------------------------------
# mask visualisation
# ------------------------------------------------------------------------------------------------


@dataclasses.dataclass
class MaskVisualization:
    index: int
    mask: np.ndarray  # P booleans, True = masked
    attention: np.ndarray  # P attention values
    paths: tuple[Path, Path, Path]


def _patch_map(values: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """
    P values -> (grid · patch_size)² image, one constant block per patch.
    """
    return np.kron(values.reshape(grid, grid), np.ones((patch_size, patch_size)))


def _save_png(pixels: np.ndarray, path: Path) -> Path:
    try:
        Image.fromarray(np.rint(np.clip(pixels, 0, 1) * 255).astype(np.uint8)).save(path)
    except OSError as e:
        raise IoError(f"could not write {path}: {e}") from e
    return path


@torch.no_grad()
def visualize_masks(
    checkpoint: Checkpoint,
    images: typing.Sequence[CaptionedImage],
    out_dir: str | Path,
) -> list[MaskVisualization]:
    """
    Write three pngs per image: the original view, its attention heat map overlay, and the view with the masked
    (lowest attention) patches grayed out.
    """
    state = resolve_state(checkpoint)
    cfg = state.cfg
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"could not create {out_dir}: {e}") from e

    state.model.eval()
    results = []
    for sample in images:
        view = torch.from_numpy(full_view(sample, cfg.image_size))[None]
        _, record = state.model.teacher_visual(view.to(state.model.center.dtype), record_attention=True)
        summary = attention_values(record)
        mask = select_mask(summary, cfg.mask_ratio)[0].numpy()
        attention = summary[0].double().numpy()

        original = (view[0].numpy() + 1) / 2
        span = attention.max() - attention.min()
        heat = (attention - attention.min()) / span if span > 0 else np.zeros_like(attention)
        heat_map = _patch_map(heat, cfg.grid_size, cfg.patch_size)[..., None]
        overlay = 0.5 * original + 0.5 * heat_map * np.asarray([1.0, 0.0, 0.0])
        masked_map = _patch_map(mask.astype(np.float64), cfg.grid_size, cfg.patch_size)[..., None]
        grayed = np.where(masked_map > 0, GRAY, original)

        stem = f"{sample.index:06d}"
        paths = (
            _save_png(original, out_dir / f"{stem}_original.png"),
            _save_png(overlay, out_dir / f"{stem}_attention.png"),
            _save_png(grayed, out_dir / f"{stem}_masked.png"),
        )
        results.append(MaskVisualization(index=sample.index, mask=mask, attention=attention, paths=paths))

    return results


# ------------------------------------------------------------------------------------------------
# ablation
# ------------------------------------------------------------------------------------------------


@dataclasses.dataclass
class AblationRow:
    alphas: tuple[float, float, float]
    final_l_tot: float
    final_l_rec: float
    zero_shot_top1: float


def run_ablation(
    cfg: TrainConfig,
    corpus: typing.Sequence[CaptionedImage],
    out_dir: str | Path,
    steps: typing.Optional[int] = None,
    heldout: typing.Optional[typing.Sequence[CaptionedImage]] = None,
    deterministic: bool = False,
    verbose: bool = True,
) -> list[AblationRow]:
    """
    Train once per α column (into out_dir/alpha-a1-a2-a3) and report the final losses and zero-shot accuracy.
    """
    out_dir = Path(out_dir)
    rows = []
    for alphas in ABLATION_ALPHAS:
        alpha1, alpha2, alpha3 = alphas
        run_cfg = with_overrides(
            cfg,
            alpha1=alpha1,
            alpha2=alpha2,
            alpha3=alpha3,
            total_steps=steps or cfg.total_steps,
        )
        if verbose:
            print(f"ablation run α = {alphas}")
        result = train(
            run_cfg,
            corpus,
            out_dir / f"alpha-{alpha1:g}-{alpha2:g}-{alpha3:g}",
            deterministic=deterministic,
            verbose=verbose,
        )
        zero_shot = eval_zero_shot(result.state, heldout or corpus)
        last = result.records[-1]
        rows.append(
            AblationRow(
                alphas=alphas,
                final_l_tot=last["l_tot"],
                final_l_rec=last["l_rec"],
                zero_shot_top1=zero_shot.top1,
            )
        )

    return rows


def ablation_table(rows: typing.Iterable[AblationRow]) -> str:
    return tabulate(
        [[*row.alphas, row.final_l_tot, row.final_l_rec, row.zero_shot_top1] for row in rows],
        headers=["α₁", "α₂", "α₃", "l_tot", "l_rec", "zero-shot top-1"],
        floatfmt=".4f",
    )
