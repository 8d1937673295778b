# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
`clipdistill` command line: train, grad-check, visualize-masks, eval-retrieval, eval-zero-shot, generate-data,
presets and ablate.

Exit code 0 on success; errors are printed as `ErrorName: message` on stderr with exit code 1.
"""

import sys
import typing
from pathlib import Path

from plumbum import cli

from .__about__ import __version__
from .config import TrainConfig, ensure_trainable, get_settings, list_presets, load_train_config
from .data import CaptionedImage, export_corpus, generate_corpus, import_corpus
from .evaluate import ablation_table, eval_retrieval, eval_zero_shot, run_ablation, visualize_masks
from .exceptions import BaseClipDistillException
from .gradcheck import grad_check
from .helpers import is_deterministic
from .trainer import train

GRAD_CHECK_TOLERANCE = 1e-3
DEFAULT_CORPUS_SIZE = 512


class ClipDistill(cli.Application):
    """
    Desk-scale image-text pretraining with attention-guided masking and self-distillation.
    """

    PROGNAME = "clipdistill"
    VERSION = __version__

    def main(self, *args: str) -> int:
        if args:
            print(f"unknown command {args[0]!r}", file=sys.stderr)
            return 1
        if not self.nested_command:
            self.help()
            return 1
        return 0


class ConfigMixin(cli.Application):
    """
    Shared --config / --preset / --set / --deterministic switches.
    """

    config_path = cli.SwitchAttr("--config", str, default=None, help="toml file with the training config")
    preset_name = cli.SwitchAttr("--preset", str, default=None, help="name of a registered preset")
    overrides = cli.SwitchAttr("--set", str, list=True, help="override a config value: --set key=value")
    deterministic = cli.Flag("--deterministic", help="single-threaded deterministic kernels")

    def load_config(self) -> TrainConfig:
        return load_train_config(self.config_path, self.preset_name, self.overrides or ())

    def use_deterministic(self) -> bool:
        return bool(self.deterministic) or is_deterministic(get_settings())


def load_corpus(data: typing.Optional[str], cfg: TrainConfig, n: int = DEFAULT_CORPUS_SIZE) -> list[CaptionedImage]:
    """
    Import `data` when given, otherwise generate a synthetic corpus from cfg.seed.
    """
    if data:
        return import_corpus(data)
    return generate_corpus(n, cfg.seed, cfg.source_size)


@ClipDistill.subcommand("train")
class Train(ConfigMixin):
    """
    Train from scratch (or --resume) and write the loss log and checkpoint into --out.
    """

    data = cli.SwitchAttr("--data", str, default=None, help="corpus directory (default: generate one)")
    out = cli.SwitchAttr("--out", str, default="runs/train", help="output directory")
    resume = cli.SwitchAttr("--resume", str, default=None, help="checkpoint directory to continue from")
    n = cli.SwitchAttr("--n", int, default=DEFAULT_CORPUS_SIZE, help="size of the generated corpus")

    def main(self) -> int:
        ensure_trainable(self.preset_name)
        cfg = self.load_config()
        corpus = load_corpus(self.data, cfg, self.n)
        settings = get_settings()
        result = train(
            cfg,
            corpus,
            self.out,
            resume=self.resume,
            deterministic=self.use_deterministic(),
            log_every=settings.clipdistill_log_every,
            num_threads=settings.clipdistill_num_threads,
        )
        last = result.records[-1] if result.records else None
        if last:
            print(f"step {int(last['step'])}: l_tot={last['l_tot']:.4f} l_clip={last['l_clip']:.4f}")
        return 0


@ClipDistill.subcommand("grad-check")
class GradCheck(ConfigMixin):
    """
    Compare analytic and finite-difference gradients in double precision.
    """

    eps = cli.SwitchAttr("--eps", float, default=1e-5, help="finite difference step")
    n = cli.SwitchAttr("--n", int, default=50, help="number of sampled parameters")

    def main(self) -> int:
        report = grad_check(self.load_config(), n_params=self.n, eps=self.eps)
        print(report.table())
        ok = report.max_rel_error < GRAD_CHECK_TOLERANCE and report.teacher_max_abs_grad == 0
        return 0 if ok else 1


@ClipDistill.subcommand("visualize-masks")
class VisualizeMasks(cli.Application):
    """
    Write original / attention / masked pngs for every image of a corpus directory.
    """

    ckpt = cli.SwitchAttr("--ckpt", str, mandatory=True, help="checkpoint directory")
    images = cli.SwitchAttr("--images", str, mandatory=True, help="corpus directory (from generate-data)")
    out = cli.SwitchAttr("--out", str, default="runs/masks", help="output directory")
    limit = cli.SwitchAttr("--limit", int, default=0, help="only the first N images (0 = all)")

    def main(self) -> int:
        samples = import_corpus(self.images)
        if self.limit:
            samples = samples[: self.limit]
        results = visualize_masks(self.ckpt, samples, self.out)
        print(f"wrote {3 * len(results)} images to {self.out}")
        return 0


@ClipDistill.subcommand("eval-retrieval")
class EvalRetrieval(cli.Application):
    """
    Image -> text and text -> image retrieval accuracy on held-out pairs.
    """

    ckpt = cli.SwitchAttr("--ckpt", str, mandatory=True, help="checkpoint directory")
    data = cli.SwitchAttr("--data", str, mandatory=True, help="held-out corpus directory")

    def main(self) -> int:
        result = eval_retrieval(self.ckpt, import_corpus(self.data))
        print(result.table())
        print(f"{result.n} pairs, chance {result.chance:.4f}")
        return 0


@ClipDistill.subcommand("eval-zero-shot")
class EvalZeroShot(cli.Application):
    """
    Classify single-object images against the 12 class captions.
    """

    ckpt = cli.SwitchAttr("--ckpt", str, mandatory=True, help="checkpoint directory")
    data = cli.SwitchAttr("--data", str, mandatory=True, help="corpus directory")

    def main(self) -> int:
        result = eval_zero_shot(self.ckpt, import_corpus(self.data))
        print(result.table())
        return 0


@ClipDistill.subcommand("generate-data")
class GenerateData(cli.Application):
    """
    Render a synthetic captioned corpus to a directory.
    """

    n = cli.SwitchAttr("--n", int, default=DEFAULT_CORPUS_SIZE, help="number of images")
    seed = cli.SwitchAttr("--seed", int, default=0, help="corpus seed")
    out = cli.SwitchAttr("--out", str, default="data/train", help="output directory")
    size = cli.SwitchAttr("--size", int, default=64, help="image side in pixels")
    offset = cli.SwitchAttr("--offset", int, default=0, help="index of the first sample (held-out sets)")

    def main(self) -> int:
        corpus = generate_corpus(self.n, self.seed, self.size, self.offset)
        export_corpus(corpus, self.out)
        print(f"wrote {len(corpus)} images to {Path(self.out) / 'images'}")
        return 0


@ClipDistill.subcommand("presets")
class Presets(cli.Application):
    """
    List the registered config presets.
    """

    def main(self) -> int:
        print(list_presets())
        return 0


@ClipDistill.subcommand("ablate")
class Ablate(ConfigMixin):
    """
    Train once per loss-weight column and compare final losses and zero-shot accuracy.
    """

    data = cli.SwitchAttr("--data", str, default=None, help="corpus directory (default: generate one)")
    out = cli.SwitchAttr("--out", str, default="runs/ablation", help="output directory")
    steps = cli.SwitchAttr("--steps", int, default=0, help="steps per run (0 = total_steps of the config)")

    def main(self) -> int:
        ensure_trainable(self.preset_name)
        cfg = self.load_config()
        rows = run_ablation(
            cfg,
            load_corpus(self.data, cfg),
            self.out,
            steps=self.steps or None,
            deterministic=self.use_deterministic(),
        )
        print(ablation_table(rows))
        return 0


def _console_hook(args: list[str]) -> int:
    """
    Run the command line with `args` (without the program name) and return the exit code.
    """
    try:
        _, retcode = ClipDistill.run(["clipdistill", *args], exit=False)
    except (BaseClipDistillException, OSError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return int(retcode or 0)


def console_hook() -> None:  # pragma: no cover
    """
    Entrypoint of the `clipdistill` script.
    """
    exit(_console_hook(sys.argv[1:]))
