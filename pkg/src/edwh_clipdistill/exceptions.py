# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Every error raised by this package.

The CLI catches `BaseClipDistillException` and reports the class name, so keep the names descriptive.
"""


class BaseClipDistillException(BaseException):
    """
    Most top-level exception class for this module.

    Not caught by `except Exception`.
    """


class ClipDistillException(BaseClipDistillException, Exception):
    """
    Common exception class for this module.

    Is caught by `except Exception`.
    """


# config


class DivisibilityError(ClipDistillException):
    """
    Thrown when image_size is not a multiple of patch_size, or a width is not a multiple of its head count.
    """


class RangeError(ClipDistillException, ValueError):
    """
    Thrown when a scalar (ratio, temperature, step, count) is outside of its allowed range.
    """


class UnknownConfigKey(ClipDistillException, KeyError):
    """
    Thrown for `--set key=value` overrides (or config files) naming a field that does not exist.
    """


class PresetError(ClipDistillException):
    """
    Thrown for unknown presets, or when trying to train a load-only preset.
    """


# checkpoints


class IoError(ClipDistillException, OSError):
    """
    Thrown when a checkpoint, corpus or image directory can not be read or written.
    """


class VersionError(ClipDistillException):
    """
    Thrown when a checkpoint manifest was written by an incompatible format version.
    """


class ShapeMismatch(ClipDistillException):
    """
    Thrown when stored arrays and the parameters they should be loaded into disagree in shape or name.
    """


class ConfigMismatch(ClipDistillException):
    """
    Thrown when loading a checkpoint that was written under a different config (hash), without override.
    """


# data


class UnknownWord(ClipDistillException, KeyError):
    """
    Thrown when tokenizing a caption that contains a word outside of the closed vocabulary.
    """


class VocabularyError(ClipDistillException):
    """
    Thrown when token ids fall outside of the vocabulary of the text encoder.
    """


class LengthError(ClipDistillException):
    """
    Thrown when a caption does not fit the context length, or a token batch has the wrong length.
    """


# model


class ShapeError(ClipDistillException, ValueError):
    """
    Thrown when a tensor passed to a model component has an unexpected shape.
    """


class MaskCardinalityError(ClipDistillException):
    """
    Thrown when a mask does not hide exactly ceil(mask_ratio * P) patches per sample.
    """


# objectives


class EmptyMask(ClipDistillException):
    """
    Thrown when a masked-only loss is asked to average over zero masked positions.
    """


class ZeroNormError(ClipDistillException, ZeroDivisionError):
    """
    Thrown when an embedding passed to the contrastive loss has zero length.
    """


class DegenerateBatch(ClipDistillException):
    """
    Thrown when a contrastive batch has no pairs at all.
    """


class NonFiniteLoss(ClipDistillException, ArithmeticError):
    """
    Thrown when a training step produces a NaN or infinite loss.

    The offending terms are available as `.terms`.
    """

    def __init__(self, step: int, terms: dict[str, float]) -> None:
        """
        Store the step and the non-finite terms for diagnostics.
        """
        self.step = step
        self.terms = terms
        offending = ", ".join(f"{name}={value}" for name, value in terms.items())
        super().__init__(f"non-finite loss at step {step}: {offending}")
