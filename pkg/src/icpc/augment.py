"""Compression-based augmentation for text, images, video and audio.

Each epoch, every batch is compressed to one randomly drawn size (text is
pruned per sequence instead, since sequences in a batch differ in length).
A lower size means fewer embedding vectors and therefore less compute,
while the variation across epochs acts as augmentation. Size draws happen
at batch granularity so samples inside a batch share dimensions and no
padding is needed during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, InvalidCompressionError, ShapeError
from .signal import (
    Spectrogram,
    StftParams,
    resample_audio,
    resize_bilinear,
    uniform_frame_sample,
    waveform_to_spectrogram,
)

MODALITIES = ("text", "image", "video", "audio")


@dataclass(frozen=True)
class CompressionLevel:
    """One concrete compression setting.

    Which fields are set depends on the modality: images use (height,
    width) in pixels, videos add a frame count, audio uses (sample_rate,
    n_banks), and text carries the set of words to prune (empty set means
    no pruning).
    """

    height: int | None = None
    width: int | None = None
    frames: int | None = None
    sample_rate: int | None = None
    n_banks: int | None = None
    prune_words: frozenset[str] | None = None

    @classmethod
    def for_image(cls, height: int, width: int) -> "CompressionLevel":
        return cls(height=height, width=width)

    @classmethod
    def for_video(cls, frames: int, height: int, width: int) -> "CompressionLevel":
        return cls(frames=frames, height=height, width=width)

    @classmethod
    def for_audio(cls, sample_rate: int, n_banks: int) -> "CompressionLevel":
        return cls(sample_rate=sample_rate, n_banks=n_banks)

    @classmethod
    def for_text(cls, prune_words: Sequence[str] | frozenset[str]) -> "CompressionLevel":
        return cls(prune_words=frozenset(w.lower() for w in prune_words))

    def describe(self) -> str:
        if self.prune_words is not None:
            return f"text(prune={len(self.prune_words)} words)"
        if self.frames is not None:
            return f"video({self.frames}x{self.height}x{self.width})"
        if self.sample_rate is not None:
            return f"audio({self.sample_rate}Hz,{self.n_banks} banks)"
        return f"image({self.height}x{self.width})"


@dataclass(frozen=True)
class RawSample:
    """One uncompressed (or compressed) sample with its class label.

    Payload by modality: text is a list of word tokens, image an (H, W)
    float array, video a (T, H, W) float array, audio a 1-D waveform
    (with sample_rate set) or a Spectrogram after augmentation.
    """

    modality: str
    payload: Any
    label: int
    sample_rate: int | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "text":
            if not self.payload:
                raise ShapeError("text sample has no tokens")
        elif not isinstance(self.payload, Spectrogram):
            arr = np.asarray(self.payload)
            if arr.size == 0:
                raise ShapeError("sample payload is empty")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Valid sizes sampled per batch, one list per modality-specific axis.

    The maximum entry of each list must equal the model's training-maximum
    grid; lists for inactive modalities stay empty. Image and video pixel
    sizes must be divisible by the model patch size (checked by
    ``validate``).
    """

    modality: str
    valid_heights: tuple[int, ...] = ()
    valid_widths: tuple[int, ...] = ()
    valid_frame_counts: tuple[int, ...] = ()
    valid_sampling_rates: tuple[int, ...] = ()
    valid_filterbank_counts: tuple[int, ...] = ()
    stopword_set: frozenset[str] = frozenset()
    stft: StftParams = field(default_factory=StftParams)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        needed = {
            "image": ("valid_heights", "valid_widths"),
            "video": ("valid_heights", "valid_widths", "valid_frame_counts"),
            "audio": ("valid_sampling_rates", "valid_filterbank_counts"),
            "text": (),
        }[self.modality]
        for name in needed:
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{self.modality} policy needs nonempty {name}")
            if any(v < 1 for v in values):
                raise ConfigError(f"{name} entries must be positive, got {values}")

    def validate(self, patch_size: int) -> None:
        if self.modality in ("image", "video"):
            for name in ("valid_heights", "valid_widths"):
                bad = [v for v in getattr(self, name) if v % patch_size]
                if bad:
                    raise ConfigError(
                        f"{name} entries {bad} are not divisible by patch size {patch_size}"
                    )

    def full_level(self) -> CompressionLevel:
        """The uncompressed level: the maximum of every active list."""
        if self.modality == "image":
            return CompressionLevel.for_image(max(self.valid_heights), max(self.valid_widths))
        if self.modality == "video":
            return CompressionLevel.for_video(
                max(self.valid_frame_counts), max(self.valid_heights), max(self.valid_widths)
            )
        if self.modality == "audio":
            return CompressionLevel.for_audio(
                max(self.valid_sampling_rates), max(self.valid_filterbank_counts)
            )
        return CompressionLevel.for_text(frozenset())


def sample_level(policy: AugmentationPolicy, rng: np.random.Generator) -> CompressionLevel:
    """Draw one compression level, each size uniform over its policy list.

    Only defined for the three size-modulated modalities; text pruning is
    per sequence and handled by prune_insignificant_words.
    """

    def draw(values: tuple[int, ...]) -> int:
        return int(values[rng.integers(0, len(values))])

    if policy.modality == "image":
        return CompressionLevel.for_image(draw(policy.valid_heights), draw(policy.valid_widths))
    if policy.modality == "video":
        return CompressionLevel.for_video(
            draw(policy.valid_frame_counts),
            draw(policy.valid_heights),
            draw(policy.valid_widths),
        )
    if policy.modality == "audio":
        return CompressionLevel.for_audio(
            draw(policy.valid_sampling_rates), draw(policy.valid_filterbank_counts)
        )
    raise ConfigError("sample_level is undefined for text; prune per sequence instead")


def prune_insignificant_words(
    seq: Sequence[str], stopwords: frozenset[str], rng: np.random.Generator
) -> list[str]:
    """Remove a random subset of the stopword occurrences in a sequence.

    With s stopword occurrences present, the number removed is uniform
    over [0, s-1], so at least one stopword always survives. Removal
    positions are drawn without replacement; surviving tokens keep their
    relative order. Matching is case-insensitive and exact (no stemming).
    """
    seq = list(seq)
    occurrences = [i for i, tok in enumerate(seq) if tok.lower() in stopwords]
    s = len(occurrences)
    if s == 0:
        return seq
    n_prune = int(rng.integers(0, s))
    if n_prune == 0:
        return seq
    chosen = rng.choice(s, size=n_prune, replace=False)
    drop = {occurrences[i] for i in chosen}
    return [tok for i, tok in enumerate(seq) if i not in drop]


def _check_uniform_batch(batch: Sequence[RawSample], modality: str) -> None:
    if not batch:
        raise ValueError("empty batch")
    shapes = {np.asarray(s.payload).shape for s in batch}
    if any(s.modality != modality for s in batch):
        raise ValueError(f"batch mixes modalities, expected all {modality!r}")
    if len(shapes) != 1:
        raise ShapeError(f"batch samples disagree on full size: {sorted(shapes)}")


def modulate_resolution(
    batch: Sequence[RawSample], policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[list[RawSample], CompressionLevel]:
    """Resize every image in the batch to one randomly drawn (h, w)."""
    _check_uniform_batch(batch, "image")
    level = sample_level(policy, rng)
    h, w = level.height, level.width
    out = []
    for sample in batch:
        img = np.asarray(sample.payload)
        resized = img.copy() if img.shape[:2] == (h, w) else resize_bilinear(img, h, w)
        out.append(replace(sample, payload=resized))
    return out, level


def modulate_spatiotemporal(
    batch: Sequence[RawSample], policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[list[RawSample], CompressionLevel]:
    """Subsample frames uniformly, then resize each frame, per batch draw."""
    _check_uniform_batch(batch, "video")
    level = sample_level(policy, rng)
    t, h, w = level.frames, level.height, level.width
    out = []
    for sample in batch:
        video = np.asarray(sample.payload)
        picked = uniform_frame_sample(video, t)
        if picked.shape[1:3] != (h, w):
            picked = np.stack([resize_bilinear(frame, h, w) for frame in picked])
        else:
            picked = picked.copy()
        out.append(replace(sample, payload=picked))
    return out, level


def modulate_spectrogram(
    batch: Sequence[RawSample], policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[list[RawSample], CompressionLevel]:
    """Resample each waveform to a drawn rate and build its mel spectrogram."""
    _check_uniform_batch(batch, "audio")
    level = sample_level(policy, rng)
    rate, n_banks = level.sample_rate, level.n_banks
    out = []
    for sample in batch:
        if sample.sample_rate is None:
            raise ValueError("audio sample has no native sample rate")
        if rate > sample.sample_rate:
            raise InvalidCompressionError(
                f"rate {rate} exceeds native rate {sample.sample_rate}"
            )
        wave = resample_audio(np.asarray(sample.payload), sample.sample_rate, rate)
        spec = waveform_to_spectrogram(wave, rate, n_banks, policy.stft)
        out.append(replace(sample, payload=spec, sample_rate=rate))
    return out, level


def compress_sample(
    sample: RawSample,
    level: CompressionLevel,
    stft_params: StftParams | None = None,
) -> RawSample:
    """Deterministically compress one sample to a given level.

    This is the inference-time counterpart of the batch augmenters: no
    randomness, one sample, any modality. Text levels prune every
    occurrence of the level's word set.
    """
    if sample.modality == "text":
        prune = level.prune_words if level.prune_words is not None else frozenset()
        kept = [tok for tok in sample.payload if tok.lower() not in prune]
        if not kept:
            raise ShapeError("pruning removed every token; templates must keep keywords")
        return replace(sample, payload=kept)
    if sample.modality == "image":
        img = np.asarray(sample.payload)
        if img.shape[:2] == (level.height, level.width):
            return replace(sample, payload=img.copy())
        return replace(sample, payload=resize_bilinear(img, level.height, level.width))
    if sample.modality == "video":
        video = uniform_frame_sample(np.asarray(sample.payload), level.frames)
        if video.shape[1:3] != (level.height, level.width):
            video = np.stack([resize_bilinear(f, level.height, level.width) for f in video])
        return replace(sample, payload=video)
    # audio
    if sample.sample_rate is None:
        raise ValueError("audio sample has no native sample rate")
    if level.sample_rate > sample.sample_rate:
        raise InvalidCompressionError(
            f"rate {level.sample_rate} exceeds native rate {sample.sample_rate}"
        )
    params = stft_params or StftParams()
    wave = resample_audio(np.asarray(sample.payload), sample.sample_rate, level.sample_rate)
    spec = waveform_to_spectrogram(wave, level.sample_rate, level.n_banks, params)
    return replace(sample, payload=spec, sample_rate=level.sample_rate)
