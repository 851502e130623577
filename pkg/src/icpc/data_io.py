"""Synthetic dataset generation, validation splitting and file formats.

The generators replace benchmark datasets with procedurally built samples
whose class signal survives compression by construction: shapes stay
recognizable after downscaling, motion direction survives frame dropping,
tone frequency bands survive resampling, and class keywords sit outside
the stopword list so pruning cannot touch them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .augment import RawSample
from .errors import FormatError, VersionError
from .model import ModelConfig, TransformerClassifier

DATASET_MAGIC = b"ICPCDATA"
CHECKPOINT_MAGIC = b"ICPCCKPT"
FORMAT_VERSION = 1

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "ring", "diamond")
MOTION_NAMES = ("right", "left", "down", "up", "static")

# class keyword pools for template text; all disjoint from the stopword list
_KEYWORDS = (
    ("galaxy", "nebula", "comet", "orbit", "telescope", "quasar"),
    ("recipe", "oven", "saucepan", "garlic", "simmer", "bakery"),
    ("goalkeeper", "referee", "stadium", "marathon", "tournament", "dribble"),
    ("thunderstorm", "drizzle", "humidity", "blizzard", "forecast", "hailstone"),
)
_FILLERS = (
    "window", "report", "garden", "music", "travel", "bridge", "bottle",
    "engine", "letter", "market", "mirror", "momentum", "notebook", "paint",
    "pencil", "picture", "pocket", "river", "signal", "street", "summer",
    "table", "ticket", "village", "wallet", "winter", "yellow", "zipper",
    "anchor", "basket", "candle", "door", "fabric", "hammer", "island",
    "jacket", "kitchen", "ladder", "meadow", "needle", "ocean", "puzzle",
    "quarry", "ribbon", "shadow", "timber", "umbrella", "valley", "whistle",
    "carpet", "lantern", "marble", "orchard", "parcel", "saddle", "tunnel",
    "vessel", "wagon", "barrel", "copper",
)
_TEMPLATE_STOPWORDS = (
    "the", "a", "of", "and", "to", "in", "is", "was", "with", "on",
    "for", "at", "by", "this", "that", "it", "as", "be", "from", "an",
)

# per-class tone frequencies; every entry divides 16000 so zero-noise
# waveforms are exactly periodic at the default native rate
_TONE_FREQS = ((400.0, 500.0), (800.0, 1000.0), (1600.0, 2000.0), (3200.0, 4000.0))


@dataclass
class Dataset:
    """A bundle of same-modality samples sharing their full native size."""

    samples: list[RawSample]
    num_classes: int
    modality: str
    seed: int
    vocab: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.samples:
            raise ValueError("dataset has no samples")
        counts = self.class_counts()
        if len(counts) != self.num_classes or min(counts.values()) < 1:
            raise ValueError(
                f"every class in [0, {self.num_classes}) needs at least one sample, got {counts}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {c: 0 for c in range(self.num_classes)}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts


def default_stopwords() -> frozenset[str]:
    """The stopword list shipped with the package, one word per line."""
    text = resources.files("icpc").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


def load_stopwords(path) -> frozenset[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


def _shape_mask(kind: str, height: int, width: int, cy: float, cx: float, r: float):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        half = 0.82 * r
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "triangle":
        # upward triangle inscribed in the radius
        top = (cx, cy - r)
        left = (cx - 0.95 * r, cy + 0.75 * r)
        right = (cx + 0.95 * r, cy + 0.75 * r)

        def half_plane(p, q):
            return (q[0] - p[0]) * (yy - p[1]) - (q[1] - p[1]) * (xx - p[0])

        s1 = half_plane(top, left)
        s2 = half_plane(left, right)
        s3 = half_plane(right, top)
        return (s1 <= 0) & (s2 <= 0) & (s3 <= 0)
    if kind == "cross":
        arm = 0.33 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.15 * r
    raise ValueError(f"unknown shape {kind!r}")


def _render_shape(rng, kind: str, height: int, width: int):
    background = rng.uniform(0.0, 0.25, size=(height, width))
    r = rng.uniform(0.18, 0.33) * min(height, width)
    cy = rng.uniform(r + 1, height - r - 1)
    cx = rng.uniform(r + 1, width - r - 1)
    mask = _shape_mask(kind, height, width, cy, cx, r)
    img = background
    img[mask] = rng.uniform(0.75, 1.0)
    return img.astype(np.float32), (kind, cy, cx, r)


def gen_shapes_images(n: int, classes: int, resolution: int, seed: int) -> Dataset:
    """Filled shapes at random positions and scales on noise backgrounds.

    Label = shape kind. Class counts are balanced within one sample.
    """
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % classes
        img, _ = _render_shape(rng, SHAPE_NAMES[label], resolution, resolution)
        samples.append(RawSample(modality="image", payload=img, label=label))
    return Dataset(samples, classes, "image", seed)


def gen_moving_shapes_video(
    n: int, classes: int, frames: int, resolution: int, seed: int
) -> Dataset:
    """A shape translating across frames; label = motion direction.

    The trajectory is symmetric around the middle frame, so reversing
    the frame order of a left-moving sample traces a right-moving path
    (and up/down likewise). The optional fifth class is static and
    repeats a single rendered frame.
    """
    if not 1 <= classes <= len(MOTION_NAMES):
        raise ValueError(f"classes must be in [1, {len(MOTION_NAMES)}]")
    directions = {"right": (0.0, 1.0), "left": (0.0, -1.0), "down": (1.0, 0.0), "up": (-1.0, 0.0), "static": (0.0, 0.0)}
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % classes
        name = MOTION_NAMES[label]
        dy, dx = directions[name]
        kind = SHAPE_NAMES[int(rng.integers(0, 2))]  # circle or square, uncorrelated
        r = rng.uniform(0.14, 0.20) * resolution
        # largest per-frame step that keeps the shape fully inside
        max_travel = resolution / 2 - r - 2
        step = rng.uniform(0.55, 0.95) * max_travel / max((frames - 1) / 2, 1)
        cy0 = resolution / 2 + rng.uniform(-0.05, 0.05) * resolution
        cx0 = resolution / 2 + rng.uniform(-0.05, 0.05) * resolution
        intensity = rng.uniform(0.75, 1.0)
        if name == "static":
            background = rng.uniform(0.0, 0.25, size=(resolution, resolution))
            mask = _shape_mask(kind, resolution, resolution, cy0, cx0, r)
            frame = background
            frame[mask] = intensity
            video = np.repeat(frame[None].astype(np.float32), frames, axis=0)
        else:
            stack = []
            for f in range(frames):
                offset = (f - (frames - 1) / 2) * step
                cy = np.clip(cy0 + dy * offset, r + 1, resolution - r - 1)
                cx = np.clip(cx0 + dx * offset, r + 1, resolution - r - 1)
                background = rng.uniform(0.0, 0.25, size=(resolution, resolution))
                mask = _shape_mask(kind, resolution, resolution, cy, cx, r)
                frame = background
                frame[mask] = intensity
                stack.append(frame.astype(np.float32))
            video = np.stack(stack)
        samples.append(RawSample(modality="video", payload=video, label=label))
    return Dataset(samples, classes, "video", seed)


def gen_tones_audio(
    n: int,
    classes: int,
    duration: float,
    native_rate: int,
    seed: int,
    noise_level: float = 0.08,
) -> Dataset:
    """Sinusoids in class-specific frequency bands plus Gaussian noise.

    Frequencies divide the default native rate, so with noise_level=0 the
    waveforms are exactly periodic.
    """
    if not 1 <= classes <= len(_TONE_FREQS):
        raise ValueError(f"classes must be in [1, {len(_TONE_FREQS)}]")
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration * native_rate))
    t = np.arange(n_samples, dtype=np.float64) / native_rate
    samples = []
    for i in range(n):
        label = i % classes
        options = _TONE_FREQS[label]
        freq = float(options[rng.integers(0, len(options))])
        amp = rng.uniform(0.5, 0.8)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = amp * np.sin(2.0 * np.pi * freq * t + phase)
        if noise_level > 0.0:
            wave = wave + rng.normal(0.0, noise_level, size=n_samples)
        wave = np.clip(wave, -1.0, 1.0).astype(np.float32)
        samples.append(
            RawSample(modality="audio", payload=wave, label=label, sample_rate=native_rate)
        )
    return Dataset(samples, classes, "audio", seed)


def gen_template_text(n: int, classes: int, vocab: int, seed: int) -> Dataset:
    """Sentences built from class keyword pools, fillers and stopwords.

    Every sentence carries at least two class keywords and at least three
    stopwords; keywords and fillers never collide with the stopword list,
    so pruning all stopwords preserves the label. The vocab parameter
    caps the neutral filler pool.
    """
    if not 1 <= classes <= len(_KEYWORDS):
        raise ValueError(f"classes must be in [1, {len(_KEYWORDS)}]")
    rng = np.random.default_rng(seed)
    fillers = _FILLERS[: max(4, min(vocab, len(_FILLERS)))]
    samples = []
    for i in range(n):
        label = i % classes
        pool = _KEYWORDS[label]
        n_kw = int(rng.integers(2, 4))
        n_sw = int(rng.integers(3, 7))
        n_fill = int(rng.integers(2, 5))
        kw = [pool[j] for j in rng.choice(len(pool), size=n_kw, replace=False)]
        sw = [_TEMPLATE_STOPWORDS[j] for j in rng.integers(0, len(_TEMPLATE_STOPWORDS), n_sw)]
        fl = [fillers[j] for j in rng.integers(0, len(fillers), n_fill)]
        tokens = kw + sw + fl
        order = rng.permutation(len(tokens))
        samples.append(
            RawSample(modality="text", payload=[tokens[j] for j in order], label=label)
        )
    word_list = sorted(set(w for pool in _KEYWORDS[:classes] for w in pool)
                       | set(fillers) | set(_TEMPLATE_STOPWORDS))
    return Dataset(samples, classes, "text", seed, vocab=tuple(word_list))


def split_validation(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out a class-balanced validation slice.

    Picks round(fraction * count) samples per class (at least one), drawn
    with a seeded shuffle; the remainder stays in the training split.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(idx)
    val_idx: list[int] = []
    for label in sorted(by_class):
        indices = np.array(by_class[label])
        take = max(1, int(round(fraction * len(indices))))
        if take >= len(indices):
            raise ValueError(f"class {label} too small to hold out {take} samples")
        picked = rng.permutation(len(indices))[:take]
        val_idx.extend(int(indices[j]) for j in picked)
    val_set = set(val_idx)
    train_samples = [s for i, s in enumerate(dataset.samples) if i not in val_set]
    val_samples = [dataset.samples[i] for i in sorted(val_set)]
    train = replace(dataset, samples=train_samples)
    val = replace(dataset, samples=val_samples)
    return train, val


# ----------------------------------------------------------------------
# file formats


def _write_header(fh, magic: bytes, header: dict) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(magic)
    fh.write(np.uint32(FORMAT_VERSION).tobytes())
    fh.write(np.uint32(len(payload)).tobytes())
    fh.write(payload)


def _read_header(fh, magic: bytes) -> dict:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version} unsupported, expected {FORMAT_VERSION}")
    length = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
    return json.loads(fh.read(length).decode("utf-8"))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset file; binary arrays for sized modalities, UTF-8 for text."""
    if dataset.modality == "text":
        header = {
            "modality": "text",
            "num_classes": dataset.num_classes,
            "seed": dataset.seed,
            "vocab": list(dataset.vocab or ()),
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for s in dataset.samples:
                fh.write(f"{s.label}\t{' '.join(s.payload)}\n")
        return
    arrays = np.stack([np.asarray(s.payload, dtype=np.float32) for s in dataset.samples])
    header = {
        "modality": dataset.modality,
        "num_classes": dataset.num_classes,
        "seed": dataset.seed,
        "labels": [s.label for s in dataset.samples],
        "shape": list(arrays.shape),
        "sample_rate": dataset.samples[0].sample_rate,
    }
    with open(path, "wb") as fh:
        _write_header(fh, DATASET_MAGIC, header)
        fh.write(np.ascontiguousarray(arrays, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        start = fh.read(1)
    if start == b"{":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("modality") != "text":
                raise FormatError("text dataset file must declare modality 'text'")
            samples = []
            for line in fh:
                label_str, _, body = line.rstrip("\n").partition("\t")
                samples.append(
                    RawSample(modality="text", payload=body.split(" "), label=int(label_str))
                )
        return Dataset(
            samples,
            header["num_classes"],
            "text",
            header["seed"],
            vocab=tuple(header["vocab"]),
        )
    with open(path, "rb") as fh:
        header = _read_header(fh, DATASET_MAGIC)
        shape = tuple(header["shape"])
        data = np.frombuffer(fh.read(), dtype="<f4", count=int(np.prod(shape)))
    arrays = data.reshape(shape)
    samples = [
        RawSample(
            modality=header["modality"],
            payload=arrays[i].copy(),
            label=int(label),
            sample_rate=header.get("sample_rate"),
        )
        for i, label in enumerate(header["labels"])
    ]
    return Dataset(samples, header["num_classes"], header["modality"], header["seed"])


def save_checkpoint(model: TransformerClassifier, path, epoch: int = 0, seed: int = 0) -> None:
    """Versioned checkpoint: JSON header plus named little-endian f32 arrays."""
    arrays: list[tuple[str, np.ndarray]] = [(k, v) for k, v in model.params.items()]
    if model.adam_state is not None:
        for k, v in model.adam_state["m"].items():
            arrays.append((f"adam_m.{k}", v))
        for k, v in model.adam_state["v"].items():
            arrays.append((f"adam_v.{k}", v))
    header = {
        "config": model.config.to_dict(),
        "vocab": list(model.vocab) if model.vocab is not None else None,
        "epoch": epoch,
        "seed": seed,
        "adam_step": model.adam_state["step"] if model.adam_state is not None else None,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
    }
    with open(path, "wb") as fh:
        _write_header(fh, CHECKPOINT_MAGIC, header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[TransformerClassifier, dict]:
    """Restore a model (float32 parameters) and the checkpoint header."""
    with open(path, "rb") as fh:
        header = _read_header(fh, CHECKPOINT_MAGIC)
        blobs = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
            blobs[entry["name"]] = data.reshape(shape).copy()
    config = ModelConfig.from_dict(header["config"])
    params = {k: v for k, v in blobs.items() if not k.startswith("adam_")}
    vocab = header.get("vocab")
    model = TransformerClassifier(config, vocab=vocab, params=params)
    if header.get("adam_step") is not None:
        model.adam_state = {
            "m": {k[len("adam_m."):]: v for k, v in blobs.items() if k.startswith("adam_m.")},
            "v": {k[len("adam_v."):]: v for k, v in blobs.items() if k.startswith("adam_v.")},
            "step": header["adam_step"],
        }
    return model, header
