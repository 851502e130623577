"""Variable-effort inference along a compression ladder.

Each sample is first evaluated at the heaviest compression level; if the
softmax confidence of the prediction clears the threshold the ladder
stops, otherwise the next (less compressed) level runs. The final level
is always the uncompressed input, so a sample that never clears the
threshold gets the full-compute prediction. Costs are exact integer flop
counts per evaluated level, so the bookkeeping is hardware independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import CompressionLevel, RawSample, compress_sample
from .errors import ConfigError
from .model import TransformerClassifier, flops_forward
from .signal import StftParams

DEFAULT_THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
DEFAULT_DELTA_CAP = 0.01


@dataclass(frozen=True)
class InferenceLadder:
    """Ordered compression levels, heaviest first, ending uncompressed.

    token_counts and costs are representative per-level estimates (exact
    for sized modalities, reference means for text, whose sequence
    lengths vary).
    """

    levels: tuple[CompressionLevel, ...]
    threshold: float
    token_counts: tuple[int, ...]
    costs: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ConfigError("ladder needs at least one level")
        if len(self.token_counts) != len(self.levels) or len(self.costs) != len(self.levels):
            raise ConfigError("token_counts and costs must align with levels")
        if any(b <= a for a, b in zip(self.token_counts, self.token_counts[1:])):
            raise ConfigError(
                f"token counts must strictly increase along the ladder, got {self.token_counts}"
            )
        # thresholds outside (0, 1] are allowed as degenerate switches:
        # 0 always exits at the heaviest level, > 1 always runs the full ladder
        if self.threshold < 0.0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")

    def with_threshold(self, threshold: float) -> "InferenceLadder":
        return InferenceLadder(self.levels, threshold, self.token_counts, self.costs)


@dataclass(frozen=True)
class WordImportanceHierarchy:
    """Stopwords ordered by the accuracy lost when each one is pruned."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        deltas = [d for _, d in self.entries]
        if any(b < a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("entries must be sorted by non-decreasing accuracy delta")

    def words(self) -> tuple[str, ...]:
        return tuple(w for w, _ in self.entries)

    def prefix_below(self, delta_cap: float) -> tuple[str, ...]:
        return tuple(w for w, d in self.entries if d <= delta_cap)


@dataclass
class InferenceRecord:
    """Outcome of one sample's ladder walk, one line of the run log."""

    sample_id: int
    label: int
    predicted: int
    exit_level: int
    confidences: tuple[float, ...]
    cumulative_cost: int
    full_cost: int

    def as_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "label": self.label,
            "predicted": self.predicted,
            "exit_level": self.exit_level,
            "confidences": list(self.confidences),
            "cost": self.cumulative_cost,
            "full_cost": self.full_cost,
        }


def walk_ladder(
    evaluations: Sequence[tuple[int, float, int]], threshold: float
) -> tuple[int, int, int, tuple[float, ...]]:
    """Apply the termination rule to precomputed (pred, conf, cost) levels.

    Returns (prediction, exit_level, cumulative_cost, confidences seen).
    Factored out so both prediction and threshold calibration share the
    exact rule.
    """
    cumulative = 0
    confidences = []
    for i, (pred, conf, cost) in enumerate(evaluations):
        cumulative += cost
        confidences.append(conf)
        if conf >= threshold or i == len(evaluations) - 1:
            return pred, i, cumulative, tuple(confidences)
    raise AssertionError("unreachable: final level always returns")


def _evaluate_levels(
    model: TransformerClassifier,
    sample: RawSample,
    levels: Sequence[CompressionLevel],
    stft_params: StftParams | None,
    scheme: str,
) -> list[tuple[int, float, int]]:
    out = []
    for level in levels:
        encoded = model.encode(compress_sample(sample, level, stft_params), scheme)
        pred, conf = model.predict_with_confidence(encoded)
        out.append((pred, conf, flops_forward(model.config, encoded.n_tokens)))
    return out


def variable_effort_predict(
    model: TransformerClassifier,
    sample: RawSample,
    ladder: InferenceLadder,
    sample_id: int = 0,
    stft_params: StftParams | None = None,
    scheme: str = "consistent",
) -> InferenceRecord:
    """Walk one sample up the ladder until the confidence threshold is met.

    Levels beyond the exit are never evaluated; the cumulative cost sums
    exactly the evaluated levels' flops.
    """
    cumulative = 0
    confidences: list[float] = []
    pred = -1
    exit_level = len(ladder.levels) - 1
    for i, level in enumerate(ladder.levels):
        encoded = model.encode(compress_sample(sample, level, stft_params), scheme)
        pred, conf = model.predict_with_confidence(encoded)
        cumulative += flops_forward(model.config, encoded.n_tokens)
        confidences.append(conf)
        if conf >= ladder.threshold:
            exit_level = i
            break
    full_cost = _full_cost(model, sample, ladder)
    return InferenceRecord(
        sample_id=sample_id,
        label=sample.label,
        predicted=pred,
        exit_level=exit_level,
        confidences=tuple(confidences),
        cumulative_cost=cumulative,
        full_cost=full_cost,
    )


def _full_cost(model, sample: RawSample, ladder: InferenceLadder) -> int:
    if model.config.modality == "text":
        # uncompressed final level: the sequence itself plus the class token
        return flops_forward(model.config, len(sample.payload) + 1)
    return ladder.costs[-1]


def calibrate_threshold(
    model: TransformerClassifier,
    validation: Sequence[RawSample],
    ladder: InferenceLadder,
    candidates: Sequence[float] = DEFAULT_THRESHOLD_GRID,
    stft_params: StftParams | None = None,
) -> float:
    """Pick the candidate threshold with the best validation accuracy.

    Ties break toward the smaller threshold, which exits earlier and is
    cheaper. Level predictions are computed once and the termination rule
    replayed per candidate, which is equivalent to rerunning the ladder.
    """
    if not validation:
        raise ValueError("empty validation set")
    if not candidates:
        raise ValueError("no candidate thresholds")
    per_sample = [
        _evaluate_levels(model, s, ladder.levels, stft_params, "consistent")
        for s in validation
    ]
    best = None
    for threshold in sorted(candidates):
        correct = 0
        for sample, evals in zip(validation, per_sample):
            pred, _, _, _ = walk_ladder(evals, threshold)
            correct += int(pred == sample.label)
        accuracy = correct / len(validation)
        if best is None or accuracy > best[1]:
            best = (threshold, accuracy)
    return float(best[0])


def build_wih(
    model: TransformerClassifier,
    eval_set: Sequence[RawSample],
    stopword_set: frozenset[str],
) -> WordImportanceHierarchy:
    """Measure per-stopword accuracy impact on a reference set.

    delta(w) = accuracy(unpruned) - accuracy(all occurrences of w pruned).
    Words absent from the set cannot change any sequence, so their delta
    is exactly zero without a rerun. Entries sort ascending by delta,
    ties alphabetical for reproducibility.
    """
    if not eval_set:
        raise ValueError("empty eval set")
    samples = list(eval_set)
    baseline = _text_accuracy(model, samples)
    present = set()
    for s in samples:
        present.update(t.lower() for t in s.payload)
    entries = []
    for word in sorted(stopword_set):
        if word not in present:
            entries.append((word, 0.0))
            continue
        level = CompressionLevel.for_text(frozenset([word]))
        pruned = [compress_sample(s, level) for s in samples]
        delta = baseline - _text_accuracy(model, pruned)
        entries.append((word, float(delta)))
    entries.sort(key=lambda e: (e[1], e[0]))
    return WordImportanceHierarchy(tuple(entries))


def _text_accuracy(model, samples: Sequence[RawSample]) -> float:
    correct = 0
    batch = 64
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        encoded = [model.encode(s) for s in chunk]
        logits = model.forward(encoded)
        labels = np.array([s.label for s in chunk])
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(samples)


def text_ladder_from_wih(
    wih: WordImportanceHierarchy, delta_cap: float = DEFAULT_DELTA_CAP
) -> tuple[CompressionLevel, CompressionLevel, CompressionLevel]:
    """Heavy / medium / none text levels from the hierarchy.

    Heavy prunes every word in the hierarchy; medium prunes the prefix
    whose measured accuracy delta is at most delta_cap; the final level
    prunes nothing.
    """
    heavy = CompressionLevel.for_text(frozenset(wih.words()))
    medium = CompressionLevel.for_text(frozenset(wih.prefix_below(delta_cap)))
    none = CompressionLevel.for_text(frozenset())
    return heavy, medium, none


@dataclass
class ExitStats:
    """Aggregate view of a completed variable-effort run."""

    fractions: tuple[float, ...]
    mean_cost: float
    mean_full_cost: float
    speedup: float
    accuracy: float
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "mean_cost": self.mean_cost,
            "mean_full_cost": self.mean_full_cost,
            "speedup": self.speedup,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
        }


def report_early_exit_stats(records: Sequence[InferenceRecord], n_levels: int) -> ExitStats:
    """Exit fractions per level, mean cost and flop speedup versus full compute."""
    if not records:
        raise ValueError("no inference records")
    counts = [0] * n_levels
    for r in records:
        counts[r.exit_level] += 1
    n = len(records)
    mean_cost = float(np.mean([r.cumulative_cost for r in records]))
    mean_full = float(np.mean([r.full_cost for r in records]))
    accuracy = float(np.mean([r.predicted == r.label for r in records]))
    return ExitStats(
        fractions=tuple(c / n for c in counts),
        mean_cost=mean_cost,
        mean_full_cost=mean_full,
        speedup=mean_full / mean_cost,
        accuracy=accuracy,
        n_samples=n,
    )


def _round_to_multiple(value: float, multiple: int, minimum: int) -> int:
    return max(minimum, int(round(value / multiple)) * multiple)


def build_default_ladder(
    model: TransformerClassifier,
    reference: RawSample,
    threshold: float = 0.9,
    stft_params: StftParams | None = None,
    wih: WordImportanceHierarchy | None = None,
    delta_cap: float = DEFAULT_DELTA_CAP,
    native_rate: int | None = None,
) -> InferenceLadder:
    """Three-level ladder scaled from the model's training-maximum sizes.

    Images and video use 50% / 75% / 100% per axis (video also halves the
    frame count at the heavy level); audio scales (rate, banks) by
    (0.625, ~0.59), (0.875, ~0.82) and full, with bank counts rounded to
    patch multiples; text requires a word importance hierarchy.
    """
    cfg = model.config
    p = cfg.patch_size
    if cfg.modality == "image":
        full_h, full_w = cfg.max_grid.height * p, cfg.max_grid.width * p
        levels = tuple(
            CompressionLevel.for_image(
                _round_to_multiple(f * full_h, p, p), _round_to_multiple(f * full_w, p, p)
            )
            for f in (0.5, 0.75, 1.0)
        )
    elif cfg.modality == "video":
        full_t = cfg.max_grid.time
        full_h, full_w = cfg.max_grid.height * p, cfg.max_grid.width * p
        fracs = ((0.5, 0.5), (0.75, 0.75), (1.0, 1.0))
        levels = tuple(
            CompressionLevel.for_video(
                max(1, int(round(ft * full_t))),
                _round_to_multiple(fs * full_h, p, p),
                _round_to_multiple(fs * full_w, p, p),
            )
            for ft, fs in fracs
        )
    elif cfg.modality == "audio":
        if native_rate is None:
            native_rate = reference.sample_rate
        full_banks = cfg.max_grid.height * p
        pairs = ((0.625, 0.59), (0.875, 0.82), (1.0, 1.0))
        levels = tuple(
            CompressionLevel.for_audio(
                int(round(fr * native_rate)), _round_to_multiple(fb * full_banks, p, p)
            )
            for fr, fb in pairs
        )
    else:
        if wih is None:
            raise ConfigError("text ladders need a word importance hierarchy")
        levels = text_ladder_from_wih(wih, delta_cap)

    # representative token counts and costs, measured on the reference sample
    token_counts = []
    costs = []
    for level in levels:
        encoded = model.encode(compress_sample(reference, level, stft_params))
        token_counts.append(encoded.n_tokens)
        costs.append(flops_forward(cfg, encoded.n_tokens))
    kept = [0]
    for i in range(1, len(levels)):
        if token_counts[i] > token_counts[kept[-1]]:
            kept.append(i)
        # levels that do not grow the token count on the reference sample
        # are dropped (text ladders can degenerate when every stopword
        # already clears the delta cap)
    return InferenceLadder(
        levels=tuple(levels[i] for i in kept),
        threshold=threshold,
        token_counts=tuple(token_counts[i] for i in kept),
        costs=tuple(costs[i] for i in kept),
    )
