"""Hardware-aware test-time augmentation.

Small batches under-utilize parallel hardware: latency stays roughly
flat until the batch is big enough to saturate the machine. The largest
batch size whose latency stays within a tolerance of batch-size-1
latency is the "ideal batch size" of an input size, and it shrinks as
inputs grow. That slack is filled with extra compressed views of the
same sample: a configuration holds one maximum size plus enough smaller
sizes to reach the maximum's ideal batch size. Views are padded to a
common length, run as a single masked batch, and ensembled.

The default latency model is analytic (token-work over a configurable
parallel width), which is deterministic and machine independent;
wall-clock profiling is opt-in.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .augment import CompressionLevel, RawSample, compress_sample
from .errors import ConfigError, UnstableMeasurementError
from .model import TransformerClassifier, flops_forward, softmax
from .signal import StftParams

ENSEMBLE_RULES = ("mean_softmax", "majority")


@dataclass(frozen=True)
class TtaConfiguration:
    """One multi-view setup: sizes sorted by descending token count.

    The number of views equals the ideal batch size of the largest view,
    so the whole configuration rides in one hardware-saturating batch.
    """

    sizes: tuple[CompressionLevel, ...]
    token_counts: tuple[int, ...]
    ensemble: str = "mean_softmax"

    def __post_init__(self):
        if not self.sizes:
            raise ConfigError("configuration needs at least one view")
        if len(self.token_counts) != len(self.sizes):
            raise ConfigError("token_counts must align with sizes")
        if any(b > a for a, b in zip(self.token_counts, self.token_counts[1:])):
            raise ConfigError("views must be sorted by descending token count")
        if len(set(self.sizes)) != len(self.sizes):
            raise ConfigError("views must be distinct sizes")
        if self.ensemble not in ENSEMBLE_RULES:
            raise ConfigError(f"unknown ensemble rule {self.ensemble!r}")

    @property
    def max_tokens(self) -> int:
        return self.token_counts[0]


@dataclass
class LatencyProfile:
    """Per-size latency curves and the derived ideal batch sizes."""

    token_counts: dict[CompressionLevel, int]
    ideal_batch: dict[CompressionLevel, int]
    curves: dict[CompressionLevel, dict[int, float]]

    def __post_init__(self):
        # ideal batch must not grow with token count
        ordered = sorted(self.ideal_batch, key=lambda lv: self.token_counts[lv])
        best = None
        for lv in reversed(ordered):
            b = self.ideal_batch[lv]
            if best is not None and b > best:
                raise ConfigError(
                    "ideal batch size must be non-increasing in token count"
                )
            best = b if best is None else min(best, b)

    def ideal(self, level: CompressionLevel) -> int:
        return self.ideal_batch[level]


class AnalyticLatencyModel:
    """Deterministic cost model: parallel lanes processing token work.

    A batch of b samples with n tokens each offers b*n token streams; the
    hardware runs parallel_width of them at a time, so latency is
    work-per-stream times ceil(b * n / parallel_width). Latency is flat
    while b * n fits in one wave, giving ideal_batch(n) = floor(P / n).
    """

    def __init__(self, config, parallel_width: float):
        if parallel_width < 1:
            raise ConfigError(f"parallel width must be >= 1, got {parallel_width}")
        self.config = config
        self.parallel_width = float(parallel_width)

    def latency(self, n_tokens: int, batch_size: int) -> float:
        work_per_stream = flops_forward(self.config, n_tokens) / n_tokens
        waves = np.ceil(batch_size * n_tokens / self.parallel_width)
        return float(work_per_stream * max(waves, 1.0))


def profile_ideal_batch(
    latency_fn: Callable[[int], float],
    epsilon: float = 0.1,
    max_batch: int = 4096,
) -> int:
    """Largest batch whose latency stays within (1 + epsilon) of batch 1.

    Doubles the batch size until latency degrades, then bisects the
    boundary. latency_fn maps a batch size to a latency (already
    median-filtered for wall-clock measurements).
    """
    base = latency_fn(1)
    limit = (1.0 + epsilon) * base

    def ok(b: int) -> bool:
        return latency_fn(b) <= limit

    good, probe = 1, 2
    while probe <= max_batch and ok(probe):
        good, probe = probe, probe * 2
    if probe > max_batch:
        return good
    lo, hi = good, probe  # ok(lo), not ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def measure_wall_latency(
    model: TransformerClassifier,
    n_tokens: int,
    batch_size: int,
    repeats: int = 5,
    max_spread: float = 0.25,
) -> float:
    """Median wall-clock forward latency for a synthetic batch.

    Latency depends on shapes only, so the batch holds random vectors.
    Raises UnstableMeasurementError when the spread across repeats
    exceeds max_spread of the median; callers then fall back to the
    analytic model.
    """
    cfg = model.config
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch_size, n_tokens, cfg.embed_dim)).astype(cfg.dtype)
    mask = np.ones((batch_size, n_tokens), dtype=bool)
    model._forward_core(x, mask, None, None, need_cache=False)  # warmup
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model._forward_core(x, mask, None, None, need_cache=False)
        times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    if (max(times) - min(times)) > max_spread * median:
        raise UnstableMeasurementError(
            f"latency spread {max(times) - min(times):.2e}s exceeds "
            f"{max_spread:.0%} of median {median:.2e}s"
        )
    return median


def build_latency_profile(
    model: TransformerClassifier,
    levels: Sequence[CompressionLevel],
    token_counts: Sequence[int],
    parallel_width: float | None = None,
    epsilon: float = 0.1,
    mode: str = "analytic",
    max_batch: int = 4096,
) -> LatencyProfile:
    """Profile every candidate size and derive its ideal batch size.

    parallel_width defaults to four times the largest token count, so
    the largest size gets an ideal batch of 4 and smaller sizes
    proportionally more. In wall-clock mode an unstable measurement falls
    back to the analytic model for that size.
    """
    if len(levels) != len(token_counts):
        raise ConfigError("levels and token_counts must align")
    if parallel_width is None:
        parallel_width = 4.0 * max(token_counts)
    analytic = AnalyticLatencyModel(model.config, parallel_width)
    ideal: dict[CompressionLevel, int] = {}
    curves: dict[CompressionLevel, dict[int, float]] = {}
    counts = dict(zip(levels, token_counts))
    for level, n in zip(levels, token_counts):
        if mode == "analytic":
            fn = lambda b, n=n: analytic.latency(n, b)
        elif mode == "wallclock":
            def fn(b, n=n):
                try:
                    return measure_wall_latency(model, n, b)
                except UnstableMeasurementError:
                    return analytic.latency(n, b)
        else:
            raise ConfigError(f"unknown profiling mode {mode!r}")
        b = profile_ideal_batch(fn, epsilon=epsilon, max_batch=max_batch)
        ideal[level] = b
        curves[level] = {bb: fn(bb) for bb in sorted({1, 2, 4, b, min(2 * b, max_batch)})}
    # isotonic clamp against wall-clock noise: walking from the largest
    # token count to the smallest, the ideal batch may only grow
    best = 1
    for lv in sorted(levels, key=lambda l: -counts[l]):
        best = max(best, ideal[lv])
        ideal[lv] = best
    return LatencyProfile(token_counts=counts, ideal_batch=ideal, curves=curves)


def generate_configurations(
    k: int,
    levels: Sequence[CompressionLevel],
    token_counts: Sequence[int],
    profile: LatencyProfile,
    rng: np.random.Generator,
    ensemble: str = "mean_softmax",
    max_attempts_per_config: int = 200,
) -> list[TtaConfiguration]:
    """Draw k distinct multi-view configurations from a size domain.

    Each draw picks a maximum size uniformly, reads its ideal batch size
    b, then picks b - 1 further distinct sizes with strictly fewer tokens
    uniformly without replacement. Draws with too few smaller sizes are
    skipped and redrawn; duplicate configurations are rejected.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(levels) != len(token_counts):
        raise ConfigError("levels and token_counts must align")
    counts = dict(zip(levels, token_counts))
    domain = sorted(levels, key=lambda lv: (-counts[lv], repr(lv)))
    configs: list[TtaConfiguration] = []
    seen: set[tuple[CompressionLevel, ...]] = set()
    attempts = 0
    budget = max_attempts_per_config * k
    while len(configs) < k and attempts < budget:
        attempts += 1
        top = domain[int(rng.integers(0, len(domain)))]
        b = profile.ideal(top)
        smaller = [lv for lv in domain if counts[lv] < counts[top]]
        if len(smaller) < b - 1:
            continue
        extra_idx = rng.choice(len(smaller), size=b - 1, replace=False)
        views = [top] + [smaller[int(j)] for j in extra_idx]
        views.sort(key=lambda lv: (-counts[lv], repr(lv)))
        key = tuple(views)
        if key in seen:
            continue
        seen.add(key)
        configs.append(
            TtaConfiguration(
                sizes=key,
                token_counts=tuple(counts[lv] for lv in views),
                ensemble=ensemble,
            )
        )
    if len(configs) < k:
        raise ConfigError(
            f"could only build {len(configs)} of {k} distinct configurations "
            f"from a domain of {len(domain)} sizes"
        )
    return configs


def combine_predictions(probs: np.ndarray, rule: str) -> int:
    """Reduce per-view softmax rows to one class.

    mean_softmax takes the argmax of the mean probability vector;
    majority votes per view, breaking ties by mean probability, then by
    the smaller class id.
    """
    if rule == "mean_softmax":
        return int(np.argmax(probs.mean(axis=0)))
    if rule == "majority":
        votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
        top = votes.max()
        tied = np.flatnonzero(votes == top)
        if len(tied) == 1:
            return int(tied[0])
        means = probs.mean(axis=0)
        return int(tied[np.argmax(means[tied])])
    raise ConfigError(f"unknown ensemble rule {rule!r}")


def tta_predict(
    model: TransformerClassifier,
    sample: RawSample,
    config: TtaConfiguration,
    stft_params: StftParams | None = None,
) -> int:
    """Ensemble one sample's views, padded and masked into a single batch."""
    encoded = [
        model.encode(compress_sample(sample, level, stft_params))
        for level in config.sizes
    ]
    logits = model.forward(encoded)
    return combine_predictions(softmax(logits), config.ensemble)


def select_configuration(
    model: TransformerClassifier,
    validation: Sequence[RawSample],
    configs: Sequence[TtaConfiguration],
    stft_params: StftParams | None = None,
) -> tuple[TtaConfiguration, list[dict]]:
    """Evaluate every configuration on the validation set, keep the best.

    Returns the winner plus a per-configuration report. Accuracy ties
    break toward the smaller maximum token count (cheaper batches), then
    toward the earlier configuration.
    """
    if not configs:
        raise ConfigError("no configurations to select from")
    if not validation:
        raise ValueError("empty validation set")
    report = []
    best_idx = None
    best_key = None
    for i, config in enumerate(configs):
        correct = sum(
            tta_predict(model, s, config, stft_params) == s.label for s in validation
        )
        accuracy = correct / len(validation)
        report.append(
            {
                "config_id": i,
                "val_accuracy": accuracy,
                "max_tokens": config.max_tokens,
                "n_views": len(config.sizes),
            }
        )
        key = (-accuracy, config.max_tokens, i)
        if best_key is None or key < best_key:
            best_key = key
            best_idx = i
    return configs[best_idx], report
