"""Miniature Transformer encoder classifier with hand-written gradients.

The backbone is a standard pre-norm encoder (masked multi-head
self-attention, GELU MLP, residual connections, final layer norm, class
token head) implemented on numpy arrays with explicit reverse-mode
backward passes for every operation. Modality front-ends turn prepared
samples into embedding-vector sequences: token lookup for text, flattened
patch projection for images, spectrograms and videos. Position embeddings
come from a single learned table sized to the training-maximum grid; a
compressed input selects rows through a PositionSelection, with table row
0 reserved for the class token and patch rows offset by one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import (
    AugmentationPolicy,
    CompressionLevel,
    RawSample,
    compress_sample,
    modulate_resolution,
    modulate_spatiotemporal,
    modulate_spectrogram,
    prune_insignificant_words,
)
from .errors import NumericError, ShapeError
from .positional import (
    GridDims,
    PositionSelection,
    first_n_baseline,
    select_1d,
    select_2d,
    select_3d,
)
from .signal import Spectrogram, StftParams

MASK_BIAS = -1e9
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class ModelConfig:
    """Architecture and numeric settings for one modality."""

    modality: str
    max_grid: GridDims
    num_classes: int
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 16
    in_channels: int = 1
    vocab_size: int = 0
    dropout: float = 0.1
    precision: int = 32

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.modality == "text" and self.vocab_size < 1:
            raise ValueError("text models need vocab_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def pos_table_size(self) -> int:
        # row 0 is the class token position; patch rows are offset by 1
        return self.max_grid.total + 1

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "max_grid": [self.max_grid.time, self.max_grid.height, self.max_grid.width],
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "vocab_size": self.vocab_size,
            "dropout": self.dropout,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["max_grid"] = GridDims(*d["max_grid"])
        return cls(**d)


@dataclass
class EncodedSample:
    """Embedding-vector sequence for one sample, class token first.

    vectors[0] is the class token plus position row 0; vectors[1 + i] is
    the content embedding of grid cell i plus position row
    1 + position_indices.indices[i].
    """

    vectors: np.ndarray
    position_indices: PositionSelection
    mask: np.ndarray
    label: int | None
    kind: str
    pos_rows: np.ndarray
    token_ids: np.ndarray | None = None
    patch_matrix: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.position_indices) + 1
        if self.vectors.shape[0] != n:
            raise ShapeError(
                f"expected {n} vectors (class token + selection), got {self.vectors.shape[0]}"
            )
        if self.mask.shape != (n,) or self.mask.dtype != np.bool_:
            raise ShapeError("mask must be a bool array with one entry per vector")

    @property
    def n_tokens(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class FlopCounter:
    """Tallies multiply-add flops of backbone matmuls during forward passes."""

    attention: int = 0
    linear: int = 0

    @property
    def total(self) -> int:
        return self.attention + self.linear


def flops_forward(config: ModelConfig, n_tokens: int) -> int:
    """Closed-form matmul flops of one forward pass over n_tokens vectors.

    Counts QKV/out projections, attention score and mixing products, the
    MLP and the classifier head; layer norms and activations are excluded
    on both the measured and the closed-form side.
    """
    n, d, r = n_tokens, config.embed_dim, config.mlp_ratio
    per_layer = (8 + 4 * r) * n * d * d + 4 * n * n * d
    return config.n_layers * per_layer + 2 * d * config.num_classes


def attention_flops(config: ModelConfig, n_tokens: int) -> int:
    """The quadratic part of flops_forward: score and mixing matmuls only."""
    return config.n_layers * 4 * n_tokens * n_tokens * config.embed_dim


def _gelu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.tanh(_GELU_C * (z + _GELU_A * z**3))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * z * z)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_bwd(dy: np.ndarray, g: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class TransformerClassifier:
    """Trainable encoder classifier for one modality.

    Parameters live in an ordered name -> array dict so that optimizer
    state, checkpoints and gradient checks can address them uniformly.
    """

    def __init__(
        self,
        config: ModelConfig,
        vocab: Sequence[str] | None = None,
        seed: int = 0,
        params: dict[str, np.ndarray] | None = None,
    ):
        self.config = config
        self.vocab = tuple(vocab) if vocab is not None else None
        if config.modality == "text":
            if self.vocab is None:
                raise ValueError("text models need a vocabulary")
            if len(self.vocab) != config.vocab_size:
                raise ValueError(
                    f"vocab has {len(self.vocab)} entries, config says {config.vocab_size}"
                )
            self.vocab_index = {w: i for i, w in enumerate(self.vocab)}
        else:
            self.vocab_index = None
        self.params = params if params is not None else self._init_params(seed)
        # filled by train(); persisted in checkpoints when present
        self.adam_state: dict | None = None

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        d = cfg.embed_dim

        def normal(*shape):
            return (rng.standard_normal(shape) * 0.02).astype(dt)

        p: dict[str, np.ndarray] = {}
        if cfg.modality == "text":
            p["token_embed"] = normal(cfg.vocab_size, d)
        else:
            p["patch_proj_w"] = normal(cfg.patch_dim, d)
            p["patch_proj_b"] = np.zeros(d, dtype=dt)
        p["cls_token"] = normal(d)
        p["pos_embed"] = normal(cfg.pos_table_size, d)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            p[pre + "ln1_g"] = np.ones(d, dtype=dt)
            p[pre + "ln1_b"] = np.zeros(d, dtype=dt)
            for name in ("q", "k", "v", "o"):
                p[pre + f"attn_w{name}"] = normal(d, d)
                p[pre + f"attn_b{name}"] = np.zeros(d, dtype=dt)
            p[pre + "ln2_g"] = np.ones(d, dtype=dt)
            p[pre + "ln2_b"] = np.zeros(d, dtype=dt)
            p[pre + "mlp_w1"] = normal(d, cfg.mlp_ratio * d)
            p[pre + "mlp_b1"] = np.zeros(cfg.mlp_ratio * d, dtype=dt)
            p[pre + "mlp_w2"] = normal(cfg.mlp_ratio * d, d)
            p[pre + "mlp_b2"] = np.zeros(d, dtype=dt)
        p["ln_f_g"] = np.ones(d, dtype=dt)
        p["ln_f_b"] = np.zeros(d, dtype=dt)
        p["head_w"] = normal(d, cfg.num_classes)
        p["head_b"] = np.zeros(cfg.num_classes, dtype=dt)
        return p

    # ------------------------------------------------------------------
    # modality front-ends

    def _assemble(
        self,
        content: np.ndarray,
        sel: PositionSelection,
        label: int | None,
        kind: str,
        token_ids=None,
        patch_matrix=None,
    ) -> EncodedSample:
        cfg = self.config
        pos = self.params["pos_embed"]
        pos_rows = np.concatenate(
            [np.zeros(1, dtype=np.int64), 1 + np.asarray(sel.indices)]
        )
        vectors = np.empty((content.shape[0] + 1, cfg.embed_dim), dtype=cfg.dtype)
        vectors[0] = self.params["cls_token"] + pos[0]
        vectors[1:] = content + pos[pos_rows[1:]]
        mask = np.ones(vectors.shape[0], dtype=bool)
        return EncodedSample(
            vectors=vectors,
            position_indices=sel,
            mask=mask,
            label=label,
            kind=kind,
            pos_rows=pos_rows,
            token_ids=token_ids,
            patch_matrix=patch_matrix,
        )

    def embed_text(
        self, token_ids: Sequence[int], sel: PositionSelection, label: int | None = None
    ) -> EncodedSample:
        """Look up word embeddings and add the selected position rows."""
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size != sel.compressed.total:
            raise ShapeError(
                f"{ids.size} token ids do not match selection of {sel.compressed.total}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        content = self.params["token_embed"][ids]
        return self._assemble(content, sel, label, "text", token_ids=ids)

    def _patchify_2d(self, array: np.ndarray) -> np.ndarray:
        p = self.config.patch_size
        h, w = array.shape[:2]
        if h % p or w % p:
            raise ShapeError(f"dims ({h}, {w}) not divisible by patch size {p}")
        if array.ndim == 2:
            array = array[:, :, None]
        gh, gw = h // p, w // p
        patches = (
            array.reshape(gh, p, gw, p, -1).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)
        )
        if patches.shape[1] != self.config.patch_dim:
            raise ShapeError(
                f"patch dim {patches.shape[1]} does not match config {self.config.patch_dim}"
            )
        return patches

    def embed_patches(
        self, array: np.ndarray, sel: PositionSelection, label: int | None = None
    ) -> EncodedSample:
        """Project non-overlapping patches of a 2-D input (image/spectrogram)."""
        patches = self._patchify_2d(np.asarray(array, dtype=self.config.dtype))
        if patches.shape[0] != sel.compressed.total:
            raise ShapeError(
                f"{patches.shape[0]} patches do not match selection of {sel.compressed.total}"
            )
        content = patches @ self.params["patch_proj_w"] + self.params["patch_proj_b"]
        return self._assemble(content, sel, label, "patch", patch_matrix=patches)

    def embed_patches_3d(
        self, video: np.ndarray, sel: PositionSelection, label: int | None = None
    ) -> EncodedSample:
        """Project per-frame patches of a video, frame-major raster order."""
        video = np.asarray(video, dtype=self.config.dtype)
        if video.ndim not in (3, 4):
            raise ShapeError(f"expected (T, H, W[, C]) video, got {video.shape}")
        patches = np.concatenate([self._patchify_2d(frame) for frame in video], axis=0)
        if patches.shape[0] != sel.compressed.total:
            raise ShapeError(
                f"{patches.shape[0]} patches do not match selection of {sel.compressed.total}"
            )
        content = patches @ self.params["patch_proj_w"] + self.params["patch_proj_b"]
        return self._assemble(content, sel, label, "patch", patch_matrix=patches)

    def _selection_for(self, comp: GridDims, scheme: str) -> PositionSelection:
        cfg = self.config
        if scheme == "consistent":
            if cfg.modality == "text":
                return select_1d(cfg.max_grid.width, comp.width)
            if cfg.modality == "video":
                return select_3d(cfg.max_grid, comp)
            full2d = GridDims(1, cfg.max_grid.height, cfg.max_grid.width)
            return select_2d(full2d, comp)
        if scheme == "first_n":
            full = (
                cfg.max_grid
                if cfg.modality == "video"
                else GridDims(1, cfg.max_grid.height, cfg.max_grid.width)
            )
            return first_n_baseline(full, comp)
        raise ValueError(f"unknown position selection scheme {scheme!r}")

    def encode(self, sample: RawSample, scheme: str = "consistent") -> EncodedSample:
        """Encode a prepared (already compressed) sample for the backbone."""
        cfg = self.config
        if sample.modality != cfg.modality:
            raise ValueError(f"sample is {sample.modality}, model expects {cfg.modality}")
        if cfg.modality == "text":
            tokens = sample.payload
            if not tokens:
                raise ShapeError("cannot encode an empty token sequence")
            ids = [self.vocab_index[t.lower()] for t in tokens]
            sel = self._selection_for(GridDims(1, 1, len(ids)), scheme)
            return self.embed_text(ids, sel, label=sample.label)
        if cfg.modality == "image":
            img = np.asarray(sample.payload)
            comp = GridDims(1, img.shape[0] // cfg.patch_size, img.shape[1] // cfg.patch_size)
            return self.embed_patches(img, self._selection_for(comp, scheme), sample.label)
        if cfg.modality == "video":
            video = np.asarray(sample.payload)
            comp = GridDims(
                video.shape[0],
                video.shape[1] // cfg.patch_size,
                video.shape[2] // cfg.patch_size,
            )
            return self.embed_patches_3d(video, self._selection_for(comp, scheme), sample.label)
        # audio: payload must already be a spectrogram; trim the time axis
        # down to a whole number of patches before embedding
        spec = sample.payload
        if not isinstance(spec, Spectrogram):
            raise ShapeError("audio samples must be converted to spectrograms before encoding")
        p = cfg.patch_size
        frames = spec.n_frames - spec.n_frames % p
        if frames < p:
            raise ShapeError(f"spectrogram has only {spec.n_frames} frames; need >= {p}")
        values = spec.values[:, :frames]
        comp = GridDims(1, spec.n_banks // p, frames // p)
        return self.embed_patches(values, self._selection_for(comp, scheme), sample.label)

    # ------------------------------------------------------------------
    # backbone

    def _stack(self, samples: Sequence[EncodedSample]):
        cfg = self.config
        n_max = max(s.n_tokens for s in samples)
        x = np.zeros((len(samples), n_max, cfg.embed_dim), dtype=cfg.dtype)
        mask = np.zeros((len(samples), n_max), dtype=bool)
        for i, s in enumerate(samples):
            x[i, : s.n_tokens] = s.vectors
            mask[i, : s.n_tokens] = s.mask
        return x, mask

    def _forward_core(
        self,
        x: np.ndarray,
        mask: np.ndarray,
        rng: np.random.Generator | None,
        counter: FlopCounter | None,
        need_cache: bool,
    ):
        cfg = self.config
        p = self.params
        bsz, n, d = x.shape
        heads, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        drop = cfg.dropout if rng is not None and cfg.dropout > 0.0 else 0.0
        bias = np.where(mask, 0.0, MASK_BIAS).astype(cfg.dtype)[:, None, None, :]
        caches = [] if need_cache else None

        def dropout_mask(shape):
            if drop == 0.0:
                return None
            keep = (rng.random(shape) >= drop).astype(cfg.dtype)
            return keep / (1.0 - drop)

        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            h1, ln1_cache = _layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (h1 @ p[pre + "attn_wq"] + p[pre + "attn_bq"]).reshape(bsz, n, heads, dh)
            k = (h1 @ p[pre + "attn_wk"] + p[pre + "attn_bk"]).reshape(bsz, n, heads, dh)
            v = (h1 @ p[pre + "attn_wv"] + p[pre + "attn_bv"]).reshape(bsz, n, heads, dh)
            q = q.transpose(0, 2, 1, 3)
            k = k.transpose(0, 2, 1, 3)
            v = v.transpose(0, 2, 1, 3)
            scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + bias
            attn = softmax(scores)
            mixed = np.matmul(attn, v)
            concat = mixed.transpose(0, 2, 1, 3).reshape(bsz, n, d)
            proj = concat @ p[pre + "attn_wo"] + p[pre + "attn_bo"]
            if counter is not None:
                counter.linear += 3 * 2 * bsz * n * d * d  # qkv projections
                counter.attention += 2 * bsz * heads * scores.shape[2] * scores.shape[3] * dh
                counter.attention += 2 * bsz * heads * attn.shape[2] * attn.shape[3] * dh
                counter.linear += 2 * bsz * n * d * d  # out projection
            m_attn = dropout_mask(proj.shape)
            if m_attn is not None:
                proj = proj * m_attn
            x_mid = x + proj

            h2, ln2_cache = _layer_norm(x_mid, p[pre + "ln2_g"], p[pre + "ln2_b"])
            z = h2 @ p[pre + "mlp_w1"] + p[pre + "mlp_b1"]
            act, tanh_cache = _gelu(z)
            mlp = act @ p[pre + "mlp_w2"] + p[pre + "mlp_b2"]
            if counter is not None:
                counter.linear += 2 * bsz * n * d * z.shape[-1]
                counter.linear += 2 * bsz * n * z.shape[-1] * d
            m_mlp = dropout_mask(mlp.shape)
            if m_mlp is not None:
                mlp = mlp * m_mlp
            x_next = x_mid + mlp

            if need_cache:
                caches.append(
                    dict(
                        x_in=x,
                        ln1=ln1_cache,
                        h1=h1,
                        q=q,
                        k=k,
                        v=v,
                        attn=attn,
                        concat=concat,
                        m_attn=m_attn,
                        x_mid=x_mid,
                        ln2=ln2_cache,
                        h2=h2,
                        z=z,
                        act=act,
                        tanh=tanh_cache,
                        m_mlp=m_mlp,
                    )
                )
            x = x_next

        xf, lnf_cache = _layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        cls_out = xf[:, 0, :]
        logits = cls_out @ p["head_w"] + p["head_b"]
        if counter is not None:
            counter.linear += 2 * bsz * d * cfg.num_classes
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits in forward pass")
        if need_cache:
            return logits, dict(layers=caches, lnf=lnf_cache, xf=xf, x_last=x, bias=bias)
        return logits, None

    def forward(
        self,
        samples: Sequence[EncodedSample],
        rng: np.random.Generator | None = None,
        counter: FlopCounter | None = None,
    ) -> np.ndarray:
        """Logits for a batch; samples are padded to a common length with masks.

        Pass rng to enable dropout (training mode); omit it for inference.
        """
        x, mask = self._stack(samples)
        logits, _ = self._forward_core(x, mask, rng, counter, need_cache=False)
        return logits

    # ------------------------------------------------------------------
    # loss and reverse-mode gradients

    def _loss_and_grads_full(
        self,
        samples: Sequence[EncodedSample],
        rng: np.random.Generator | None = None,
        counter: FlopCounter | None = None,
    ):
        cfg = self.config
        p = self.params
        labels = np.array([s.label for s in samples], dtype=np.int64)
        if any(s.label is None for s in samples):
            raise ValueError("all samples need labels for the loss")
        x0, mask = self._stack(samples)
        logits, cache = self._forward_core(x0, mask, rng, counter, need_cache=True)
        bsz, n, d = x0.shape
        heads, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)

        # mean cross-entropy via logsumexp
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + logits.max(
            axis=1, keepdims=True
        )
        nll = logz[np.arange(bsz), 0] - logits[np.arange(bsz), labels]
        loss = float(nll.mean())

        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        probs = softmax(logits)
        dlogits = probs
        dlogits[np.arange(bsz), labels] -= 1.0
        dlogits /= bsz

        grads["head_w"] += cache["xf"][:, 0, :].T @ dlogits
        grads["head_b"] += dlogits.sum(axis=0)
        dxf = np.zeros_like(cache["xf"])
        dxf[:, 0, :] = dlogits @ p["head_w"].T
        dx, dg, db = _layer_norm_bwd(dxf, p["ln_f_g"], cache["lnf"])
        grads["ln_f_g"] += dg
        grads["ln_f_b"] += db

        for i in reversed(range(cfg.n_layers)):
            pre = f"blocks.{i}."
            c = cache["layers"][i]
            # MLP branch
            dmlp = dx if c["m_mlp"] is None else dx * c["m_mlp"]
            flat_act = c["act"].reshape(-1, cfg.mlp_ratio * d)
            grads[pre + "mlp_w2"] += flat_act.T @ dmlp.reshape(-1, d)
            grads[pre + "mlp_b2"] += dmlp.sum(axis=(0, 1))
            dact = dmlp @ p[pre + "mlp_w2"].T
            dz = dact * _gelu_grad(c["z"], c["tanh"])
            grads[pre + "mlp_w1"] += c["h2"].reshape(-1, d).T @ dz.reshape(-1, cfg.mlp_ratio * d)
            grads[pre + "mlp_b1"] += dz.sum(axis=(0, 1))
            dh2 = dz @ p[pre + "mlp_w1"].T
            dx_mid, dg, db = _layer_norm_bwd(dh2, p[pre + "ln2_g"], c["ln2"])
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dx_mid = dx_mid + dx  # residual

            # attention branch
            dproj = dx_mid if c["m_attn"] is None else dx_mid * c["m_attn"]
            grads[pre + "attn_wo"] += c["concat"].reshape(-1, d).T @ dproj.reshape(-1, d)
            grads[pre + "attn_bo"] += dproj.sum(axis=(0, 1))
            dconcat = dproj @ p[pre + "attn_wo"].T
            dmixed = dconcat.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3)
            dattn = np.matmul(dmixed, c["v"].transpose(0, 1, 3, 2))
            dv = np.matmul(c["attn"].transpose(0, 1, 3, 2), dmixed)
            dscores = c["attn"] * (dattn - (dattn * c["attn"]).sum(axis=-1, keepdims=True))
            dq = np.matmul(dscores, c["k"]) * scale
            dk = np.matmul(dscores.transpose(0, 1, 3, 2), c["q"]) * scale
            dq = dq.transpose(0, 2, 1, 3).reshape(bsz, n, d)
            dk = dk.transpose(0, 2, 1, 3).reshape(bsz, n, d)
            dv = dv.transpose(0, 2, 1, 3).reshape(bsz, n, d)
            h1_flat = c["h1"].reshape(-1, d)
            grads[pre + "attn_wq"] += h1_flat.T @ dq.reshape(-1, d)
            grads[pre + "attn_bq"] += dq.sum(axis=(0, 1))
            grads[pre + "attn_wk"] += h1_flat.T @ dk.reshape(-1, d)
            grads[pre + "attn_bk"] += dk.sum(axis=(0, 1))
            grads[pre + "attn_wv"] += h1_flat.T @ dv.reshape(-1, d)
            grads[pre + "attn_bv"] += dv.sum(axis=(0, 1))
            dh1 = dq @ p[pre + "attn_wq"].T + dk @ p[pre + "attn_wk"].T + dv @ p[pre + "attn_wv"].T
            dx_in, dg, db = _layer_norm_bwd(dh1, p[pre + "ln1_g"], c["ln1"])
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dx = dx_in + dx_mid  # residual

        # into the embeddings
        rows_list = []
        pos_rows_list = []
        for i, s in enumerate(samples):
            rows = dx[i, : s.n_tokens]
            rows_list.append(rows)
            pos_rows_list.append(s.pos_rows)
            grads["cls_token"] += rows[0]
        all_rows = np.concatenate(rows_list, axis=0)
        np.add.at(grads["pos_embed"], np.concatenate(pos_rows_list), all_rows)
        if cfg.modality == "text":
            ids = np.concatenate([s.token_ids for s in samples])
            content_rows = np.concatenate([r[1:] for r in rows_list], axis=0)
            np.add.at(grads["token_embed"], ids, content_rows)
        else:
            patches = np.concatenate([s.patch_matrix for s in samples], axis=0)
            content_rows = np.concatenate([r[1:] for r in rows_list], axis=0)
            grads["patch_proj_w"] += patches.T @ content_rows
            grads["patch_proj_b"] += content_rows.sum(axis=0)

        return loss, grads, logits

    def loss_and_grads(
        self,
        samples: Sequence[EncodedSample],
        rng: np.random.Generator | None = None,
        counter: FlopCounter | None = None,
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and gradients for every parameter."""
        loss, grads, _ = self._loss_and_grads_full(samples, rng, counter)
        return loss, grads

    # ------------------------------------------------------------------
    # prediction

    def predict_proba(self, samples: Sequence[EncodedSample]) -> np.ndarray:
        return softmax(self.forward(samples))

    def predict_with_confidence(self, sample: EncodedSample) -> tuple[int, float]:
        """Predicted class and its softmax probability for one sample."""
        probs = self.predict_proba([sample])[0]
        cls = int(np.argmax(probs))
        return cls, float(probs[cls])


# ----------------------------------------------------------------------
# training


@dataclass
class OptimizerConfig:
    """Adaptive-moment estimation settings for the training loop."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    cosine_decay: bool = True


@dataclass
class TrainReport:
    """Per-epoch metrics plus per-step token counts and wall times."""

    epoch_stats: list[dict] = field(default_factory=list)
    step_tokens: list[int] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    attention_flops_measured: int = 0
    linear_flops_measured: int = 0
    attention_flops_formula: int = 0
    total_seconds: float = 0.0
    epochs: int = 0
    steps: int = 0

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean(self.step_seconds)) if self.step_seconds else 0.0

    @property
    def mean_step_tokens(self) -> float:
        return float(np.mean(self.step_tokens)) if self.step_tokens else 0.0

    def as_dict(self, include_timings: bool = True) -> dict:
        out = {
            "epochs": self.epochs,
            "steps": self.steps,
            "epoch_stats": self.epoch_stats,
            "step_tokens": self.step_tokens,
            "mean_step_tokens": self.mean_step_tokens,
            "attention_flops_measured": self.attention_flops_measured,
            "linear_flops_measured": self.linear_flops_measured,
            "attention_flops_formula": self.attention_flops_formula,
        }
        if include_timings:
            out["step_seconds"] = self.step_seconds
            out["mean_step_seconds"] = self.mean_step_seconds
            out["total_seconds"] = self.total_seconds
        return out


def augment_and_encode_batch(
    model: TransformerClassifier,
    raw: Sequence[RawSample],
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> list[EncodedSample]:
    """One training batch through its modality augmenter, then encoded.

    Sized modalities draw one compression level for the whole batch, so
    the encoded samples share dimensions; text prunes per sequence and
    relies on padding masks downstream.
    """
    modality = model.config.modality
    if modality == "image":
        prepared, _ = modulate_resolution(raw, policy, rng)
    elif modality == "video":
        prepared, _ = modulate_spatiotemporal(raw, policy, rng)
    elif modality == "audio":
        prepared, _ = modulate_spectrogram(raw, policy, rng)
    else:
        prepared = [
            RawSample(
                modality="text",
                payload=prune_insignificant_words(s.payload, policy.stopword_set, rng),
                label=s.label,
            )
            for s in raw
        ]
    return [model.encode(s) for s in prepared]


def train(
    model: TransformerClassifier,
    dataset,
    policy: AugmentationPolicy,
    optimizer: OptimizerConfig,
    epochs: int,
    seed: int,
) -> TrainReport:
    """Train in place: augment each batch, encode, step the optimizer.

    A policy whose lists hold only the full size reduces to plain
    training. Learning rate follows cosine decay over the total step
    count. Raises NumericError with a diagnostic if the loss diverges.
    """
    samples = list(getattr(dataset, "samples", dataset))
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    cfg = model.config
    rng = np.random.default_rng(seed)
    n = len(samples)
    bsz = optimizer.batch_size
    steps_per_epoch = (n + bsz - 1) // bsz
    total_steps = max(1, epochs * steps_per_epoch)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    counter = FlopCounter()
    report = TrainReport(epochs=epochs)
    step = 0
    t_run = time.perf_counter()

    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, bsz):
            idx = order[start : start + bsz]
            raw = [samples[i] for i in idx]
            t0 = time.perf_counter()
            encoded = augment_and_encode_batch(model, raw, policy, rng)
            loss, grads, logits = model._loss_and_grads_full(encoded, rng=rng, counter=counter)
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}, step {step}: {loss}")
            step += 1
            if optimizer.cosine_decay:
                lr_t = optimizer.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            else:
                lr_t = optimizer.lr
            bc1 = 1.0 - optimizer.beta1**step
            bc2 = 1.0 - optimizer.beta2**step
            for name, grad in grads.items():
                m_state[name] = optimizer.beta1 * m_state[name] + (1.0 - optimizer.beta1) * grad
                v_state[name] = optimizer.beta2 * v_state[name] + (1.0 - optimizer.beta2) * (
                    grad * grad
                )
                model.params[name] -= lr_t * (m_state[name] / bc1) / (
                    np.sqrt(v_state[name] / bc2) + optimizer.eps
                )
            dt = time.perf_counter() - t0

            n_tok = max(e.n_tokens for e in encoded)
            labels = np.array([e.label for e in encoded])
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == labels).sum())
            report.step_tokens.append(n_tok)
            report.step_seconds.append(dt)
            report.attention_flops_formula += len(encoded) * attention_flops(cfg, n_tok)
        report.epoch_stats.append(
            {"loss": float(np.mean(losses)), "accuracy": correct / n}
        )
    report.steps = step
    report.total_seconds = time.perf_counter() - t_run
    report.attention_flops_measured = counter.attention
    report.linear_flops_measured = counter.linear
    model.adam_state = {"m": m_state, "v": v_state, "step": step}
    return report


def evaluate_accuracy(
    model: TransformerClassifier,
    dataset,
    level: CompressionLevel | None = None,
    scheme: str = "consistent",
    stft_params: StftParams | None = None,
    batch_size: int = 64,
) -> float:
    """Accuracy over a dataset, optionally compressed to one level first.

    Audio datasets must be given a level (waveforms need a spectrogram
    conversion before encoding).
    """
    samples = list(getattr(dataset, "samples", dataset))
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        prepared = (
            chunk if level is None else [compress_sample(s, level, stft_params) for s in chunk]
        )
        encoded = [model.encode(s, scheme) for s in prepared]
        logits = model.forward(encoded)
        labels = np.array([s.label for s in chunk])
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(samples)
