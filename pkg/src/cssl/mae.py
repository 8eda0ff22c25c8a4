"""A small masked autoencoder built on :mod:`cssl.tensor`.

Images are cut into V x V patches, a fraction ``r`` of them is hidden, the
visible ones go through the tokenizer and encoder, and the decoder predicts
the hidden patches from the encoder features plus a learned mask token at
each hidden position.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .serialization import load_checkpoint, save_checkpoint
from .tensor import DimensionError, Tensor


class MaskError(ValueError):
    pass


@dataclass
class PatchGrid:
    patches: np.ndarray  # (n, V*V*C)
    grid: tuple[int, int]
    patch: int
    channels: int

    @property
    def n(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskSpec:
    masked_idx: np.ndarray
    visible_idx: np.ndarray
    rate: float

    @property
    def m(self) -> int:
        return len(self.masked_idx)


def _divisors(k: int) -> list[int]:
    return [d for d in range(1, k + 1) if k % d == 0]


def patchify(image: np.ndarray, patch: int) -> PatchGrid:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % patch or w % patch:
        valid = sorted(set(_divisors(h)) & set(_divisors(w)))
        raise DimensionError(f"patchify: {h}x{w} image is not divisible by patch side {patch}; valid sides: {valid}")
    hp, wp = h // patch, w // patch
    blocks = img.reshape(hp, patch, wp, patch, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(blocks.reshape(hp * wp, patch * patch * c), (hp, wp), patch, c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    hp, wp = grid.grid
    v, c = grid.patch, grid.channels
    blocks = grid.patches.reshape(hp, wp, v, v, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(hp * v, wp * v, c)


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) images to (B, n, V*V*C) patch rows."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        patchify(images[0], patch)  # raises with the helpful message
    hp, wp = h // patch, w // patch
    blocks = images.reshape(b, hp, patch, wp, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(blocks.reshape(b, hp * wp, patch * patch * c))


def mask_count(n: int, rate: float) -> int:
    # tolerance keeps e.g. 100 * 0.29 from flooring to 28
    return int(math.floor(n * rate + 1e-9))


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_mask(n: int, rate: float, rng) -> MaskSpec:
    if n < 1:
        raise MaskError(f"sample_mask: need at least one patch, got n={n}")
    if not 0.0 <= rate <= 1.0:
        raise MaskError(f"sample_mask: rate must lie in [0, 1], got {rate}")
    m = mask_count(n, rate)
    if m >= n:
        raise MaskError(f"sample_mask: rate {rate} masks all {n} patches; the encoder needs a visible token")
    perm = _rng(rng).permutation(n)
    return MaskSpec(np.sort(perm[:m]), np.sort(perm[m:]), rate)


def sample_masks(batch: int, n: int, rate: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Independent masks for a batch: (B, m) masked and (B, n-m) visible indices."""
    rng = _rng(rng)
    specs = [sample_mask(n, rate, rng) for _ in range(batch)]
    m = mask_count(n, rate)
    masked = np.array([s.masked_idx for s in specs], dtype=np.intp).reshape(batch, m)
    visible = np.array([s.visible_idx for s in specs], dtype=np.intp).reshape(batch, n - m)
    return masked, visible


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(np.float32)


@dataclass(frozen=True)
class MaeConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    patch: int = 4
    embed_dim: int = 64
    depth: int = 2
    decoder_depth: int = 1
    mlp_hidden: int = 128
    init_seed: int = 0

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise DimensionError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if min(self.channels, self.embed_dim, self.depth, self.decoder_depth, self.mlp_hidden) < 1:
            raise ValueError("model dimensions must be positive")


def _block_params(prefix: str, cfg: MaeConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    e, h = cfg.embed_dim, cfg.mlp_hidden

    def glorot(fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

    return {
        f"{prefix}.wq": glorot(e, e),
        f"{prefix}.wk": glorot(e, e),
        f"{prefix}.wv": glorot(e, e),
        f"{prefix}.wo": glorot(e, e),
        f"{prefix}.w1": glorot(e, h),
        f"{prefix}.b1": np.zeros(h),
        f"{prefix}.w2": glorot(h, e),
        f"{prefix}.b2": np.zeros(e),
    }


def init_params(cfg: MaeConfig) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    p, e = cfg.patch_dim, cfg.embed_dim
    params: dict[str, np.ndarray] = {
        "tok.w": rng.normal(0.0, math.sqrt(2.0 / (p + e)), size=(p, e)),
        "tok.b": np.zeros(e),
    }
    for i in range(cfg.depth):
        params.update(_block_params(f"enc.{i}", cfg, rng))
    params["dec.mask_token"] = rng.normal(0.0, 0.02, size=(e,))
    for i in range(cfg.decoder_depth):
        params.update(_block_params(f"dec.{i}", cfg, rng))
    params["head.w"] = rng.normal(0.0, math.sqrt(2.0 / (e + p)), size=(e, p))
    params["head.b"] = np.zeros(p)
    return {k: v.astype(np.float32) for k, v in params.items()}


class MaeModel:
    """Tokenizer, encoder and decoder parameters plus the forward pass.

    The tokenizer's positional table is shared with the decoder: hidden slots
    are the learned mask token plus the same sinusoidal encoding the tokenizer
    adds at that position.
    """

    def __init__(self, cfg: MaeConfig, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        fresh = init_params(cfg)
        raw = fresh if params is None else params
        missing = set(fresh) - set(raw)
        if missing:
            raise DimensionError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, v in fresh.items():
            if np.shape(raw[k]) != v.shape:
                raise DimensionError(f"parameter {k}: shape {np.shape(raw[k])} does not match {v.shape}")
        self.params: dict[str, Tensor] = {k: tn.parameter(np.asarray(raw[k])) for k in fresh}
        self.positions = sinusoidal_positions(cfg.n_patches, cfg.embed_dim).astype(tn.default_dtype())

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_parameter_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("tok.", "enc."))]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.state_dict(), {"model": asdict(self.cfg)})

    @classmethod
    def load(cls, path: str | Path) -> "MaeModel":
        params, meta = load_checkpoint(path)
        cfg = MaeConfig(**meta["model"])
        return cls(cfg, {k: v for k, v in params.items() if not k.startswith("cls.")})

    # -- forward -------------------------------------------------------------
    def _block(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        scale = 1.0 / math.sqrt(self.cfg.embed_dim)
        q, k, v = x @ p[f"{prefix}.wq"], x @ p[f"{prefix}.wk"], x @ p[f"{prefix}.wv"]
        attn = tn.softmax(tn.scale(q @ tn.transpose(k), scale))
        x = x + (attn @ v) @ p[f"{prefix}.wo"]
        hidden = tn.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return x + hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def tokenize(self, patches) -> Tensor:
        patches = tn.as_tensor(patches)
        if patches.shape[-1] != self.cfg.patch_dim or patches.shape[-2] != self.cfg.n_patches:
            raise DimensionError(
                f"tokenize: expected (..., {self.cfg.n_patches}, {self.cfg.patch_dim}) patches, got {patches.shape}"
            )
        return patches @ self.params["tok.w"] + self.params["tok.b"] + self.positions

    def encode(self, patches, visible_idx: np.ndarray | None = None) -> Tensor:
        """Encoder features for the visible tokens (all tokens when ``visible_idx`` is None)."""
        tokens = self.tokenize(patches)
        if visible_idx is not None:
            tokens = tn.gather(tokens, visible_idx, axis=-2)
        for i in range(self.cfg.depth):
            tokens = self._block(f"enc.{i}", tokens)
        return tokens

    def forward(self, patches, masked_idx: np.ndarray, visible_idx: np.ndarray) -> tuple[Tensor, Tensor]:
        """Batched pass: patches (B, n, P), indices (B, m) / (B, n-m).

        Returns reconstructions (B, m, P) aligned with ``masked_idx`` and the
        encoder features (B, n-m, E).
        """
        masked_idx = np.asarray(masked_idx, dtype=np.intp)
        visible_idx = np.asarray(visible_idx, dtype=np.intp)
        feats = self.encode(patches, visible_idx)
        b, m = masked_idx.shape
        if m == 0:
            return Tensor(np.zeros((b, 0, self.cfg.patch_dim))), feats
        pos = self.positions
        vis = feats + pos[visible_idx]
        hidden = tn.add(self.params["dec.mask_token"], pos[masked_idx])
        x = tn.concat([vis, hidden], axis=1)
        for i in range(self.cfg.decoder_depth):
            x = self._block(f"dec.{i}", x)
        n_vis = visible_idx.shape[1]
        x = tn.gather(x, np.arange(n_vis, n_vis + m), axis=1)
        return x @ self.params["head.w"] + self.params["head.b"], feats


def mae_forward(model: MaeModel, grid: PatchGrid, mask: MaskSpec) -> tuple[Tensor, Tensor]:
    """Single-image pass: (Y_m of shape (m, P), features of shape (n - m, E))."""
    if grid.patches.shape != (model.cfg.n_patches, model.cfg.patch_dim):
        raise DimensionError(
            f"mae_forward: grid {grid.patches.shape} does not match model "
            f"({model.cfg.n_patches}, {model.cfg.patch_dim})"
        )
    y, feats = model.forward(grid.patches[None], mask.masked_idx[None], mask.visible_idx[None])
    return tn.reshape(y, y.shape[1:]), tn.reshape(feats, feats.shape[1:])


def masked_targets(patches: np.ndarray, masked_idx: np.ndarray) -> np.ndarray:
    """Pixel targets X_m for batched patches (B, n, P) and (B, m) indices."""
    return np.take_along_axis(patches, np.asarray(masked_idx)[:, :, None], axis=1)


def loss_ssl(y_m, x_m, patch: int, channels: int) -> Tensor:
    """Squared error over the hidden patches divided by m * V^2 * C.

    Batched inputs (B, m, P) average the per-image loss over B.
    """
    y_m = tn.as_tensor(y_m)
    x_m = tn.as_tensor(x_m, dtype=y_m.dtype)
    if y_m.shape != x_m.shape:
        raise DimensionError(f"loss_ssl: shapes {y_m.shape} and {x_m.shape} differ")
    if y_m.shape[-1] != patch * patch * channels:
        raise DimensionError(f"loss_ssl: patch width {y_m.shape[-1]} != V^2*C = {patch * patch * channels}")
    m = y_m.shape[-2] if y_m.ndim >= 2 else 0
    if m == 0:
        raise MaskError("loss_ssl: no masked patches, loss is undefined")
    return tn.mean(tn.square(y_m - x_m))
