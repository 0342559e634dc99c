"""Difference-preserved tokenization.

Localizes the regions where a target image differs from an in-series
reference (per-cell RGB SSIM against a percentile threshold), keeps those
cells at native patch resolution, downscales the rest, and enforces a token
budget by seeded random dropping. Also provides the bilinear lattice
interpolation used for position embeddings at arbitrary normalized
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import ImageBuf, ImagingError, resize_bilinear, ssim_rgb
from .ndiff import Tape, Tensor, constant

__all__ = [
    "DiffTokenConfig",
    "SimilarityMap",
    "Token",
    "TokenSeq",
    "DiffTokenError",
    "align_reference",
    "similarity_map",
    "select_decisive",
    "tokenize_diff",
    "tokenize_plain",
    "interp_pos_embed",
    "lattice_weights",
    "percentile",
]


class DiffTokenError(Exception):
    pass


@dataclass(frozen=True)
class DiffTokenConfig:
    base_patch: int = 16
    loc_patch: int = 32
    percentile_p: float = 0.5
    token_budget: int = 196
    max_side: int | None = 512
    seed: int = 0
    percentile_method: str = "linear"  # or "nearest"

    def __post_init__(self):
        if self.loc_patch % self.base_patch != 0 or self.loc_patch // self.base_patch not in (2, 4):
            raise DiffTokenError(
                f"loc_patch/base_patch must be 2 or 4, got {self.loc_patch}/{self.base_patch}"
            )
        if not 0.0 < self.percentile_p < 1.0:
            raise DiffTokenError(f"percentile_p must be in (0, 1), got {self.percentile_p}")
        if self.token_budget < 1:
            raise DiffTokenError(f"token_budget must be >= 1, got {self.token_budget}")
        if self.percentile_method not in ("linear", "nearest"):
            raise DiffTokenError(f"unknown percentile method {self.percentile_method!r}")


@dataclass(frozen=True)
class SimilarityMap:
    rows: int
    cols: int
    s: np.ndarray  # (rows, cols) per-cell similarity
    tau: float


@dataclass(frozen=True)
class Token:
    pixels: np.ndarray  # (base_patch, base_patch, 3)
    u: float
    v: float
    scale: str  # "fine" | "coarse"


@dataclass(frozen=True)
class TokenSeq:
    tokens: list[Token]
    source_dims: tuple[int, int]  # (W, H) after any max_side cap
    grid: tuple[int, int]  # (rows, cols)
    tau: float
    dropped_coarse: int = 0
    dropped_fine: int = 0

    def __len__(self):
        return len(self.tokens)


def percentile(values, p: float, method: str = "linear") -> float:
    """Percentile of a flat collection; linear interpolation or nearest rank."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DiffTokenError("percentile of empty collection")
    if method == "linear":
        h = (v.size - 1) * p
        lo = int(math.floor(h))
        hi = min(lo + 1, v.size - 1)
        return float(v[lo] + (h - lo) * (v[hi] - v[lo]))
    rank = min(v.size - 1, max(0, int(math.ceil(p * v.size)) - 1))
    return float(v[rank])


def _cap_max_side(img: ImageBuf, max_side: int | None) -> ImageBuf:
    if max_side is None or max(img.width, img.height) <= max_side:
        return img
    scale = max_side / max(img.width, img.height)
    w = max(1, int(math.floor(img.width * scale + 0.5)))
    h = max(1, int(math.floor(img.height * scale + 0.5)))
    return resize_bilinear(img, w, h)


def _pad_or_crop_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    cur = arr.shape[axis]
    if cur == target:
        return arr
    if cur > target:
        off = (cur - target) // 2
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(off, off + target)
        return arr[tuple(sl)]
    need = target - cur
    before = need // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (before, need - before)
    return np.pad(arr, pad, mode="edge")


def align_reference(x: ImageBuf, y: ImageBuf) -> ImageBuf:
    """Scale y so its longer edge matches x's (aspect preserved), then
    center-crop / edge-replicate to exactly x's dimensions."""
    if (y.width, y.height) == (x.width, x.height):
        return ImageBuf(y.pixels.copy())
    x_long = max(x.width, x.height)
    y_long = max(y.width, y.height)
    scale = x_long / y_long
    new_w = max(1, int(math.floor(y.width * scale + 0.5)))
    new_h = max(1, int(math.floor(y.height * scale + 0.5)))
    scaled = resize_bilinear(y, new_w, new_h)
    px = _pad_or_crop_axis(scaled.pixels, 0, x.height)
    px = _pad_or_crop_axis(px, 1, x.width)
    return ImageBuf(px)


def _cell_grid(w: int, h: int, loc: int) -> tuple[int, int]:
    return math.ceil(h / loc), math.ceil(w / loc)


def _padded_cell(px: np.ndarray, i: int, j: int, loc: int) -> np.ndarray:
    h, w = px.shape[:2]
    y0, x0 = i * loc, j * loc
    cell = px[y0:min(y0 + loc, h), x0:min(x0 + loc, w)]
    if cell.shape[0] != loc or cell.shape[1] != loc:
        cell = np.pad(
            cell,
            ((0, loc - cell.shape[0]), (0, loc - cell.shape[1]), (0, 0)),
            mode="edge",
        )
    return cell


def similarity_map(x: ImageBuf, y_aligned: ImageBuf, cfg: DiffTokenConfig) -> SimilarityMap:
    """Per-cell SSIM between co-located localization patches, plus threshold."""
    if (y_aligned.width, y_aligned.height) != (x.width, x.height):
        raise DiffTokenError(
            f"reference not aligned: {y_aligned.width}x{y_aligned.height} "
            f"vs {x.width}x{x.height}"
        )
    if x.width < cfg.loc_patch or x.height < cfg.loc_patch:
        raise DiffTokenError(
            f"image {x.width}x{x.height} smaller than one {cfg.loc_patch}px cell"
        )
    rows, cols = _cell_grid(x.width, x.height, cfg.loc_patch)
    s = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            s[i, j] = ssim_rgb(
                _padded_cell(x.pixels, i, j, cfg.loc_patch),
                _padded_cell(y_aligned.pixels, i, j, cfg.loc_patch),
            )
    tau = percentile(s, cfg.percentile_p, cfg.percentile_method)
    return SimilarityMap(rows, cols, s, tau)


def select_decisive(smap: SimilarityMap) -> set[tuple[int, int]]:
    """Cells strictly below the percentile threshold."""
    return {
        (i, j)
        for i in range(smap.rows)
        for j in range(smap.cols)
        if smap.s[i, j] < smap.tau
    }


def _assemble(
    x: ImageBuf,
    decisive: set[tuple[int, int]],
    grid: tuple[int, int],
    tau: float,
    cfg: DiffTokenConfig,
) -> TokenSeq:
    """Row-major token emission + budget enforcement by seeded dropping.

    Fine tokens copy original pixels; sub-patches that would extend past the
    image edge are skipped so fine pixels stay bit-exact. Coarse cells are
    edge-padded to a full cell, then downscaled to one base patch.
    """
    rows, cols = grid
    w, h = x.width, x.height
    loc, base = cfg.loc_patch, cfg.base_patch
    per_side = loc // base
    tokens: list[Token] = []
    for i in range(rows):
        for j in range(cols):
            y0, x0 = i * loc, j * loc
            if (i, j) in decisive:
                for ii in range(per_side):
                    for jj in range(per_side):
                        py, px_ = y0 + ii * base, x0 + jj * base
                        if py + base > h or px_ + base > w:
                            continue
                        tokens.append(Token(
                            pixels=x.pixels[py:py + base, px_:px_ + base].copy(),
                            u=(px_ + base / 2) / w,
                            v=(py + base / 2) / h,
                            scale="fine",
                        ))
            else:
                cell = _padded_cell(x.pixels, i, j, loc)
                down = resize_bilinear(ImageBuf(cell), base, base)
                cx = (x0 + min(x0 + loc, w)) / 2
                cy = (y0 + min(y0 + loc, h)) / 2
                tokens.append(Token(pixels=down.pixels, u=cx / w, v=cy / h, scale="coarse"))

    tokens.sort(key=lambda t: (t.v, t.u))  # row-major by position
    dropped_coarse = dropped_fine = 0
    if len(tokens) > cfg.token_budget:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, w, h]))
        n_drop = len(tokens) - cfg.token_budget
        coarse_idx = [k for k, t in enumerate(tokens) if t.scale == "coarse"]
        fine_idx = [k for k, t in enumerate(tokens) if t.scale == "fine"]
        dropped_coarse = min(n_drop, len(coarse_idx))
        drop = set(rng.choice(coarse_idx, size=dropped_coarse, replace=False).tolist())
        if n_drop > dropped_coarse:
            dropped_fine = n_drop - dropped_coarse
            drop |= set(rng.choice(fine_idx, size=dropped_fine, replace=False).tolist())
        tokens = [t for k, t in enumerate(tokens) if k not in drop]
    return TokenSeq(
        tokens=tokens,
        source_dims=(w, h),
        grid=grid,
        tau=tau,
        dropped_coarse=dropped_coarse,
        dropped_fine=dropped_fine,
    )


def tokenize_diff(x: ImageBuf, y_ref: ImageBuf, cfg: DiffTokenConfig) -> TokenSeq:
    """Mixed-resolution tokens for x, difference-localized against y_ref."""
    x = _cap_max_side(x, cfg.max_side)
    y_aligned = align_reference(x, y_ref)
    smap = similarity_map(x, y_aligned, cfg)
    decisive = select_decisive(smap)
    return _assemble(x, decisive, (smap.rows, smap.cols), smap.tau, cfg)


def tokenize_plain(x: ImageBuf, cfg: DiffTokenConfig) -> TokenSeq:
    """Reference-free mode: every cell becomes one coarse token."""
    x = _cap_max_side(x, cfg.max_side)
    if x.width < cfg.loc_patch or x.height < cfg.loc_patch:
        raise DiffTokenError(
            f"image {x.width}x{x.height} smaller than one {cfg.loc_patch}px cell"
        )
    rows, cols = _cell_grid(x.width, x.height, cfg.loc_patch)
    return _assemble(x, set(), (rows, cols), float("nan"), cfg)


def lattice_weights(grid_g: int, positions) -> np.ndarray:
    """Bilinear weights over a half-pixel-centered G x G lattice.

    Returns (n, G*G); row k holds the four interpolation weights for
    normalized position k. Matmul with the flattened grid table gives the
    interpolated embeddings, keeping the path differentiable with respect
    to the table.
    """
    g = grid_g
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if pos.size and (pos.min() < 0.0 or pos.max() > 1.0):
        raise DiffTokenError("positions must lie in [0, 1]^2")
    out = np.zeros((pos.shape[0], g * g))
    for k, (u, v) in enumerate(pos):
        def split(t):
            x = np.clip(t * g - 0.5, 0.0, g - 1.0)
            i0 = min(int(math.floor(x)), g - 1 if g == 1 else g - 2)
            return i0, x - i0
        j0, fu = split(u)
        i0, fv = split(v)
        j1 = min(j0 + 1, g - 1)
        i1 = min(i0 + 1, g - 1)
        out[k, i0 * g + j0] += (1 - fv) * (1 - fu)
        out[k, i0 * g + j1] += (1 - fv) * fu
        out[k, i1 * g + j0] += fv * (1 - fu)
        out[k, i1 * g + j1] += fv * fu
    return out


def interp_pos_embed(tape: Tape, grid_table: Tensor, pos: tuple[float, float]) -> Tensor:
    """Interpolate one position embedding from a (G, G, d) table."""
    g1, g2, d = grid_table.shape
    if g1 != g2:
        raise DiffTokenError(f"grid table must be square, got {grid_table.shape}")
    w = lattice_weights(g1, [pos])
    flat = tape.reshape(grid_table, (g1 * g1, d))
    return tape.reshape(tape.matmul(constant(w), flat), (d,))
