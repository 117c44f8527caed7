"""View generation over token bags: splitting, cropping, masking.

All transformations act on row indices of a bag; embeddings are never copied
until a view is materialized.  Splitting partitions a bag into two disjoint
index sets, cropping keeps the tokens inside a randomly placed rectangle in
grid-coordinate space, and masking keeps a random subset capped by a token
limit.  The composed pipeline runs split -> crop -> mask: splitting first so
that disjointness survives the shrinking steps, with crop and mask drawn
independently per view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bagstore import SlideBag
from .rng import RandomSource

__all__ = [
    "TokenView",
    "TransformConfig",
    "TransformError",
    "full_view",
    "split",
    "crop",
    "crop_bounds",
    "mask",
    "make_view_pair",
]


class TransformError(ValueError):
    """Raised when a transformation precondition is violated."""


@dataclass
class TokenView:
    """An index-selected subset of a source bag.

    ``indices`` are distinct row indices into the source bag, kept in
    ascending (source) order by every transformation.
    """

    bag: SlideBag
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def source_id(self) -> str:
        return self.bag.slide_id

    @property
    def embeddings(self) -> np.ndarray:
        return self.bag.embeddings[self.indices]

    @property
    def coords(self) -> np.ndarray:
        return self.bag.coords[self.indices]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class TransformConfig:
    """Hyperparameters of the view pipeline.

    ``crop_area_range`` is in grid cells squared (absolute units, not a
    fraction of the slide).  ``max_token_limit`` of None means unbounded.
    """

    use_split: bool = False
    split_ratio: float = 0.5
    use_crop: bool = True
    crop_area_range: tuple[float, float] = (16.0, 100.0)
    crop_aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    use_mask: bool = True
    mask_ratio_range: tuple[float, float] = (0.3, 0.8)
    max_token_limit: int | None = 64

    def validate(self) -> None:
        if not 0.0 < self.split_ratio < 1.0:
            raise TransformError("split_ratio must lie in (0, 1)")
        for name, rng_ in (("crop_area_range", self.crop_area_range),
                           ("crop_aspect_range", self.crop_aspect_range),
                           ("mask_ratio_range", self.mask_ratio_range)):
            lo, hi = rng_
            if not lo <= hi:
                raise TransformError(f"{name} must satisfy min <= max, got {rng_}")
        if self.crop_area_range[0] < 0 or self.crop_aspect_range[0] <= 0:
            raise TransformError("crop area must be nonnegative and aspect positive")
        if not 0.0 < self.mask_ratio_range[0] <= self.mask_ratio_range[1] <= 1.0:
            raise TransformError("mask_ratio_range must lie in (0, 1]")
        if self.max_token_limit is not None and self.max_token_limit < 1:
            raise TransformError("max_token_limit must be >= 1 (or None for unbounded)")


def full_view(bag: SlideBag) -> TokenView:
    return TokenView(bag, np.arange(bag.n, dtype=np.int64))


def split(view: TokenView, ratio: float, rng: RandomSource) -> tuple[TokenView, TokenView]:
    """Uniform random partition into disjoint views of sizes (k, n - k).

    k = clamp(floor(n * ratio), 1, n - 1), so both sides are nonempty.
    """
    n = len(view)
    if n < 2:
        raise TransformError(f"cannot split a view of {n} token(s) into two nonempty views")
    if not 0.0 < ratio < 1.0:
        raise TransformError(f"split ratio must lie in (0, 1), got {ratio}")
    k = min(max(int(math.floor(n * ratio)), 1), n - 1)
    perm = rng.permutation(n)
    first = np.sort(perm[:k])
    second = np.sort(perm[k:])
    return TokenView(view.bag, view.indices[first]), TokenView(view.bag, view.indices[second])


def crop_bounds(area: float, aspect: float, anchor: np.ndarray) -> tuple[float, float, float, float]:
    """Closed crop interval (r0, r1, c0, c1) around an anchor coordinate.

    Height H = sqrt(area / aspect), width W = H * aspect; the rectangle is
    centered on the anchor, so the anchor always survives the crop.
    """
    height = math.sqrt(area / aspect)
    width = height * aspect
    r_a, c_a = float(anchor[0]), float(anchor[1])
    return r_a - height / 2, r_a + height / 2, c_a - width / 2, c_a + width / 2


def crop(view: TokenView, area_range, aspect_range, rng: RandomSource) -> TokenView:
    """Keep tokens inside a random rectangle anchored on a random token."""
    if len(view) == 0:
        raise TransformError("cannot crop an empty view")
    area = float(rng.uniform(*area_range))
    aspect = float(rng.uniform(*aspect_range))
    anchor = view.coords[int(rng.integers(len(view)))]
    r0, r1, c0, c1 = crop_bounds(area, aspect, anchor)
    coords = view.coords
    keep = (coords[:, 0] >= r0) & (coords[:, 0] <= r1) & (coords[:, 1] >= c0) & (coords[:, 1] <= c1)
    return TokenView(view.bag, view.indices[keep])


def mask(view: TokenView, ratio_range, max_token_limit: int | None,
         rng: RandomSource) -> TokenView:
    """Keep a uniform random subset of max(1, round(n * ratio)) tokens.

    The subset size is capped by ``max_token_limit``; relative index order is
    preserved.
    """
    n = len(view)
    if n == 0:
        raise TransformError("cannot mask an empty view")
    ratio = float(rng.uniform(*ratio_range))
    m = max(1, int(math.floor(n * ratio + 0.5)))  # round half up
    if max_token_limit is not None:
        m = min(m, max_token_limit)
    sel = rng.subset(n, m)
    return TokenView(view.bag, view.indices[sel])


def make_view_pair(bag: SlideBag, cfg: TransformConfig, rng: RandomSource) -> tuple[TokenView, TokenView]:
    """Generate a positive pair of views from one bag.

    Pipeline order is split -> crop -> mask; crop and mask use independent
    draws per view (child streams), so a fixed (bag, cfg, seed) triple always
    produces the identical pair.
    """
    cfg.validate()
    base = full_view(bag)
    if cfg.use_split:
        first, second = split(base, cfg.split_ratio, rng.child("split"))
    else:
        first, second = base, base
    out = []
    for i, view in enumerate((first, second)):
        if cfg.use_crop:
            view = crop(view, cfg.crop_area_range, cfg.crop_aspect_range, rng.child("crop", i))
        if cfg.use_mask:
            view = mask(view, cfg.mask_ratio_range, cfg.max_token_limit, rng.child("mask", i))
        out.append(view)
    return out[0], out[1]
