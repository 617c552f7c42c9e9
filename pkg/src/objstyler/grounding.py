"""Text-driven region grounding: patch selection, grid voting, and masks.

Given only a source text, the object region is located in two stages:

1. :func:`select_text_matched_patches` — two-stage cosine filtering of a
   candidate patch set. Patches are first ranked against the text embedding;
   the mean feature of the top-M seed set then re-ranks every candidate, and
   a candidate survives if it reaches the median rank AND clears a hard
   similarity floor (default 0.8).
2. :func:`build_voted_foreground` — a multi-scale grid of candidate patches
   (three sizes centered on each cell of a square grid) is filtered by the
   selector; every surviving patch votes over its rectangle, and pixels with
   at least ``vote_threshold`` votes form the foreground mask.

Per-iteration foreground/background masks used by the background
preservation loss come from :func:`patch_union_masks`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .backends import EmbeddingBackend, cosine_similarity
from .errors import ConfigurationError, DegenerateInputError, ShapeError

MIN_PATCH_SIZE = 8


@dataclass(frozen=True)
class Patch:
    """A square crop plus its rectangle in source-image pixel coordinates."""

    top: int
    left: int
    size: int
    pixels: torch.Tensor

    def __post_init__(self):
        if self.size < MIN_PATCH_SIZE:
            raise ShapeError(f"patch size {self.size} below minimum {MIN_PATCH_SIZE}")
        if self.pixels.shape[0] != self.size or self.pixels.shape[1] != self.size:
            raise ShapeError(
                f"pixels {tuple(self.pixels.shape)} do not match declared size {self.size}"
            )

    @property
    def rect(self) -> tuple[int, int, int]:
        return (self.top, self.left, self.size)


@dataclass(frozen=True)
class PatchSelection:
    """Selector output: ascending candidate indices with their similarities."""

    indices: tuple[int, ...]
    patches: tuple[Patch, ...]
    similarities: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class BinaryMask:
    """H x W tensor with values in {0, 1}."""

    values: torch.Tensor

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {tuple(v.shape)}")
        uniq = torch.unique(v)
        if not bool(((uniq == 0) | (uniq == 1)).all()):
            raise ShapeError("mask values must be exactly {0, 1}")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))

    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class VotingMatrix:
    counts: torch.Tensor


@dataclass(frozen=True)
class TextMatchParams:
    """Knobs of the two-stage text-matched selector.

    ``seed_count`` is the top-M seed size; ``None`` means the adaptive rule
    ``min(K, max(5, round(0.1 * K)))``. ``hard_floor`` is the similarity a
    candidate must exceed against the seed mean regardless of rank.
    """

    seed_count: int | None = None
    hard_floor: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.hard_floor < 1.0):
            raise ConfigurationError("hard_floor must lie in (0, 1)")
        if self.seed_count is not None and self.seed_count < 1:
            raise ConfigurationError("seed_count must be >= 1")

    def resolve_seed_count(self, n_candidates: int) -> int:
        if self.seed_count is None:
            return min(n_candidates, max(5, _round_half_up(0.1 * n_candidates)))
        if self.seed_count > n_candidates:
            raise ConfigurationError(
                f"seed_count {self.seed_count} exceeds candidate count {n_candidates}"
            )
        return self.seed_count


@dataclass(frozen=True)
class GridVoteParams:
    """Grid-voting parameters: grid side, the three patch sizes, vote threshold.

    ``patch_sizes`` are calibrated for 512 px inputs and rescaled
    proportionally by :meth:`sizes_for_resolution`.
    """

    grid_side: int = 9
    patch_sizes: tuple[int, int, int] = (64, 96, 128)
    vote_threshold: int = 2
    reference_resolution: int = 512

    def __post_init__(self):
        if self.grid_side < 1:
            raise ConfigurationError("grid_side must be >= 1")
        if self.vote_threshold < 1:
            raise ConfigurationError("vote_threshold must be >= 1")
        if len(set(self.patch_sizes)) != 3:
            raise ConfigurationError("patch_sizes must be three distinct sizes")

    def sizes_for_resolution(self, h: int, w: int) -> tuple[int, int, int]:
        scale = min(h, w) / self.reference_resolution
        sizes = []
        for s in sorted(self.patch_sizes):
            scaled = max(MIN_PATCH_SIZE, _round_half_up(s * scale))
            while scaled in sizes:
                scaled += 2
            sizes.append(scaled)
        if sizes[-1] > min(h, w):
            raise ConfigurationError(
                f"largest scaled patch size {sizes[-1]} exceeds image side {min(h, w)}"
            )
        return tuple(sizes)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_at(img: torch.Tensor, rect: tuple[int, int, int]) -> Patch:
    """Exact pixel crop; the slice shares storage so gradients pass through."""
    top, left, size = rect
    h, w = img.shape[0], img.shape[1]
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ShapeError(f"rect {rect} out of bounds for {h}x{w} image")
    return Patch(top=top, left=left, size=size, pixels=img[top : top + size, left : left + size, :])


def select_text_matched_patches(
    candidates: list[Patch],
    source_text: str,
    backend: EmbeddingBackend,
    params: TextMatchParams = TextMatchParams(),
) -> PatchSelection:
    """Two-stage selection of the candidates that belong to the named object.

    Stage 1 ranks candidates by cosine against the text embedding and averages
    the features of the top-M seeds. Stage 2 re-ranks every candidate against
    that seed mean; a candidate is kept if its similarity reaches the
    round(K/2)-th largest value and exceeds ``hard_floor``. Rank ties break
    toward the lower candidate index, round() is half-up.
    """
    n = len(candidates)
    if n == 0:
        raise DegenerateInputError("no candidate patches")
    seed_count = params.resolve_seed_count(n)

    features = [backend.embed_image(p.pixels) for p in candidates]
    if all(float(torch.linalg.vector_norm(f.values)) < 1e-12 for f in features):
        raise DegenerateInputError("all candidate embeddings are zero")
    text_emb = backend.embed_text(source_text)

    text_sims = [float(cosine_similarity(f, text_emb)) for f in features]
    seed_order = sorted(range(n), key=lambda i: (-text_sims[i], i))
    seed_idx = seed_order[:seed_count]
    seed_mean = Embedding_mean([features[i] for i in seed_idx])

    seed_sims = [float(cosine_similarity(f, seed_mean)) for f in features]
    rank = _round_half_up(n / 2)
    threshold = sorted(seed_sims, reverse=True)[rank - 1]

    kept = [j for j in range(n) if seed_sims[j] >= threshold and seed_sims[j] > params.hard_floor]
    return PatchSelection(
        indices=tuple(kept),
        patches=tuple(candidates[j] for j in kept),
        similarities=tuple(seed_sims[j] for j in kept),
    )


def Embedding_mean(features):
    from .backends import Embedding

    stacked = torch.stack([f.values for f in features], dim=0)
    return Embedding(stacked.mean(dim=0))


def grid_candidate_patches(img: torch.Tensor, params: GridVoteParams) -> list[Patch]:
    """3 * grid_side^2 candidates: three sizes centered per grid cell.

    Rectangles that would cross the border are shifted inward so every
    candidate stays a full square inside the image.
    """
    h, w = int(img.shape[0]), int(img.shape[1])
    sizes = params.sizes_for_resolution(h, w)
    g = params.grid_side
    patches = []
    for row in range(g):
        for col in range(g):
            cy = (row + 0.5) * h / g
            cx = (col + 0.5) * w / g
            for size in sizes:
                top = min(max(_round_half_up(cy - size / 2), 0), h - size)
                left = min(max(_round_half_up(cx - size / 2), 0), w - size)
                patches.append(crop_at(img, (top, left, size)))
    return patches


def build_voted_foreground(
    img: torch.Tensor,
    source_text: str,
    backend: EmbeddingBackend,
    params: GridVoteParams = GridVoteParams(),
    text_match: TextMatchParams = TextMatchParams(),
) -> tuple[BinaryMask, VotingMatrix]:
    """Coarse foreground mask from multi-scale grid voting.

    Every selected candidate increments the vote count over its rectangle;
    the mask is 1 where votes reach ``vote_threshold``. An empty selection
    yields an all-zero mask (callers decide whether that is fatal).
    """
    h, w = int(img.shape[0]), int(img.shape[1])
    candidates = grid_candidate_patches(img, params)
    selection = select_text_matched_patches(candidates, source_text, backend, text_match)
    votes = torch.zeros((h, w), dtype=torch.int32)
    for p in selection.patches:
        votes[p.top : p.top + p.size, p.left : p.left + p.size] += 1
    mask = (votes >= params.vote_threshold).to(torch.uint8)
    return BinaryMask(mask), VotingMatrix(votes)


def foreground_cell_ratio(mask: BinaryMask, grid_side: int) -> float:
    """Fraction of grid cells whose center pixel lies in the foreground."""
    h, w = mask.shape
    hits = 0
    for row in range(grid_side):
        for col in range(grid_side):
            cy = min(int((row + 0.5) * h / grid_side), h - 1)
            cx = min(int((col + 0.5) * w / grid_side), w - 1)
            hits += int(mask.values[cy, cx])
    return hits / (grid_side * grid_side)


def sample_foreground_patches(
    img: torch.Tensor,
    fg: BinaryMask,
    n: int,
    size: int,
    rng_seed: int,
) -> list[Patch]:
    """n random patches whose centers lie on foreground pixels; seeded."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    h, w = int(img.shape[0]), int(img.shape[1])
    if fg.shape != (h, w):
        raise ShapeError(f"mask {fg.shape} does not match image {h}x{w}")
    if size > min(h, w):
        raise ConfigurationError(f"patch size {size} exceeds image side {min(h, w)}")
    coords = torch.nonzero(fg.values, as_tuple=False)
    if coords.shape[0] == 0:
        raise DegenerateInputError("foreground mask is all zeros")
    gen = torch.Generator().manual_seed(rng_seed)
    picks = torch.randint(0, coords.shape[0], (n,), generator=gen)
    patches = []
    for k in range(n):
        cy, cx = int(coords[picks[k], 0]), int(coords[picks[k], 1])
        top = min(max(cy - size // 2, 0), h - size)
        left = min(max(cx - size // 2, 0), w - size)
        patches.append(crop_at(img, (top, left, size)))
    return patches


def patch_union_masks(
    selected_src_patches: list[Patch], height: int, width: int
) -> tuple[BinaryMask, BinaryMask]:
    """Per-iteration masks: union of the selected rectangles, and its complement."""
    fg = torch.zeros((height, width), dtype=torch.uint8)
    for p in selected_src_patches:
        if p.top < 0 or p.left < 0 or p.top + p.size > height or p.left + p.size > width:
            raise ShapeError(f"rect {p.rect} out of bounds for {height}x{width}")
        fg[p.top : p.top + p.size, p.left : p.left + p.size] = 1
    bg = 1 - fg
    return BinaryMask(fg), BinaryMask(bg)
