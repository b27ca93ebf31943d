"""Proximate occlusion patterns over a K x K block grid.

A pattern is either the clean pattern (index 0) or an axis-aligned rectangle
of adjacent blocks. Rectangles are ordered by (m, n, row, col) where m is the
height and n the width in blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MAX_K = 16


class PixelBox(NamedTuple):
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return max(0, self.x1 - self.x0)

    @property
    def height(self) -> int:
        return max(0, self.y1 - self.y0)

    @property
    def area(self) -> int:
        return self.width * self.height


EMPTY_BOX = PixelBox(0, 0, 0, 0)


@dataclass(frozen=True)
class Pattern:
    kind: str  # "clean" or "rect"
    row: int | None = None
    col: int | None = None
    m: int | None = None
    n: int | None = None

    @property
    def is_clean(self) -> bool:
        return self.kind == "clean"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "row": self.row, "col": self.col, "m": self.m, "n": self.n}


CLEAN = Pattern("clean")


@dataclass(frozen=True)
class PatternCodebook:
    K: int
    patterns: tuple[Pattern, ...]

    def __len__(self) -> int:
        return len(self.patterns)

    def __getitem__(self, idx: int) -> Pattern:
        return self.patterns[idx]

    def __iter__(self) -> Iterator[Pattern]:
        return iter(self.patterns)

    def index(self, pattern: Pattern) -> int:
        return self.patterns.index(pattern)

    def pixel_boxes(self, width: int, height: int) -> np.ndarray:
        """(P, 4) int array of every pattern's pixel box; row 0 is the empty box."""
        return _pixel_box_table(self, width, height)


def _check_k(K: int) -> None:
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= MAX_K:
        raise ValueError(f"K must be an integer in [1, {MAX_K}], got {K!r}")


def pattern_count(K: int) -> int:
    _check_k(K)
    return (K * (K + 1) // 2) ** 2 + 1


def enumerate_patterns(K: int) -> PatternCodebook:
    _check_k(K)
    patterns = [CLEAN]
    for m in range(1, K + 1):
        for n in range(1, K + 1):
            for row in range(K - m + 1):
                for col in range(K - n + 1):
                    patterns.append(Pattern("rect", row, col, m, n))
    return PatternCodebook(K, tuple(patterns))


def size_matrix(K: int) -> np.ndarray:
    """K x K counts; element [i-1, j-1] is the number of i x j rectangles."""
    _check_k(K)
    sizes = np.arange(1, K + 1)
    per_dim = K - sizes + 1
    return np.outer(per_dim, per_dim).astype(np.int64)


def iou(a: Sequence[int], b: Sequence[int]) -> float:
    a, b = PixelBox(*a), PixelBox(*b)
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _boundary(i: int, dim: int, K: int) -> int:
    # round-half-up of i * dim / K in integer arithmetic
    return (2 * i * dim + K) // (2 * K)


def pattern_to_pixel_box(p: Pattern, K: int, width: int, height: int) -> PixelBox:
    if p.is_clean:
        return EMPTY_BOX
    return PixelBox(
        _boundary(p.col, width, K),
        _boundary(p.row, height, K),
        _boundary(p.col + p.n, width, K),
        _boundary(p.row + p.m, height, K),
    )


_BOX_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _pixel_box_table(codebook: PatternCodebook, width: int, height: int) -> np.ndarray:
    key = (codebook.K, width, height)
    table = _BOX_CACHE.get(key)
    if table is None:
        table = np.array(
            [pattern_to_pixel_box(p, codebook.K, width, height) for p in codebook],
            dtype=np.int64,
        )
        table.setflags(write=False)
        _BOX_CACHE[key] = table
    return table


def match_box_to_pattern(
    box: Sequence[int], codebook: PatternCodebook, width: int, height: int
) -> int:
    """Index of the pattern whose pixel box has the largest IoU with ``box``.

    Zero-area boxes map to the clean pattern. Ties go to the smallest index.
    """
    box = PixelBox(*box)
    if box.area == 0:
        return 0
    table = _pixel_box_table(codebook, width, height)[1:]
    iw = np.minimum(table[:, 2], box.x1) - np.maximum(table[:, 0], box.x0)
    ih = np.minimum(table[:, 3], box.y1) - np.maximum(table[:, 1], box.y0)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    areas = (table[:, 2] - table[:, 0]) * (table[:, 3] - table[:, 1])
    union = areas + box.area - inter
    scores = inter / union
    # IEEE division is correctly rounded, so equal ratios compare equal
    return int(np.argmax(scores)) + 1


def pattern_to_block_mask(p: Pattern, K: int) -> np.ndarray:
    grid = np.zeros((K, K), dtype=np.uint8)
    if not p.is_clean:
        grid[p.row : p.row + p.m, p.col : p.col + p.n] = 1
    return grid


def format_block_mask(grid: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in grid)
