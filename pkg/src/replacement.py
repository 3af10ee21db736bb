"""
Local replacement operators: block augmentation, random erasing with donor
content, and block deformation (linear mixing).

Every operator only touches the pixels under its replaced mask; the rest of
the target image is returned bit-identical.
"""
import logging
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Tuple, Union

import numpy as np

from data import LabeledDataset
from errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"grid needs positive rows and cols, got {self.rows}x{self.cols}")

    @property
    def num_blocks(self) -> int:
        return self.rows * self.cols

    def block_bounds(self, height: int, width: int) -> List[Tuple[int, int, int, int]]:
        """(top, bottom, left, right) per block in row-major order; remainders go to the last row/column"""
        if height < self.rows or width < self.cols:
            raise ConfigurationError(f"a {height}x{width} image cannot hold a {self.rows}x{self.cols} grid")
        row_edges = _edges(height, self.rows)
        col_edges = _edges(width, self.cols)
        return [(row_edges[r], row_edges[r + 1], col_edges[c], col_edges[c + 1])
                for r in range(self.rows) for c in range(self.cols)]

    def block_areas(self, height: int, width: int) -> List[int]:
        return [(bottom - top) * (right - left) for top, bottom, left, right in self.block_bounds(height, width)]


def _block_cap(grid: GridSpec, max_blocks: int, height: int, width: int) -> float:
    """Largest fraction any max_blocks blocks can cover; equals max_blocks/num_blocks on divisible sides"""
    areas = sorted(grid.block_areas(height, width), reverse=True)
    return sum(areas[:max_blocks]) / (height * width)


def _edges(size: int, parts: int) -> List[int]:
    step = size // parts
    return [i * step for i in range(parts)] + [size]


@dataclass(frozen=True)
class BlockAug:
    grid: GridSpec = GridSpec()
    max_blocks: int = 4

    def __post_init__(self):
        _check_max_blocks(self.grid, self.max_blocks)

    @property
    def area_cap(self) -> float:
        return self.max_blocks / self.grid.num_blocks

    def area_cap_for(self, height: int, width: int) -> float:
        return _block_cap(self.grid, self.max_blocks, height, width)


@dataclass(frozen=True)
class RandEra:
    area_range: Tuple[float, float] = (0.1, 0.3)
    aspect_range: Tuple[float, float] = (0.3, 3.3)

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0 < lo <= hi < 1:
            raise ConfigurationError(f"random erasing area range must satisfy 0 < lo <= hi < 1, got {self.area_range}")
        a_lo, a_hi = self.aspect_range
        if not 0 < a_lo <= a_hi:
            raise ConfigurationError(f"random erasing aspect range must satisfy 0 < lo <= hi, got {self.aspect_range}")

    @property
    def area_cap(self) -> float:
        return self.area_range[1]

    def area_cap_for(self, height: int, width: int) -> float:
        return self.area_range[1]


@dataclass(frozen=True)
class BlockDef:
    grid: GridSpec = GridSpec()
    max_blocks: int = 4
    mix: float = 0.5

    def __post_init__(self):
        _check_max_blocks(self.grid, self.max_blocks)
        if not 0 < self.mix < 1:
            raise ConfigurationError(f"block deformation mix must lie in (0, 1), got {self.mix}")

    @property
    def area_cap(self) -> float:
        return self.max_blocks / self.grid.num_blocks

    def area_cap_for(self, height: int, width: int) -> float:
        return _block_cap(self.grid, self.max_blocks, height, width)


ReplacementMethod = Union[BlockAug, RandEra, BlockDef]
METHOD_NAMES = ("blockaug", "randera", "blockdef")


def _check_max_blocks(grid: GridSpec, max_blocks: int) -> None:
    if not 0 <= max_blocks <= grid.num_blocks:
        raise ConfigurationError(f"max_blocks must lie in [0, {grid.num_blocks}], got {max_blocks}")


def method_from_name(name: str, max_blocks: int = 4, grid: GridSpec = GridSpec(),
                     area_range=(0.1, 0.3), aspect_range=(0.3, 3.3), mix: float = 0.5) -> ReplacementMethod:
    """Build an operator from config values; max_blocks is ignored by random erasing"""
    key = name.lower()
    if key == "blockaug":
        return BlockAug(grid=grid, max_blocks=max_blocks)
    if key == "randera":
        return RandEra(area_range=tuple(area_range), aspect_range=tuple(aspect_range))
    if key == "blockdef":
        return BlockDef(grid=grid, max_blocks=max_blocks, mix=mix)
    raise ConfigurationError(f"unknown replacement method '{name}', expected one of {METHOD_NAMES}")


def with_max_blocks(method: ReplacementMethod, max_blocks: int) -> ReplacementMethod:
    if isinstance(method, BlockAug):
        return BlockAug(grid=method.grid, max_blocks=max_blocks)
    if isinstance(method, BlockDef):
        return BlockDef(grid=method.grid, max_blocks=max_blocks, mix=method.mix)
    raise ConfigurationError(f"{type(method).__name__} has no block count; block caps apply to blockaug and blockdef")


@dataclass(frozen=True)
class ReplacementSettings:
    """The replace.* and *.max_blocks config values, from which either stage builds its operator"""
    method: str = "blockaug"
    grid: GridSpec = GridSpec()
    area_range: Tuple[float, float] = (0.1, 0.3)
    aspect_range: Tuple[float, float] = (0.3, 3.3)
    mix: float = 0.5
    train_max_blocks: int = 4
    finetune_max_blocks: int = 6

    def build(self, max_blocks: int, name: Optional[str] = None) -> ReplacementMethod:
        return method_from_name(name or self.method, max_blocks=max_blocks, grid=self.grid,
                                area_range=self.area_range, aspect_range=self.aspect_range, mix=self.mix)

    def train_method(self, name: Optional[str] = None) -> ReplacementMethod:
        return self.build(self.train_max_blocks, name)

    def finetune_method(self, name: Optional[str] = None) -> ReplacementMethod:
        return self.build(self.finetune_max_blocks, name)


@dataclass
class ReplacementOutcome:
    image: np.ndarray
    replaced_mask: np.ndarray
    source_id: int

    @property
    def replaced_fraction(self) -> float:
        return float(self.replaced_mask.mean())


def choose_blocks(method: ReplacementMethod, rng: np.random.Generator) -> FrozenSet[int]:
    """Uniform count in 1..max_blocks, then uniform positions without replacement"""
    if not isinstance(method, (BlockAug, BlockDef)):
        raise UsageError(f"choose_blocks needs a block method, got {type(method).__name__}")
    if method.max_blocks == 0:
        return frozenset()
    count = int(rng.integers(1, method.max_blocks + 1))
    return frozenset(int(i) for i in rng.choice(method.grid.num_blocks, size=count, replace=False))


def block_mask(grid: GridSpec, blocks, height: int, width: int) -> np.ndarray:
    bounds = grid.block_bounds(height, width)
    mask = np.zeros((height, width), dtype=bool)
    for index in blocks:
        top, bottom, left, right = bounds[index]
        mask[top:bottom, left:right] = True
    return mask


def erase_mask(method: RandEra, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    area = rng.uniform(*method.area_range) * height * width
    aspect = rng.uniform(*method.aspect_range)
    # floor keeps the realized area under the sampled target
    h = int(np.clip(np.floor(np.sqrt(area * aspect)), 1, height))
    w = int(np.clip(np.floor(np.sqrt(area / aspect)), 1, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    mask = np.zeros((height, width), dtype=bool)
    mask[top:top + h, left:left + w] = True
    return mask


def apply_replacement(target: np.ndarray, source: np.ndarray, method: ReplacementMethod,
                      rng: np.random.Generator, source_id: int = -1, blocks=None) -> ReplacementOutcome:
    """
    Replace local regions of target with the same-position regions of source.

    Args:
        target: (C, H, W) image to alter
        source: (C, H, W) donor image
        method: BlockAug, RandEra or BlockDef
        rng: random stream for region selection
        source_id: id of the donor, recorded in the outcome
        blocks: explicit block indices for block methods (drawn with choose_blocks when None)
    """
    if target.shape != source.shape:
        raise UsageError(f"target {target.shape} and source {source.shape} shapes differ")
    _, height, width = target.shape

    if isinstance(method, RandEra):
        mask = erase_mask(method, height, width, rng)
    else:
        if blocks is None:
            blocks = choose_blocks(method, rng)
        mask = block_mask(method.grid, blocks, height, width)

    image = target.copy()
    if isinstance(method, BlockDef):
        mix = target.dtype.type(method.mix)
        image[:, mask] = mix * source[:, mask] + (1 - mix) * target[:, mask]
    else:
        image[:, mask] = source[:, mask]
    return ReplacementOutcome(image=image, replaced_mask=mask, source_id=source_id)


def draw_training_donor(index: int, dataset: LabeledDataset, rng: np.random.Generator) -> int:
    """Pick a donor index != index: same class with probability 0.5, otherwise any other-class sample"""
    label = int(dataset.labels[index])
    same = dataset.indices_by_class[label]
    same = same[same != index]
    others = np.flatnonzero(dataset.labels != label)
    use_same = rng.random() < 0.5
    if use_same and len(same) == 0:
        logger.warning("class %s has a single sample; using an other-class donor for sample %d",
                       dataset.class_name(label), int(dataset.ids[index]))
        use_same = False
    pool = same if use_same else others
    if len(pool) == 0:
        raise UsageError(f"no donor available for sample {int(dataset.ids[index])}")
    return int(pool[rng.integers(len(pool))])


def synthesize_training_image(index: int, dataset: LabeledDataset, method: ReplacementMethod,
                              rng: np.random.Generator) -> ReplacementOutcome:
    """Locally replace dataset sample `index` with a donor; the result keeps the original label"""
    donor = draw_training_donor(index, dataset, rng)
    return apply_replacement(dataset.images[index], dataset.images[donor], method, rng,
                             source_id=int(dataset.ids[donor]))
