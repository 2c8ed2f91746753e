"""Architecture configuration, depth algebra and channel schedules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

STEM_WIDTH = 16
CONFIG_KEYS = ("depth", "alpha", "block_variant", "p_terminal", "num_classes")


class ConfigError(ValueError):
    pass


class BlockVariant(str, enum.Enum):
    PREACT = "preact"          # BN-ReLU-Conv-BN-ReLU-Conv
    PYRAMID_BN = "pyramid-bn"  # BN-Conv-BN-ReLU-Conv-BN

    @classmethod
    def parse(cls, value) -> "BlockVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"a": cls.PREACT, "pyramidbn": cls.PYRAMID_BN, "b": cls.PYRAMID_BN}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(
                f"unknown block variant {value!r}; expected one of "
                + ", ".join(v.value for v in cls)
            ) from None


def _nearest_depths(depth: int) -> tuple[int, int]:
    lower = ((depth - 2) // 6) * 6 + 2
    if lower < 8:
        return 8, 8
    return lower, lower + 6


def derive_block_counts(depth: int) -> tuple[int, int]:
    """Blocks per group ``n`` and total final-level blocks ``N`` for ``depth``.

    Each basic block holds two 3x3 convs; with the stem conv and the
    classifier that gives ``depth = 6n + 2``.
    """
    if isinstance(depth, bool) or not isinstance(depth, int):
        raise ConfigError(f"depth must be an integer, got {depth!r}")
    if depth < 8 or (depth - 2) % 6:
        lo, hi = _nearest_depths(depth)
        near = f"{lo}" if lo == hi else f"{lo} or {hi}"
        raise ConfigError(f"depth must be 6n+2 with n >= 1, got {depth} (nearest valid: {near})")
    n = (depth - 2) // 6
    return n, 3 * n


@dataclass(frozen=True)
class ChannelSchedule:
    stem_width: int
    widths: tuple[int, ...]

    @property
    def total_blocks(self) -> int:
        return len(self.widths)

    @property
    def final_width(self) -> int:
        return self.widths[-1] if self.widths else self.stem_width

    def group_widths(self, groups: int = 3) -> list[list[int]]:
        n = len(self.widths) // groups
        return [list(self.widths[g * n:(g + 1) * n]) for g in range(groups)]


def pyramidal_widths(alpha: int, N: int, stem: int = STEM_WIDTH) -> ChannelSchedule:
    """Linearly widening schedule ``D_k = floor(stem + k * alpha / N)``.

    The width is carried as an exact rational and floored only when a block
    width is materialized, so small ``alpha / N`` steps still accumulate and
    the last block lands on ``stem + alpha``.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    if N < 1 or stem < 1:
        raise ConfigError(f"need N >= 1 and stem >= 1, got N={N}, stem={stem}")
    if alpha == 0:
        widths = (stem,) * N
    elif N <= 64 or (alpha + stem) * N >= 2 ** 62:
        # stem + k*alpha // N == (k*alpha + stem*N) // N; numerators step by alpha
        numerators = range(alpha + stem * N, (alpha + stem) * N + 1, alpha)
        widths = tuple(map(N.__rfloordiv__, numerators))
    else:
        # long schedules: one vectorised pass beats per-element int arithmetic
        widths = tuple(((_block_index(N) * alpha) // N + stem).tolist())
    return ChannelSchedule(stem, widths)


@lru_cache(maxsize=None)
def _block_index(N: int) -> np.ndarray:
    k = np.arange(1, N + 1, dtype=np.int64)
    k.flags.writeable = False
    return k


def classic_widths(groups: int, n: int, stem: int = STEM_WIDTH) -> ChannelSchedule:
    """RoR/ResNet baseline: constant width inside a group, doubled per group."""
    if groups < 1 or n < 1:
        raise ConfigError(f"need groups >= 1 and n >= 1, got groups={groups}, n={n}")
    widths = tuple(stem * 2 ** g for g in range(groups) for _ in range(n))
    return ChannelSchedule(stem, widths)


@dataclass(frozen=True)
class ArchConfig:
    depth: int
    alpha: int
    block_variant: BlockVariant = BlockVariant.PYRAMID_BN
    p_terminal: float = 0.5
    num_classes: int = 10
    groups: int = 3
    shortcut_levels: int = 3
    input_shape: tuple[int, int, int] = field(default=(3, 32, 32))

    def __post_init__(self):
        object.__setattr__(self, "block_variant", BlockVariant.parse(self.block_variant))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        derive_block_counts(self.depth)
        if isinstance(self.alpha, bool) or not isinstance(self.alpha, int) or self.alpha < 0:
            raise ConfigError(f"alpha must be a non-negative integer, got {self.alpha!r}")
        if not 0.0 < float(self.p_terminal) <= 1.0:
            raise ConfigError(f"p_terminal must lie in (0, 1], got {self.p_terminal}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.groups != 3:
            raise ConfigError(f"only 3 block groups are supported, got {self.groups}")
        if self.shortcut_levels != 3:
            raise ConfigError(f"only 3-level shortcuts are supported, got {self.shortcut_levels}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")

    @property
    def blocks_per_group(self) -> int:
        return derive_block_counts(self.depth)[0]

    @property
    def total_blocks(self) -> int:
        return derive_block_counts(self.depth)[1]

    def schedule(self) -> ChannelSchedule:
        return pyramidal_widths(self.alpha, self.total_blocks, STEM_WIDTH)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "alpha": self.alpha,
            "block_variant": self.block_variant.value,
            "p_terminal": float(self.p_terminal),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        kw = dict(d)
        if "input_shape" in kw:
            kw["input_shape"] = tuple(kw["input_shape"])
        return cls(**kw)


def parse_key_values(text: str, allowed) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_arch_values(values: dict) -> dict:
    conv = {"depth": int, "alpha": int, "num_classes": int, "p_terminal": float,
            "block_variant": BlockVariant.parse}
    out = {}
    for key, value in values.items():
        try:
            out[key] = conv[key](value)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


def parse_config(text: str) -> ArchConfig:
    values = coerce_arch_values(parse_key_values(text, CONFIG_KEYS))
    missing = {"depth", "alpha"} - values.keys()
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(sorted(missing))}")
    return ArchConfig(**values)


def load_config(path) -> ArchConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: ArchConfig) -> str:
    return "".join(
        f"{k} = {v}\n" for k, v in (
            ("depth", config.depth),
            ("alpha", config.alpha),
            ("block_variant", config.block_variant.value),
            ("p_terminal", repr(float(config.p_terminal))),
            ("num_classes", config.num_classes),
        )
    )
