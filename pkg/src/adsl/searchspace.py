"""Partitioned discrete transformer search spaces.

A search space is split into named sub-spaces, each a small Cartesian grid
over four architecture factors: layer count, hidden width, FFN ratio and
attention head count. Each sub-space also fixes the per-head attention
dimension, so a candidate's attention width is ``heads * head_dim``
independent of its hidden width. Grids are exact: the FFN ratio is kept as
a rational so membership tests never hit float equality.
"""

from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from pathlib import Path
from typing import Iterable, TextIO


class SearchSpaceError(ValueError):
    """Malformed factor range, sub-space definition, or architecture id."""


def _fraction(value) -> Fraction:
    # Floats go through str() so "0.1" means one tenth, not the nearest double.
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


@dataclass(frozen=True)
class FactorRange:
    """Inclusive arithmetic range ``lo, lo+step, ..., hi`` for one factor."""

    lo: Fraction
    hi: Fraction
    step: Fraction

    def __post_init__(self):
        object.__setattr__(self, "lo", _fraction(self.lo))
        object.__setattr__(self, "hi", _fraction(self.hi))
        object.__setattr__(self, "step", _fraction(self.step))
        if self.step <= 0:
            raise SearchSpaceError(f"step must be positive, got {self.step}")
        if self.lo > self.hi:
            raise SearchSpaceError(f"lo {self.lo} exceeds hi {self.hi}")
        if (self.hi - self.lo) % self.step != 0:
            raise SearchSpaceError(
                f"range ({self.lo}, {self.hi}) is not a whole number of steps of {self.step}"
            )

    @property
    def count(self) -> int:
        return int((self.hi - self.lo) / self.step) + 1

    def values(self) -> tuple[Fraction, ...]:
        return tuple(self.lo + i * self.step for i in range(self.count))

    def contains(self, value) -> bool:
        v = _fraction(value)
        if v < self.lo or v > self.hi:
            return False
        return (v - self.lo) % self.step == 0

    def int_values(self) -> tuple[int, ...]:
        vals = self.values()
        for v in vals:
            if v.denominator != 1:
                raise SearchSpaceError(f"expected integer grid, got value {v}")
        return tuple(int(v) for v in vals)


@dataclass(frozen=True)
class SubspaceSpec:
    """One sub-space: a grid over (layers, hidden, ratio, heads) plus a fixed head width."""

    name: str
    layers: FactorRange
    hidden: FactorRange
    ratio: FactorRange
    heads: FactorRange
    head_dim: int

    def __post_init__(self):
        if self.head_dim < 1:
            raise SearchSpaceError(f"head_dim must be >= 1, got {self.head_dim}")
        for factor in ("layers", "hidden", "heads"):
            getattr(self, factor).int_values()  # raises if non-integral
        # Every grid point must yield an integral FFN width.
        for hid in self.hidden.int_values():
            for r in self.ratio.values():
                if (r * hid).denominator != 1:
                    raise SearchSpaceError(
                        f"ratio {r} times hidden {hid} is not an integer FFN width"
                    )

    @property
    def size(self) -> int:
        return self.layers.count * self.hidden.count * self.ratio.count * self.heads.count

    @property
    def max_arch(self) -> "ArchConfig":
        return ArchConfig(
            layers=int(self.layers.hi),
            hidden=int(self.hidden.hi),
            ratio=self.ratio.hi,
            heads=int(self.heads.hi),
            head_dim=self.head_dim,
        )

    @property
    def min_arch(self) -> "ArchConfig":
        return ArchConfig(
            layers=int(self.layers.lo),
            hidden=int(self.hidden.lo),
            ratio=self.ratio.lo,
            heads=int(self.heads.lo),
            head_dim=self.head_dim,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [str(self.layers.lo), str(self.layers.hi), str(self.layers.step)],
            "hidden": [str(self.hidden.lo), str(self.hidden.hi), str(self.hidden.step)],
            "ratio": [str(self.ratio.lo), str(self.ratio.hi), str(self.ratio.step)],
            "heads": [str(self.heads.lo), str(self.heads.hi), str(self.heads.step)],
            "head_dim": self.head_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceSpec":
        def rng(key):
            lo, hi, step = d[key]
            return FactorRange(Fraction(lo), Fraction(hi), Fraction(step))

        return cls(
            name=d["name"],
            layers=rng("layers"),
            hidden=rng("hidden"),
            ratio=rng("ratio"),
            heads=rng("heads"),
            head_dim=int(d["head_dim"]),
        )


@dataclass(frozen=True)
class ArchConfig:
    """A single candidate architecture on a sub-space grid.

    All transformer layers of a candidate share the same width, ratio and
    head count. ``head_dim`` is inherited from the sub-space, so the
    attention width ``heads * head_dim`` is decoupled from ``hidden``.
    """

    layers: int
    hidden: int
    ratio: Fraction
    heads: int
    head_dim: int

    def __post_init__(self):
        object.__setattr__(self, "ratio", _fraction(self.ratio))
        ffn = self.ratio * self.hidden
        if ffn.denominator != 1 or ffn <= 0:
            raise SearchSpaceError(
                f"ratio {self.ratio} times hidden {self.hidden} must be a positive integer"
            )

    @property
    def ffn_dim(self) -> int:
        return int(self.ratio * self.hidden)

    @property
    def attn_width(self) -> int:
        return self.heads * self.head_dim


def enumerate_space(space: SubspaceSpec) -> list[ArchConfig]:
    """All candidates of a sub-space in (layers, hidden, ratio, heads) lexicographic order."""
    configs = []
    for l, d, r, h in product(
        space.layers.int_values(),
        space.hidden.int_values(),
        space.ratio.values(),
        space.heads.int_values(),
    ):
        configs.append(ArchConfig(layers=l, hidden=d, ratio=r, heads=h, head_dim=space.head_dim))
    return configs


def validation_errors(arch: ArchConfig, space: SubspaceSpec) -> list[str]:
    """Reasons why ``arch`` is off the grid of ``space``; empty when it validates."""
    reasons = []
    if not space.layers.contains(arch.layers):
        reasons.append(f"layers {arch.layers} not on grid {space.layers.lo}..{space.layers.hi} step {space.layers.step}")
    if not space.hidden.contains(arch.hidden):
        reasons.append(f"hidden {arch.hidden} not on grid {space.hidden.lo}..{space.hidden.hi} step {space.hidden.step}")
    if not space.ratio.contains(arch.ratio):
        reasons.append(f"ratio {arch.ratio} not on grid {space.ratio.lo}..{space.ratio.hi} step {space.ratio.step}")
    if not space.heads.contains(arch.heads):
        reasons.append(f"heads {arch.heads} not on grid {space.heads.lo}..{space.heads.hi} step {space.heads.step}")
    if arch.head_dim != space.head_dim:
        reasons.append(f"head_dim {arch.head_dim} differs from sub-space head_dim {space.head_dim}")
    return reasons


def validate(arch: ArchConfig, space: SubspaceSpec) -> bool:
    return not validation_errors(arch, space)


def format_ratio(r: Fraction) -> str:
    """Exact, parseable rendering: terminating decimal when possible, else ``num_den``."""
    if r.denominator == 1:
        return str(r.numerator)
    den = r.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den != 1:
        return f"{r.numerator}_{r.denominator}"
    # Scale to an integer over a power of ten and place the point by hand.
    places = 0
    scaled = r
    while scaled.denominator != 1:
        scaled *= 10
        places += 1
    digits = str(scaled.numerator).rjust(places + 1, "0")
    return f"{digits[:-places]}.{digits[-places:]}"


def parse_ratio(text: str) -> Fraction:
    if "_" in text:
        num, den = text.split("_", 1)
        return Fraction(int(num), int(den))
    return Fraction(text)


def arch_id(arch: ArchConfig) -> str:
    """Canonical identifier, e.g. ``L12-H768-R4-A12``; unique within one sub-space."""
    return f"L{arch.layers}-H{arch.hidden}-R{format_ratio(arch.ratio)}-A{arch.heads}"


_ARCH_ID_RE = re.compile(r"^L(\d+)-H(\d+)-R([0-9._]+)-A(\d+)$")


def parse_arch_id(text: str, head_dim: int = 64) -> ArchConfig:
    """Inverse of :func:`arch_id`. ``head_dim`` is not encoded in the id and
    must be supplied (it is a sub-space constant)."""
    m = _ARCH_ID_RE.match(text)
    if not m:
        raise SearchSpaceError(f"malformed architecture id {text!r}")
    return ArchConfig(
        layers=int(m.group(1)),
        hidden=int(m.group(2)),
        ratio=parse_ratio(m.group(3)),
        heads=int(m.group(4)),
        head_dim=head_dim,
    )


def arch_to_json(arch: ArchConfig) -> str:
    """One-line JSON record with the enumeration export keys."""
    return json.dumps(
        {
            "id": arch_id(arch),
            "l": arch.layers,
            "d_hid": arch.hidden,
            "r": float(arch.ratio),
            "h": arch.heads,
            "d_f": arch.ffn_dim,
        }
    )


def write_enumeration(space: SubspaceSpec, out: TextIO) -> int:
    """Write one JSON object per candidate; returns the number of lines."""
    configs = enumerate_space(space)
    for arch in configs:
        out.write(arch_to_json(arch) + "\n")
    return len(configs)


# The three shipped sub-spaces partition student sizes into base/small/tiny
# bands; head_dim 64 keeps every attention width within a 768-wide teacher.
# "toy" is a desk-scale grid for fast end-to-end runs and tests.
PRESETS: dict[str, SubspaceSpec] = {
    "tiny": SubspaceSpec(
        name="tiny",
        layers=FactorRange(4, 7, 1),
        hidden=FactorRange(128, 224, 32),
        ratio=FactorRange(Fraction(2), Fraction("3.5"), Fraction("0.5")),
        heads=FactorRange(7, 10, 1),
        head_dim=64,
    ),
    "small": SubspaceSpec(
        name="small",
        layers=FactorRange(9, 12, 1),
        hidden=FactorRange(256, 352, 32),
        ratio=FactorRange(Fraction("2.5"), Fraction(4), Fraction("0.5")),
        heads=FactorRange(7, 10, 1),
        head_dim=64,
    ),
    "base": SubspaceSpec(
        name="base",
        layers=FactorRange(9, 12, 1),
        hidden=FactorRange(544, 640, 32),
        ratio=FactorRange(Fraction("2.5"), Fraction(4), Fraction("0.5")),
        heads=FactorRange(9, 12, 1),
        head_dim=64,
    ),
    "toy": SubspaceSpec(
        name="toy",
        layers=FactorRange(2, 3, 1),
        hidden=FactorRange(8, 16, 8),
        ratio=FactorRange(2, 3, 1),
        heads=FactorRange(1, 2, 1),
        head_dim=8,
    ),
}


_RANGE_KEYS = ("layers", "hidden", "ratio", "heads")


def _parse_range_value(section: str, key: str, raw: str) -> FactorRange:
    try:
        parts = json.loads(raw)
    except json.JSONDecodeError as e:
        raise SearchSpaceError(f"[{section}] {key}: expected [lo, hi, step], got {raw!r}") from e
    if not isinstance(parts, list) or len(parts) != 3:
        raise SearchSpaceError(f"[{section}] {key}: expected [lo, hi, step], got {raw!r}")
    return FactorRange(*(_fraction(p) for p in parts))


def parse_subspace_sections(cp: configparser.ConfigParser) -> dict[str, SubspaceSpec]:
    """Collect every ``[subspace.<name>]`` section of a config into specs."""
    spaces = {}
    for section in cp.sections():
        if not section.startswith("subspace."):
            continue
        name = section[len("subspace."):]
        keys = set(cp[section])
        unknown = keys - set(_RANGE_KEYS) - {"head_dim"}
        if unknown:
            raise SearchSpaceError(f"[{section}]: unknown key {sorted(unknown)[0]!r}")
        missing = (set(_RANGE_KEYS) | {"head_dim"}) - keys
        if missing:
            raise SearchSpaceError(f"[{section}]: missing key {sorted(missing)[0]!r}")
        ranges = {k: _parse_range_value(section, k, cp[section][k]) for k in _RANGE_KEYS}
        spaces[name] = SubspaceSpec(
            name=name, head_dim=int(cp[section]["head_dim"]), **ranges
        )
    return spaces


def load_spaces(path: str | Path) -> dict[str, SubspaceSpec]:
    """Load sub-space definitions from an INI-style preset file."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise SearchSpaceError(f"cannot read sub-space file {path}")
    return parse_subspace_sections(cp)


def resolve_space(name: str, extra: dict[str, SubspaceSpec] | None = None) -> SubspaceSpec:
    """Look up a sub-space by name among ``extra`` definitions, then presets."""
    if extra and name in extra:
        return extra[name]
    if name in PRESETS:
        return PRESETS[name]
    known = sorted(set(PRESETS) | set(extra or {}))
    raise SearchSpaceError(f"unknown sub-space {name!r}; known: {', '.join(known)}")
