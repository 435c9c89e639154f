"""Analytic parameter and FLOP counts for grid architectures.

Counts follow BERT-style accounting: token/position/segment embeddings with
an embedding layer norm, then per layer the Q/K/V/O projections, the
two-matrix FFN, and two layer norms. FLOPs are multiply-accumulates for one
sequence; embedding lookups, biases, layer norms and softmax are excluded
(sub-percent at these shapes).

Two attention-width conventions exist:

* ``table``    - projection width equals the hidden dimension. This is the
                 accounting that reproduces published totals for reference
                 models and is the default for reports.
* ``supernet`` - projection width equals ``heads * head_dim``, which is what
                 a student extracted from a weight-sharing supernet actually
                 stores and computes.

When ``heads * head_dim == hidden`` the two conventions agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .searchspace import ArchConfig, SubspaceSpec, arch_id, enumerate_space

SEGMENT_TYPES = 2
DEFAULT_MAX_POSITIONS = 512

CONVENTIONS = ("table", "supernet")


class CostModelError(ValueError):
    pass


def _attn_width(arch: ArchConfig, convention: str) -> int:
    if convention == "table":
        return arch.hidden
    if convention == "supernet":
        return arch.attn_width
    raise CostModelError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")


@dataclass(frozen=True)
class CostReport:
    """Cost of one architecture at a given sequence length and vocabulary."""

    arch_id: str
    params: int
    flops: int
    seq_len: int
    vocab: int
    convention: str

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "params": self.params,
            "flops": self.flops,
            "seq_len": self.seq_len,
            "vocab": self.vocab,
            "convention": self.convention,
        }


def count_params(
    arch: ArchConfig,
    vocab: int,
    max_pos: int = DEFAULT_MAX_POSITIONS,
    convention: str = "table",
) -> int:
    """Stored parameter count. Exact integer arithmetic, no overflow possible."""
    if vocab < 1:
        raise CostModelError(f"vocab must be >= 1, got {vocab}")
    if max_pos < 1:
        raise CostModelError(f"max_pos must be >= 1, got {max_pos}")
    d = arch.hidden
    w = _attn_width(arch, convention)
    ffn = arch.ffn_dim
    embeddings = (vocab + max_pos + SEGMENT_TYPES) * d + 2 * d
    qkv = 3 * (d * w + w)
    out_proj = w * d + d
    ffn_params = (d * ffn + ffn) + (ffn * d + d)
    norms = 2 * (2 * d)
    return embeddings + arch.layers * (qkv + out_proj + ffn_params + norms)


def count_flops(arch: ArchConfig, seq_len: int, convention: str = "table") -> int:
    """Multiply-accumulates for one forward pass over ``seq_len`` tokens."""
    if seq_len < 1:
        raise CostModelError(f"seq_len must be >= 1, got {seq_len}")
    d = arch.hidden
    w = _attn_width(arch, convention)
    per_token = 3 * d * w + w * d + 2 * seq_len * w + 2 * d * arch.ffn_dim
    return per_token * seq_len * arch.layers


def cost_report(
    arch: ArchConfig,
    seq_len: int,
    vocab: int,
    max_pos: int = DEFAULT_MAX_POSITIONS,
    convention: str = "table",
) -> CostReport:
    return CostReport(
        arch_id=arch_id(arch),
        params=count_params(arch, vocab, max_pos, convention),
        flops=count_flops(arch, seq_len, convention),
        seq_len=seq_len,
        vocab=vocab,
        convention=convention,
    )


def cost_range(
    space: SubspaceSpec,
    seq_len: int,
    vocab: int,
    max_pos: int = DEFAULT_MAX_POSITIONS,
    convention: str = "table",
) -> tuple[CostReport, CostReport]:
    """(min, max) cost over the exhaustive enumeration of ``space``.

    Both counts are monotone in every factor, so the extremes must land on
    the all-lo and all-hi corners; this is asserted against the sweep.
    """
    reports = [cost_report(a, seq_len, vocab, max_pos, convention) for a in enumerate_space(space)]
    lo = min(reports, key=lambda r: (r.params, r.flops))
    hi = max(reports, key=lambda r: (r.params, r.flops))
    lo_corner = cost_report(space.min_arch, seq_len, vocab, max_pos, convention)
    hi_corner = cost_report(space.max_arch, seq_len, vocab, max_pos, convention)
    if (lo.params, lo.flops) != (lo_corner.params, lo_corner.flops):
        raise CostModelError(f"minimum cost not at the all-lo corner of {space.name}")
    if (hi.params, hi.flops) != (hi_corner.params, hi_corner.flops):
        raise CostModelError(f"maximum cost not at the all-hi corner of {space.name}")
    return lo_corner, hi_corner
