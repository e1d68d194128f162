"""Annotation records for the two grounding tasks.

A :class:`GroundingSample` carries one referring expression with exactly one
target box.  A :class:`PLSample` carries one sentence whose noun-phrase
chunks are linked into coreference chains, each chain mapping to zero or
more boxes (scene/event chains legitimately have none).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ovground.boxes import BBox
from ovground.errors import InputError


@dataclass(frozen=True)
class GroundingSample:
    image_id: str
    image_width: int
    image_height: int
    expression: str
    target: BBox
    category: str
    is_novel: bool

    def __post_init__(self):
        if not self.expression.strip():
            raise InputError(f"sample {self.image_id!r}: expression is empty")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InputError(
                f"sample {self.image_id!r}: bad image dims "
                f"{self.image_width} x {self.image_height}"
            )
        t = self.target
        if t.x1 < 0 or t.y1 < 0 or t.x2 > self.image_width or t.y2 > self.image_height:
            raise InputError(
                f"sample {self.image_id!r}: target box {t.as_tuple()} exceeds "
                f"image bounds {self.image_width} x {self.image_height}"
            )


@dataclass(frozen=True)
class PhraseChunk:
    """Character span of one noun-phrase mention and its chain id."""

    start: int
    end: int
    chain: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise InputError(f"bad chunk span [{self.start}, {self.end})")


@dataclass(frozen=True)
class PLSample:
    image_id: str
    sentence: str
    uses_novel: bool
    chunks: tuple[PhraseChunk, ...] = field(default_factory=tuple)
    chains: dict[int, tuple[BBox, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sentence.strip():
            raise InputError(f"sample {self.image_id!r}: sentence is empty")
        spans = sorted((c.start, c.end) for c in self.chunks)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise InputError(
                    f"sample {self.image_id!r}: overlapping chunk spans "
                    f"[{s1}, {e1}) and starting at {s2}"
                )
        for chunk in self.chunks:
            if chunk.end > len(self.sentence):
                raise InputError(
                    f"sample {self.image_id!r}: chunk span [{chunk.start}, "
                    f"{chunk.end}) exceeds sentence length {len(self.sentence)}"
                )
            if chunk.chain not in self.chains:
                raise InputError(
                    f"sample {self.image_id!r}: chunk chain {chunk.chain} "
                    f"missing from chains map"
                )

    def phrase_text(self, chunk: PhraseChunk) -> str:
        return self.sentence[chunk.start : chunk.end]
