"""Shared domain types: characters, captions, stories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STORY_LEN = 5


@dataclass(frozen=True)
class CharacterSpec:
    """Procedural sprite parameters; the ground truth identity of a character."""

    name: str
    body_shape: str            # circle | square | triangle | diamond
    body_color: tuple[int, int, int]
    size: str                  # small | large
    marker: str                # none | stripe | dot
    marker_color: tuple[int, int, int]

    def key(self) -> tuple:
        return (self.body_shape, self.body_color, self.marker)


@dataclass(frozen=True)
class Caption:
    """Structured frame description over closed vocabularies.

    ``character_ids`` is sorted and duplicate-free with at most two entries.
    """

    character_ids: tuple[int, ...]
    action_id: int
    background_id: int

    def __post_init__(self):
        ids = tuple(sorted(set(self.character_ids)))
        object.__setattr__(self, "character_ids", ids)
        if len(ids) > 2:
            raise ValueError(f"at most 2 characters per frame, got {ids}")

    def to_json(self) -> dict:
        return {"characters": list(self.character_ids),
                "action": self.action_id,
                "background": self.background_id}

    @classmethod
    def from_json(cls, d: dict) -> "Caption":
        return cls(tuple(d["characters"]), d["action"], d["background"])


@dataclass
class Story:
    """Five frames with five structured captions."""

    frames: list[np.ndarray]          # each [3,H,W] float in [0,1]
    captions: list[Caption]

    def __post_init__(self):
        if len(self.frames) != STORY_LEN or len(self.captions) != STORY_LEN:
            raise ValueError(
                f"a story has exactly {STORY_LEN} frames and captions, "
                f"got {len(self.frames)}/{len(self.captions)}")

    def character_ids(self) -> set[int]:
        out: set[int] = set()
        for c in self.captions:
            out.update(c.character_ids)
        return out
