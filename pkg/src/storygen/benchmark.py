"""Procedural sprite benchmark: characters, frame rendering, stories, splits.

Characters are colored shapes with optional markers; every character owns a
unique body color separated from all others by at least 64 on some RGB
channel, which gives the presence oracle an unambiguous signature. Splits are
built so that no pretraining frame depicts a held-out character, in caption or
in pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, ContractError
from .story_types import STORY_LEN, Caption, CharacterSpec, Story

IMAGE_SIZE = 32

BODY_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 30, 30),    # red
    (30, 200, 40),    # green
    (40, 60, 235),    # blue
    (240, 220, 40),   # yellow
    (225, 45, 225),   # magenta
    (45, 230, 230),   # cyan
    (245, 140, 20),   # orange
    (130, 40, 220),   # violet
    (150, 235, 120),  # lime
    (250, 150, 180),  # pink
    (150, 95, 30),    # brown
    (30, 120, 130),   # teal
)
MARKER_PALETTE: tuple[tuple[int, int, int], ...] = (
    (15, 15, 15), (250, 250, 250), (170, 170, 170))
SHAPES = ("circle", "square", "triangle", "diamond")
SIZES = ("small", "large")
MARKERS = ("none", "stripe", "dot")
RADII = {"small": 3, "large": 5}

ACTIONS = ("stand", "jump", "duck", "lean_left", "lean_right", "hover")
ACTION_POS = {
    0: (16, 16), 1: (16, 8), 2: (16, 24), 3: (12, 16), 4: (20, 16), 5: (16, 11),
}
BACKGROUNDS = ("plain", "stripes", "checker", "diagonal")
SLOT_DX = 6

# How the full-scale benchmark this toy split mirrors is sized.
REFERENCE_SCALE = {"new_characters": 15, "test_stories_per_character": [40, 200]}


def _shape_mask(shape: str, r: int) -> np.ndarray:
    """Boolean sprite mask on a (2r+1) x (2r+1) grid."""
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    if shape == "circle":
        return xx * xx + yy * yy <= r * r + 1
    if shape == "square":
        return (np.abs(xx) <= r - 1) & (np.abs(yy) <= r - 1) if r > 3 else \
               (np.abs(xx) <= r) & (np.abs(yy) <= r)
    if shape == "triangle":
        return np.abs(xx) * 2 <= (yy + r)
    if shape == "diamond":
        return np.abs(xx) + np.abs(yy) <= r
    raise ConfigError(f"unknown shape {shape!r}")


def sprite_pixel_area(spec: CharacterSpec) -> int:
    """Exact pixel count of the rendered body (marker pixels included)."""
    return int(_shape_mask(spec.body_shape, RADII[spec.size]).sum())


def gen_characters(n_existing: int = 6, n_new: int = 3, seed: int = 0) -> list[CharacterSpec]:
    """Deterministic roster; first ``n_existing`` entries are the existing cast."""
    total = n_existing + n_new
    if total > len(BODY_PALETTE):
        raise ConfigError(
            f"{total} characters exceed the palette capacity of {len(BODY_PALETTE)}")
    rng = np.random.default_rng(seed)
    colors = [BODY_PALETTE[i] for i in rng.permutation(len(BODY_PALETTE))[:total]]
    roster = []
    for i in range(total):
        roster.append(CharacterSpec(
            name=f"char{i:02d}",
            body_shape=SHAPES[i % len(SHAPES)],
            body_color=colors[i],
            size=SIZES[i % 2],
            marker=MARKERS[i % len(MARKERS)],
            marker_color=MARKER_PALETTE[i % len(MARKER_PALETTE)],
        ))
    return roster


def _background(background_id: int) -> np.ndarray:
    """[H,W,3] uint8 canvas for a background id."""
    H = W = IMAGE_SIZE
    img = np.zeros((H, W, 3), dtype=np.uint8)
    if background_id == 0:
        img[:] = 70
    elif background_id == 1:
        rows = (np.arange(H) // 4) % 2
        img[:] = np.where(rows[:, None, None] == 0, 50, 90)
    elif background_id == 2:
        yy, xx = np.mgrid[0:H, 0:W]
        img[:] = np.where((((yy // 4) + (xx // 4)) % 2 == 0)[:, :, None], 60, 100)
    elif background_id == 3:
        yy, xx = np.mgrid[0:H, 0:W]
        img[:] = np.where((((yy + xx) // 5) % 2 == 0)[:, :, None], 55, 95)
    else:
        raise ContractError(f"background id {background_id} out of range")
    return img


def _draw_character(img: np.ndarray, spec: CharacterSpec, cx: int, cy: int) -> None:
    r = RADII[spec.size]
    mask = _shape_mask(spec.body_shape, r)
    ys, xs = np.nonzero(mask)
    ys = ys + cy - r
    xs = xs + cx - r
    keep = (ys >= 0) & (ys < IMAGE_SIZE) & (xs >= 0) & (xs < IMAGE_SIZE)
    img[ys[keep], xs[keep]] = spec.body_color
    if spec.marker == "stripe":
        rows = (ys >= cy) & (ys <= cy + 1) & keep
        img[ys[rows], xs[rows]] = spec.marker_color
    elif spec.marker == "dot":
        dots = (np.abs(ys - cy) <= 1) & (np.abs(xs - cx) <= 1) & keep
        img[ys[dots], xs[dots]] = spec.marker_color


def render_frame(chars: list[CharacterSpec], action_id: int, background_id: int) -> np.ndarray:
    """Deterministic [3,32,32] float frame in [0,1]."""
    if len(chars) > 2:
        raise ContractError(f"at most 2 characters per frame, got {len(chars)}")
    if len(set(c.name for c in chars)) != len(chars):
        raise ContractError("characters in a frame must be distinct")
    if not 0 <= action_id < len(ACTIONS):
        raise ContractError(f"action id {action_id} out of range")
    img = _background(background_id)
    cx, cy = ACTION_POS[action_id]
    if len(chars) == 1:
        _draw_character(img, chars[0], cx, cy)
    elif len(chars) == 2:
        _draw_character(img, chars[0], cx - SLOT_DX, cy)
        _draw_character(img, chars[1], cx + SLOT_DX, cy)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def render_caption(caption: Caption, roster: list[CharacterSpec]) -> np.ndarray:
    return render_frame([roster[i] for i in caption.character_ids],
                        caption.action_id, caption.background_id)


def gen_story(roster: list[CharacterSpec], allowed_chars: list[int],
              rng: np.random.Generator, solo_char: int | None = None,
              sidekick_pool: list[int] | None = None) -> Story:
    """Sample a 5-frame story with a recurring protagonist and one background.

    ``solo_char`` forces every frame to depict exactly that character (used
    for customization stories). Otherwise the protagonist comes from
    ``allowed_chars`` and appears in at least 3 frames; an optional sidekick
    from ``sidekick_pool`` (default: the other allowed characters) joins some
    frames.
    """
    if not allowed_chars:
        raise ContractError("allowed_chars must be nonempty")
    background = int(rng.integers(len(BACKGROUNDS)))
    captions: list[Caption] = []
    if solo_char is not None:
        actions = rng.permutation(len(ACTIONS))[:STORY_LEN]
        for k in range(STORY_LEN):
            captions.append(Caption((solo_char,), int(actions[k]), background))
    else:
        protagonist = int(allowed_chars[rng.integers(len(allowed_chars))])
        pool = sidekick_pool if sidekick_pool is not None else \
            [c for c in allowed_chars if c != protagonist]
        sidekick = int(pool[rng.integers(len(pool))]) if pool and rng.random() < 0.6 else None
        n_prot = int(rng.integers(3, STORY_LEN + 1))
        prot_frames = set(rng.permutation(STORY_LEN)[:n_prot].tolist())
        for k in range(STORY_LEN):
            ids = []
            if k in prot_frames:
                ids.append(protagonist)
            if sidekick is not None and rng.random() < 0.4 and sidekick != protagonist:
                ids.append(sidekick)
            captions.append(Caption(tuple(ids), int(rng.integers(len(ACTIONS))), background))
    frames = [render_caption(c, roster) for c in captions]
    return Story(frames=frames, captions=captions)


@dataclass
class LeakageReport:
    clean: bool
    violations: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"clean": self.clean, "violations": self.violations}


def check_leakage(stories: list[Story], new_specs: dict[int, CharacterSpec]) -> LeakageReport:
    """Scan captions and pixels for any occurrence of a held-out character."""
    from .metrics import oracle_presence

    violations = []
    for si, story in enumerate(stories):
        for fi, (frame, cap) in enumerate(zip(story.frames, story.captions)):
            for cid, spec in new_specs.items():
                in_caption = cid in cap.character_ids
                in_pixels = oracle_presence(frame, spec)
                if in_caption or in_pixels:
                    violations.append({
                        "story": si, "frame": fi, "character": spec.name,
                        "caption": in_caption, "pixels": bool(in_pixels)})
    return LeakageReport(clean=not violations, violations=violations)


@dataclass
class BenchmarkSplits:
    roster: list[CharacterSpec]
    n_existing: int
    pretrain: list[Story]
    customization: dict[int, Story]          # new char id -> its single story
    test: dict[int, list[Story]]             # new char id -> held-out stories
    existing_test: list[Story]               # existing-cast stories for prior checks
    manifest: dict

    @property
    def existing_ids(self) -> list[int]:
        return list(range(self.n_existing))

    @property
    def new_ids(self) -> list[int]:
        return list(range(self.n_existing, len(self.roster)))


def build_splits(roster: list[CharacterSpec], n_existing: int,
                 pretrain_stories: int = 2000,
                 test_stories_per_character: int = 40,
                 existing_test_stories: int = 40,
                 seed: int = 0) -> BenchmarkSplits:
    """Build leak-free pretrain/customization/test splits from a roster."""
    from .metrics import oracle_presence

    rng = np.random.default_rng(seed)
    existing = list(range(n_existing))
    new_ids = list(range(n_existing, len(roster)))
    pretrain = [gen_story(roster, existing, rng) for _ in range(pretrain_stories)]
    customization = {cid: gen_story(roster, [cid], rng, solo_char=cid) for cid in new_ids}
    test = {cid: [gen_story(roster, [cid] + existing, rng,
                            sidekick_pool=existing)
                  for _ in range(test_stories_per_character)]
            for cid in new_ids}
    # test stories must actually feature their new character in >= 3 frames:
    # gen_story picks its protagonist from allowed_chars, so resample until the
    # protagonist is the new character.
    for cid in new_ids:
        fixed = []
        for story in test[cid]:
            attempts = 0
            while sum(cid in c.character_ids for c in story.captions) < 3:
                story = gen_story(roster, [cid], rng, sidekick_pool=existing)
                attempts += 1
                if attempts > 20:
                    raise ContractError("failed to sample a test story featuring its character")
            fixed.append(story)
        test[cid] = fixed
    existing_test = [gen_story(roster, existing, rng) for _ in range(existing_test_stories)]

    new_specs = {cid: roster[cid] for cid in new_ids}
    report = check_leakage(pretrain, new_specs)
    if not report.clean:
        raise ContractError(f"pretrain split leaks held-out characters: {report.violations[:3]}")
    for cid, story in customization.items():
        if any(tuple(c.character_ids) != (cid,) for c in story.captions):
            raise ContractError(f"customization story for {roster[cid].name} is not solo")
        for frame in story.frames:
            if not oracle_presence(frame, roster[cid]):
                raise ContractError(
                    f"customization frame does not depict {roster[cid].name}")

    manifest = {
        "seed": seed,
        "image_size": IMAGE_SIZE,
        "characters": [
            {"id": i, "name": c.name, "body_shape": c.body_shape,
             "body_color": list(c.body_color), "size": c.size,
             "marker": c.marker, "marker_color": list(c.marker_color),
             "role": "existing" if i < n_existing else "new"}
            for i, c in enumerate(roster)],
        "actions": list(ACTIONS),
        "backgrounds": list(BACKGROUNDS),
        "counts": {
            "existing_characters": n_existing,
            "new_characters": len(new_ids),
            "pretrain_stories": pretrain_stories,
            "customization_stories_per_character": 1,
            "test_stories_per_character": test_stories_per_character,
            "existing_test_stories": existing_test_stories,
        },
        "reference_scale": dict(REFERENCE_SCALE),
    }
    return BenchmarkSplits(roster=roster, n_existing=n_existing, pretrain=pretrain,
                           customization=customization, test=test,
                           existing_test=existing_test, manifest=manifest)


# -- on-disk layout -----------------------------------------------------------

def _save_image(path: Path, frame: np.ndarray) -> None:
    arr = np.round(np.asarray(frame) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    PILImage.fromarray(arr, mode="RGB").save(path)


def _load_image(path: Path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def save_story(story: Story, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(story.frames):
        _save_image(directory / f"frame_{i}.png", frame)
    with open(directory / "captions.json", "w") as fh:
        json.dump([c.to_json() for c in story.captions], fh, indent=1)


def load_story(directory: Path) -> Story:
    with open(directory / "captions.json") as fh:
        captions = [Caption.from_json(d) for d in json.load(fh)]
    frames = [_load_image(directory / f"frame_{i}.png") for i in range(STORY_LEN)]
    return Story(frames=frames, captions=captions)


def save_splits(splits: BenchmarkSplits, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(splits.manifest, fh, indent=2, sort_keys=True)
    for i, story in enumerate(splits.pretrain):
        save_story(story, out_dir / "pretrain" / f"story_{i:05d}")
    for cid, story in splits.customization.items():
        save_story(story, out_dir / "customization" / f"{splits.roster[cid].name}_story")
    for cid, stories in splits.test.items():
        for i, story in enumerate(stories):
            save_story(story, out_dir / "test" / f"{splits.roster[cid].name}_{i:04d}")
    for i, story in enumerate(splits.existing_test):
        save_story(story, out_dir / "existing_test" / f"story_{i:05d}")


def load_splits(data_dir: Path) -> BenchmarkSplits:
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    roster = [CharacterSpec(name=c["name"], body_shape=c["body_shape"],
                            body_color=tuple(c["body_color"]), size=c["size"],
                            marker=c["marker"], marker_color=tuple(c["marker_color"]))
              for c in manifest["characters"]]
    n_existing = manifest["counts"]["existing_characters"]
    new_ids = list(range(n_existing, len(roster)))
    pretrain = [load_story(p) for p in sorted((data_dir / "pretrain").iterdir())]
    customization = {cid: load_story(data_dir / "customization" / f"{roster[cid].name}_story")
                     for cid in new_ids}
    test = {cid: [load_story(p) for p in
                  sorted((data_dir / "test").glob(f"{roster[cid].name}_*"))]
            for cid in new_ids}
    exist_dir = data_dir / "existing_test"
    existing_test = [load_story(p) for p in sorted(exist_dir.iterdir())] \
        if exist_dir.exists() else []
    return BenchmarkSplits(roster=roster, n_existing=n_existing, pretrain=pretrain,
                           customization=customization, test=test,
                           existing_test=existing_test, manifest=manifest)
