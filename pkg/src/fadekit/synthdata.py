"""Procedural pedestrian-like dataset: identities, multi-view renders, file I/O.

Each identity is a coarse body layout (head / torso / legs) with colors drawn
from small shared palettes plus a fine stripe texture. Colors alone do NOT
separate identities -- pairs of identities share the exact same palette combo
and differ only in stripe orientation -- so a model must pick up the texture
to tell them apart. Views of one identity vary by brightness, translation and
pixel noise, standing in for different cameras.

Images live in [0, 1] as (3, H, W) tensors in memory and as binary P6
pixmaps (8-bit, maxval 255) on disk.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor

# palettes kept small on purpose: identity pairs collide in color and are
# disambiguated only by stripe orientation
TORSO_PALETTE = ((0.85, 0.15, 0.15), (0.15, 0.35, 0.85), (0.15, 0.75, 0.25), (0.9, 0.8, 0.15))
LEG_PALETTE = ((0.12, 0.12, 0.12), (0.25, 0.2, 0.6), (0.55, 0.3, 0.1), (0.7, 0.7, 0.75))
HEAD_PALETTE = ((0.93, 0.8, 0.69), (0.78, 0.6, 0.45), (0.55, 0.4, 0.3), (0.35, 0.25, 0.2))

BRIGHTNESS_JITTER = 0.15
TRANSLATION_JITTER = 2
NOISE_SIGMA = 0.02
STRIPE_CONTRAST = 0.22
STRIPE_HALF_PERIOD = 2


class DatasetError(ValueError):
    """Dataset generation parameters out of bounds."""


class PpmFormatError(ValueError):
    """The file is not a valid binary pixmap."""


def _derived_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    torso_color: tuple[float, float, float]
    leg_color: tuple[float, float, float]
    head_tone: tuple[float, float, float]
    body_proportions: tuple[float, float, float]  # head/torso/legs as fractions of H
    texture_seed: int

    def __post_init__(self):
        for c in (self.torso_color, self.leg_color, self.head_tone):
            if not all(0.0 <= v <= 1.0 for v in c):
                raise DatasetError(f"identity {self.id}: color {c} outside [0,1]")
        if not all(p > 0 for p in self.body_proportions) or sum(self.body_proportions) > 1.2:
            raise DatasetError(f"identity {self.id}: bad proportions {self.body_proportions}")

    @property
    def stripes_vertical(self) -> bool:
        # orientation is the only cue separating identities that share colors
        return bool(self.texture_seed % 2)


@dataclass(frozen=True)
class JitterRecord:
    brightness: float
    translate: tuple[int, int]
    noise_sigma: float


@dataclass(frozen=True)
class ViewRender:
    identity_id: int
    camera_id: int
    image: Tensor  # (3, H, W) in [0, 1]
    jitter: JitterRecord


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple[ViewRender, ...]
    query: tuple[ViewRender, ...]
    gallery: tuple[ViewRender, ...]
    ids_disjoint: bool
    renders_disjoint: bool = True


def make_identity(index: int, seed: int) -> IdentitySpec:
    rng = _derived_rng("identity", seed, index)
    k = len(TORSO_PALETTE)
    combo = index % (k * k)  # identities k*k apart share both palette colors
    group = index // (k * k)  # ...and are separated by stripe orientation
    props = (
        0.16 + 0.03 * rng.uniform(-1, 1),
        0.40 + 0.04 * rng.uniform(-1, 1),
        0.40 + 0.04 * rng.uniform(-1, 1),
    )
    return IdentitySpec(
        id=index,
        torso_color=TORSO_PALETTE[combo % k],
        leg_color=LEG_PALETTE[(combo // k) % k],
        head_tone=HEAD_PALETTE[combo % len(HEAD_PALETTE)],
        body_proportions=props,
        texture_seed=(int(rng.integers(0, 2**20)) << 1) | (group % 2),
    )


def _stripe_field(h: int, w: int, vertical: bool, phase: int) -> np.ndarray:
    if vertical:
        idx = np.arange(w)[None, :] + phase
        band = ((idx // STRIPE_HALF_PERIOD) % 2).astype(np.float64)
        return np.broadcast_to(band, (h, w))
    idx = np.arange(h)[:, None] + phase
    band = ((idx // STRIPE_HALF_PERIOD) % 2).astype(np.float64)
    return np.broadcast_to(band, (h, w))


def render_view(spec: IdentitySpec, camera_id: int, image_hw: tuple[int, int], seed: int) -> ViewRender:
    """Deterministic render of one identity under one camera.

    Large flat color regions with sharp boundaries plus one striped torso
    band: coarse blocks carry the color cues, the band carries the texture
    cue, and the per-render jitter (brightness, translation, noise) stands in
    for camera variation.
    """
    h, w = image_hw
    rng = _derived_rng("view", seed, spec.id, camera_id)

    # coarse checkered backdrop: flat tiles with sharp boundaries, so the
    # pixel histogram is spiky while tile size stays above typical blur radii
    dark = rng.uniform(0.2, 0.35)
    light = rng.uniform(0.6, 0.75)
    tile = 8
    ty = (np.arange(h) // tile)[:, None]
    tx = (np.arange(w) // tile)[None, :]
    checker = ((ty + tx) % 2).astype(np.float64)
    img = np.broadcast_to(dark + (light - dark) * checker, (3, h, w)).copy()

    brightness = float(rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER))
    dy = int(rng.integers(-TRANSLATION_JITTER, TRANSLATION_JITTER + 1))
    dx = int(rng.integers(-TRANSLATION_JITTER, TRANSLATION_JITTER + 1))
    phase = int(_derived_rng("phase", spec.texture_seed).integers(0, 2 * STRIPE_HALF_PERIOD))

    head_f, torso_f, legs_f = spec.body_proportions
    total = head_f + torso_f + legs_f
    margin = max(1, int(round(h * (1.0 - min(total, 1.0)) / 2)))
    head_h = max(1, int(round(h * head_f)))
    torso_h = max(2, int(round(h * torso_f)))
    legs_h = max(2, int(round(h * legs_f)))

    cx = w // 2 + dx
    y0 = margin + dy
    stripes = _stripe_field(h, w, spec.stripes_vertical, phase)

    def paint(y_from: int, y_to: int, x_from: int, x_to: int, color, textured: bool) -> None:
        y_from, y_to = max(0, y_from), min(h, y_to)
        x_from, x_to = max(0, x_from), min(w, x_to)
        if y_from >= y_to or x_from >= x_to:
            return
        block = np.array(color, dtype=np.float64)[:, None, None] + brightness
        if textured:
            mod = (stripes[y_from:y_to, x_from:x_to] - 0.5) * 2.0 * STRIPE_CONTRAST
            img[:, y_from:y_to, x_from:x_to] = block + mod[None, :, :]
        else:
            img[:, y_from:y_to, x_from:x_to] = block

    head_w = max(2, w // 4)
    torso_w = max(3, w // 2)
    legs_w = max(3, w // 2)

    paint(y0, y0 + head_h, cx - head_w // 2, cx + (head_w + 1) // 2, spec.head_tone, False)
    y1 = y0 + head_h
    # striped torso: the fine-grained identity cue that blurring/mosaicing destroys
    paint(y1, y1 + torso_h, cx - torso_w // 2, cx + (torso_w + 1) // 2, spec.torso_color, True)
    y2 = y1 + torso_h
    left = cx - legs_w // 2
    gap = max(1, legs_w // 4)
    leg_w = max(1, (legs_w - gap) // 2)
    paint(y2, y2 + legs_h, left, left + leg_w, spec.leg_color, False)
    paint(y2, y2 + legs_h, left + leg_w + gap, left + 2 * leg_w + gap, spec.leg_color, False)

    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return ViewRender(
        identity_id=spec.id,
        camera_id=camera_id,
        image=Tensor(img),
        jitter=JitterRecord(brightness=brightness, translate=(dy, dx), noise_sigma=NOISE_SIGMA),
    )


def gen_dataset(
    n_ids: int,
    views_per_id: int,
    image_hw: tuple[int, int] = (32, 16),
    seed: int = 0,
    ids_disjoint: bool = False,
) -> DatasetSplits:
    """Generate identities, render all views, and split into train/query/gallery.

    The last view of each evaluated identity becomes its query, the preceding
    ``max(1, views_per_id // 4)`` views its gallery entries, the rest training
    data. Query and gallery therefore share identities but never a render, and
    their camera ids never coincide. With ``ids_disjoint`` the last quarter of
    identities is reserved for evaluation and excluded from training.
    """
    if n_ids < 2:
        raise DatasetError(f"need at least 2 identities, got {n_ids}")
    if views_per_id < 2:
        raise DatasetError(f"need at least 2 views per identity, got {views_per_id}")
    h, w = image_hw
    if h < 8 or w < 8:
        raise DatasetError(f"image {h}x{w} too small, need at least 8x8")

    n_gallery = max(1, views_per_id // 4)
    specs = [make_identity(i, seed) for i in range(n_ids)]
    if ids_disjoint:
        n_eval = max(2, n_ids // 4)
        eval_ids = {s.id for s in specs[n_ids - n_eval :]}
    else:
        eval_ids = {s.id for s in specs}

    train: list[ViewRender] = []
    query: list[ViewRender] = []
    gallery: list[ViewRender] = []
    for spec in specs:
        views = [render_view(spec, cam, image_hw, seed) for cam in range(views_per_id)]
        if spec.id in eval_ids:
            query.append(views[-1])
            gallery.extend(views[-1 - n_gallery : -1])
            rest = views[: -1 - n_gallery]
        else:
            rest = views
        if not ids_disjoint or spec.id not in eval_ids:
            train.extend(rest)
    return DatasetSplits(
        train=tuple(train), query=tuple(query), gallery=tuple(gallery), ids_disjoint=ids_disjoint
    )


# -- pixmap I/O -------------------------------------------------------------------


def write_image(path, image) -> None:
    """Write a (3, H, W) [0,1] image as a binary P6 pixmap, maxval 255."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise PpmFormatError(f"write_image: expected (3, H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise PpmFormatError("write_image: values outside [0, 1]")
    quantized = np.rint(arr * 255.0).astype(np.uint8)
    _, h, w = arr.shape
    payload = quantized.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + payload)


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_image(path) -> Tensor:
    """Read a binary P6 pixmap back into a (3, H, W) [0,1] tensor."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise PpmFormatError(f"{path}: not a binary P6 pixmap")
    offset = 2
    fields = []
    for _ in range(3):  # width, height, maxval
        m = _TOKEN.match(blob, offset)
        if m is None:
            raise PpmFormatError(f"{path}: truncated header")
        token = m.group(1)
        if not token.isdigit():
            raise PpmFormatError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
        offset = m.end()
    w, h, maxval = fields
    if not (0 < maxval < 256):
        raise PpmFormatError(f"{path}: unsupported maxval {maxval}")
    offset += 1  # single whitespace byte after maxval
    expected = w * h * 3
    data = blob[offset : offset + expected]
    if len(data) != expected:
        raise PpmFormatError(f"{path}: expected {expected} pixel bytes, found {len(data)}")
    if len(blob) != offset + expected:
        raise PpmFormatError(f"{path}: trailing bytes after pixel data")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return Tensor(arr.astype(np.float64) / maxval)


# -- manifest ---------------------------------------------------------------------


def write_manifest(path, entries: Sequence[dict]) -> None:
    """Line-delimited records: split, identity, camera, path."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
