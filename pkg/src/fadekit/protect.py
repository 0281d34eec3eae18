"""Noise-guided iterative image protection and the baseline protectors.

The main protector drives an image toward a fixed normal-noise target while
keeping its embedding within a distance budget of the original. Two moves
alternate, gated by the feature-distance threshold:

* constraint step (``CO``): a momentum-normalized gradient step shrinking the
  embedding distance between the protected and original image,
* partial replacement (``PRO``): overwrite one disjoint subset of pixels with
  the noise target, cycling through a mask schedule that covers every pixel
  exactly once per cycle.

A run starts with an initialization stage (one CO followed by one PRO per
step) that completes a full replacement cycle, and ends with a few CO-only
steps so the feature constraint holds on the final image.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nets import FeatureExtractor, embed
from .synthdata import derive_seed
from .tensor import Tensor

STALL_NORM = 1e-12

CO = "CO"
PRO = "PRO"


class ConfigError(ValueError):
    """Invalid protection configuration."""


class ProtectError(ValueError):
    """Invalid protector inputs."""


@dataclass(frozen=True)
class ProtectConfig:
    """Hyperparameters of one protection run.

    ``max_steps`` total iterations; ``mask_count`` disjoint masks per
    replacement cycle; ``epsilon`` the embedding-distance budget; ``alpha``
    momentum decay; ``beta`` step size. The first ``init_steps`` iterations
    pair one CO with one PRO; the last ``final_co_only_steps`` never replace.
    """

    max_steps: int = 100
    mask_count: int = 5
    epsilon: float = 0.03
    alpha: float = 0.6
    beta: float = 0.01
    init_steps: int = 5
    final_co_only_steps: int = 5
    noise_seed: int = 0
    mask_seed: int = 0
    grad_norm_exponent: int = 2
    resample_noise: bool = False
    normalized_features: bool = True

    def validate(self) -> None:
        if self.max_steps <= self.init_steps + self.final_co_only_steps:
            raise ConfigError(
                f"max_steps {self.max_steps} must exceed init_steps + final_co_only_steps "
                f"({self.init_steps} + {self.final_co_only_steps})"
            )
        if self.mask_count < 1:
            raise ConfigError(f"mask_count {self.mask_count} must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon {self.epsilon} must be > 0")
        if self.beta <= 0:
            raise ConfigError(f"beta {self.beta} must be > 0")
        if not 0 <= self.alpha < 1:
            raise ConfigError(f"alpha {self.alpha} must be in [0, 1)")
        if self.init_steps < 0 or self.final_co_only_steps < 0:
            raise ConfigError("phase lengths must be non-negative")
        if self.grad_norm_exponent not in (1, 2):
            raise ConfigError(f"grad_norm_exponent {self.grad_norm_exponent} must be 1 or 2")

    def save(self, path) -> None:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProtectConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown field {key!r}")
            kwargs[key] = _parse_field(key, value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


_BOOL_FIELDS = {"resample_noise", "normalized_features"}
_INT_FIELDS = {
    "max_steps", "mask_count", "init_steps", "final_co_only_steps",
    "noise_seed", "mask_seed", "grad_norm_exponent",
}


def _parse_field(key: str, value: str):
    if key in _BOOL_FIELDS:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"field {key!r}: expected boolean, got {value!r}")
    if key in _INT_FIELDS:
        return int(value)
    return float(value)


@dataclass
class MaskSchedule:
    """Ordered cycle of binary keep-masks; zeros mark pixels to replace.

    The schedule tracks its cursor and which spatial positions have ever been
    replaced, so a run can report cumulative replacement coverage.
    """

    masks: tuple[Tensor, ...]
    cursor: int = 0
    replaced_ever: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.masks:
            raise ProtectError("MaskSchedule: no masks")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.shape != shape:
                raise ProtectError(f"MaskSchedule: mask shapes differ ({m.shape} vs {shape})")
            values = np.unique(m.data)
            if not np.isin(values, (0.0, 1.0)).all():
                raise ProtectError("MaskSchedule: masks must be binary")
        if self.replaced_ever is None:
            self.replaced_ever = np.zeros(shape[-2:], dtype=bool)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.masks[0].shape[-2:]

    def current(self) -> Tensor:
        return self.masks[self.cursor]

    def mark_and_advance(self) -> None:
        replaced = self.current().data == 0.0
        spatial = replaced if replaced.ndim == 2 else replaced.any(axis=0)
        self.replaced_ever |= spatial
        self.cursor = (self.cursor + 1) % len(self.masks)

    def coverage(self) -> float:
        return float(self.replaced_ever.mean())

    def replaced_counts(self) -> list[int]:
        """Spatial pixels each mask replaces (zeros in one channel plane)."""
        counts = []
        for m in self.masks:
            z = m.data == 0.0
            counts.append(int((z if z.ndim == 2 else z[0]).sum()))
        return counts

    def validate_partition(self) -> None:
        """Check masks are pairwise disjoint and cover every pixel once."""
        total = np.zeros(self.masks[0].shape)
        for m in self.masks:
            total += 1.0 - m.data
        if not np.array_equal(total, np.ones_like(total)):
            raise ProtectError("MaskSchedule: replaced positions do not partition the image")


@dataclass(frozen=True)
class TraceEntry:
    step: int
    op: str  # CO or PRO
    feature_loss: float
    coverage: float
    stalled: bool = False


@dataclass(frozen=True)
class ProtectionResult:
    """Protected image plus the per-operation trace of the run."""

    protected: Tensor
    trace: tuple[TraceEntry, ...]
    constraint_met_at_end: Optional[bool]
    final_feature_loss: Optional[float]


def standard_normal_field(shape, seed: int) -> np.ndarray:
    """Seeded i.i.d. standard-normal draws of the given shape."""
    return np.random.default_rng(seed).standard_normal(shape)


def sample_noise_target(shape, seed: int) -> Tensor:
    """Normal noise mapped into the pixel domain by v -> clamp(0.5 + 0.25 v)."""
    return Tensor(np.clip(0.5 + 0.25 * standard_normal_field(shape, seed), 0.0, 1.0))


def gen_mask_schedule(shape, count: int, seed: int) -> MaskSchedule:
    """Random balanced partition of spatial pixels into ``count`` masks.

    Masks share their spatial pattern across channels; each replaces either
    ``floor(P/count)`` or ``ceil(P/count)`` of the P spatial pixels, every
    pixel is replaced exactly once per cycle.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (2, 3):
        raise ProtectError(f"gen_mask_schedule: expected (H, W) or (C, H, W), got {shape}")
    h, w = shape[-2:]
    total = h * w
    if count < 1 or count > total:
        raise ProtectError(f"gen_mask_schedule: count {count} outside [1, {total}]")
    perm = np.random.default_rng(seed).permutation(total)
    base, extra = divmod(total, count)
    masks = []
    offset = 0
    for j in range(count):
        size = base + (1 if j < extra else 0)
        chunk = perm[offset : offset + size]
        offset += size
        flat = np.ones(total)
        flat[chunk] = 0.0
        spatial = flat.reshape(h, w)
        masks.append(Tensor(np.broadcast_to(spatial, shape).copy()))
    schedule = MaskSchedule(masks=tuple(masks))
    schedule.validate_partition()
    return schedule


class ConstraintStep:
    """Outcome of one constraint operation."""

    __slots__ = ("x_next", "momentum", "feature_loss", "stalled")

    def __init__(self, x_next: Tensor, momentum: np.ndarray, feature_loss: float, stalled: bool):
        self.x_next = x_next
        self.momentum = momentum
        self.feature_loss = feature_loss
        self.stalled = stalled


def _loss_and_grad(
    model: FeatureExtractor, x_p: np.ndarray, ref_embedding: Tensor, normalized: bool
) -> tuple[float, np.ndarray]:
    xp = Tensor(x_p, requires_grad=True)
    loss = T.sq_l2_distance(embed(model, xp, normalize=normalized), ref_embedding)
    T.backward(loss)
    return loss.item(), xp.grad


def reference_embedding(model: FeatureExtractor, x: Tensor, normalized: bool = True) -> Tensor:
    """Frozen embedding of the original image, detached from any graph."""
    return embed(model, x.detach(), normalize=normalized).detach()


def constraint_op(
    x_p: Tensor,
    x: Tensor,
    model: FeatureExtractor,
    g_prev: np.ndarray,
    alpha: float,
    beta: float,
    grad_norm_exponent: int = 2,
    normalized_features: bool = True,
    ref_embedding: Optional[Tensor] = None,
    _precomputed: Optional[tuple[float, np.ndarray]] = None,
) -> ConstraintStep:
    """One momentum-gradient step on the embedding distance to the original.

    The raw gradient is scaled by the inverse of its L2 norm raised to
    ``grad_norm_exponent`` and folded into the momentum buffer; the image
    moves by ``beta`` along the result and is clamped back into [0, 1].
    A vanishing gradient yields a flagged no-op instead of an error.
    """
    if x_p.shape != x.shape:
        raise T.ShapeError(f"constraint_op: shape mismatch {x_p.shape} vs {x.shape}")
    if ref_embedding is None:
        ref_embedding = reference_embedding(model, x, normalized_features)
    if _precomputed is None:
        loss, grad = _loss_and_grad(model, x_p.data, ref_embedding, normalized_features)
    else:
        loss, grad = _precomputed
    norm = float(np.sqrt((grad * grad).sum()))
    if norm < STALL_NORM:
        return ConstraintStep(x_p.detach(), np.array(g_prev, copy=True), loss, stalled=True)
    g_next = alpha * g_prev + grad / norm**grad_norm_exponent
    x_next = np.clip(x_p.data - beta * g_next, 0.0, 1.0)
    return ConstraintStep(Tensor(x_next), g_next, loss, stalled=False)


def partial_replacement_op(x_p: Tensor, schedule: MaskSchedule, noise: Tensor) -> Tensor:
    """Replace the pixels zeroed by the current mask with noise values.

    Computes ``x_p * M + noise * (1 - M)``, records the replaced positions in
    the schedule's coverage bookkeeping, and advances the cursor cyclically.
    """
    mask = schedule.current()
    if noise.shape != x_p.shape or mask.shape != x_p.shape:
        raise T.ShapeError(
            f"partial_replacement_op: shape mismatch image {x_p.shape}, noise {noise.shape}, mask {mask.shape}"
        )
    out = T.elementwise_blend(x_p, noise, mask)
    schedule.mark_and_advance()
    return out.detach()


OnStep = Callable[[TraceEntry, np.ndarray], None]


def _fade_engine(
    x: Tensor,
    model: FeatureExtractor,
    config: ProtectConfig,
    replacement: Optional[np.ndarray],
    contrastive: bool,
    on_step: Optional[OnStep],
) -> ProtectionResult:
    config.validate()
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise ProtectError("pixelfade: input image must lie in [0, 1]")
    normalized = config.normalized_features
    ref = reference_embedding(model, x, normalized)
    schedule = gen_mask_schedule(x.shape, config.mask_count, config.mask_seed)
    x_orig = x.detach()
    x_p = x.detach()
    g_co = np.zeros(x.shape)
    g_away = np.zeros(x.shape)
    resample_index = 0
    trace: list[TraceEntry] = []

    def emit(entry: TraceEntry) -> None:
        trace.append(entry)
        if on_step is not None:
            on_step(entry, x_p.data)

    def do_co(t: int, precomputed: tuple[float, np.ndarray]) -> None:
        nonlocal x_p, g_co
        step = constraint_op(
            x_p, x_orig, model, g_co, config.alpha, config.beta,
            grad_norm_exponent=config.grad_norm_exponent,
            normalized_features=normalized,
            ref_embedding=ref,
            _precomputed=precomputed,
        )
        x_p, g_co = step.x_next, step.momentum
        emit(TraceEntry(t, CO, step.feature_loss, schedule.coverage(), step.stalled))

    def do_away(t: int, loss: float) -> None:
        nonlocal x_p, g_away, replacement, resample_index
        if contrastive:
            # push the image away from the original in pixel space
            diff = x_p.data - x_orig.data
            norm = float(np.sqrt((diff * diff).sum()))
            if norm < STALL_NORM:
                emit(TraceEntry(t, PRO, loss, schedule.coverage(), stalled=True))
                return
            grad = 2.0 * diff  # gradient of the squared pixel distance
            g_away = config.alpha * g_away + grad / float(np.sqrt((grad * grad).sum())) ** config.grad_norm_exponent
            x_p = Tensor(np.clip(x_p.data + config.beta * g_away, 0.0, 1.0))
            emit(TraceEntry(t, PRO, loss, schedule.coverage()))
            return
        if config.resample_noise:
            replacement = sample_noise_target(
                x.shape, derive_seed("resample", config.noise_seed, resample_index)
            ).data
            resample_index += 1
        x_p = partial_replacement_op(x_p, schedule, Tensor(replacement))
        emit(TraceEntry(t, PRO, loss, schedule.coverage()))

    final_phase_start = config.max_steps - config.final_co_only_steps
    for t in range(config.max_steps):
        loss, grad = _loss_and_grad(model, x_p.data, ref, normalized)
        if t < config.init_steps:
            do_co(t, (loss, grad))
            do_away(t, loss)
        elif t >= final_phase_start:
            do_co(t, (loss, grad))
        elif loss >= config.epsilon:
            do_co(t, (loss, grad))
        else:
            do_away(t, loss)

    final_loss, _ = _loss_and_grad(model, x_p.data, ref, normalized)
    return ProtectionResult(
        protected=x_p.detach(),
        trace=tuple(trace),
        constraint_met_at_end=bool(final_loss <= config.epsilon),
        final_feature_loss=final_loss,
    )


def pixelfade_protect(
    x: Tensor, model: FeatureExtractor, config: ProtectConfig = ProtectConfig(), on_step: Optional[OnStep] = None
) -> ProtectionResult:
    """Protect one image by progressively fading it into normal noise.

    Runs ``config.max_steps`` iterations: an initialization stage pairing one
    constraint step with one replacement per iteration (one full mask cycle by
    default), a main stage choosing CO when the feature loss is at or above
    ``epsilon`` and PRO otherwise, and a final CO-only stage. The result
    reports whether the feature constraint held on the final image.
    """
    noise = sample_noise_target(x.shape, config.noise_seed).data
    return _fade_engine(x, model, config, noise, contrastive=False, on_step=on_step)


def noise_weight_protect(
    x: Tensor,
    model: FeatureExtractor,
    weight: float,
    config: ProtectConfig = ProtectConfig(),
    on_step: Optional[OnStep] = None,
) -> ProtectionResult:
    """Fade toward an interpolated target ``(1 - w) * x + w * noise``.

    ``weight=1.0`` reproduces :func:`pixelfade_protect` exactly (same seeds);
    smaller weights keep more of the original image in the replacement target.
    """
    if not 0.0 <= weight <= 1.0:
        raise ProtectError(f"noise weight {weight} outside [0, 1]")
    noise = sample_noise_target(x.shape, config.noise_seed).data
    target = (1.0 - weight) * x.data + weight * noise
    if config.resample_noise:
        raise ProtectError("noise_weight_protect does not support resampling")
    return _fade_engine(x, model, config, target, contrastive=False, on_step=on_step)


OBJECTIVE_TARGETS = ("other_identity", "zero", "contrastive")


def objective_variant_protect(
    x: Tensor,
    model: FeatureExtractor,
    target: str,
    config: ProtectConfig = ProtectConfig(),
    other_image: Optional[Tensor] = None,
    on_step: Optional[OnStep] = None,
) -> ProtectionResult:
    """Run the fade loop against an alternative objective target.

    ``other_identity`` replaces pixels with another image's pixels, ``zero``
    with black, and ``contrastive`` swaps replacement for gradient ascent on
    the pixel-space distance to the original (no mask coverage applies).
    """
    if target not in OBJECTIVE_TARGETS:
        raise ProtectError(f"unknown objective target {target!r}, expected one of {OBJECTIVE_TARGETS}")
    if target == "contrastive":
        return _fade_engine(x, model, config, None, contrastive=True, on_step=on_step)
    if target == "zero":
        return _fade_engine(x, model, config, np.zeros(x.shape), contrastive=False, on_step=on_step)
    if other_image is None:
        raise ProtectError("objective target 'other_identity' needs other_image")
    if other_image.shape != x.shape:
        raise T.ShapeError(f"other_image shape {other_image.shape} != image shape {x.shape}")
    return _fade_engine(x, model, config, other_image.data.copy(), contrastive=False, on_step=on_step)


# -- conventional protectors --------------------------------------------------------


def _plain_result(protected: np.ndarray) -> ProtectionResult:
    return ProtectionResult(
        protected=Tensor(protected), trace=(), constraint_met_at_end=None, final_feature_loss=None
    )


def _gaussian_kernel(radius: int) -> np.ndarray:
    sigma = radius / 2.0
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: Tensor, radius: int) -> ProtectionResult:
    """Separable Gaussian blur (sigma = radius / 2) with symmetric padding.

    Symmetric (edge-repeating) padding with a normalized kernel preserves the
    image mean exactly up to float rounding.
    """
    arr = x.data
    if arr.ndim != 3:
        raise ProtectError(f"gaussian_blur: expected (C, H, W), got {arr.shape}")
    if radius < 1:
        raise ProtectError(f"gaussian_blur: radius {radius} must be >= 1")
    _, h, w = arr.shape
    if radius >= min(h, w):
        raise ProtectError(f"gaussian_blur: radius {radius} exceeds image {h}x{w}")
    kernel = _gaussian_kernel(radius)
    out = arr
    for axis in (1, 2):
        pad_spec = [(0, 0)] * 3
        pad_spec[axis] = (radius, radius)
        padded = np.pad(out, pad_spec, mode="symmetric")
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=axis)
        out = windows @ kernel
    return _plain_result(np.clip(out, 0.0, 1.0))


def mosaic(x: Tensor, block: int) -> ProtectionResult:
    """Replace each block x block cell with its mean color (ragged edges kept)."""
    arr = x.data
    if arr.ndim != 3:
        raise ProtectError(f"mosaic: expected (C, H, W), got {arr.shape}")
    if block < 1:
        raise ProtectError(f"mosaic: block {block} must be >= 1")
    _, h, w = arr.shape
    if block > min(h, w):
        raise ProtectError(f"mosaic: block {block} exceeds image {h}x{w}")
    out = arr.copy()
    for by in range(0, h, block):
        for bx in range(0, w, block):
            cell = arr[:, by : by + block, bx : bx + block]
            out[:, by : by + block, bx : bx + block] = cell.mean(axis=(1, 2), keepdims=True)
    return _plain_result(out)


def random_perturb(x: Tensor, amplitude: float, seed: int = 0) -> ProtectionResult:
    """Add seeded Gaussian noise of the given amplitude and clamp to [0, 1]."""
    if amplitude <= 0:
        raise ProtectError(f"random_perturb: amplitude {amplitude} must be > 0")
    noise = amplitude * standard_normal_field(x.shape, seed)
    return _plain_result(np.clip(x.data + noise, 0.0, 1.0))


def joint_l1_opt(
    x: Tensor,
    model: FeatureExtractor,
    weight: float,
    steps: int = 100,
    alpha: float = 0.6,
    beta: float = 0.01,
    noise_seed: int = 0,
    grad_norm_exponent: int = 2,
    normalized_features: bool = True,
) -> ProtectionResult:
    """Jointly minimize L1 distance to noise and the embedding distance.

    Single-objective baseline: every step descends ``weight * L1(x_p, noise)
    + feature_loss`` with the same momentum-normalized update as the
    constraint step; no pixels are ever replaced outright.
    """
    if weight <= 0:
        raise ProtectError(f"joint_l1_opt: weight {weight} must be > 0")
    if steps < 1:
        raise ProtectError(f"joint_l1_opt: steps {steps} must be >= 1")
    ref = reference_embedding(model, x, normalized_features)
    noise = sample_noise_target(x.shape, noise_seed)
    x_p = x.data.copy()
    g = np.zeros(x.shape)
    trace: list[TraceEntry] = []
    for t in range(steps):
        xp = Tensor(x_p, requires_grad=True)
        feature_loss = T.sq_l2_distance(embed(model, xp, normalize=normalized_features), ref)
        total = T.add(T.scalar_mul(T.l1_distance(xp, noise), weight), feature_loss)
        T.backward(total)
        grad = xp.grad
        norm = float(np.sqrt((grad * grad).sum()))
        if norm < STALL_NORM:
            trace.append(TraceEntry(t, CO, feature_loss.item(), 0.0, stalled=True))
            continue
        g = alpha * g + grad / norm**grad_norm_exponent
        x_p = np.clip(x_p - beta * g, 0.0, 1.0)
        trace.append(TraceEntry(t, CO, feature_loss.item(), 0.0))
    final_loss, _ = _loss_and_grad(model, x_p, ref, normalized_features)
    return ProtectionResult(
        protected=Tensor(x_p), trace=tuple(trace), constraint_met_at_end=None, final_feature_loss=final_loss
    )
