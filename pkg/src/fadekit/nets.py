"""Embedding model, recovery attacker, optimizers, and their training loops.

The feature extractor is a small conv stack producing a unit-norm embedding;
it is trained once with cross entropy over identity labels and then frozen.
The recovery net is the adversary: a conv encoder/decoder with a residual
skip that learns to map protected images back to originals by minimizing L1.
Trained weights are plain leaf tensors and safe to share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .synthdata import ViewRender, derive_seed
from .tensor import Tensor
from .weights import load_weights, save_weights


class TrainingError(ValueError):
    """Degenerate or inconsistent training inputs."""


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, scale: float = 1.0) -> Tensor:
    std = scale * np.sqrt(2.0 / (in_ch * k * k))
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), requires_grad=True)


def _he_linear(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    std = np.sqrt(2.0 / n_in)
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Optimizer:
    """Plain SGD, SGD with momentum, or adaptive-moment updates.

    Kinds: ``sgd``, ``sgd_momentum``, ``adam``. State buffers always match
    their parameter shapes.
    """

    KINDS = ("sgd", "sgd_momentum", "adam")

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3,
                 momentum: float = 0.9, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}, expected one of {self.KINDS}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self._step = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params] if kind == "adam" else None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self._step += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.kind == "sgd":
                p.data -= self.lr * g
            elif self.kind == "sgd_momentum":
                self._m[i] = self.momentum * self._m[i] + g
                p.data -= self.lr * self._m[i]
            else:
                b1, b2 = self.betas
                self._m[i] = b1 * self._m[i] + (1 - b1) * g
                self._v[i] = b2 * self._v[i] + (1 - b2) * (g * g)
                m_hat = self._m[i] / (1 - b1 ** self._step)
                v_hat = self._v[i] / (1 - b2 ** self._step)
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class FeatureExtractor:
    """Three conv+relu+pool blocks and a linear head to a D-dim embedding.

    A classification head over identities exists only for training; retrieval
    and protection consume the (normalized) embedding.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, n_classes: int, embed_dim: int = 64, image_hw: tuple[int, int] = (32, 16), seed: int = 0):
        h, w = image_hw
        if h % 8 or w % 8:
            raise ValueError(f"image {h}x{w} must be divisible by 8 (three 2x poolings)")
        self.n_classes = n_classes
        self.embed_dim = embed_dim
        self.image_hw = (h, w)
        rng = np.random.default_rng(seed)
        c1, c2, c3 = self.CHANNELS
        self.conv1_w = _he_conv(rng, c1, 3, 3)
        self.conv1_b = _zeros(c1)
        self.conv2_w = _he_conv(rng, c2, c1, 3)
        self.conv2_b = _zeros(c2)
        self.conv3_w = _he_conv(rng, c3, c2, 3)
        self.conv3_b = _zeros(c3)
        flat = c3 * (h // 8) * (w // 8)
        self.embed_w = _he_linear(rng, flat, embed_dim)
        self.embed_b = _zeros(embed_dim)
        self.cls_w = _he_linear(rng, embed_dim, n_classes)
        self.cls_b = _zeros(n_classes)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
            "conv3_w": self.conv3_w, "conv3_b": self.conv3_b,
            "embed_w": self.embed_w, "embed_b": self.embed_b,
            "cls_w": self.cls_w, "cls_b": self.cls_b,
        }

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False
            p.zero_grad()

    def features(self, batch: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, D) pre-normalization features.

        The head is rectified, so features are non-negative: embeddings live
        in the positive orthant and cosine similarity never goes negative,
        matching the geometry of pooled-relu backbone features.
        """
        h, w = self.image_hw
        if batch.shape[1:] != (3, h, w):
            raise T.ShapeError(f"features: expected (B, 3, {h}, {w}), got {batch.shape}")
        z = T.avg_pool2d(T.relu(T.conv2d(batch, self.conv1_w, self.conv1_b, padding=1)), 2)
        z = T.avg_pool2d(T.relu(T.conv2d(z, self.conv2_w, self.conv2_b, padding=1)), 2)
        z = T.avg_pool2d(T.relu(T.conv2d(z, self.conv3_w, self.conv3_b, padding=1)), 2)
        return T.relu(T.add_bias(z.flatten() @ self.embed_w, self.embed_b))

    def logits(self, batch: Tensor) -> Tensor:
        return T.add_bias(self.features(batch) @ self.cls_w, self.cls_b)

    def save(self, path) -> None:
        meta = Tensor(np.array([self.n_classes, self.embed_dim, *self.image_hw], dtype=np.float64))
        save_weights(path, {"meta": meta, **self.named_params()})

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        blobs = load_weights(path)
        n_classes, embed_dim, h, w = (int(v) for v in blobs.pop("meta").data)
        model = cls(n_classes, embed_dim, (h, w))
        for name, value in blobs.items():
            param = model.named_params()[name]
            if param.shape != value.shape:
                raise ValueError(f"weight {name!r} shape {value.shape} != expected {param.shape}")
            param.data = value.data.copy()
        model.freeze()
        return model


def embed(model: FeatureExtractor, image: Tensor, normalize: bool = True) -> Tensor:
    """Embedding of a single (3, H, W) image; unit L2 norm when normalized."""
    h, w = model.image_hw
    if image.shape != (3, h, w):
        raise T.ShapeError(f"embed: expected (3, {h}, {w}), got {image.shape}")
    feat = model.features(image.reshape((1, 3, h, w))).reshape((model.embed_dim,))
    if normalize:
        feat = T.div_scalar(feat, T.l2_norm(feat))
    return feat


def embed_batch(model: FeatureExtractor, images: np.ndarray, normalize: bool = True) -> np.ndarray:
    """No-graph embedding of a stack of images, row-normalized by default."""
    feats = model.features(Tensor(images)).data
    if normalize:
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    return feats


def _stack(renders: Sequence[ViewRender]) -> np.ndarray:
    return np.stack([r.image.data for r in renders])


def train_extractor(
    dataset: Sequence[ViewRender],
    epochs: int = 90,
    optimizer: str = "adam",
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 32,
    embed_dim: int = 64,
    holdout_views: int = 1,
    aug_brightness: float = 0.15,
    aug_shift: int = 2,
    aug_noise_frac: float = 0.4,
) -> tuple[FeatureExtractor, list[dict]]:
    """Train the embedding model on identity classification.

    The last ``holdout_views`` camera(s) of every identity are held out for
    accuracy reporting. Training batches are augmented with random global
    brightness shifts, circular translations, and random-erasing-style
    speckle (a random fraction of pixels replaced with noise) so the
    embedding tolerates occlusion and scattered corruption. The speckle is a
    curriculum: off for the first half of training, then its ceiling ramps
    linearly up to ``aug_noise_frac``. Returns the trained (frozen) model
    and a per-epoch log of records ``{"epoch", "loss", "accuracy"}``.
    """
    ids = sorted({r.identity_id for r in dataset})
    if len(ids) < 2:
        raise TrainingError(f"need at least 2 identities to train, got {len(ids)}")
    per_id: dict[int, list[ViewRender]] = {i: [] for i in ids}
    for r in dataset:
        per_id[r.identity_id].append(r)
    if min(len(v) for v in per_id.values()) < 2:
        raise TrainingError("every identity needs at least 2 views to train")

    label_of = {identity: k for k, identity in enumerate(ids)}
    train_set: list[ViewRender] = []
    heldout: list[ViewRender] = []
    for identity in ids:
        views = sorted(per_id[identity], key=lambda r: r.camera_id)
        heldout.extend(views[-holdout_views:])
        train_set.extend(views[:-holdout_views])

    hw = train_set[0].image.shape[1:]
    model = FeatureExtractor(len(ids), embed_dim=embed_dim, image_hw=hw, seed=derive_seed("extractor-init", seed))
    opt = Optimizer(model.params(), kind=optimizer, lr=lr)
    rng = np.random.default_rng(derive_seed("extractor-batches", seed))

    x_train = _stack(train_set)
    y_train = np.array([label_of[r.identity_id] for r in train_set])
    x_held = _stack(heldout)
    y_held = np.array([label_of[r.identity_id] for r in heldout])
    log: list[dict] = []
    warmup = epochs // 2
    for epoch in range(epochs):
        if epoch < warmup or not aug_noise_frac:
            speckle_ceiling = 0.0
        else:
            speckle_ceiling = aug_noise_frac * (epoch - warmup) / max(1, epochs - warmup)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            xb = x_train[sel].copy()
            if aug_brightness:
                shifts = rng.uniform(-aug_brightness, aug_brightness, size=(len(sel), 1, 1, 1))
                xb = np.clip(xb + shifts, 0.0, 1.0)
            if aug_shift:
                for b in range(len(sel)):
                    dy, dx = rng.integers(-aug_shift, aug_shift + 1, size=2)
                    xb[b] = np.roll(np.roll(xb[b], dy, axis=1), dx, axis=2)
            if speckle_ceiling > 0:
                for b in range(len(sel)):
                    frac = rng.uniform(0.0, speckle_ceiling)
                    speckle = rng.random(xb.shape[2:]) < frac
                    fill = np.clip(0.5 + 0.25 * rng.standard_normal((3, int(speckle.sum()))), 0.0, 1.0)
                    xb[b][:, speckle] = fill
            loss = T.cross_entropy(model.logits(Tensor(xb)), y_train[sel])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        logits = model.logits(Tensor(x_held)).data
        accuracy = float((logits.argmax(axis=1) == y_held).mean())
        log.append({"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": accuracy})
    model.freeze()
    return model, log


class RecoveryNet:
    """Conv encoder (2 downsampling blocks) / decoder (2 upsampling blocks).

    Predicts a correction on top of its input (residual skip) and clamps the
    result to [0, 1]; output shape always equals input shape.
    """

    def __init__(self, image_hw: tuple[int, int] = (32, 16), seed: int = 0):
        h, w = image_hw
        if h % 4 or w % 4:
            raise ValueError(f"image {h}x{w} must be divisible by 4 (two 2x poolings)")
        self.image_hw = (h, w)
        rng = np.random.default_rng(seed)
        self.enc1_w = _he_conv(rng, 16, 3, 3)
        self.enc1_b = _zeros(16)
        self.enc2_w = _he_conv(rng, 32, 16, 3)
        self.enc2_b = _zeros(32)
        self.dec1_w = _he_conv(rng, 16, 32, 3)
        self.dec1_b = _zeros(16)
        self.dec2_w = _he_conv(rng, 16, 16, 3)
        self.dec2_b = _zeros(16)
        self.head_w = _he_conv(rng, 3, 16, 3)
        self.head_b = _zeros(3)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "enc1_w": self.enc1_w, "enc1_b": self.enc1_b,
            "enc2_w": self.enc2_w, "enc2_b": self.enc2_b,
            "dec1_w": self.dec1_w, "dec1_b": self.dec1_b,
            "dec2_w": self.dec2_w, "dec2_b": self.dec2_b,
            "head_w": self.head_w, "head_b": self.head_b,
        }

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False
            p.zero_grad()

    def forward(self, batch: Tensor) -> Tensor:
        h, w = self.image_hw
        if batch.shape[1:] != (3, h, w):
            raise T.ShapeError(f"recovery: expected (B, 3, {h}, {w}), got {batch.shape}")
        z = T.avg_pool2d(T.relu(T.conv2d(batch, self.enc1_w, self.enc1_b, padding=1)), 2)
        z = T.avg_pool2d(T.relu(T.conv2d(z, self.enc2_w, self.enc2_b, padding=1)), 2)
        z = T.relu(T.conv2d(T.upsample2x(z), self.dec1_w, self.dec1_b, padding=1))
        z = T.relu(T.conv2d(T.upsample2x(z), self.dec2_w, self.dec2_b, padding=1))
        correction = T.conv2d(z, self.head_w, self.head_b, padding=1)
        return T.clamp01(batch + correction)

    def save(self, path) -> None:
        meta = Tensor(np.array(self.image_hw, dtype=np.float64))
        save_weights(path, {"meta": meta, **self.named_params()})

    @classmethod
    def load(cls, path) -> "RecoveryNet":
        blobs = load_weights(path)
        h, w = (int(v) for v in blobs.pop("meta").data)
        net = cls((h, w))
        for name, value in blobs.items():
            param = net.named_params()[name]
            if param.shape != value.shape:
                raise ValueError(f"weight {name!r} shape {value.shape} != expected {param.shape}")
            param.data = value.data.copy()
        net.freeze()
        return net


def train_recovery(
    pairs: Sequence[tuple[Tensor, Tensor]],
    epochs: int = 40,
    optimizer: str = "adam",
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
) -> tuple[RecoveryNet, list[dict]]:
    """Fit a RecoveryNet on (protected, original) pairs by mean L1 loss."""
    if len(pairs) == 0:
        raise TrainingError("no training pairs")
    shape = pairs[0][0].shape
    for protected, original in pairs:
        if protected.shape != shape or original.shape != shape:
            raise TrainingError(f"pair shapes disagree: {protected.shape}/{original.shape} vs {shape}")
    net = RecoveryNet(image_hw=shape[1:], seed=derive_seed("recovery-init", seed))
    opt = Optimizer(net.params(), kind=optimizer, lr=lr)
    rng = np.random.default_rng(derive_seed("recovery-batches", seed))

    protected_all = np.stack([p.data for p, _ in pairs])
    original_all = np.stack([o.data for _, o in pairs])
    log: list[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            out = net.forward(Tensor(protected_all[sel]))
            loss = T.l1_distance(out, Tensor(original_all[sel]))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        log.append({"epoch": epoch, "loss": float(np.mean(losses))})
    net.freeze()
    return net, log


def recover(net: RecoveryNet, protected: Tensor) -> Tensor:
    """Apply the recovery net to one (3, H, W) image; output stays in [0, 1]."""
    h, w = net.image_hw
    if protected.shape != (3, h, w):
        raise T.ShapeError(f"recover: expected (3, {h}, {w}), got {protected.shape}")
    return net.forward(protected.reshape((1, 3, h, w))).reshape((3, h, w)).detach()
