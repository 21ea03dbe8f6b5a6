"""Classifier oracle contract plus a self-contained numpy convnet.

An oracle exposes raw logits and, when it is differentiable, the margin
loss with its input gradient. The margin loss on raw logits is
max_{j != y} z_j - z_y: positive exactly when the input is
misclassified. The built-in ToyClassifier is a fixed small convnet
(3x3 conv, 8 filters, ReLU, 4x4 average pool, linear head) on 64x64
RGB, trained and differentiated with plain numpy so every gradient in
the pipeline is checkable.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INPUT_HW = (64, 64)
N_FILTERS = 8
KERNEL = 3
POOL = 4
FEATURES = (INPUT_HW[0] // POOL) * (INPUT_HW[1] // POOL) * N_FILTERS

CHECKPOINT_MAGIC = b"NCFM"
CHECKPOINT_VERSION = 1
ARCH_TOY_CONV = 1


class ShapeMismatch(ValueError):
    """Input dimensions do not match the oracle's input spec."""


class NoGradientSupport(RuntimeError):
    """Oracle is query-only; gradients are unavailable."""


class ClassCountMismatch(ValueError):
    """Ensemble members disagree on the number of classes."""


def margin_loss_and_logit_grad(logits, label):
    """Margin loss on raw logits and its gradient d(loss)/d(logits).

    loss = max_{j != label} z_j - z_label, rival ties broken toward the
    smallest index. Positive iff argmax != label.
    """
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[-1]
    if n < 2:
        raise ValueError("need at least two classes")
    if not 0 <= int(label) < n:
        raise ValueError(f"label {label} out of range")
    masked = z.copy()
    masked[int(label)] = -np.inf
    rival = int(np.argmax(masked))
    dz = np.zeros(n)
    dz[rival] += 1.0
    dz[int(label)] -= 1.0
    return float(z[rival] - z[int(label)]), dz


def _pad_input(imgs):
    b, h, w, c = imgs.shape
    padded = np.zeros((b, h + 2, w + 2, c))
    padded[:, 1:-1, 1:-1] = imgs
    return padded


def _conv_forward(padded, conv_w, conv_b):
    """Same conv as one GEMM per kernel offset; returns (B*H*W, F) pre-acts."""
    b, hp, wp, c = padded.shape
    h, w = hp - 2, wp - 2
    pre = np.tile(conv_b, (b * h * w, 1))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            seg = padded[:, di : di + h, dj : dj + w, :].reshape(b * h * w, c)
            pre += seg @ conv_w[:, di, dj, :].T
    return pre


def _conv_input_grad(dpre, conv_w, b, h, w):
    """Adjoint of _conv_forward with respect to the unpadded input."""
    dpad = np.zeros((b, h + 2, w + 2, conv_w.shape[-1]))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            dpad[:, di : di + h, dj : dj + w, :] += (dpre @ conv_w[:, di, dj, :]).reshape(
                b, h, w, -1
            )
    return dpad[:, 1 : h + 1, 1 : w + 1, :]


def _conv_weight_grad(dpre, padded):
    b, hp, wp, c = padded.shape
    h, w = hp - 2, wp - 2
    dw = np.empty((dpre.shape[1], KERNEL, KERNEL, c))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            seg = padded[:, di : di + h, dj : dj + w, :].reshape(b * h * w, c)
            dw[:, di, dj, :] = dpre.T @ seg
    return dw


def _pool_flat(act, b, h, w):
    grid = act.reshape(b, h // POOL, POOL, w // POOL, POOL, N_FILTERS)
    pooled = grid.sum(axis=2).sum(axis=3) * act.dtype.type(1.0 / (POOL * POOL))
    return pooled.reshape(b, FEATURES)


@dataclass
class ToyClassifier:
    """Fixed-architecture numpy convnet; parameters are float64 in memory."""

    conv_w: np.ndarray  # (N_FILTERS, KERNEL, KERNEL, 3)
    conv_b: np.ndarray  # (N_FILTERS,)
    fc_w: np.ndarray  # (C, FEATURES)
    fc_b: np.ndarray  # (C,)
    name: str = "toy"
    meta: dict = field(default_factory=dict)

    input_hw = INPUT_HW
    supports_gradient = True

    @property
    def num_classes(self) -> int:
        return self.fc_w.shape[0]

    def _check(self, imgs):
        if imgs.ndim != 4 or imgs.shape[1:] != (*INPUT_HW, 3):
            raise ShapeMismatch(f"expected (B, {INPUT_HW[0]}, {INPUT_HW[1]}, 3), got {imgs.shape}")

    def _forward(self, imgs):
        self._check(imgs)
        b, h, w = imgs.shape[0], *INPUT_HW
        padded = _pad_input(imgs)
        pre = _conv_forward(padded, self.conv_w, self.conv_b)
        act = np.maximum(pre, 0.0)
        flat = _pool_flat(act, b, h, w)
        logits = flat @ self.fc_w.T + self.fc_b
        return logits, (padded, pre, flat, b, h, w)

    def _dpre(self, cache, dlogits):
        padded, pre, flat, b, h, w = cache
        dflat = dlogits @ self.fc_w
        dgrid = dflat.reshape(b, h // POOL, 1, w // POOL, 1, N_FILTERS) / (POOL * POOL)
        dact = np.broadcast_to(dgrid, (b, h // POOL, POOL, w // POOL, POOL, N_FILTERS))
        return dact.reshape(b * h * w, N_FILTERS) * (pre > 0.0)

    def _input_grad(self, cache, dlogits):
        b, h, w = cache[3], cache[4], cache[5]
        return _conv_input_grad(self._dpre(cache, dlogits), self.conv_w, b, h, w)

    def _param_grads(self, cache, dlogits):
        padded, pre, flat = cache[0], cache[1], cache[2]
        dpre = self._dpre(cache, dlogits)
        return {
            "conv_w": _conv_weight_grad(dpre, padded),
            "conv_b": dpre.sum(axis=0),
            "fc_w": dlogits.T @ flat,
            "fc_b": dlogits.sum(axis=0),
        }

    def logits(self, img) -> np.ndarray:
        """Raw logits (C,) for one (64, 64, 3) RGB image."""
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {img.shape}")
        out, _ = self._forward(img[None])
        return out[0]

    def logits_batch(self, imgs) -> np.ndarray:
        out, _ = self._forward(np.asarray(imgs, dtype=np.float64))
        return out

    def score_logits_batch(self, imgs) -> np.ndarray:
        """Single-precision logits for bulk candidate scoring.

        Same architecture evaluated in float32; use logits_batch wherever
        double-precision values matter.
        """
        imgs = np.asarray(imgs, dtype=np.float32)
        self._check(imgs)
        b, h, w = imgs.shape[0], *INPUT_HW
        padded = np.zeros((b, h + 2, w + 2, 3), dtype=np.float32)
        padded[:, 1:-1, 1:-1] = imgs
        pre = _conv_forward(
            padded, self.conv_w.astype(np.float32), self.conv_b.astype(np.float32)
        )
        np.maximum(pre, np.float32(0.0), out=pre)
        flat = _pool_flat(pre, b, h, w)
        return flat @ self.fc_w.astype(np.float32).T + self.fc_b.astype(np.float32)

    def margin_losses_and_input_gradients(self, imgs, label):
        """Margin losses (B,) and d(loss)/d(input) (B, 64, 64, 3) in one
        shared forward/backward pass."""
        imgs = np.asarray(imgs, dtype=np.float64)
        z, cache = self._forward(imgs)
        losses = np.empty(len(z))
        dz = np.zeros_like(z)
        for k in range(len(z)):
            losses[k], dz[k] = margin_loss_and_logit_grad(z[k], label)
        return losses, self._input_grad(cache, dz)

    def input_gradient(self, img, dlogits) -> np.ndarray:
        """Backprop an arbitrary logit cotangent (C,) to the input."""
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {img.shape}")
        _, cache = self._forward(img[None])
        return self._input_grad(cache, np.asarray(dlogits, np.float64)[None])[0]

    def loss_and_input_gradient(self, img, label):
        """Margin loss and d(loss)/d(input), shape (64, 64, 3)."""
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {img.shape}")
        z, cache = self._forward(img[None])
        loss, dz = margin_loss_and_logit_grad(z[0], label)
        return loss, self._input_grad(cache, dz[None])[0]


class BlackBoxOracle:
    """Query-only wrapper: logits pass through, gradients are refused."""

    supports_gradient = False

    def __init__(self, inner, name=None):
        self._inner = inner
        self.name = name or f"blackbox({inner.name})"

    @property
    def num_classes(self):
        return self._inner.num_classes

    @property
    def input_hw(self):
        return self._inner.input_hw

    def logits(self, img):
        return self._inner.logits(img)

    def logits_batch(self, imgs):
        return self._inner.logits_batch(imgs)

    def score_logits_batch(self, imgs):
        return self._inner.score_logits_batch(imgs)

    def input_gradient(self, img, dlogits):
        raise NoGradientSupport(self.name)

    def loss_and_input_gradient(self, img, label):
        raise NoGradientSupport(self.name)

    def margin_losses_and_input_gradients(self, imgs, label):
        raise NoGradientSupport(self.name)


class EnsembleOracle:
    """Logit-averaging ensemble; differentiable iff every member is."""

    def __init__(self, members, name="ensemble"):
        members = list(members)
        if not members:
            raise ValueError("empty ensemble")
        counts = {m.num_classes for m in members}
        if len(counts) != 1:
            raise ClassCountMismatch(f"member class counts differ: {sorted(counts)}")
        sizes = {m.input_hw for m in members}
        if len(sizes) != 1:
            raise ShapeMismatch(f"member input sizes differ: {sorted(sizes)}")
        self.members = members
        self.name = name

    @property
    def num_classes(self):
        return self.members[0].num_classes

    @property
    def input_hw(self):
        return self.members[0].input_hw

    @property
    def supports_gradient(self):
        return all(m.supports_gradient for m in self.members)

    def logits(self, img):
        stack = np.stack([m.logits(img) for m in self.members])
        return stack.mean(axis=0)

    def logits_batch(self, imgs):
        stack = np.stack([m.logits_batch(imgs) for m in self.members])
        return stack.mean(axis=0)

    def score_logits_batch(self, imgs):
        stack = np.stack([m.score_logits_batch(imgs) for m in self.members])
        return stack.mean(axis=0)

    def input_gradient(self, img, dlogits):
        if not self.supports_gradient:
            raise NoGradientSupport(self.name)
        grads = np.stack([m.input_gradient(img, dlogits) for m in self.members])
        return grads.mean(axis=0)

    def loss_and_input_gradient(self, img, label):
        """Margin loss of the averaged logits; gradient is the mean of
        member gradients of that same rival-vs-label logit difference."""
        if not self.supports_gradient:
            raise NoGradientSupport(self.name)
        loss, dz = margin_loss_and_logit_grad(self.logits(img), label)
        return loss, self.input_gradient(img, dz)

    def margin_losses_and_input_gradients(self, imgs, label):
        """Batched analogue of loss_and_input_gradient: every member
        backpropagates the rival-vs-label cotangent of the mean logits."""
        if not self.supports_gradient:
            raise NoGradientSupport(self.name)
        imgs = np.asarray(imgs, dtype=np.float64)
        fast = all(hasattr(m, "_forward") for m in self.members)
        if fast:
            outs = [m._forward(imgs) for m in self.members]
            mean_z = np.mean([z for z, _ in outs], axis=0)
        else:
            mean_z = self.logits_batch(imgs)
        losses = np.empty(len(mean_z))
        dz = np.zeros_like(mean_z)
        for k in range(len(mean_z)):
            losses[k], dz[k] = margin_loss_and_logit_grad(mean_z[k], label)
        if fast:
            grads = [m._input_grad(cache, dz) for m, (_, cache) in zip(self.members, outs)]
            return losses, np.mean(grads, axis=0)
        grads = np.stack([self.input_gradient(img, d) for img, d in zip(imgs, dz)])
        return losses, grads


def train_toy(images, labels, seed=0, epochs=30, lr=0.01, momentum=0.9,
              batch_size=32, name=None) -> ToyClassifier:
    """Train the toy convnet with seeded momentum SGD (softmax loss).

    Batching is a function of the sample multiset and the seed alone:
    samples are first put in a canonical order (label, content digest),
    then shuffled per epoch by a seed-derived permutation, so callers
    permuting their arrays get bit-identical results. Stops early once
    an epoch reaches perfect train accuracy.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[1:] != (*INPUT_HW, 3):
        raise ShapeMismatch(f"expected (N, {INPUT_HW[0]}, {INPUT_HW[1]}, 3), got {images.shape}")
    n = images.shape[0]
    num_classes = int(labels.max()) + 1

    digests = [hashlib.sha256(images[i].tobytes()).digest() for i in range(n)]
    order = sorted(range(n), key=lambda i: (int(labels[i]), digests[i]))
    images, labels = images[order], labels[order]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = ToyClassifier(
        conv_w=rng.normal(0.0, np.sqrt(2.0 / 27.0), (N_FILTERS, KERNEL, KERNEL, 3)),
        conv_b=np.zeros(N_FILTERS),
        fc_w=rng.normal(0.0, np.sqrt(2.0 / FEATURES), (num_classes, FEATURES)),
        fc_b=np.zeros(num_classes),
        name=name or f"toy-c{num_classes}-s{seed}",
    )
    velocity = {k: np.zeros_like(getattr(model, k)) for k in ("conv_w", "conv_b", "fc_w", "fc_b")}

    accuracy = 0.0
    epochs_run = 0
    for epoch in range(int(epochs)):
        perm = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)
        for start in range(0, n, batch_size):
            sel = perm[start : start + batch_size]
            batch, y = images[sel], labels[sel]
            z, cache = model._forward(batch)
            shifted = z - z.max(axis=1, keepdims=True)
            prob = np.exp(shifted)
            prob /= prob.sum(axis=1, keepdims=True)
            dz = prob
            dz[np.arange(sel.size), y] -= 1.0
            dz /= sel.size
            grads = model._param_grads(cache, dz)
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] - lr * g
                setattr(model, k, getattr(model, k) + velocity[k])
        pred = model.logits_batch(images).argmax(axis=1)
        accuracy = float((pred == labels).mean())
        epochs_run = epoch + 1
        if accuracy == 1.0:
            break

    model.meta = {"seed": int(seed), "epochs_run": epochs_run, "train_accuracy": accuracy}
    return model


def save_checkpoint(model: ToyClassifier, path) -> None:
    """magic | version | num_classes | arch id | float32 LE tensors | crc32."""
    header = CHECKPOINT_MAGIC + struct.pack(
        "<III", CHECKPOINT_VERSION, model.num_classes, ARCH_TOY_CONV
    )
    payload = b"".join(
        np.ascontiguousarray(t, dtype="<f4").tobytes()
        for t in (model.conv_w, model.conv_b, model.fc_w, model.fc_b)
    )
    body = header + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> ToyClassifier:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: checksum mismatch")
    version, num_classes, arch = struct.unpack("<III", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if arch != ARCH_TOY_CONV:
        raise ValueError(f"{path}: unknown architecture id {arch}")
    shapes = [
        (N_FILTERS, KERNEL, KERNEL, 3),
        (N_FILTERS,),
        (num_classes, FEATURES),
        (num_classes,),
    ]
    tensors, off = [], 16
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        tensors.append(arr.astype(np.float64).reshape(shape))
        off += 4 * count
    if off != len(blob) - 4:
        raise ValueError(f"{path}: size mismatch")
    return ToyClassifier(*tensors, name=Path(path).stem)


def _axis_weights(n_in, n_out):
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac


def resize_bilinear(img, out_h, out_w) -> np.ndarray:
    """Half-pixel bilinear resize of (H, W, C); a linear map of the input."""
    img = np.asarray(img, dtype=np.float64)
    r0, r1, rf = _axis_weights(img.shape[0], out_h)
    rows = img[r0] * (1.0 - rf)[:, None, None] + img[r1] * rf[:, None, None]
    c0, c1, cf = _axis_weights(img.shape[1], out_w)
    return rows[:, c0] * (1.0 - cf)[None, :, None] + rows[:, c1] * cf[None, :, None]


def resize_bilinear_adjoint(grad, in_h, in_w) -> np.ndarray:
    """Transpose of resize_bilinear: fold an output-space gradient back."""
    grad = np.asarray(grad, dtype=np.float64)
    out_h, out_w = grad.shape[:2]
    c0, c1, cf = _axis_weights(in_w, out_w)
    mid = np.zeros((out_h, in_w, grad.shape[2]))
    np.add.at(mid, (slice(None), c0), grad * (1.0 - cf)[None, :, None])
    np.add.at(mid, (slice(None), c1), grad * cf[None, :, None])
    r0, r1, rf = _axis_weights(in_h, out_h)
    out = np.zeros((in_h, in_w, grad.shape[2]))
    np.add.at(out, r0, mid * (1.0 - rf)[:, None, None])
    np.add.at(out, r1, mid * rf[:, None, None])
    return out


def fit_to_oracle(oracle, rgb) -> np.ndarray:
    """Resample an RGB image to the oracle's input resolution if needed."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[:2] == tuple(oracle.input_hw):
        return rgb
    return resize_bilinear(rgb, *oracle.input_hw)


def oracle_logits(oracle, rgb) -> np.ndarray:
    return oracle.logits(fit_to_oracle(oracle, rgb))


def oracle_logits_batch(oracle, rgbs) -> np.ndarray:
    rgbs = np.asarray(rgbs, dtype=np.float64)
    if rgbs.shape[1:3] == tuple(oracle.input_hw):
        return oracle.logits_batch(rgbs)
    fitted = np.stack([resize_bilinear(im, *oracle.input_hw) for im in rgbs])
    return oracle.logits_batch(fitted)


def oracle_score_logits_batch(oracle, rgbs) -> np.ndarray:
    """score_logits_batch when the oracle offers it, logits_batch otherwise."""
    rgbs = np.asarray(rgbs)
    scorer = getattr(oracle, "score_logits_batch", None)
    if scorer is None:
        return oracle_logits_batch(oracle, rgbs)
    if rgbs.shape[1:3] == tuple(oracle.input_hw):
        return scorer(rgbs)
    fitted = np.stack([resize_bilinear(im, *oracle.input_hw) for im in rgbs])
    return scorer(fitted)


def oracle_losses_and_rgb_gradients(oracle, rgbs, label):
    """Batched margin losses and gradients at the images' own resolution.

    When the oracle runs at a different resolution the bilinear
    resample's adjoint folds each gradient back to image space.
    """
    rgbs = np.asarray(rgbs, dtype=np.float64)
    if rgbs.shape[1:3] == tuple(oracle.input_hw):
        return oracle.margin_losses_and_input_gradients(rgbs, label)
    small = np.stack([resize_bilinear(im, *oracle.input_hw) for im in rgbs])
    losses, grads = oracle.margin_losses_and_input_gradients(small, label)
    folded = np.stack(
        [resize_bilinear_adjoint(g, rgbs.shape[1], rgbs.shape[2]) for g in grads]
    )
    return losses, folded


def oracle_loss_and_rgb_gradient(oracle, rgb, label):
    """Margin loss and gradient at the image's own resolution.

    When the oracle runs at a different resolution the bilinear
    resample's adjoint folds the gradient back to image space.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    losses, grads = oracle_losses_and_rgb_gradients(oracle, rgb[None], label)
    return float(losses[0]), grads[0]
