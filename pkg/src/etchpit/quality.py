"""Binary quality gate: one clean etch pit (class 1) vs overlap/artifact (0).

Patches are resampled to 64x64 and expanded into a three-channel stack
(gray, log-magnitude FFT spectrum, Haar wavelet energy map). A logistic
model over pooled per-cell statistics replaces the full CNN at desk
scale; externally produced per-patch scores can be ingested and take
precedence over the model.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import cv2
import numpy as np

from .imgproc import GrayImage, Patch

__all__ = [
    "PATCH_SIZE",
    "ChannelStack",
    "QualityModel",
    "LabeledPatchSet",
    "resample_patch",
    "build_channels",
    "haar_level1",
    "featurize_channels",
    "train_quality",
    "predict_quality",
    "crossval",
    "augment_patches",
    "loss_and_grad",
    "load_scores_csv",
    "FEATURE_DIM",
    "FEATURE_LAYOUT",
]

PATCH_SIZE = 64
_POOL_GRID = 4
FEATURE_DIM = 3 * _POOL_GRID * _POOL_GRID * 2  # 3 channels x 16 cells x (mean, std)

# Pooled-feature order: channels (gray, fft, wavelet) outermost, then the
# 4x4 cells row-major, then (mean, std). Hashed into saved models so a
# stale model cannot silently score differently laid-out features.
FEATURE_LAYOUT = "gray,fft,wavelet;grid4x4,row-major;mean,std;v1"


@dataclass
class ChannelStack:
    """Three 64x64 channels, all in [0, 1]."""

    gray: np.ndarray
    fft_mag: np.ndarray
    wavelet: np.ndarray

    def __post_init__(self):
        for name in ("gray", "fft_mag", "wavelet"):
            ch = getattr(self, name)
            if ch.shape != (PATCH_SIZE, PATCH_SIZE):
                raise ValueError(f"{name} channel must be {PATCH_SIZE}x{PATCH_SIZE}")
            if ch.min() < 0.0 or ch.max() > 1.0:
                raise ValueError(f"{name} channel must lie in [0, 1]")


def resample_patch(patch: Patch | GrayImage | np.ndarray) -> np.ndarray:
    """Bilinear resample of a patch to the 64x64 working size."""
    if isinstance(patch, Patch):
        data = patch.image.data
    elif isinstance(patch, GrayImage):
        data = patch.data
    else:
        data = np.asarray(patch, dtype=np.float64)
    if data.shape == (PATCH_SIZE, PATCH_SIZE):
        return data.astype(np.float64)
    out = cv2.resize(data, (PATCH_SIZE, PATCH_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def haar_level1(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-level 2-D Haar transform (orthonormal): LL, LH, HL, HH
    subbands, each half the input size. Input sides must be even."""
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise ValueError("haar_level1 requires even side lengths")
    a = img[0::2, 0::2]
    b = img[0::2, 1::2]
    c = img[1::2, 0::2]
    d = img[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _norm01(x: np.ndarray) -> np.ndarray:
    top = x.max()
    return x / top if top > 0 else np.zeros_like(x)


def build_channels(patch: Patch | GrayImage | np.ndarray) -> ChannelStack:
    """Deterministic three-channel stack of a 64x64 patch.

    fft_mag is the DC-centered log1p magnitude spectrum scaled to [0, 1];
    the wavelet channel averages the nearest-upsampled normalized |LL|
    map and the normalized detail-energy map sqrt(LH^2+HL^2+HH^2).
    """
    gray = resample_patch(patch)

    spectrum = np.fft.fftshift(np.fft.fft2(gray))
    fft_mag = _norm01(np.log1p(np.abs(spectrum)))

    ll, lh, hl, hh = haar_level1(gray)
    detail = np.sqrt(lh**2 + hl**2 + hh**2)
    wavelet = 0.5 * _norm01(_upsample2(np.abs(ll))) + 0.5 * _norm01(_upsample2(detail))

    return ChannelStack(gray=gray, fft_mag=fft_mag, wavelet=wavelet)


def featurize_channels(stack: ChannelStack) -> np.ndarray:
    """Pooled statistics on a 4x4 grid: per cell and channel the mean and
    standard deviation, concatenated in FEATURE_LAYOUT order (96 values).
    """
    cell = PATCH_SIZE // _POOL_GRID
    feats = np.empty(FEATURE_DIM)
    i = 0
    for ch in (stack.gray, stack.fft_mag, stack.wavelet):
        blocks = ch.reshape(_POOL_GRID, cell, _POOL_GRID, cell).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(_POOL_GRID * _POOL_GRID, cell * cell)
        feats[i : i + 32 : 2] = blocks.mean(axis=1)
        feats[i + 1 : i + 32 : 2] = blocks.std(axis=1)
        i += 32
    return feats


@dataclass
class QualityModel:
    weights: np.ndarray
    bias: float
    metadata: dict = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "metadata": self.metadata,
            "feature_layout_sha256": hashlib.sha256(FEATURE_LAYOUT.encode()).hexdigest(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "QualityModel":
        with open(path) as fh:
            payload = json.load(fh)
        expected = hashlib.sha256(FEATURE_LAYOUT.encode()).hexdigest()
        if payload.get("feature_layout_sha256") != expected:
            raise ValueError("model was trained against a different feature layout")
        return cls(
            weights=np.asarray(payload["weights"], dtype=np.float64),
            bias=float(payload["bias"]),
            metadata=payload.get("metadata", {}),
        )


@dataclass
class LabeledPatchSet:
    """64x64 patches with binary labels; ``augmented`` flags mark records
    produced by augmentation rather than extraction."""

    patches: np.ndarray  # (n, 64, 64)
    labels: np.ndarray  # (n,) in {0, 1}
    augmented: np.ndarray | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.shape[0] != self.labels.shape[0]:
            raise ValueError("patch/label count mismatch")
        if self.augmented is None:
            self.augmented = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_balance_ok(self, tolerance: float = 0.05) -> bool:
        n1 = int(self.labels.sum())
        n0 = len(self) - n1
        if min(n0, n1) == 0:
            return False
        return abs(n0 - n1) / len(self) <= tolerance


def augment_patches(
    data: LabeledPatchSet, rng: np.random.Generator, noise_sigma: float = 0.02
) -> LabeledPatchSet:
    """Label-preserving augmentation: rotations by 90/180/270 degrees and
    additive Gaussian noise (sigma 0.02, clipped to [0, 1])."""
    patches = [data.patches]
    for k in (1, 2, 3):
        patches.append(np.rot90(data.patches, k=k, axes=(1, 2)))
    noisy = np.clip(
        data.patches + rng.normal(0.0, noise_sigma, size=data.patches.shape), 0.0, 1.0
    )
    patches.append(noisy)
    n_copies = len(patches)
    labels = np.tile(data.labels, n_copies)
    augmented = np.concatenate(
        [np.zeros(len(data), dtype=bool)] + [np.ones(len(data), dtype=bool)] * (n_copies - 1)
    )
    return LabeledPatchSet(np.concatenate(patches), labels, augmented)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean cross-entropy of the logistic model and its analytic gradient
    (d/dw, d/db). Numerically stable via log-sum-exp."""
    z = X @ w + b
    # log(1 + exp(z)) - y*z, stable form
    loss = float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
    p = _sigmoid(z)
    resid = p - y
    grad_w = X.T @ resid / len(y)
    grad_b = float(resid.mean())
    return loss, grad_w, grad_b


def _featurize_set(patches: np.ndarray) -> np.ndarray:
    return np.stack([featurize_channels(build_channels(p)) for p in patches])


def train_quality(
    data: LabeledPatchSet,
    lr: float = 0.5,
    epochs: int = 300,
    seed: int = 0,
    features: np.ndarray | None = None,
) -> tuple[QualityModel, list[float]]:
    """Train the logistic gate by full-batch gradient descent.

    Deterministic for a fixed seed. Returns the model and the per-epoch
    training-loss trace. Precomputed ``features`` skip channel building
    (used by cross-validation to avoid redundant FFTs).
    """
    classes = np.unique(data.labels)
    if classes.size < 2:
        raise ValueError("training data must contain both classes")

    X = _featurize_set(data.patches) if features is None else features
    y = data.labels.astype(np.float64)
    mu, sigma = X.mean(axis=0), X.std(axis=0)
    sigma[sigma == 0] = 1.0
    Xn = (X - mu) / sigma

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=Xn.shape[1])
    b = 0.0
    losses = []
    for _ in range(epochs):
        loss, gw, gb = loss_and_grad(w, b, Xn, y)
        losses.append(loss)
        w -= lr * gw
        b -= lr * gb

    # fold the standardization into the stored weights
    w_raw = w / sigma
    b_raw = b - float((w * mu / sigma).sum())
    model = QualityModel(
        weights=w_raw,
        bias=b_raw,
        metadata={
            "epochs": epochs,
            "learning_rate": lr,
            "seed": seed,
            "final_loss": losses[-1],
            "augmentation": "rot90/180/270 + gaussian noise sigma 0.02",
        },
    )
    return model, losses


def predict_quality(
    model: QualityModel,
    patch: Patch | GrayImage | np.ndarray,
    external_scores: dict[str, float] | None = None,
    patch_id: str | None = None,
) -> tuple[int, float]:
    """(label, probability) for one patch; probability >= 0.5 means class
    1 (the tie goes to "keep"). An ingested external score for this patch
    id overrides the model."""
    if external_scores is not None and patch_id is not None and patch_id in external_scores:
        p = float(external_scores[patch_id])
    else:
        x = featurize_channels(build_channels(patch))
        p = float(_sigmoid(np.atleast_1d(x @ model.weights + model.bias))[0])
    return (1 if p >= 0.5 else 0), p


def crossval(
    data: LabeledPatchSet, k: int = 5, seed: int = 0, lr: float = 0.5, epochs: int = 300
) -> list[float]:
    """Stratified k-fold cross-validation accuracy (correct / total per
    fold). Fold sizes differ by at most one within each class."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(data) < k:
        raise ValueError("dataset smaller than k")
    for cls in (0, 1):
        if int((data.labels == cls).sum()) < k:
            raise ValueError(f"class {cls} has fewer than k={k} members")

    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(data), dtype=np.int64)
    for cls in (0, 1):
        idx = np.nonzero(data.labels == cls)[0]
        idx = rng.permutation(idx)
        fold_of[idx] = np.arange(idx.size) % k

    X = _featurize_set(data.patches)
    accuracies = []
    for fold in range(k):
        test = fold_of == fold
        train = ~test
        model, _ = train_quality(
            LabeledPatchSet(data.patches[train], data.labels[train]),
            lr=lr,
            epochs=epochs,
            seed=seed,
            features=X[train],
        )
        p = _sigmoid(X[test] @ model.weights + model.bias)
        pred = (p >= 0.5).astype(np.int64)
        accuracies.append(float((pred == data.labels[test]).mean()))
    return accuracies


def load_scores_csv(path) -> dict[str, float]:
    """Read an external score file (patch_id, probability) as written by
    an out-of-band classifier."""
    scores: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row_idx, row in enumerate(reader):
            if not row or row[0].strip().lower() == "patch_id":
                continue
            if len(row) < 2:
                raise ValueError(f"row {row_idx}: expected patch_id,probability")
            p = float(row[1])
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"row {row_idx}: probability {p} outside [0, 1]")
            scores[row[0].strip()] = p
    return scores
