"""Inference paths, frame-based F1 metrics, disentanglement probes, and
feature dumps.

Source-domain inference reads AU probabilities straight off the rich feature;
target-domain inference routes the rich feature through the
disentangle-recombine-translate path (or straight through, for the raw-feed
ablation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import networks as nets
from . import tensor as T
from .networks import ModelParams
from .tensor import Tensor


@dataclass
class MetricsReport:
    per_au_f1: list
    avg_f1: float
    per_au_precision: list
    per_au_recall: list
    sample_count: int
    mode: str = ""
    feed: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def infer_source(images: Tensor, params: ModelParams) -> np.ndarray:
    """Sigmoid AU probabilities from the rich feature of source images."""
    x = nets.encode_rich(images, params, training=False)
    logits = nets.detect_aus(x, params, training=False)
    return T.activate(logits, "sigmoid").data


def infer_target(images: Tensor, params: ModelParams, feed: str = "latent") -> np.ndarray:
    """Target AU probabilities.

    feed="latent" routes through the self-reconstructed latent feature
    G(z_l, z_t); feed="raw" feeds the rich feature directly (the ablation
    variant, and the only path for encoder-only modes).
    """
    if feed not in ("latent", "raw"):
        raise ValueError(f"feed must be latent or raw, got {feed!r}")
    x = nets.encode_rich(images, params, training=False)
    if feed == "raw" or "g" not in params.config.modules:
        feat = x
    else:
        maps = nets.detect_landmarks(x, params, training=False)
        z_l = nets.landmark_related_feature(maps)
        z_t = nets.encode_texture(x, params, training=False)
        feat = nets.generate_latent(z_l, z_t, params, training=False)
    logits = nets.detect_aus(feat, params, training=False)
    return T.activate(logits, "sigmoid").data


def f1_frame(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5, mode: str = "", feed: str = "") -> MetricsReport:
    """Per-AU frame-based F1 at the given binarization threshold.

    Zero-division convention: F1 (and precision/recall) are 0 whenever their
    denominators vanish.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} must be matching (N, m)")
    if probs.shape[0] == 0:
        raise ValueError("empty input")
    preds = (probs >= threshold).astype(np.int64)
    lab = labels.astype(np.int64)
    f1s, precs, recs = [], [], []
    for j in range(probs.shape[1]):
        tp = int(((preds[:, j] == 1) & (lab[:, j] == 1)).sum())
        fp = int(((preds[:, j] == 1) & (lab[:, j] == 0)).sum())
        fn = int(((preds[:, j] == 0) & (lab[:, j] == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1s.append(f1)
        precs.append(precision)
        recs.append(recall)
    return MetricsReport(
        per_au_f1=f1s,
        avg_f1=float(np.mean(f1s)),
        per_au_precision=precs,
        per_au_recall=recs,
        sample_count=int(probs.shape[0]),
        mode=mode,
        feed=feed,
    )


def evaluate_dataset(
    records,
    params: ModelParams,
    domain: str,
    feed: str = "latent",
    l: int | None = None,
    threshold: float = 0.5,
    batch_size: int = 64,
    mode: str = "",
) -> MetricsReport:
    """Center-crop records to the model's input size and score them."""
    l = l or params.config.image_size
    labelled = [r for r in records if r.aus is not None]
    if not labelled:
        raise ValueError("no records carry AU labels")
    probs = []
    labels = []
    for lo in range(0, len(labelled), batch_size):
        chunk = labelled[lo : lo + batch_size]
        imgs = []
        for rec in chunk:
            crop, _ = geo.center_crop(rec.load_image(), rec.landmarks, l)
            imgs.append(crop.data)
        batch = Tensor(np.stack(imgs))
        if domain == "source":
            p = infer_source(batch, params)
        else:
            p = infer_target(batch, params, feed=feed)
        probs.append(p)
        labels.append(np.stack([rec.aus for rec in chunk]))
    return f1_frame(np.concatenate(probs), np.concatenate(labels), threshold, mode=mode, feed=feed)


# ---------------------------------------------------------------------------
# Disentanglement probes


def extract_features(records, params: ModelParams, kind: str, l: int | None = None, batch_size: int = 64):
    """Flattened z_l or z_t features plus landmark cell labels per record."""
    l = l or params.config.image_size
    d = l // 4
    feats = []
    labels = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        imgs = []
        cls = []
        for rec in chunk:
            crop, lm = geo.center_crop(rec.load_image(), rec.landmarks, l)
            imgs.append(crop.data)
            cls.append(geo.encode_landmark_classes(lm, d))
        x = nets.encode_rich(Tensor(np.stack(imgs)), params, training=False)
        if kind == "z_l":
            maps = nets.detect_landmarks(x, params, training=False)
            feat = nets.landmark_related_feature(maps)
        elif kind == "z_t":
            feat = nets.encode_texture(x, params, training=False)
        else:
            raise ValueError(f"unknown feature kind {kind!r}")
        feats.append(feat.data.reshape(len(chunk), -1))
        labels.append(np.stack(cls))
    return np.concatenate(feats), np.concatenate(labels)


def probe_disentanglement(features: np.ndarray, labels: np.ndarray, d: int, steps: int = 200, seed: int = 0) -> float:
    """Linear probe: how well do the features predict landmark cells?

    Fits one bias-free softmax-regression map from standardized (and, above
    1024 dims, randomly projected) features to all 49 cell distributions on
    half the samples, and reports mean top-1 accuracy on the held-out half.
    Bias-free fitting keeps the marginal cell prior out of reach, so pure
    noise scores chance (1/d^2).
    """
    n, dim = features.shape
    if n < 500:
        raise ValueError(f"probe needs at least 500 samples, got {n}")
    n_landmarks = labels.shape[1]
    classes = d * d
    rng = np.random.default_rng(seed)
    feats = features.astype(np.float64)
    mu = feats.mean(axis=0)
    sigma = feats.std(axis=0) + 1e-8
    feats = (feats - mu) / sigma
    if dim > 1024:
        proj = rng.normal(size=(dim, 1024)) / np.sqrt(dim)
        feats = feats @ proj
        dim = 1024
    half = n // 2
    train_x, test_x = feats[:half], feats[half:]
    train_y, test_y = labels[:half] - 1, labels[half:] - 1

    w = np.zeros((dim, n_landmarks * classes))
    lr = 0.5
    onehot = np.zeros((half, n_landmarks, classes))
    rows = np.arange(half)[:, None]
    cols = np.arange(n_landmarks)[None, :]
    onehot[rows, cols, train_y] = 1.0
    for _ in range(steps):
        logits = (train_x @ w).reshape(half, n_landmarks, classes)
        logits -= logits.max(axis=2, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=2, keepdims=True)
        grad = train_x.T @ (p - onehot).reshape(half, -1) / half
        w -= lr * grad
    logits = (test_x @ w).reshape(n - half, n_landmarks, classes)
    pred = logits.argmax(axis=2)
    return float((pred == test_y).mean())


def uniform_deviation(records, params: ModelParams, l: int | None = None, batch_size: int = 64) -> float:
    """Mean absolute deviation of softmaxed landmark-discriminator responses
    from the uniform map, over the given records."""
    l = l or params.config.image_size
    total = 0.0
    count = 0
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        imgs = []
        for rec in chunk:
            crop, _ = geo.center_crop(rec.load_image(), rec.landmarks, l)
            imgs.append(crop.data)
        x = nets.encode_rich(Tensor(np.stack(imgs)), params, training=False)
        z_t = nets.encode_texture(x, params, training=False)
        maps = nets.discriminate_landmarks(z_t, params, training=False)
        sm = T.spatial_softmax(maps).data
        d = sm.shape[-1]
        total += float(np.abs(sm - 1.0 / (d * d)).sum())
        count += sm.size
    return total / count


# ---------------------------------------------------------------------------
# Feature dumps (portable graymap)


def dump_feature_channelsum(feature, path) -> None:
    """Channel-sum a (C,H,W) feature, min-max normalize, write binary PGM."""
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    if arr.ndim != 3:
        raise ValueError(f"expected (C,H,W) feature, got {arr.shape}")
    summed = arr.sum(axis=0)
    lo, hi = float(summed.min()), float(summed.max())
    if hi - lo < 1e-12:
        gray = np.full(summed.shape, 128, dtype=np.uint8)
    else:
        gray = np.round((summed - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
