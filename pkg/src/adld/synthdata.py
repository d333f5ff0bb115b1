"""Procedural two-domain face generator with ground-truth landmarks and AU labels.

The source domain mimics constrained capture (near-frontal, plain background,
steady lighting); the target domain mimics unconstrained capture (in-plane
rotation, horizontal squash as a yaw proxy, occluding rectangles, textured
backgrounds, wider lighting).  Each active AU displaces a disjoint landmark
group by 0.15 of the inter-eye-corner scale, so AU labels remain recoverable
from geometry alone.

Everything is a pure function of (global_seed, config): per-sample streams
are seeded by SplitMix64(global_seed XOR index), identities come from a
fixed 40-face pool partitioned across train/val/test splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .tensor import Tensor, read_adtn, write_adtn

MASK64 = (1 << 64) - 1

GEN_MARGIN = 1.14  # render canvas is this multiple of the crop size


class ManifestError(ValueError):
    """A dataset manifest line could not be parsed."""

AU_SETS = {
    "bp4d6": {"aus": (1, 2, 4, 6, 12, 17), "rates": (0.184, 0.146, 0.198, 0.44, 0.54, 0.342)},
    "gft4": {"aus": (2, 6, 12, 17), "rates": (0.147, 0.292, 0.303, 0.287)},
}

# disjoint landmark groups displaced by each AU; (indices, dx units, dy units)
# in multiples of 0.15 * scale, x direction given for the subject-right item
# and mirrored for the subject-left one
AU_DISPLACEMENTS = {
    1: ((4, 5), 0.0, -1.0),
    2: ((0, 9), 0.0, -1.0),
    4: ((1, 2, 3, 6, 7, 8), 0.707, 0.707),  # down and inward
    6: ((23, 24, 29, 30), 0.0, -1.0),
    12: ((31, 37), -0.707, -0.707),  # up and outward
    17: ((38, 39, 40, 41, 42), 0.0, -1.0),
}
DISPLACEMENT_FACTOR = 0.15

IDENTITY_POOL = 40
SPLIT_POOLS = {"train": range(0, 28), "val": range(28, 34), "test": range(34, 40)}
_IDENTITY_SALT = 0x1D5A11CE5EED0000


class SplitMix64:
    """Integer-only counter-style stream; identical on every platform."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) / float(1 << 53))

    def randint(self, n: int) -> int:
        return self.next_u64() % n

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p


def mix64(value: int) -> int:
    """One SplitMix64 output for a raw 64-bit value."""
    return SplitMix64(value).next_u64()


@dataclass(frozen=True)
class Identity:
    face_w: float
    face_h: float
    eye_spread: float
    eye_size: float
    brow_h: float
    mouth_w: float
    mouth_y: float
    nose_len: float
    skin: float
    stroke: float


def identity_params(identity_id: int) -> Identity:
    """Deterministic per-identity geometry factors from a fixed universe."""
    rng = SplitMix64(_IDENTITY_SALT ^ (identity_id * 0x9E3779B9 & MASK64))
    return Identity(
        face_w=rng.uniform(0.94, 1.06),
        face_h=rng.uniform(0.96, 1.04),
        eye_spread=rng.uniform(0.97, 1.03),
        eye_size=rng.uniform(0.9, 1.1),
        brow_h=rng.uniform(-1.5, 1.5),
        mouth_w=rng.uniform(0.95, 1.05),
        mouth_y=rng.uniform(-2.0, 2.0),
        nose_len=rng.uniform(0.95, 1.05),
        skin=rng.uniform(0.25, 0.45),
        stroke=rng.uniform(-0.85, -0.6),
    )


@dataclass
class SceneParams:
    identity_id: int
    aus: np.ndarray  # (m,) ints aligned with the au set
    rotation_deg: float
    squash: float
    contrast: float
    brightness: float
    occlusion: tuple[float, float, float, float] | None  # cx, cy, w, h as canvas fractions
    background: str  # flat | textured
    bg_value: float
    bg_seed: int
    seed: int
    au_ids: tuple = ()


def sample_scene(domain: str, index: int, global_seed: int, au_set: str = "bp4d6", split: str = "train") -> SceneParams:
    """Draw one sample's scene from its SplitMix64 stream."""
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    if split not in SPLIT_POOLS:
        raise ValueError(f"unknown split {split!r}")
    preset = AU_SETS[au_set]
    rng = SplitMix64(mix64((global_seed & MASK64) ^ (index & MASK64)))
    pool = list(SPLIT_POOLS[split])
    identity_id = pool[rng.randint(len(pool))]
    aus = np.array([1 if rng.bernoulli(r) else 0 for r in preset["rates"]], dtype=np.int64)
    if domain == "source":
        rotation = rng.uniform(-5.0, 5.0)
        squash = rng.uniform(0.95, 1.0)
        contrast = rng.uniform(0.95, 1.05)
        brightness = rng.uniform(-0.05, 0.05)
        occlusion = None
        background = "flat"
    else:
        rotation = rng.uniform(-30.0, 30.0)
        squash = rng.uniform(0.7, 1.0)
        contrast = rng.uniform(0.8, 1.2)
        brightness = rng.uniform(-0.15, 0.15)
        if rng.bernoulli(0.5):
            frac = rng.uniform(0.05, 0.25)
            aspect = rng.uniform(0.5, 2.0)
            w = float(np.sqrt(frac * aspect))
            h = float(np.sqrt(frac / aspect))
            occlusion = (rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), min(w, 0.9), min(h, 0.9))
        else:
            occlusion = None
        background = "textured"
    return SceneParams(
        identity_id=identity_id,
        aus=aus,
        rotation_deg=rotation,
        squash=squash,
        contrast=contrast,
        brightness=brightness,
        occlusion=occlusion,
        background=background,
        bg_value=rng.uniform(-0.75, -0.45),
        bg_seed=rng.next_u64(),
        seed=rng.next_u64(),
        au_ids=preset["aus"],
    )


# ---------------------------------------------------------------------------
# Rasterization helpers (value/alpha compositing on a float canvas)


def _grid(size: int):
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    return xs, ys


def _composite(canvas: np.ndarray, alpha: np.ndarray, cov: np.ndarray, value: float) -> None:
    canvas *= 1.0 - cov
    canvas += cov * value
    np.maximum(alpha, cov, out=alpha)


def _fill_ellipse(canvas, alpha, xs, ys, cx, cy, ax, ay, value):
    r = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    dist = (r - 1.0) * min(ax, ay)
    cov = np.clip(0.5 - dist, 0.0, 1.0)
    _composite(canvas, alpha, cov, value)


def _stroke_segment(canvas, alpha, xs, ys, p, q, width, value):
    x0, y0 = p
    x1, y1 = q
    lo_x = max(0, int(min(x0, x1) - width - 2))
    hi_x = min(canvas.shape[1], int(max(x0, x1) + width + 3))
    lo_y = max(0, int(min(y0, y1) - width - 2))
    hi_y = min(canvas.shape[0], int(max(y0, y1) + width + 3))
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    gx = xs[lo_y:hi_y, lo_x:hi_x]
    gy = ys[lo_y:hi_y, lo_x:hi_x]
    vx, vy = x1 - x0, y1 - y0
    seg_len2 = vx * vx + vy * vy
    if seg_len2 < 1e-12:
        t = np.zeros_like(gx)
    else:
        t = np.clip(((gx - x0) * vx + (gy - y0) * vy) / seg_len2, 0.0, 1.0)
    dist = np.sqrt((gx - (x0 + t * vx)) ** 2 + (gy - (y0 + t * vy)) ** 2)
    cov = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    sub_c = canvas[lo_y:hi_y, lo_x:hi_x]
    sub_a = alpha[lo_y:hi_y, lo_x:hi_x]
    sub_c *= 1.0 - cov
    sub_c += cov * value
    np.maximum(sub_a, cov, out=sub_a)


def _stroke_polyline(canvas, alpha, xs, ys, pts, width, value, closed=False):
    seq = list(pts) + ([pts[0]] if closed else [])
    for p, q in zip(seq[:-1], seq[1:]):
        _stroke_segment(canvas, alpha, xs, ys, p, q, width, value)


def _value_noise(size: int, seed: int, lo: float, hi: float) -> np.ndarray:
    """Coarse deterministic value noise: an 8x8 integer-seeded grid upsampled bilinearly."""
    rng = SplitMix64(seed)
    grid = np.array([[rng.uniform(lo, hi) for _ in range(9)] for _ in range(9)])
    coords = np.linspace(0, 8, size)
    i = np.floor(coords).astype(int).clip(0, 7)
    f = coords - i
    row = grid[:, i] * (1 - f) + grid[:, i + 1] * f  # (9, size)
    out = row[i, :] * (1 - f)[:, None] + row[i + 1, :] * f[:, None]
    return out


def _displaced_points(scene: SceneParams, frame: float) -> np.ndarray:
    """Template points after identity factors and AU displacements, at 200 scale."""
    ident = identity_params(scene.identity_id)
    pts = geo.TEMPLATE_200.copy()
    cx, cy = 100.0, 115.0
    # identity: global proportions
    pts[:, 0] = (pts[:, 0] - cx) * ident.face_w + cx
    pts[:, 1] = (pts[:, 1] - cy) * ident.face_h + cy
    # eye/brow spread around the midline
    upper = list(range(0, 10)) + list(range(19, 31))
    pts[upper, 0] = (pts[upper, 0] - cx) * ident.eye_spread + cx
    # eye size around each eye center
    for eye in (geo.RIGHT_EYE, geo.LEFT_EYE):
        center = pts[eye].mean(axis=0)
        pts[eye] = (pts[eye] - center) * ident.eye_size + center
    pts[0:10, 1] += ident.brow_h
    # mouth width and height
    mouth = geo.MOUTH
    mcx = pts[mouth, 0].mean()
    pts[mouth, 0] = (pts[mouth, 0] - mcx) * ident.mouth_w + mcx
    pts[mouth, 1] += ident.mouth_y
    # nose length
    nose = list(range(10, 19))
    pts[nose, 1] = (pts[nose, 1] - 90.0) * ident.nose_len + 90.0

    # AU displacements, on the identity-adjusted geometry
    s = np.linalg.norm(pts[geo.RIGHT_INNER_EYE_CORNER] - pts[geo.LEFT_INNER_EYE_CORNER])
    step = DISPLACEMENT_FACTOR * s
    for au_id, active in zip(scene.au_ids, scene.aus):
        if not active or au_id not in AU_DISPLACEMENTS:
            continue
        idxs, ux, uy = AU_DISPLACEMENTS[au_id]
        for i in idxs:
            side = 1.0 if pts[i, 0] < cx else -1.0  # subject-right items get the listed x sign
            pts[i, 0] += side * ux * step
            pts[i, 1] += uy * step
    return pts * (frame / 200.0)


def render_face(scene: SceneParams, l: int) -> tuple[np.ndarray, geo.LandmarkSet]:
    """Rasterize one face on a round(1.14*l) canvas.

    Returns the (3, L, L) float32 image in [-1, 1] and the new-definition
    landmarks after the pose transform.  The caller crops to l-by-l.
    """
    if l < 32 or l % 4 != 0:
        raise ValueError(f"crop size {l} must be >= 32 and divisible by 4")
    size = int(round(GEN_MARGIN * l))
    xs, ys = _grid(size)
    ident = identity_params(scene.identity_id)
    pts = _displaced_points(scene, size)
    s = float(np.linalg.norm(pts[geo.RIGHT_INNER_EYE_CORNER] - pts[geo.LEFT_INNER_EYE_CORNER]))
    width = max(1.0, size * 0.012)

    face = np.zeros((size, size), dtype=np.float64)
    alpha = np.zeros((size, size), dtype=np.float64)
    k = size / 200.0
    cx, cy = 100.0 * k, 115.0 * k
    _fill_ellipse(face, alpha, xs, ys, cx, cy, 62.0 * k * ident.face_w, 82.0 * k * ident.face_h, ident.skin)

    # brows
    _stroke_polyline(face, alpha, xs, ys, pts[0:5], width * 1.4, ident.stroke)
    _stroke_polyline(face, alpha, xs, ys, pts[5:10], width * 1.4, ident.stroke)
    # eyes: white fill, outline, pupil
    for eye in (geo.RIGHT_EYE, geo.LEFT_EYE):
        c = pts[eye].mean(axis=0)
        ex = (pts[eye][:, 0].max() - pts[eye][:, 0].min()) / 2
        ey = max((pts[eye][:, 1].max() - pts[eye][:, 1].min()) / 2, 1.0)
        _fill_ellipse(face, alpha, xs, ys, c[0], c[1], ex, ey, 0.75)
        _stroke_polyline(face, alpha, xs, ys, pts[eye], width * 0.8, ident.stroke, closed=True)
        _fill_ellipse(face, alpha, xs, ys, c[0], c[1], max(ey * 0.6, 0.8), max(ey * 0.6, 0.8), -0.9)
    # nose
    _stroke_polyline(face, alpha, xs, ys, pts[10:14], width * 0.7, ident.stroke * 0.5)
    _stroke_polyline(face, alpha, xs, ys, pts[14:19], width * 0.8, ident.stroke * 0.7)
    # mouth: outer loop and inner ring
    _stroke_polyline(face, alpha, xs, ys, pts[31:43], width * 1.1, ident.stroke, closed=True)
    _stroke_polyline(face, alpha, xs, ys, pts[43:49], width * 0.7, ident.stroke * 0.8, closed=True)

    # illumination on the face layer
    face = face * scene.contrast + scene.brightness

    # landmark labels: new definition on the aligned geometry, then pose
    lm = geo.apply_new_definition(geo.LandmarkSet(pts, size))

    # pose: horizontal squash then in-plane rotation about the canvas center
    theta = np.deg2rad(scene.rotation_deg)
    c, sn = np.cos(theta), np.sin(theta)
    center = (size - 1) / 2.0
    rot = np.array([[c, -sn], [sn, c]])
    sq = np.array([[scene.squash, 0.0], [0.0, 1.0]])
    m2 = rot @ sq
    matrix = np.concatenate([m2, (np.array([center, center]) - m2 @ np.array([center, center]))[:, None]], axis=1)
    layers = np.stack([face, alpha]).astype(np.float32)
    warped = geo.warp_affine(layers, matrix, size, fill=0.0)
    face_w, alpha_w = warped[0].astype(np.float64), np.clip(warped[1].astype(np.float64), 0.0, 1.0)
    lm_pts = geo._affine_apply(matrix, lm.points)

    # background
    if scene.background == "flat":
        bg = np.full((size, size), scene.bg_value)
    else:
        bg = _value_noise(size, scene.bg_seed, scene.bg_value - 0.25, scene.bg_value + 0.45)
    composite = bg * (1.0 - alpha_w) + face_w * alpha_w

    # weak per-channel tint so the image is genuinely 3-channel
    tints = (1.0, 0.96, 0.92)
    img = np.stack([composite * t for t in tints])

    # occlusion rectangle, axis-aligned, drawn over everything
    if scene.occlusion is not None:
        ocx, ocy, ow, oh = scene.occlusion
        x0 = int(np.clip((ocx - ow / 2) * size, 0, size))
        x1 = int(np.clip((ocx + ow / 2) * size, 0, size))
        y0 = int(np.clip((ocy - oh / 2) * size, 0, size))
        y1 = int(np.clip((ocy + oh / 2) * size, 0, size))
        occ_val = -0.2 if scene.bg_value < -0.6 else -0.85
        img[:, y0:y1, x0:x1] = occ_val

    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return img, geo.LandmarkSet(lm_pts, size).clamped()


def make_pseudo_labels(true_aus: np.ndarray, flip_rate: float, rng: SplitMix64) -> np.ndarray:
    """Symmetric label noise: each bit flips independently with ``flip_rate``."""
    if not 0.0 <= flip_rate < 0.5:
        raise ValueError(f"flip rate {flip_rate} outside [0, 0.5)")
    out = np.asarray(true_aus, dtype=np.int64).copy()
    for j in range(out.size):
        if rng.bernoulli(flip_rate):
            out[j] = 1 - out[j]
    return out


@dataclass
class SampleRecord:
    sample_id: int
    image: Tensor | None
    image_path: str | None
    landmarks: geo.LandmarkSet
    frame: int
    aus: np.ndarray | None
    pseudo_aus: np.ndarray | None
    domain: str

    def load_image(self, root: Path | None = None) -> Tensor:
        if self.image is not None:
            return self.image
        path = Path(self.image_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        return Tensor(read_adtn(path))


def build_sample(domain: str, index: int, global_seed: int, l: int, au_set: str = "bp4d6",
                 split: str = "train", flip_rate: float = 0.25) -> SampleRecord:
    """Render one record; pseudo labels are drawn for target samples."""
    scene = sample_scene(domain, index, global_seed, au_set, split)
    img, lm = render_face(scene, l)
    pseudo = None
    if domain == "target":
        prng = SplitMix64(mix64(scene.seed ^ 0xB5E0D0))
        pseudo = make_pseudo_labels(scene.aus, flip_rate, prng)
    return SampleRecord(
        sample_id=index,
        image=Tensor(img),
        image_path=None,
        landmarks=lm,
        frame=img.shape[-1],
        aus=scene.aus,
        pseudo_aus=pseudo,
        domain=domain,
    )


def write_dataset(records, out_dir) -> Path:
    """Manifest JSON-lines plus one tensor-container image file per record."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            rel = f"images/{rec.sample_id:06d}.adtn"
            write_adtn(out_dir / rel, rec.image if rec.image is not None else rec.load_image())
            row = {
                "id": rec.sample_id,
                "image": rel,
                "landmarks": [round(float(v), 4) for v in rec.landmarks.points.reshape(-1)],
                "frame": rec.frame,
                "aus": None if rec.aus is None else [int(v) for v in rec.aus],
                "pseudo_aus": None if rec.pseudo_aus is None else [int(v) for v in rec.pseudo_aus],
                "domain": rec.domain,
            }
            fh.write(json.dumps(row) + "\n")
    return manifest


def read_dataset(dir_path, load_images: bool = False) -> list[SampleRecord]:
    dir_path = Path(dir_path)
    manifest = dir_path / "manifest.jsonl"
    records = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{manifest}:{lineno}: malformed manifest line: {exc}") from exc
            pts = np.array(row["landmarks"], dtype=np.float64).reshape(geo.N_LANDMARKS, 2)
            rec = SampleRecord(
                sample_id=row["id"],
                image=None,
                image_path=str(dir_path / row["image"]),
                landmarks=geo.LandmarkSet(pts, row["frame"]),
                frame=row["frame"],
                aus=None if row["aus"] is None else np.array(row["aus"], dtype=np.int64),
                pseudo_aus=None if row["pseudo_aus"] is None else np.array(row["pseudo_aus"], dtype=np.int64),
                domain=row["domain"],
            )
            if load_images:
                rec.image = rec.load_image()
            records.append(rec)
    return records


def generate_dataset(out_dir, domain: str, count: int, seed: int, l: int,
                     au_set: str = "bp4d6", split: str = "train", flip_rate: float = 0.25) -> Path:
    """Render ``count`` records and write them under ``out_dir``."""
    records = (build_sample(domain, i, seed, l, au_set, split, flip_rate) for i in range(count))
    return write_dataset(records, out_dir)


def empirical_rates(records, field_name: str = "aus") -> np.ndarray:
    """Mean of the requested label field over records that carry it."""
    rows = [getattr(r, field_name) for r in records if getattr(r, field_name) is not None]
    if not rows:
        raise ValueError(f"no records carry {field_name!r}")
    return np.stack(rows).mean(axis=0)
