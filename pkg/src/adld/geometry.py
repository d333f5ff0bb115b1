"""Inner-face landmark geometry: the 49-point template, AU center rules,
coordinate/class-index conversion, alignment, cropping and mirroring.

Landmark order (0-based): right brow 0-4 outer to inner, left brow 5-9 inner
to outer, nose bridge 10-13 top to bottom, nose bottom 14-18 left to right in
image space, right eye 19-24 (outer corner, two top, inner corner, two
bottom), left eye 25-30 (inner corner, two top, outer corner, two bottom),
outer lip 31-42 (right corner, upper 5, left corner, lower 5), inner lip
43-48 (upper 3 right to left, lower 3 left to right).  "Right"/"left" are the
subject's sides mapped onto image x; y grows downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class GeometryError(ValueError):
    """Degenerate or misaligned landmark geometry."""


N_LANDMARKS = 49

# canonical template on a 200x200 frame, eye centers (70,90)/(130,90),
# mouth center near (100,150)
TEMPLATE_200 = np.array(
    [
        # right brow (outer -> inner)
        (55, 74), (62, 71), (70, 70), (78, 71), (85, 73),
        # left brow (inner -> outer)
        (115, 73), (122, 71), (130, 70), (138, 71), (145, 74),
        # nose bridge
        (100, 90), (100, 100), (100, 110), (100, 118),
        # nose bottom (image left -> right)
        (88, 126), (94, 129), (100, 131), (106, 129), (112, 126),
        # right eye: outer corner, top outer, top inner, inner corner, bottom inner, bottom outer
        (59.5, 90), (65, 86), (75, 86), (80.5, 90), (75, 94), (65, 94),
        # left eye: inner corner, top inner, top outer, outer corner, bottom outer, bottom inner
        (119.5, 90), (125, 86), (135, 86), (140.5, 90), (135, 94), (125, 94),
        # outer lip: right corner, upper (right->left), left corner, lower (left->right)
        (78, 150), (86, 144), (93, 141), (100, 140), (107, 141), (114, 144),
        (122, 150), (114, 156), (107, 159), (100, 160), (93, 159), (86, 156),
        # inner lip: upper (right->left), lower (left->right)
        (90, 147), (100, 146), (110, 147), (110, 153), (100, 154), (90, 153),
    ],
    dtype=np.float64,
)

# horizontal mirror index permutation (an involution)
MIRROR_PERMUTATION = np.array(
    [9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
     10, 11, 12, 13,
     18, 17, 16, 15, 14,
     28, 27, 26, 25, 30, 29,
     22, 21, 20, 19, 24, 23,
     37, 36, 35, 34, 33, 32, 31, 42, 41, 40, 39, 38,
     45, 44, 43, 48, 47, 46],
    dtype=np.int64,
)

RIGHT_INNER_EYE_CORNER = 22
LEFT_INNER_EYE_CORNER = 25
RIGHT_EYE = list(range(19, 25))
LEFT_EYE = list(range(25, 31))
MOUTH = list(range(31, 49))


@dataclass
class LandmarkSet:
    """49 (x, y) pixel coordinates on an l-by-l frame."""

    points: np.ndarray  # (49, 2) float64
    frame: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_LANDMARKS, 2):
            raise GeometryError(f"expected ({N_LANDMARKS}, 2) points, got {self.points.shape}")

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy(), self.frame)

    def clamped(self) -> "LandmarkSet":
        return LandmarkSet(np.clip(self.points, 0.0, self.frame), self.frame)


@dataclass(frozen=True)
class AUCenterRule:
    """Two symmetric AU centers, each anchored on landmark indices with an
    offset expressed as a multiple of the inter-eye-corner scale along y
    (negative is up)."""

    au_id: int
    anchors_a: tuple[int, ...]
    anchors_b: tuple[int, ...]
    offset_scale: float


# Table of center rules.  Offsets follow the textual rules: above is -y,
# below is +y, zero offset means the center sits on the anchor itself.
AU_CENTER_RULES = (
    AUCenterRule(1, (4,), (5,), -0.5),        # half scale above inner brow
    AUCenterRule(2, (0,), (9,), -1.0 / 3.0),  # third scale above outer brow
    AUCenterRule(4, (2,), (7,), 1.0 / 3.0),   # third scale below brow center
    AUCenterRule(5, (2,), (7,), 1.0 / 3.0),   # third scale below brow center
    AUCenterRule(6, (23, 24), (29, 30), 1.0),  # one scale below eye bottom
    AUCenterRule(7, tuple(RIGHT_EYE), tuple(LEFT_EYE), 0.0),  # at the eye
    AUCenterRule(9, (14,), (18,), -0.5),      # half scale above nose bottom flanks
    AUCenterRule(10, (33,), (35,), 0.0),      # upper lip center
    AUCenterRule(12, (31,), (37,), 0.0),      # lip corner
    AUCenterRule(14, (31,), (37,), 0.0),      # lip corner
    AUCenterRule(15, (31,), (37,), 0.0),      # lip corner
    AUCenterRule(17, (39,), (41,), 0.5),      # half scale below lip
    AUCenterRule(20, (31,), (37,), 0.0),      # lip corner
    AUCenterRule(23, (34,), (40,), 0.0),      # lip center, outer midpoints
    AUCenterRule(24, (44,), (47,), 0.0),      # lip center, inner midpoints
)

# which landmark index each AU center replaces under the new definition
REPLACEMENT_TARGETS = {
    1: (4, 5),
    2: (0, 9),
    4: (3, 6),
    5: (1, 8),
    6: (24, 30),
    7: (23, 29),
    9: (14, 18),
    10: (33, 35),
    12: (31, 37),
    14: (31, 37),
    15: (31, 37),
    17: (39, 41),
    20: (31, 37),
    23: (34, 40),
    24: (44, 47),
}


def template(frame: float = 200.0) -> LandmarkSet:
    """Canonical landmark template scaled to an l-by-l frame."""
    return LandmarkSet(TEMPLATE_200 * (frame / 200.0), frame)


def compute_scale(landmarks: LandmarkSet) -> float:
    """Distance between the inner corners of the eyes, in pixels."""
    d = np.linalg.norm(landmarks.points[RIGHT_INNER_EYE_CORNER] - landmarks.points[LEFT_INNER_EYE_CORNER])
    if d < 1.0:
        raise GeometryError(f"inner eye corners {d:.3f} px apart; face geometry degenerate")
    return float(d)


def eye_centers(landmarks: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    return landmarks.points[RIGHT_EYE].mean(axis=0), landmarks.points[LEFT_EYE].mean(axis=0)


def mouth_center(landmarks: LandmarkSet) -> np.ndarray:
    return landmarks.points[MOUTH].mean(axis=0)


def _require_aligned(landmarks: LandmarkSet) -> None:
    r, l = eye_centers(landmarks)
    dy = abs(r[1] - l[1])
    tol = 2.0 * landmarks.frame / 200.0
    if dy > tol:
        raise GeometryError(f"face not aligned: eye centers differ by {dy:.2f} px vertically (limit {tol:.2f})")


def compute_au_centers(landmarks: LandmarkSet) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Both centers for each of the 15 AU rules, on an aligned face."""
    _require_aligned(landmarks)
    s = compute_scale(landmarks)
    out = []
    for rule in AU_CENTER_RULES:
        offset = np.array([0.0, rule.offset_scale * s])
        ca = landmarks.points[list(rule.anchors_a)].mean(axis=0) + offset
        cb = landmarks.points[list(rule.anchors_b)].mean(axis=0) + offset
        out.append((rule.au_id, ca, cb))
    return out


def apply_new_definition(landmarks: LandmarkSet) -> LandmarkSet:
    """Replace each landmark owned by an AU-center rule with that center."""
    centers = compute_au_centers(landmarks)
    pts = landmarks.points.copy()
    for au_id, ca, cb in centers:
        ia, ib = REPLACEMENT_TARGETS[au_id]
        pts[ia] = ca
        pts[ib] = cb
    return LandmarkSet(pts, landmarks.frame)


@dataclass(frozen=True)
class ClassIndex:
    """1-based cell index of a landmark on a d-by-d response map."""

    y: int
    d: int

    def __post_init__(self):
        if not 1 <= self.y <= self.d * self.d:
            raise GeometryError(f"class index {self.y} outside [1, {self.d * self.d}]")


def encode_landmark_class(q: tuple[float, float], l: int, d: int) -> ClassIndex:
    """Map pixel coordinates to the 1-based response-map cell index.

    Cell k along an axis covers ((k-1)*l/d, k*l/d], so decoding to the cell
    midpoint never displaces a coordinate by more than half a cell.  Cell
    coordinates are clamped into [1, d], making the encoding total even for
    coordinates outside the frame.
    """
    if l % d != 0:
        raise GeometryError(f"frame {l} not divisible by map side {d}")
    qx, qy = q
    kx = min(max(int(np.ceil(qx * d / l)), 1), d)
    ky = min(max(int(np.ceil(qy * d / l)), 1), d)
    return ClassIndex((ky - 1) * d + kx, d)


def encode_landmark_classes(landmarks: LandmarkSet, d: int) -> np.ndarray:
    """Vector of the 49 cell indices for a landmark set."""
    l = int(round(landmarks.frame))
    return np.array(
        [encode_landmark_class((x, y), l, d).y for x, y in landmarks.points],
        dtype=np.int64,
    )


def decode_landmark_class(y: ClassIndex | int, l: int, d: int) -> tuple[float, float]:
    """Center of the encoded cell, in pixel coordinates."""
    idx = y.y if isinstance(y, ClassIndex) else int(y)
    if not 1 <= idx <= d * d:
        raise GeometryError(f"class index {idx} outside [1, {d * d}]")
    ky = (idx - 1) // d + 1
    kx = (idx - 1) % d + 1
    cell = l / d
    return ((kx - 0.5) * cell, (ky - 0.5) * cell)


# ---------------------------------------------------------------------------
# Similarity alignment

ALIGN_SIZE = 200
ALIGN_ANCHORS = np.array([[70.0, 90.0], [130.0, 90.0], [100.0, 150.0]])


def _solve_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity transform (scale+rotation+translation) as a
    2x3 matrix mapping src points onto dst points."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    denom = (sc * sc).sum()
    if denom < 1e-9:
        raise GeometryError("anchor points coincide; similarity transform degenerate")
    a = (sc * dc).sum() / denom
    b = (sc[:, 0] * dc[:, 1] - sc[:, 1] * dc[:, 0]).sum() / denom
    m = np.array([[a, -b], [b, a]])
    t = mu_d - m @ mu_s
    return np.array([[a, -b, t[0]], [b, a, t[1]]])


def _affine_apply(matrix: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ matrix[:, :2].T + matrix[:, 2]


def _affine_invert(matrix: np.ndarray) -> np.ndarray:
    m = matrix[:, :2]
    t = matrix[:, 2]
    mi = np.linalg.inv(m)
    return np.concatenate([mi, (-mi @ t)[:, None]], axis=1)


def warp_affine(image: np.ndarray, matrix: np.ndarray, out_size: int, fill: float | np.ndarray = 0.0) -> np.ndarray:
    """Bilinear resample of a (C,H,W) image under a forward 2x3 transform."""
    c, h, w = image.shape
    inv = _affine_invert(matrix)
    ys, xs = np.meshgrid(np.arange(out_size, dtype=np.float64), np.arange(out_size, dtype=np.float64), indexing="ij")
    src = np.stack([xs.ravel(), ys.ravel()], axis=1) @ inv[:, :2].T + inv[:, 2]
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    valid = (x0 >= -1) & (x0 <= w - 1) & (y0 >= -1) & (y0 <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    in_x0 = (x0 >= 0).astype(np.float32)
    in_x1 = (x0 + 1 <= w - 1).astype(np.float32)
    in_y0 = (y0 >= 0).astype(np.float32)
    in_y1 = (y0 + 1 <= h - 1).astype(np.float32)
    w00 = (1 - fx) * (1 - fy) * in_x0 * in_y0
    w01 = fx * (1 - fy) * in_x1 * in_y0
    w10 = (1 - fx) * fy * in_x0 * in_y1
    w11 = fx * fy * in_x1 * in_y1
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=np.float32).reshape(-1), (c,))
    out = np.empty((c, out_size * out_size), dtype=np.float32)
    for ch in range(c):
        plane = image[ch]
        vals = plane[y0c, x0c] * w00 + plane[y0c, x1c] * w01 + plane[y1c, x0c] * w10 + plane[y1c, x1c] * w11
        wsum = w00 + w01 + w10 + w11
        vals = vals + (1.0 - wsum) * fill_arr[ch]
        vals = np.where(valid, vals, fill_arr[ch])
        out[ch] = vals
    return out.reshape(c, out_size, out_size)


def similarity_align(image: Tensor | np.ndarray, landmarks: LandmarkSet) -> tuple[Tensor, LandmarkSet]:
    """Align a face to the 200x200 canvas via eye centers and mouth center."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    r, l = eye_centers(landmarks)
    m = mouth_center(landmarks)
    matrix = _solve_similarity(np.stack([r, l, m]), ALIGN_ANCHORS)
    warped = warp_affine(img, matrix, ALIGN_SIZE, fill=float(img.mean()))
    new_pts = _affine_apply(matrix, landmarks.points)
    return Tensor(warped), LandmarkSet(new_pts, ALIGN_SIZE).clamped()


def random_crop_mirror(
    image: Tensor | np.ndarray,
    landmarks: LandmarkSet,
    l: int,
    rng: np.random.Generator,
) -> tuple[Tensor, LandmarkSet]:
    """Uniform random crop to l-by-l plus a fair-coin horizontal mirror."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if l > h or l > w:
        raise GeometryError(f"crop size {l} exceeds image extent {h}x{w}")
    ox = int(rng.integers(0, w - l + 1))
    oy = int(rng.integers(0, h - l + 1))
    mirror = bool(rng.integers(0, 2))
    return crop_mirror(img, landmarks, l, ox, oy, mirror)


def crop_mirror(
    image: Tensor | np.ndarray,
    landmarks: LandmarkSet,
    l: int,
    ox: int,
    oy: int,
    mirror: bool,
) -> tuple[Tensor, LandmarkSet]:
    """Deterministic crop at offset (ox, oy), then optional horizontal mirror."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if l > h or l > w:
        raise GeometryError(f"crop size {l} exceeds image extent {h}x{w}")
    crop = np.ascontiguousarray(img[:, oy : oy + l, ox : ox + l])
    pts = landmarks.points - np.array([ox, oy], dtype=np.float64)
    if mirror:
        crop = np.ascontiguousarray(crop[:, :, ::-1])
        pts = pts.copy()
        pts[:, 0] = (l - 1) - pts[:, 0]
        pts = pts[MIRROR_PERMUTATION]
    return Tensor(crop), LandmarkSet(pts, l).clamped()


def center_crop(image: Tensor | np.ndarray, landmarks: LandmarkSet, l: int) -> tuple[Tensor, LandmarkSet]:
    """Deterministic center crop used at evaluation time."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    return crop_mirror(img, landmarks, l, (w - l) // 2, (h - l) // 2, False)


# ---------------------------------------------------------------------------
# Landmark file format: one face per line, 98 whitespace-separated floats,
# with a header comment "# frame=L"


def write_landmarks(path, sets: list[LandmarkSet]) -> None:
    if not sets:
        raise ValueError("no landmark sets to write")
    frame = sets[0].frame
    for s in sets:
        if s.frame != frame:
            raise ValueError("mixed frame sizes in one landmark file")
    with open(path, "w") as fh:
        fh.write(f"# frame={frame:g}\n")
        for s in sets:
            fh.write(" ".join(f"{v:.6f}" for v in s.points.reshape(-1)) + "\n")


def read_landmarks(path) -> list[LandmarkSet]:
    frame = None
    sets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "frame=" in line:
                    frame = float(line.split("frame=")[1])
                continue
            vals = line.split()
            if len(vals) != 2 * N_LANDMARKS:
                raise GeometryError(f"line {lineno}: expected {2 * N_LANDMARKS} floats, got {len(vals)}")
            if frame is None:
                raise GeometryError("landmark file missing '# frame=L' header")
            pts = np.array([float(v) for v in vals], dtype=np.float64).reshape(N_LANDMARKS, 2)
            sets.append(LandmarkSet(pts, frame))
    return sets
