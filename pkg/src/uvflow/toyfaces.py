"""Procedural toy faces: paired (portrait, UV texture) samples with exact ground truth.

Textures use a fixed canonical layout (eyes closed, features on fixed rows).
Portraits are a fixed piecewise-affine warp of the texture with the eyes
opened, followed by style shading, a pose shift and optional occluders.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

LAYOUT_VERSION = 1
SIZE = 64
STYLES = ("flat", "painterly", "pixel", "sketch")

# canonical layout, (x, y) = (column, row)
CX = 32
BROW_Y = 20
BROW_HALF = 6
BROW_CENTERS = (21, 43)
EYE_Y = 28
EYE_HALF = 5
NOSE_TIP = (32, 38)
MOUTH_Y = 47
CHIN = (32, 55)

DEFAULT_EYE_SPACING = 22
DEFAULT_MOUTH_WIDTH = 14

LANDMARK_NAMES = (
    "brow_l_outer", "brow_l_inner", "brow_r_inner", "brow_r_outer",
    "eye_l_outer", "eye_l_inner", "eye_r_inner", "eye_r_outer",
    "mouth_l", "mouth_r", "nose_tip", "chin",
)
BROW_IDX = (0, 1, 2, 3)
EYE_IDX = (4, 5, 6, 7)
MOUTH_IDX = (8, 9)

# parameter ranges keeping every feature inside its region mask
BROW_OFFSET_RANGE = (-3, 3)
BROW_THICKNESS_RANGE = (1, 3)
BROW_ARCH_RANGE = (0.0, 2.5)
EYE_SPACING_RANGE = (18, 26)
MOUTH_WIDTH_RANGE = (10, 20)
MOUTH_CURVE_RANGE = (-2, 2)
MAX_POSE_SHIFT = 8
MAX_OCCLUSION = 0.40

SCLERA = (0.94, 0.94, 0.92)
IRIS = (0.20, 0.12, 0.08)

Color = tuple[float, float, float]


class ParamsError(ValueError):
    """Invalid face parameters, pose shift or occluders."""


@dataclass(frozen=True)
class Brow:
    y_offset: int = 0
    thickness: int = 2
    arch: float = 1.0
    color: Color = (0.25, 0.17, 0.12)


@dataclass(frozen=True)
class Mouth:
    width: int = DEFAULT_MOUTH_WIDTH
    lip_color: Color = (0.72, 0.30, 0.32)
    corner_curve: int = 0  # corner lift in px, positive = smile


@dataclass(frozen=True)
class Eyes:
    spacing: int = DEFAULT_EYE_SPACING
    lash_color: Color = (0.12, 0.08, 0.07)


@dataclass(frozen=True)
class Nose:
    shading: float = 0.5


@dataclass(frozen=True)
class FaceParams:
    skin_tone: Color = (0.86, 0.68, 0.56)
    brow: Brow = field(default_factory=Brow)
    mouth: Mouth = field(default_factory=Mouth)
    eyes: Eyes = field(default_factory=Eyes)
    nose: Nose = field(default_factory=Nose)
    style_id: str = "flat"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(
            skin_tone=tuple(d["skin_tone"]),
            brow=Brow(**{**d["brow"], "color": tuple(d["brow"]["color"])}),
            mouth=Mouth(**{**d["mouth"], "lip_color": tuple(d["mouth"]["lip_color"])}),
            eyes=Eyes(**{**d["eyes"], "lash_color": tuple(d["eyes"]["lash_color"])}),
            nose=Nose(**d["nose"]),
            style_id=d["style_id"],
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Occluder:
    shape: str  # "rect" or "bar"
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive end)
    color: Color


@dataclass
class Portrait:
    pixels: np.ndarray
    pose_shift: tuple[int, int]
    occluders: list[Occluder]
    face_mask: np.ndarray


@dataclass(frozen=True)
class RegionMasks:
    skin_mask: np.ndarray
    mouth_mask: np.ndarray
    brow_mask: np.ndarray


@dataclass(frozen=True)
class LayeredTargets:
    t_skin: np.ndarray
    t_skin_mouth: np.ndarray
    t_full: np.ndarray


def _check_color(name, c):
    if len(c) != 3 or not all(0.0 <= float(v) <= 1.0 for v in c):
        raise ParamsError(f"{name} must be 3 components in [0,1], got {c}")


def _check_range(name, v, lo, hi):
    if not lo <= v <= hi:
        raise ParamsError(f"{name}={v} outside [{lo}, {hi}]")


def validate(params: FaceParams) -> None:
    _check_color("skin_tone", params.skin_tone)
    _check_color("brow.color", params.brow.color)
    _check_color("mouth.lip_color", params.mouth.lip_color)
    _check_color("eyes.lash_color", params.eyes.lash_color)
    for name, v in (("brow.y_offset", params.brow.y_offset), ("brow.thickness", params.brow.thickness),
                    ("eyes.spacing", params.eyes.spacing), ("mouth.width", params.mouth.width),
                    ("mouth.corner_curve", params.mouth.corner_curve)):
        if int(v) != v:
            raise ParamsError(f"{name} must be an integer pixel value, got {v}")
    _check_range("brow.y_offset", params.brow.y_offset, *BROW_OFFSET_RANGE)
    _check_range("brow.thickness", params.brow.thickness, *BROW_THICKNESS_RANGE)
    _check_range("brow.arch", params.brow.arch, *BROW_ARCH_RANGE)
    _check_range("eyes.spacing", params.eyes.spacing, *EYE_SPACING_RANGE)
    _check_range("mouth.width", params.mouth.width, *MOUTH_WIDTH_RANGE)
    _check_range("mouth.corner_curve", params.mouth.corner_curve, *MOUTH_CURVE_RANGE)
    _check_range("nose.shading", params.nose.shading, 0.0, 1.0)
    if params.eyes.spacing % 2 or params.mouth.width % 2:
        raise ParamsError("eye spacing and mouth width must be even")
    if params.style_id not in STYLES:
        raise ParamsError(f"unknown style_id {params.style_id!r}")


# ---------------------------------------------------------------------------
# landmarks and masks


def canonical_landmarks() -> np.ndarray:
    """Canonical landmark table l* for LAYOUT_VERSION, shape (12, 2) as (x, y)."""
    return texture_landmarks(FaceParams())


def texture_landmarks(params: FaceParams) -> np.ndarray:
    """Ground-truth landmark positions of the rendered texture."""
    by = BROW_Y + params.brow.y_offset
    (bl, br), half_e = _eye_centers(params.eyes.spacing), EYE_HALF
    mh = params.mouth.width // 2
    my = MOUTH_Y - params.mouth.corner_curve
    pts = [
        (BROW_CENTERS[0] - BROW_HALF, by), (BROW_CENTERS[0] + BROW_HALF, by),
        (BROW_CENTERS[1] - BROW_HALF, by), (BROW_CENTERS[1] + BROW_HALF, by),
        (bl - half_e, EYE_Y), (bl + half_e, EYE_Y),
        (br - half_e, EYE_Y), (br + half_e, EYE_Y),
        (CX - mh, my), (CX + mh, my),
        NOSE_TIP, CHIN,
    ]
    return np.asarray(pts, dtype=np.float64)


def _eye_centers(spacing: int) -> tuple[int, int]:
    return CX - spacing // 2, CX + spacing // 2


@lru_cache(maxsize=None)
def _region_masks() -> RegionMasks:
    brow = np.zeros((SIZE, SIZE), bool)
    for bx in BROW_CENTERS:
        brow[12:25, bx - BROW_HALF - 1: bx + BROW_HALF + 2] = True
    mouth = np.zeros((SIZE, SIZE), bool)
    half = MOUTH_WIDTH_RANGE[1] // 2
    mouth[42:52, CX - half - 1: CX + half + 2] = True
    skin = ~(brow | mouth)
    for m in (brow, mouth, skin):
        m.flags.writeable = False
    return RegionMasks(skin, mouth, brow)


def region_masks() -> RegionMasks:
    """Fixed canonical region masks (identical for every sample)."""
    return _region_masks()


@lru_cache(maxsize=None)
def _feature_masks() -> dict[str, np.ndarray]:
    eyes = np.zeros((SIZE, SIZE), bool)
    bl, br = _eye_centers(DEFAULT_EYE_SPACING)
    for ex in (bl, br):
        eyes[24:31, ex - 7: ex + 8] = True
    nose = np.zeros((SIZE, SIZE), bool)
    nose[29:41, CX - 5: CX + 6] = True
    out = {"nose": nose, "eyes": eyes, "mouth": _region_masks().mouth_mask}
    for m in out.values():
        m.flags.writeable = False
    return out


def feature_masks() -> dict[str, np.ndarray]:
    """Masks around nose, eyes and mouth used by degradation metrics."""
    return _feature_masks()


@lru_cache(maxsize=None)
def _eye_interior() -> tuple[np.ndarray, np.ndarray]:
    interior = np.zeros((SIZE, SIZE), bool)
    ref = np.zeros((SIZE, SIZE), bool)
    bl, br = _eye_centers(DEFAULT_EYE_SPACING)
    for ex in (bl, br):
        interior[25:28, ex - 2: ex + 3] = True
    ref[32:36, 12:18] = True  # cheeks below the outer eye corners
    ref[32:36, 46:52] = True
    interior.flags.writeable = False
    ref.flags.writeable = False
    return interior, ref


def eye_interior_mask() -> np.ndarray:
    """Pixels just above the closed lid that are sclera/iris when an eye is open."""
    return _eye_interior()[0]


@lru_cache(maxsize=None)
def _eye_opening() -> np.ndarray:
    m = np.zeros((SIZE, SIZE), bool)
    lo, hi = EYE_SPACING_RANGE
    for ex in (CX - hi // 2, CX - lo // 2, CX + lo // 2, CX + hi // 2):
        m[EYE_Y - 3: EYE_Y + 3, ex - EYE_HALF: ex + EYE_HALF + 1] = True
    m.flags.writeable = False
    return m


def eye_opening_mask() -> np.ndarray:
    """Texture pixels that differ between the closed (texture) and open (portrait) eyes."""
    return _eye_opening()


def eye_open_score(texture: np.ndarray) -> float:
    """Mean absolute luminance deviation of the eye interior from cheek skin."""
    lum = luminance(texture)
    interior, ref = _eye_interior()
    return float(np.abs(lum[interior] - np.median(lum[ref])).mean())


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


# ---------------------------------------------------------------------------
# texture rendering


def _pink_noise(seed: int, amplitude: float = 0.02) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 0x5E1]))
    f = np.fft.fft2(rng.standard_normal((SIZE, SIZE)))
    k = np.fft.fftfreq(SIZE) * SIZE
    r = np.hypot(k[:, None], k[None, :])
    r[0, 0] = 1.0
    f = f / r
    f[0, 0] = 0.0
    field_ = np.fft.ifft2(f).real
    return amplitude * field_ / field_.std()


def _skin_layer(params: FaceParams) -> np.ndarray:
    rows = np.arange(SIZE, dtype=np.float64)[:, None, None]
    skin = np.asarray(params.skin_tone)[None, None, :] * (1.04 - 0.08 * rows / (SIZE - 1))
    img = np.broadcast_to(skin, (SIZE, SIZE, 3)).copy()
    img += _pink_noise(params.seed)[..., None]

    s = params.nose.shading
    img[29:38, CX - 2] *= 1 - 0.10 * s
    img[29:38, CX + 2] *= 1 - 0.10 * s
    img[38:40, CX - 3: CX + 4] *= 1 - 0.35 * s
    img[39, CX - 2] *= 1 - 0.5 * s
    img[39, CX + 2] *= 1 - 0.5 * s
    img[NOSE_TIP[1], NOSE_TIP[0]] *= 1 - 0.45 * s

    for x in range(CX - 4, CX + 5):
        u = (x - CX) / 4
        img[CHIN[1] + int(round(0.8 * u * u)), x] *= 0.85
    return img


def _draw_closed_eyes(img: np.ndarray, params: FaceParams) -> None:
    lash = np.asarray(params.eyes.lash_color)
    for ex in _eye_centers(params.eyes.spacing):
        for x in range(ex - EYE_HALF, ex + EYE_HALF + 1):
            u = (x - ex) / EYE_HALF
            img[EYE_Y + int(round(1.0 * (1 - u * u))), x] = lash


def _draw_open_eyes(img: np.ndarray, params: FaceParams) -> None:
    lash = np.asarray(params.eyes.lash_color)
    for ex in _eye_centers(params.eyes.spacing):
        for x in range(ex - EYE_HALF, ex + EYE_HALF + 1):
            u = (x - ex) / EYE_HALF
            h = 2.6 * np.sqrt(max(0.0, 1 - u * u))
            top, bot = EYE_Y - int(round(h)), EYE_Y + int(round(0.6 * h))
            img[top: bot + 1, x] = SCLERA
            img[top, x] = lash
        yy, xx = np.mgrid[0:SIZE, 0:SIZE]
        iris = (xx - ex) ** 2 + (yy - (EYE_Y - 0.5)) ** 2 <= 1.6 ** 2
        img[iris] = IRIS


def _draw_mouth(img: np.ndarray, params: FaceParams) -> None:
    lip = np.asarray(params.mouth.lip_color)
    half = params.mouth.width // 2
    for x in range(CX - half, CX + half + 1):
        u = (x - CX) / half
        yc = MOUTH_Y - int(round(params.mouth.corner_curve * u * u))
        w = np.sqrt(max(0.0, 1 - u * u))
        up, low = int(round(1.5 * w)), int(round(2.0 * w))
        img[yc - up: yc + low + 1, x] = lip
        if abs(u) < 0.8:
            img[yc, x] = lip * 0.6


def _draw_brows(img: np.ndarray, params: FaceParams) -> None:
    b = params.brow
    color = np.asarray(b.color)
    for bx in BROW_CENTERS:
        for x in range(bx - BROW_HALF, bx + BROW_HALF + 1):
            u = (x - bx) / BROW_HALF
            yc = int(round(BROW_Y + b.y_offset - b.arch * (1 - u * u)))
            img[yc - (b.thickness - 1) // 2: yc + b.thickness // 2 + 1, x] = color


def _render_layers(params: FaceParams, eyes_open: bool = False) -> LayeredTargets:
    skin = _skin_layer(params)
    (_draw_open_eyes if eyes_open else _draw_closed_eyes)(skin, params)
    np.clip(skin, 0.0, 1.0, out=skin)
    skin_mouth = skin.copy()
    _draw_mouth(skin_mouth, params)
    full = skin_mouth.copy()
    _draw_brows(full, params)
    return LayeredTargets(skin, skin_mouth, full)


def render_texture(params: FaceParams) -> np.ndarray:
    """Render the canonical-layout UV texture, (64, 64, 3) float64 in [0, 1]."""
    validate(params)
    return _render_layers(params).t_full


def render_open_eye_texture(params: FaceParams) -> np.ndarray:
    """The texture with the eyes drawn open, as they appear in portraits (the eye-open artifact)."""
    validate(params)
    return _render_layers(params, eyes_open=True).t_full


def layered_targets(params: FaceParams) -> LayeredTargets:
    """Skin-only, skin+mouth and full textures for layer-wise supervision."""
    validate(params)
    return _render_layers(params)


# ---------------------------------------------------------------------------
# portrait warp

# 3x3 control grid; the texture face region maps onto a larger portrait region
_TEX_X = (8.0, 32.0, 56.0)
_TEX_Y = (12.0, 34.0, 59.0)
_POR_PTS = (
    ((5.0, 3.0), (32.0, 3.0), (59.0, 3.0)),
    ((3.0, 31.0), (32.0, 31.0), (61.0, 31.0)),
    ((5.0, 62.0), (32.0, 62.0), (59.0, 62.0)),
)


@dataclass(frozen=True)
class WarpTable:
    """Nearest-neighbour correspondence between portrait and texture pixels.

    ``src[py, px]`` is the flat texture index sampled by portrait pixel
    (py, px), or -1 outside the face. ``dst[ty, tx]`` is the flat portrait
    index that texture face pixel (ty, tx) lands on, or -1 outside the face.
    """

    version: int
    src: np.ndarray
    dst: np.ndarray
    face_texture: np.ndarray
    face_portrait: np.ndarray


def _triangles():
    tris = []
    for i in range(2):
        for j in range(2):
            t00 = (_TEX_X[j], _TEX_Y[i]); t01 = (_TEX_X[j + 1], _TEX_Y[i])
            t10 = (_TEX_X[j], _TEX_Y[i + 1]); t11 = (_TEX_X[j + 1], _TEX_Y[i + 1])
            p00 = _POR_PTS[i][j]; p01 = _POR_PTS[i][j + 1]
            p10 = _POR_PTS[i + 1][j]; p11 = _POR_PTS[i + 1][j + 1]
            tris.append(((t00, t01, t11), (p00, p01, p11)))
            tris.append(((t00, t11, t10), (p00, p11, p10)))
    return tris


def _affine(src, dst) -> np.ndarray:
    a = np.array([[x, y, 1.0] for x, y in src])
    return np.linalg.solve(a, np.asarray(dst, dtype=np.float64))  # (3, 2)


def _barycentric_inside(pts: np.ndarray, tri) -> np.ndarray:
    (x0, y0), (x1, y1), (x2, y2) = tri
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    l0 = ((y1 - y2) * (pts[:, 0] - x2) + (x2 - x1) * (pts[:, 1] - y2)) / det
    l1 = ((y2 - y0) * (pts[:, 0] - x2) + (x0 - x2) * (pts[:, 1] - y2)) / det
    l2 = 1 - l0 - l1
    tol = -1e-9
    return (l0 >= tol) & (l1 >= tol) & (l2 >= tol)


@lru_cache(maxsize=None)
def warp_table() -> WarpTable:
    """Compile the fixed 8-triangle piecewise-affine warp (cached, versioned)."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    pix = np.stack([xx.ravel(), yy.ravel()], 1).astype(np.float64)
    src = np.full(SIZE * SIZE, -1, np.int64)
    dst = np.full(SIZE * SIZE, -1, np.int64)
    for tex_tri, por_tri in _triangles():
        inv = _affine(por_tri, tex_tri)
        fwd = _affine(tex_tri, por_tri)
        # the inverse must contract (inf-norm < 1) for exact nearest-neighbour round trips
        assert np.abs(inv[:2].T).sum(1).max() < 1.0
        inside = _barycentric_inside(pix, por_tri) & (src < 0)
        t = np.c_[pix[inside], np.ones(inside.sum())] @ inv
        ti = np.rint(t).astype(np.int64)
        src[inside] = ti[:, 1] * SIZE + ti[:, 0]
        inside_t = _barycentric_inside(pix, tex_tri) & (dst < 0)
        p = np.rint(np.c_[pix[inside_t], np.ones(inside_t.sum())] @ fwd).astype(np.int64)
        dst[inside_t] = p[:, 1] * SIZE + p[:, 0]
    # keep only texture pixels whose nearest-neighbour round trip is exact
    ok = dst >= 0
    ok[ok] = src[dst[ok]] == np.flatnonzero(ok)
    dst[~ok] = -1
    src = src.reshape(SIZE, SIZE)
    dst = dst.reshape(SIZE, SIZE)
    for a in (src, dst):
        a.flags.writeable = False
    return WarpTable(LAYOUT_VERSION, src, dst, dst >= 0, src >= 0)


def warp_to_portrait(texture: np.ndarray, background: Color) -> np.ndarray:
    table = warp_table()
    out = np.empty((SIZE, SIZE, 3))
    out[:] = background
    flat = texture.reshape(-1, 3)
    face = table.face_portrait
    out[face] = flat[table.src[face]]
    return out


def unwarp_to_texture(portrait: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse warp of an unshifted portrait; returns (texture, face-region mask)."""
    table = warp_table()
    out = np.zeros((SIZE, SIZE, 3))
    face = table.face_texture
    out[face] = portrait.reshape(-1, 3)[table.dst[face]]
    return out, face


def _shift(img: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    out = np.empty_like(img)
    out[...] = fill
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _box_blur3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = sum(p[dy: dy + SIZE, dx: dx + SIZE] for dy in range(3) for dx in range(3))
    return acc / 9.0


def pixelate(img: np.ndarray, block: int = 4) -> np.ndarray:
    h, w, c = img.shape
    means = img.reshape(h // block, block, w // block, block, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(means, block, 0), block, 1)


def apply_style(img: np.ndarray, style_id: str, seed: int) -> np.ndarray:
    if style_id == "flat":
        return img
    if style_id == "pixel":
        return pixelate(img, 4)
    if style_id == "painterly":
        strokes = _pink_noise(seed ^ 0xA5A5, amplitude=0.06)
        return np.clip(_box_blur3(img) * (1.0 + strokes[..., None]), 0.0, 1.0)
    if style_id == "sketch":
        lum = luminance(img)
        gy, gx = np.gradient(lum)
        edges = np.clip(3.0 * np.hypot(gx, gy), 0.0, 1.0)
        paper = 0.6 * (1.0 - edges)[..., None] + 0.4 * img
        return np.clip(paper, 0.0, 1.0)
    raise ParamsError(f"unknown style_id {style_id!r}")


def background_color(seed: int) -> Color:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 0xB6]))
    return tuple(float(v) for v in rng.uniform(0.15, 0.55, 3))


def render_portrait(params: FaceParams, pose_shift=(0, 0), occluders=()) -> Portrait:
    """Render the input portrait: warp, style shading, pose shift, then occluders."""
    validate(params)
    dx, dy = (int(v) for v in pose_shift)
    if max(abs(dx), abs(dy)) > MAX_POSE_SHIFT:
        raise ParamsError(f"pose_shift {pose_shift} exceeds {MAX_POSE_SHIFT} px")
    bg = background_color(params.seed)
    tex_open = _render_layers(params, eyes_open=True).t_full
    img = warp_to_portrait(tex_open, bg)
    img = apply_style(img, params.style_id, params.seed)
    img = _shift(img, dx, dy, bg)
    face = _shift(warp_table().face_portrait, dx, dy, False)

    occluders = [o if isinstance(o, Occluder) else Occluder(o["shape"], tuple(o["bbox"]), tuple(o["color"]))
                 for o in occluders]
    covered = np.zeros((SIZE, SIZE), bool)
    for o in occluders:
        if o.shape not in ("rect", "bar"):
            raise ParamsError(f"unknown occluder shape {o.shape!r}")
        _check_color("occluder.color", o.color)
        x0, y0, x1, y1 = o.bbox
        covered[max(y0, 0): max(y1, 0), max(x0, 0): max(x1, 0)] = True
    coverage = (covered & face).sum() / max(face.sum(), 1)
    if coverage > MAX_OCCLUSION:
        raise ParamsError(f"occluders cover {coverage:.0%} of the face (max {MAX_OCCLUSION:.0%})")
    img = img.copy()
    for o in occluders:
        x0, y0, x1, y1 = o.bbox
        img[max(y0, 0): max(y1, 0), max(x0, 0): max(x1, 0)] = o.color
    return Portrait(img, (dx, dy), list(occluders), face)


def occlusion_fraction(portrait: Portrait) -> float:
    covered = np.zeros((SIZE, SIZE), bool)
    for o in portrait.occluders:
        x0, y0, x1, y1 = o.bbox
        covered[max(y0, 0): max(y1, 0), max(x0, 0): max(x1, 0)] = True
    return float((covered & portrait.face_mask).sum() / max(portrait.face_mask.sum(), 1))


# ---------------------------------------------------------------------------
# random sampling and dataset generation


def _skin_tone(rng: np.random.Generator) -> Color:
    dark, light = np.array([0.36, 0.23, 0.16]), np.array([0.96, 0.84, 0.74])
    c = dark + rng.uniform(0.0, 1.0) * (light - dark) + rng.uniform(-0.04, 0.04, 3)
    return tuple(float(v) for v in np.clip(c, 0.0, 1.0))


def sample_params(rng: np.random.Generator, style_id: str = "flat") -> FaceParams:
    def color(lo, hi):
        return tuple(float(v) for v in rng.uniform(lo, hi))

    seed = int(rng.integers(0, 2**63 - 1))
    return FaceParams(
        skin_tone=_skin_tone(rng),
        brow=Brow(
            y_offset=int(rng.integers(-2, 3)),
            thickness=int(rng.integers(1, 4)),
            arch=float(rng.uniform(0.0, 2.0)),
            color=color((0.02, 0.02, 0.02), (0.40, 0.30, 0.22)),
        ),
        mouth=Mouth(
            width=int(rng.integers(6, 9)) * 2,
            lip_color=color((0.45, 0.10, 0.12), (0.90, 0.45, 0.50)),
            corner_curve=int(rng.integers(-1, 2)),
        ),
        eyes=Eyes(spacing=int(rng.integers(10, 13)) * 2, lash_color=color((0.0, 0.0, 0.0), (0.25, 0.18, 0.15))),
        nose=Nose(shading=float(rng.uniform(0.3, 0.8))),
        style_id=style_id,
        seed=seed,
    )


def sample_occluders(rng: np.random.Generator, pose_shift=(0, 0)) -> list[Occluder]:
    face = _shift(warp_table().face_portrait, *pose_shift, False)
    for _ in range(100):
        color = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
        if rng.random() < 0.5:
            w, h = (int(v) for v in rng.integers(10, 25, 2))
            x0, y0 = int(rng.integers(0, SIZE - w)), int(rng.integers(0, SIZE - h))
            occ = Occluder("rect", (x0, y0, x0 + w, y0 + h), color)
        elif rng.random() < 0.5:
            h = int(rng.integers(2, 5))
            y0 = int(rng.integers(20, 40))
            occ = Occluder("bar", (0, y0, SIZE, y0 + h), color)
        else:
            w = int(rng.integers(3, 7))
            x0 = int(rng.integers(4, SIZE - 10))
            occ = Occluder("bar", (x0, 0, x0 + w, SIZE), color)
        x0, y0, x1, y1 = occ.bbox
        covered = np.zeros((SIZE, SIZE), bool)
        covered[y0:y1, x0:x1] = True
        if (covered & face).sum() / face.sum() <= MAX_OCCLUSION:
            return [occ]
    return []


@dataclass(frozen=True)
class DatasetConfig:
    style_proportions: tuple[tuple[str, float], ...] = (
        ("flat", 0.4), ("painterly", 0.2), ("pixel", 0.2), ("sketch", 0.2))
    occlusion_prob: float = 0.3
    max_pose_shift: int = 4


def style_counts(n: int, proportions) -> dict[str, int]:
    """Exact per-style counts by largest remainder."""
    props = dict(proportions)
    total = sum(props.values())
    raw = {k: n * v / total for k, v in props.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), STYLES.index(k)))[:left]:
        counts[k] += 1
    return counts


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream derived from (master seed, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass
class Sample:
    params: FaceParams
    pose_shift: tuple[int, int]
    occluders: list[Occluder]
    portrait: np.ndarray
    layers: LayeredTargets
    landmarks: np.ndarray


def make_sample(seed: int, index: int, style_id: str, cfg: DatasetConfig = DatasetConfig()) -> Sample:
    rng = sample_rng(seed, index)
    params = sample_params(rng, style_id)
    m = cfg.max_pose_shift
    shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
    occ = sample_occluders(rng, shift) if rng.random() < cfg.occlusion_prob else []
    portrait = render_portrait(params, shift, occ)
    return Sample(params, shift, occ, portrait.pixels, layered_targets(params), texture_landmarks(params))


def style_assignment(n: int, seed: int, proportions) -> list[str]:
    counts = style_counts(n, proportions)
    styles = [s for s in STYLES for _ in range(counts.get(s, 0))]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57]))
    return [styles[i] for i in rng.permutation(n)]


def to_png_bytes(img: np.ndarray) -> bytes:
    import io

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _sample_files(seed: int, index: int, style_id: str, cfg: DatasetConfig) -> dict[str, bytes]:
    s = make_sample(seed, index, style_id, cfg)
    meta = {
        "index": index,
        "layout_version": LAYOUT_VERSION,
        "params": s.params.to_dict(),
        "pose_shift": list(s.pose_shift),
        "occluders": [asdict(o) for o in s.occluders],
        "landmarks": s.landmarks.tolist(),
        "landmark_names": list(LANDMARK_NAMES),
        "masks": "canonical",
    }
    return {
        "portrait.png": to_png_bytes(s.portrait),
        "texture.png": to_png_bytes(s.layers.t_full),
        "t_skin.png": to_png_bytes(s.layers.t_skin),
        "t_skin_mouth.png": to_png_bytes(s.layers.t_skin_mouth),
        "meta.json": (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode(),
    }


def _gen_one(args):
    return _sample_files(*args)


def dataset_gen(n: int, seed: int, out_dir, cfg: DatasetConfig = DatasetConfig(), workers: int = 1) -> list[tuple[str, str]]:
    """Write ``n`` samples plus ``manifest.tsv`` (``path<TAB>sha256``) under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    styles = style_assignment(n, seed, cfg.style_proportions)
    jobs = [(seed, i, styles[i], cfg) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_gen_one, jobs, chunksize=16))
    else:
        results = [_gen_one(j) for j in jobs]

    entries = []
    for i, files in enumerate(results):
        d = out / f"{i:05d}"
        d.mkdir(exist_ok=True)
        for name, data in files.items():
            (d / name).write_bytes(data)
            entries.append((f"{i:05d}/{name}", hashlib.sha256(data).hexdigest()))
    text = "".join(f"{p}\t{h}\n" for p, h in entries)
    tmp = out / "manifest.tsv.tmp"
    tmp.write_text(text)
    tmp.replace(out / "manifest.tsv")
    return entries


@dataclass
class ToyDataset:
    """In-memory arrays, images as (N, 64, 64, 3) float32 in [0, 1]."""

    portraits: np.ndarray
    textures: np.ndarray
    t_skin: np.ndarray
    t_skin_mouth: np.ndarray
    landmarks: np.ndarray
    meta: list[dict]

    def __len__(self) -> int:
        return len(self.textures)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset(self.portraits[idx], self.textures[idx], self.t_skin[idx],
                          self.t_skin_mouth[idx], self.landmarks[idx], [self.meta[i] for i in idx])


def load_dataset(data_dir, limit: int | None = None) -> ToyDataset:
    root = Path(data_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no samples under {root}")
    dirs = dirs[:limit] if limit else dirs
    cols = {k: [] for k in ("portrait", "texture", "t_skin", "t_skin_mouth")}
    lms, metas = [], []
    for d in dirs:
        for k in cols:
            cols[k].append(load_png(d / f"{k}.png"))
        meta = json.loads((d / "meta.json").read_text())
        metas.append(meta)
        lms.append(meta["landmarks"])
    arr = {k: np.stack(v).astype(np.float32) for k, v in cols.items()}
    return ToyDataset(arr["portrait"], arr["texture"], arr["t_skin"], arr["t_skin_mouth"],
                      np.asarray(lms, np.float32), metas)


def generate_arrays(n: int, seed: int, cfg: DatasetConfig = DatasetConfig(), styles=None) -> ToyDataset:
    """Same samples as ``dataset_gen`` without touching disk (8-bit quantized)."""
    styles = styles or style_assignment(n, seed, cfg.style_proportions)
    q = lambda a: (np.clip(np.rint(a * 255.0), 0, 255) / 255.0).astype(np.float32)  # noqa: E731
    ps, ts, sk, sm, lm, meta = [], [], [], [], [], []
    for i in range(n):
        s = make_sample(seed, i, styles[i], cfg)
        ps.append(q(s.portrait)); ts.append(q(s.layers.t_full))
        sk.append(q(s.layers.t_skin)); sm.append(q(s.layers.t_skin_mouth))
        lm.append(s.landmarks)
        meta.append({"index": i, "params": s.params.to_dict(), "pose_shift": list(s.pose_shift),
                     "occluders": [asdict(o) for o in s.occluders]})
    return ToyDataset(np.stack(ps), np.stack(ts), np.stack(sk), np.stack(sm),
                      np.asarray(lm, np.float32), meta)


def with_style(params: FaceParams, style_id: str) -> FaceParams:
    return replace(params, style_id=style_id)
