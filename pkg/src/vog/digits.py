"""Procedural handwritten-style digits for MNIST-scale experiments without downloads.

Each class is a set of polyline strokes on the unit square.  Every sample
gets its own control-point jitter, affine warp, stroke width and pixel
noise.  Atypical examples come from ambiguity: each image is a blend of a
rendering of its own digit with a fainter rendering of a different digit,
and the blend weight (``ambiguity``) varies per example.
"""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset


def _arc(cx, cy, rx, ry, a0, a1, n=10):
    t = np.radians(np.linspace(a0, a1, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# (x, y) with y pointing down
STROKES: dict[int, list[list[tuple[float, float]]]] = {
    0: [_arc(0.5, 0.5, 0.28, 0.38, 0, 360, 16)],
    1: [[(0.38, 0.25), (0.52, 0.12), (0.52, 0.88)], [(0.38, 0.88), (0.66, 0.88)]],
    2: [_arc(0.5, 0.33, 0.25, 0.21, 200, 380, 8) + [(0.25, 0.88), (0.78, 0.88)]],
    3: [_arc(0.48, 0.31, 0.24, 0.19, 210, 450, 9), _arc(0.48, 0.69, 0.27, 0.19, 270, 510, 9)],
    4: [[(0.62, 0.88), (0.62, 0.12), (0.2, 0.64), (0.8, 0.64)]],
    5: [[(0.74, 0.12), (0.3, 0.12), (0.27, 0.46)] + _arc(0.48, 0.65, 0.27, 0.23, 240, 500, 10)],
    6: [[(0.68, 0.13), (0.38, 0.35)] + _arc(0.5, 0.66, 0.24, 0.22, 190, 550, 14)],
    7: [[(0.22, 0.12), (0.78, 0.12), (0.42, 0.88)], [(0.36, 0.5), (0.68, 0.5)]],
    8: [_arc(0.5, 0.3, 0.21, 0.18, 0, 360, 12), _arc(0.5, 0.69, 0.25, 0.2, 0, 360, 12)],
    9: [_arc(0.5, 0.34, 0.23, 0.22, 0, 360, 14) + [(0.73, 0.34), (0.6, 0.88)]],
}


def _segments(strokes) -> np.ndarray:
    segs = []
    for s in strokes:
        pts = np.asarray(s, dtype=np.float64)
        segs.append(np.concatenate([pts[:-1], pts[1:]], axis=1))
    return np.concatenate(segs)  # (m, 4): x0, y0, x1, y1


_SEGMENTS = {d: _segments(s) for d, s in STROKES.items()}


def _render(segs: np.ndarray, size: int, width: float) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(c, c)  # px varies along columns
    p = np.stack([px.ravel(), py.ravel()], axis=1)[:, None, :]  # (P, 1, 2)
    a, b = segs[None, :, 0:2], segs[None, :, 2:4]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1).min(axis=1)
    # soft-edged stroke, roughly one pixel of anti-aliasing
    ink = np.clip((width - d) * size + 0.5, 0.0, 1.0)
    return ink.reshape(size, size)


def _sample_one(rng: np.random.Generator, digit: int, difficulty: float, size: int) -> np.ndarray:
    segs = _SEGMENTS[digit].copy()
    # endpoints jitter independently, so distorted samples get broken strokes
    segs += rng.normal(0.0, 0.012 + 0.04 * difficulty, size=segs.shape)
    angle = np.radians(rng.normal(0.0, 6.0 + 18.0 * difficulty))
    shear = rng.normal(0.0, 0.08 + 0.25 * difficulty)
    scale = np.exp(rng.normal(0.0, 0.06 + 0.12 * difficulty, size=2)) * 0.8
    ca, sa = np.cos(angle), np.sin(angle)
    m = np.array([[ca, -sa], [sa, ca]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag(scale)
    shift = rng.normal(0.0, 0.03 + 0.06 * difficulty, size=2)
    pts = segs.reshape(-1, 2) - 0.5
    pts = pts @ m.T + 0.5 + shift
    width = np.clip(rng.normal(0.045, 0.01), 0.025, 0.075)
    img = _render(pts.reshape(-1, 4), size, width)
    if difficulty > 0.6:
        # occluding blotch or erased patch on the hardest examples
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        r = rng.uniform(2.0, 5.0) * difficulty
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = 0.0 if rng.random() < 0.5 else 1.0
    img = img * rng.uniform(0.7, 1.0) + rng.normal(0.0, 0.02 + 0.1 * difficulty, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_digits(n: int, seed: int, split: str = "train", size: int = 28, max_blend: float = 0.5,
                distortion: float = 0.3, return_ambiguity: bool = False):
    """``n`` single-channel ``size``x``size`` digit images in [0, 1], classes balanced round-robin.

    The weight of the distractor digit is ``max_blend * Beta(1, 2)``, so most
    examples are clean and a tail is genuinely ambiguous.  With
    ``return_ambiguity`` the per-example weights are returned as well.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= max_blend < 1.0:
        raise ValueError("max_blend must be in [0, 1)")
    rng = np.random.default_rng([seed, {"train": 0, "test": 1}.get(split, 2)])
    labels = rng.permutation(np.arange(n) % 10)
    ambiguity = max_blend * rng.beta(1.0, 2.0, size=n)
    other = (labels + rng.integers(1, 10, size=n)) % 10
    images = np.empty((n, 1, size, size))
    for i in range(n):
        a = _sample_one(rng, int(labels[i]), distortion, size)
        b = _sample_one(rng, int(other[i]), distortion, size)
        images[i, 0] = np.clip((1.0 - ambiguity[i]) * a + ambiguity[i] * b, 0.0, 1.0)
    prov = f"digits(n={n}, seed={seed}, split={split}, size={size}, max_blend={max_blend}, distortion={distortion})"
    ds = LabeledDataset(images, labels, 10, split, prov, {"kind": "digits"})
    return (ds, ambiguity) if return_ambiguity else ds
