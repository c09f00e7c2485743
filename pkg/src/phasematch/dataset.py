"""Labeled patch-pair datasets and synthetic side-scan-style image pairs.

Positives are co-located windows of a strictly aligned pair; negatives reuse
the same windows with the B side permuted by a derangement, so every negative
is guaranteed to pair content from two different places.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import fft

from .errors import (BadRatios, CannotDerange, CorruptHeader, InvalidSynthParams,
                     NoValidWindows)
from .imaging import GrayImage, Patch, extract_patch, load_gray, save_gray, window_inside

SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------- geometry

@dataclass(frozen=True)
class Transform:
    """A -> B similarity: ``p_B = scale * R(theta) (p_A - c) + c + (tx, ty)``."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    scale: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("transform scale must be positive")

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        rel = pts - (self.cx, self.cy)
        x = self.scale * (c * rel[..., 0] - s * rel[..., 1]) + self.cx + self.tx
        y = self.scale * (s * rel[..., 0] + c * rel[..., 1]) + self.cy + self.ty
        return np.stack([x, y], axis=-1)

    def inverse(self) -> "Transform":
        # p_A = R(-theta)(p_B - c - t)/scale + c
        c, s = math.cos(-self.theta), math.sin(-self.theta)
        tx = -(c * self.tx - s * self.ty) / self.scale
        ty = -(s * self.tx + c * self.ty) / self.scale
        return Transform(tx, ty, -self.theta, 1.0 / self.scale, self.cx, self.cy)

    @property
    def is_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.theta == 0 and self.scale == 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("tx", "ty", "theta", "scale", "cx", "cy") if k in d})


@dataclass(frozen=True)
class AlignedPair:
    img_a: GrayImage
    img_b: GrayImage
    transform: Transform = Transform()
    provenance: str = "synthetic"


# --------------------------------------------------------------------- records

@dataclass(frozen=True)
class SampleRecord:
    patch_a: Patch
    patch_b: Patch
    label: int
    pair_id: int = 0
    index: int = 0  # position among the positives it derives from

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError("label must be +1 or -1")
        if self.patch_a.size != self.patch_b.size:
            raise ValueError("both patches of a record must have the same size")

    @property
    def size(self) -> int:
        return self.patch_a.size


def slice_positive(pair: AlignedPair, size: int, stride: int, pair_id: int = 0):
    """Grid windows of A paired with the windows centered at their mapped centers in B."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    half = size // 2
    a, b = pair.img_a, pair.img_b
    xs = np.arange(half, a.width - half + 1, stride)
    ys = np.arange(half, a.height - half + 1, stride)
    out = []
    for cy in ys:
        for cx in xs:
            bx, by = np.rint(pair.transform.apply((cx, cy))).astype(int)
            if not window_inside(b.width, b.height, bx, by, size):
                continue
            out.append(SampleRecord(extract_patch(a, cx, cy, size), extract_patch(b, bx, by, size),
                                    1, pair_id, len(out)))
    if not out:
        raise NoValidWindows(f"no {size}px window fits in both images of pair {pair_id}")
    return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of range(n) without fixed points (rejection sampling)."""
    if n < 2:
        raise CannotDerange(f"cannot derange {n} element(s)")
    ident = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == ident):
            return perm


def _substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def make_negatives(positives, seed: int = 0, cross_pair: bool = False):
    """One negative per positive: A patch kept, B patch taken from a deranged partner.

    Derangement happens within each source pair unless ``cross_pair`` is set.
    """
    positives = list(positives)
    if len(positives) < 2:
        raise CannotDerange("need at least 2 positives")
    if cross_pair:
        groups = {0: list(range(len(positives)))}
    else:
        groups = {}
        for i, r in enumerate(positives):
            groups.setdefault(r.pair_id, []).append(i)
    negatives = [None] * len(positives)
    for gid, members in sorted(groups.items()):
        perm = derangement(len(members), _substream(seed, gid))
        for slot, src in zip(members, perm):
            r, partner = positives[slot], positives[members[src]]
            negatives[slot] = SampleRecord(r.patch_a, partner.patch_b, -1, r.pair_id, r.index)
    return negatives


def make_displaced_negatives(pair: AlignedPair, positives, min_offset: int = 3, max_offset: int = 12,
                             seed: int = 0):
    """Negatives whose B window sits ``min_offset..max_offset`` px (Chebyshev) off the true spot.

    Positives whose displaced window would leave B are skipped, so the result
    may be shorter than the input.
    """
    if not 1 <= min_offset <= max_offset:
        raise ValueError("need 1 <= min_offset <= max_offset")
    out = []
    b = pair.img_b
    for r in positives:
        rng = _substream(seed, r.pair_id, r.index, 1)
        bx, by = r.patch_b.origin
        while True:
            dx, dy = (int(v) for v in rng.integers(-max_offset, max_offset + 1, size=2))
            if max(abs(dx), abs(dy)) >= min_offset:
                break
        if window_inside(b.width, b.height, bx + dx, by + dy, r.size):
            out.append(SampleRecord(r.patch_a, extract_patch(b, bx + dx, by + dy, r.size),
                                    -1, r.pair_id, r.index))
    return out


GEOMETRIC_OPS = ("hflip", "vflip", "rot90")


def augment(records, ops=("hflip", "vflip", "rot90"), gamma_range=None, seed: int = 0):
    """Originals plus one transformed copy per enabled geometric op.

    Geometric ops act identically on both patches.  ``gamma_range=(lo, hi)``
    additionally jitters every copy with an independent power law per patch
    (log-uniform exponent); with no geometric op enabled it adds one jittered
    copy instead.
    """
    ops = [op for op in ops if op]
    for op in ops:
        if op not in GEOMETRIC_OPS:
            raise ValueError(f"unknown augmentation {op!r}")
    if gamma_range is not None:
        lo, hi = gamma_range
        if not 0 < lo <= hi:
            raise ValueError("gamma range must satisfy 0 < lo <= hi")
    funcs = {"hflip": lambda p: p[:, ::-1], "vflip": lambda p: p[::-1, :], "rot90": np.rot90}
    variants = [funcs[op] for op in ops]
    if not variants and gamma_range is not None:
        variants = [lambda p: p]
    rng = np.random.default_rng(seed)

    def jitter(px):
        if gamma_range is None:
            return px
        g = math.exp(rng.uniform(math.log(gamma_range[0]), math.log(gamma_range[1])))
        return np.clip(np.clip(px, 0.0, 1.0) ** g, 0.0, 1.0)

    out = list(records)
    for r in records:
        for f in variants:
            pa = jitter(np.ascontiguousarray(f(r.patch_a.pixels)))
            pb = jitter(np.ascontiguousarray(f(r.patch_b.pixels)))
            out.append(SampleRecord(Patch(pa, r.patch_a.origin), Patch(pb, r.patch_b.origin),
                                    r.label, r.pair_id, r.index))
    return out


# --------------------------------------------------------------------- manifest

@dataclass
class Manifest:
    records: list
    seed: int = 0
    params: dict = field(default_factory=dict)
    splits: list = field(default_factory=list)

    def subset(self, tag: str):
        return [r for r, s in zip(self.records, self.splits) if s == tag]


def split(manifest: Manifest, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> Manifest:
    """Tag records train/val/test by source pair so no pair straddles two splits."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    groups = sorted({r.pair_id for r in manifest.records})
    order = np.random.default_rng(seed).permutation(len(groups))
    n = len(groups)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    tag_of = {}
    for rank, gi in enumerate(order):
        tag_of[groups[gi]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return replace(manifest, splits=[tag_of[r.pair_id] for r in manifest.records])


MANIFEST_MAGIC = "# phasematch-manifest 1"


def write_manifest(manifest: Manifest, path) -> None:
    """Text manifest plus ``<path>.bin`` holding both patches of each record as LE float32."""
    path = os.fspath(path)
    splits = manifest.splits or ["train"] * len(manifest.records)
    lines = [MANIFEST_MAGIC,
             f"# seed {manifest.seed}",
             "# params " + json.dumps(manifest.params, sort_keys=True),
             "# label size ax ay bx by pair_id split"]
    chunks = []
    for r, tag in zip(manifest.records, splits):
        (ax, ay), (bx, by) = r.patch_a.origin, r.patch_b.origin
        lines.append(f"{r.label:+d} {r.size} {ax} {ay} {bx} {by} {r.pair_id} {tag}")
        chunks.append(np.asarray(r.patch_a.pixels, dtype="<f4").tobytes())
        chunks.append(np.asarray(r.patch_b.pixels, dtype="<f4").tobytes())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(path + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))


def read_manifest(path) -> Manifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise CorruptHeader(f"{path} is not a phasematch manifest")
    seed, params, rows = 0, {}, []
    for line in lines[1:]:
        if line.startswith("# seed "):
            seed = int(line[7:])
        elif line.startswith("# params "):
            params = json.loads(line[9:])
        elif line and not line.startswith("#"):
            rows.append(line.split())
    blob = np.fromfile(path + ".bin", dtype="<f4") if os.path.exists(path + ".bin") else None
    records, splits, off = [], [], 0
    index_in_pair = {}
    for row in rows:
        label, size, ax, ay, bx, by, pair_id = (int(v) for v in row[:7])
        n = size * size
        if blob is None or off + 2 * n > blob.size:
            raise CorruptHeader(f"patch blob for {path} is missing or too short")
        pa = blob[off:off + n].reshape(size, size).astype(np.float64)
        pb = blob[off + n:off + 2 * n].reshape(size, size).astype(np.float64)
        off += 2 * n
        idx = index_in_pair.get((pair_id, label), 0)
        index_in_pair[(pair_id, label)] = idx + 1
        records.append(SampleRecord(Patch(pa, (ax, ay)), Patch(pb, (bx, by)), label, pair_id, idx))
        splits.append(row[7])
    return Manifest(records, seed, params, splits)


def records_to_arrays(records):
    """Stack raw (unstandardized) pairs as (N, s, s, 2) float32 plus labels."""
    x = np.stack([np.stack([r.patch_a.pixels, r.patch_b.pixels], axis=-1) for r in records])
    y = np.array([r.label for r in records], dtype=np.float32)
    return x.astype(np.float32), y


def build_dataset(pairs, size: int, stride: int, ratios=(0.7, 0.15, 0.15), seed: int = 0,
                  cross_pair: bool = False, displaced_fraction: float = 0.0) -> Manifest:
    """Aligned pairs -> balanced positives/negatives -> grouped split.

    ``displaced_fraction`` of the negatives (chosen per positive, seeded) use a
    B window displaced a few pixels from the true location instead of a
    deranged partner; the class balance stays 1:1.
    """
    if not 0.0 <= displaced_fraction <= 1.0:
        raise ValueError("displaced_fraction must lie in [0, 1]")
    pairs = list(pairs)
    positives = []
    for pid, pair in enumerate(pairs):
        positives.extend(slice_positive(pair, size, stride, pair_id=pid))
    negatives = make_negatives(positives, seed, cross_pair=cross_pair)
    if displaced_fraction > 0:
        pick = np.random.default_rng([seed, 7]).random(len(positives)) < displaced_fraction
        for i, r in enumerate(positives):
            if pick[i]:
                hard = make_displaced_negatives(pairs[r.pair_id], [r], seed=seed)
                if hard:
                    negatives[i] = hard[0]
    manifest = Manifest(positives + negatives, seed,
                        {"size": size, "stride": stride, "ratios": list(ratios), "cross_pair": cross_pair,
                         "displaced_fraction": displaced_fraction})
    return split(manifest, ratios, seed)


# --------------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthParams:
    size: int = 128
    texture_corr: float = 2.0          # exponential correlation length, px
    texture_contrast: float = 0.12
    seabed_level: float = 0.35
    n_targets: int = 6
    target_size: tuple = (4.0, 10.0)   # semi-axis range, px
    shadow_length: tuple = (8.0, 18.0)
    shadow_dir_a: float = 0.0          # radians, direction the shadow is cast in A
    shadow_dir_b: float = math.pi      # reversed heading
    gamma_range: tuple = (0.4, 2.5)
    sigmoid_gain_range: tuple = (4.0, 10.0)
    speckle_var: float = 0.1
    viewpoint: str = "aligned"         # aligned | reversed
    max_shift: int = 0                 # |tx|, |ty| drawn uniformly from integers up to this

    def validate(self):
        def rng_ok(r):
            return len(r) == 2 and 0 < r[0] < r[1]
        problems = []
        if self.size < 32:
            problems.append("size must be >= 32")
        if not self.texture_corr > 0:
            problems.append("texture_corr must be positive")
        if self.n_targets < 0:
            problems.append("n_targets must be >= 0")
        for name in ("target_size", "shadow_length", "gamma_range", "sigmoid_gain_range"):
            if not rng_ok(getattr(self, name)):
                problems.append(f"{name} must be a non-degenerate positive range")
        if self.speckle_var < 0:
            problems.append("speckle_var must be >= 0")
        if self.viewpoint not in ("aligned", "reversed"):
            problems.append("viewpoint must be 'aligned' or 'reversed'")
        if self.max_shift < 0 or self.max_shift >= self.size // 4:
            problems.append("max_shift must be in [0, size/4)")
        if problems:
            raise InvalidSynthParams("; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("target_size", "shadow_length", "gamma_range", "sigmoid_gain_range"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSynthParams(f"unknown synth parameters: {sorted(unknown)}")
        return cls(**d)


def _seabed(shape, corr, rng):
    """Unit-variance periodic noise with exponential autocorrelation exp(-r/corr)."""
    h, w = shape
    y = np.minimum(np.arange(h), h - np.arange(h))[:, None]
    x = np.minimum(np.arange(w), w - np.arange(w))[None, :]
    acf = np.exp(-np.hypot(x, y) / corr)
    amp = np.sqrt(np.maximum(fft.fft2(acf).real, 0.0))
    tex = fft.ifft2(fft.fft2(rng.standard_normal(shape)) * amp).real
    return (tex - tex.mean()) / tex.std()


def _render(base, noise, targets, shadow_dir, yy, xx):
    img = base.copy()
    d = np.array([math.cos(shadow_dir), math.sin(shadow_dir)])
    bodies = []
    for cx, cy, ra, rb, phi, length, tex_gain in targets:
        c, s = math.cos(phi), math.sin(phi)

        def inside(ox, oy):
            u = (xx - ox) * c + (yy - oy) * s
            v = -(xx - ox) * s + (yy - oy) * c
            return (u / ra) ** 2 + (v / rb) ** 2 <= 1.0

        body = inside(cx, cy)
        shadow = np.zeros_like(body)
        for t in np.arange(1.0, length + 1.0):
            shadow |= inside(cx + t * d[0], cy + t * d[1])
        img[shadow & ~body] *= 0.15
        bodies.append((body, cx, cy, tex_gain))
    for body, cx, cy, tex_gain in bodies:
        facing = ((xx - cx) * d[0] + (yy - cy) * d[1]) < 0
        img[body & facing] = 0.9 + tex_gain * noise[body & facing]
        img[body & ~facing] = 0.55 + tex_gain * noise[body & ~facing]
    return img


def _remap(x, gain, gamma, mid):
    lo = 1.0 / (1.0 + math.exp(gain * mid))
    hi = 1.0 / (1.0 + math.exp(-gain * (1.0 - mid)))
    s = (1.0 / (1.0 + np.exp(-gain * (x - mid))) - lo) / (hi - lo)
    return np.clip(s, 0.0, 1.0) ** gamma


def synth_pair(params: SynthParams = SynthParams(), seed: int = 0) -> AlignedPair:
    """Two views of one synthetic seabed scene with targets, shadows and speckle.

    View B casts shadows along ``shadow_dir_b``, gets an independent monotone
    sigmoid-then-gamma intensity remap and independent speckle, and is shifted
    by a random integer translation (``max_shift``) and, in reversed mode,
    rotated by 180 degrees.  The returned transform is exact.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    n, m = params.size, params.max_shift
    big = n + 2 * m
    seabed = _seabed((big, big), params.texture_corr, rng)
    base = params.seabed_level + params.texture_contrast * seabed
    targets = []
    margin = params.target_size[1] + 2
    for _ in range(params.n_targets):
        targets.append((rng.uniform(margin, big - margin), rng.uniform(margin, big - margin),
                        rng.uniform(*params.target_size), rng.uniform(*params.target_size),
                        rng.uniform(0, math.pi), rng.uniform(*params.shadow_length),
                        params.texture_contrast * 0.5))
    tx, ty = (int(v) for v in rng.integers(-m, m + 1, size=2)) if m else (0, 0)
    gain = rng.uniform(*params.sigmoid_gain_range)
    gamma = math.exp(rng.uniform(math.log(params.gamma_range[0]), math.log(params.gamma_range[1])))
    mid = rng.uniform(0.3, 0.6)

    yy, xx = np.mgrid[0:big, 0:big].astype(np.float64)
    scene_a = _render(base, seabed, targets, params.shadow_dir_a, yy, xx)
    scene_b = _render(base, seabed, targets, params.shadow_dir_b, yy, xx)

    def speckle():
        if params.speckle_var == 0:
            return np.ones((n, n))
        k = 1.0 / params.speckle_var
        return rng.gamma(k, 1.0 / k, size=(n, n))

    a = np.clip(scene_a[m:m + n, m:m + n] * speckle(), 0.0, 1.0)
    # B(q) = scene(q - t)
    b = scene_b[m - ty:m - ty + n, m - tx:m - tx + n]
    b = _remap(np.clip(b * speckle(), 0.0, 1.0), gain, gamma, mid)
    c = (n - 1) / 2.0
    if params.viewpoint == "reversed":
        b = b[::-1, ::-1]
        transform = Transform(-tx, -ty, math.pi, 1.0, c, c)
    else:
        transform = Transform(tx, ty, 0.0, 1.0, c, c)
    return AlignedPair(GrayImage(a), GrayImage(np.ascontiguousarray(b)), transform, "synthetic")


def save_pair(pair: AlignedPair, out_dir, stem: str, extra=None) -> None:
    save_gray(pair.img_a, os.path.join(out_dir, f"{stem}_a.pgm"))
    save_gray(pair.img_b, os.path.join(out_dir, f"{stem}_b.pgm"))
    meta = {"transform": pair.transform.to_dict(), "provenance": pair.provenance}
    meta.update(extra or {})
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_pair(out_dir, stem: str) -> AlignedPair:
    with open(os.path.join(out_dir, f"{stem}.json")) as fh:
        meta = json.load(fh)
    return AlignedPair(load_gray(os.path.join(out_dir, f"{stem}_a.pgm")),
                       load_gray(os.path.join(out_dir, f"{stem}_b.pgm")),
                       Transform.from_dict(meta["transform"]), meta.get("provenance", "external"))


def list_pairs(directory):
    return sorted(f[:-5] for f in os.listdir(directory)
                  if f.endswith(".json") and os.path.exists(os.path.join(directory, f[:-5] + "_a.pgm")))
