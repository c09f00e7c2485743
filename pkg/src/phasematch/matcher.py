"""Keypoint matching: network scoring, mutual-best selection, geometric consensus."""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import convnet
from .dataset import Transform
from .errors import InsufficientMatches, ModelShapeMismatch, NoConsensus, NoKeypoints
from .imaging import GrayImage, extract_patch, standardize_array
from .pc_detector import BankParams, build_bank, compute_pc_maps, detect_keypoints

MIN_SAMPLE = {"translation": 1, "similarity": 2}


@dataclass(frozen=True)
class MatcherConfig:
    patch_size: int = 32
    threshold: float = 0.0
    mutual_best: bool = True
    search_radius: float = math.inf
    model: str = "translation"
    iterations: int = 500
    tolerance: float = 2.0
    min_inliers: int = 4
    seed: int = 0
    descriptor: str = "cnn"  # cnn | ncc

    def __post_init__(self):
        if self.patch_size not in convnet.PATCH_SIZES:
            raise ValueError(f"patch_size must be one of {convnet.PATCH_SIZES}")
        if not self.tolerance > 0 or self.iterations < 1:
            raise ValueError("tolerance must be > 0 and iterations >= 1")
        if self.model not in MIN_SAMPLE:
            raise ValueError(f"unknown geometric model {self.model!r}")
        if self.descriptor not in ("cnn", "ncc"):
            raise ValueError(f"unknown descriptor {self.descriptor!r}")


@dataclass(frozen=True)
class MatchCandidate:
    a: int
    b: int
    score: float


@dataclass
class MatchResult:
    matches: list                 # selected MatchCandidates
    inliers: np.ndarray           # bool mask over ``matches``
    transform: Transform | None
    residuals: np.ndarray         # per selected match, under ``transform``
    counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    kps_a: list = field(default_factory=list)
    kps_b: list = field(default_factory=list)

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))

    @property
    def mean_residual(self) -> float:
        return float(self.residuals[self.inliers].mean()) if self.inlier_count else 0.0

    @property
    def max_residual(self) -> float:
        return float(self.residuals[self.inliers].max()) if self.inlier_count else 0.0


# --------------------------------------------------------------------- scoring

def _patch_stack(img, kps, size):
    if not kps:
        return np.zeros((0, size, size))
    return standardize_array(np.stack([extract_patch(img, k.x, k.y, size).pixels for k in kps]))


def candidate_pairs(kps_a, kps_b, radius=math.inf, coarse: Transform | None = None):
    """Index pairs (a, b) whose Chebyshev distance after coarse mapping is <= radius."""
    if not kps_a or not kps_b:
        return np.zeros((0, 2), dtype=int)
    pa = np.array([(k.x, k.y) for k in kps_a], dtype=np.float64)
    pb = np.array([(k.x, k.y) for k in kps_b], dtype=np.float64)
    if coarse is not None:
        pa = coarse.apply(pa)
    if math.isinf(radius):
        ia, ib = np.meshgrid(np.arange(len(pa)), np.arange(len(pb)), indexing="ij")
    else:
        dist = np.max(np.abs(pa[:, None, :] - pb[None, :, :]), axis=-1)
        ia, ib = np.nonzero(dist <= radius)
    return np.stack([ia.ravel(), ib.ravel()], axis=1)


def score_candidates(img_a: GrayImage, img_b: GrayImage, kps_a, kps_b, params, cfg: MatcherConfig,
                     coarse: Transform | None = None, chunk: int = 256):
    """Score every gated keypoint pair; returns MatchCandidates in (a, b) order."""
    s = cfg.patch_size
    if cfg.descriptor == "cnn":
        spec = params.spec
        if spec.input_size != s or spec.in_channels != 2:
            raise ModelShapeMismatch(
                f"model takes {spec.input_size}px/{spec.in_channels}ch input, matcher uses {s}px pairs")
    pairs = candidate_pairs(kps_a, kps_b, cfg.search_radius, coarse)
    if len(pairs) == 0:
        return []
    sa, sb = _patch_stack(img_a, kps_a, s), _patch_stack(img_b, kps_b, s)
    scores = np.empty(len(pairs))
    for i in range(0, len(pairs), chunk):
        ia, ib = pairs[i:i + chunk, 0], pairs[i:i + chunk, 1]
        if cfg.descriptor == "ncc":
            scores[i:i + chunk] = np.mean(sa[ia] * sb[ib], axis=(1, 2))
        else:
            x = np.stack([sa[ia], sb[ib]], axis=-1)
            scores[i:i + chunk] = convnet.forward_batch(params, x)
    return [MatchCandidate(int(a), int(b), float(v)) for (a, b), v in zip(pairs, scores)]


def select_matches(candidates, cfg: MatcherConfig):
    """Threshold, then keep mutual best pairs (or a greedy one-to-one assignment).

    Ties: an A keypoint prefers the lower B index, a B keypoint the lower A index.
    """
    kept = [c for c in candidates if c.score > cfg.threshold]
    if not kept:
        return []
    if cfg.mutual_best:
        best_a, best_b = {}, {}
        for c in kept:
            cur = best_a.get(c.a)
            if cur is None or c.score > cur.score or (c.score == cur.score and c.b < cur.b):
                best_a[c.a] = c
            cur = best_b.get(c.b)
            if cur is None or c.score > cur.score or (c.score == cur.score and c.a < cur.a):
                best_b[c.b] = c
        out = [c for a, c in best_a.items() if best_b[c.b] is c]
    else:
        out, used_a, used_b = [], set(), set()
        for c in sorted(kept, key=lambda c: (-c.score, c.b, c.a)):
            if c.a not in used_a and c.b not in used_b:
                out.append(c)
                used_a.add(c.a)
                used_b.add(c.b)
    return sorted(out, key=lambda c: (c.a, c.b))


# --------------------------------------------------------------------- consensus

def _fit(model, pa, pb):
    """Least-squares fit (exact on a minimal sample)."""
    if model == "translation":
        t = (pb - pa).mean(axis=0)
        return Transform(float(t[0]), float(t[1]))
    za = pa[:, 0] + 1j * pa[:, 1]
    zb = pb[:, 0] + 1j * pb[:, 1]
    ma, mb = za.mean(), zb.mean()
    denom = np.sum(np.abs(za - ma) ** 2)
    if denom == 0:
        return None
    a = np.sum(np.conj(za - ma) * (zb - mb)) / denom
    if abs(a) == 0:
        return None
    b = mb - a * ma
    return Transform(float(b.real), float(b.imag), float(np.angle(a)), float(abs(a)))


def _residuals(t, pa, pb):
    return np.hypot(*(t.apply(pa) - pb).T)


def consensus_filter(matches, kps_a, kps_b, cfg: MatcherConfig) -> MatchResult:
    """Seeded random-sample consensus over the selected matches, then a least-squares refit."""
    need = MIN_SAMPLE[cfg.model]
    if len(matches) < need:
        raise InsufficientMatches(f"{cfg.model} model needs >= {need} matches, got {len(matches)}")
    pa = np.array([(kps_a[m.a].x, kps_a[m.a].y) for m in matches], dtype=np.float64)
    pb = np.array([(kps_b[m.b].x, kps_b[m.b].y) for m in matches], dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    best_t, best_mask = None, np.zeros(len(matches), dtype=bool)
    for _ in range(cfg.iterations):
        idx = rng.choice(len(matches), size=need, replace=False)
        t = _fit(cfg.model, pa[idx], pb[idx])
        if t is None:
            continue
        mask = _residuals(t, pa, pb) <= cfg.tolerance
        if mask.sum() > best_mask.sum():
            best_t, best_mask = t, mask
    if best_t is None or best_mask.sum() < cfg.min_inliers:
        raise NoConsensus(f"largest consensus has {int(best_mask.sum())} matches, "
                          f"need {cfg.min_inliers}")
    # refit on the consensus set until it stops changing; keep whichever model holds more
    for _ in range(10):
        t = _fit(cfg.model, pa[best_mask], pb[best_mask])
        if t is None:
            break
        mask = _residuals(t, pa, pb) <= cfg.tolerance
        if mask.sum() < best_mask.sum():
            break
        changed = not np.array_equal(mask, best_mask)
        best_t, best_mask = t, mask
        if not changed:
            break
    res = _residuals(best_t, pa, pb)
    return MatchResult(list(matches), best_mask, best_t, res,
                       counts={"selected": len(matches), "inliers": int(best_mask.sum())})


# --------------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class DetectConfig:
    nms_radius: int = 5
    threshold: float | None = None
    max_count: int = 500
    noise_comp: bool = True
    kind: str = "corner"


def match_pipeline(img_a: GrayImage, img_b: GrayImage, params, cfg: MatcherConfig = MatcherConfig(),
                   bank_params: BankParams | None = None, detect_cfg: DetectConfig = DetectConfig(),
                   coarse: Transform | None = None) -> MatchResult:
    """Detect PC corners on both images, score, select, and verify geometrically."""
    timings = {}
    t0 = time.perf_counter()
    border = cfg.patch_size // 2
    kps = []
    for img in (img_a, img_b):
        bank = build_bank(bank_params, img.width, img.height)
        maps = compute_pc_maps(img, bank, detect_cfg.noise_comp)
        kps.append(detect_keypoints(maps, detect_cfg.nms_radius, detect_cfg.threshold,
                                    detect_cfg.max_count, border, detect_cfg.kind))
    kps_a, kps_b = kps
    timings["detect_ms"] = 1e3 * (time.perf_counter() - t0)
    if not kps_a or not kps_b:
        raise NoKeypoints(f"keypoints found: A={len(kps_a)}, B={len(kps_b)}")

    t0 = time.perf_counter()
    cands = score_candidates(img_a, img_b, kps_a, kps_b, params, cfg, coarse)
    timings["score_ms"] = 1e3 * (time.perf_counter() - t0)
    t0 = time.perf_counter()
    selected = select_matches(cands, cfg)
    timings["select_ms"] = 1e3 * (time.perf_counter() - t0)
    t0 = time.perf_counter()
    result = consensus_filter(selected, kps_a, kps_b, cfg)
    timings["consensus_ms"] = 1e3 * (time.perf_counter() - t0)

    result.kps_a, result.kps_b, result.timings = kps_a, kps_b, timings
    result.counts = {
        "keypoints_a": len(kps_a), "keypoints_b": len(kps_b), "candidates": len(cands),
        "selected": len(selected), "inliers": result.inlier_count,
        "rejected_threshold_or_mutual": len(cands) - len(selected),
        "rejected_consensus": len(selected) - result.inlier_count,
    }
    return result


def write_matches(path, result: MatchResult) -> None:
    """``ax ay bx by score inlier`` per selected match, transform and counts in the footer."""
    lines = ["# ax ay bx by score inlier"]
    for m, inl in zip(result.matches, result.inliers):
        ka, kb = result.kps_a[m.a], result.kps_b[m.b]
        lines.append(f"{ka.x} {ka.y} {kb.x} {kb.y} {m.score:.6g} {int(bool(inl))}")
    t = result.transform
    if t is not None:
        lines.append(f"# transform tx={t.tx:.6f} ty={t.ty:.6f} theta={t.theta:.6f} scale={t.scale:.6f}"
                     f" cx={t.cx:.6f} cy={t.cy:.6f}")
    lines.append("# counts " + " ".join(f"{k}={v}" for k, v in result.counts.items()))
    lines.append(f"# residual mean={result.mean_residual:.6f} max={result.max_residual:.6f}")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matches(path):
    """Returns (rows, transform, counts); rows are (ax, ay, bx, by, score, inlier)."""
    rows, transform, counts = [], None, {}
    with open(os.fspath(path)) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# transform "):
                kv = dict(item.split("=") for item in line[12:].split())
                transform = Transform.from_dict(kv)
            elif line.startswith("# counts "):
                counts = {k: int(v) for k, v in (item.split("=") for item in line[9:].split())}
            elif line and not line.startswith("#"):
                ax, ay, bx, by, score, inl = line.split()
                rows.append((int(ax), int(ay), int(bx), int(by), float(score), inl == "1"))
    return rows, transform, counts
