"""Geometric evaluation and analytic FLOPs accounting.

Geometry: Hartley-normalized DLT, seeded RANSAC with least-squares refit,
mean corner error, and the per-threshold matching-accuracy curve.

FLOPs: closed-form multiply-add counts (1 MAC = 2 FLOPs) for every conv,
linear, and attention product in the model, grouped per stage and operation
kind.  Elementwise maps, normalizations, softmaxes, and interpolation are
excluded from the counts.

Reported headline convention: published efficiency figures for this family
of models come from module-hook profilers that see conv/linear layers but
not functional attention products (the published lite/large ratio for the
linear-attention variants, 97/389 = 0.249, matches module-only counting
exactly, and no uniform counting that includes the quadratic attention terms
can reproduce the published large-model totals).  The breakdown therefore
carries every component, and ``table_gflops`` (used for comparisons against
published numbers) is the conv+linear subtotal for a two-image pair.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelConfig, stage_plan, output_plan

MMA_THRESHOLDS = tuple(range(1, 11))


class GeometryError(ValueError):
    """Degenerate point configuration (rank-deficient DLT system)."""


class RansacError(RuntimeError):
    """No hypothesis reached the required consensus."""


# ---------------------------------------------------------------------------
# Homography estimation
# ---------------------------------------------------------------------------


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(dist, 1e-12)
    t = np.array([[scale, 0, -scale * centroid[0]],
                  [0, scale, -scale * centroid[1]],
                  [0, 0, 1.0]])
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    return (ph @ t.T)[:, :2], t


def _match_points(matches) -> np.ndarray:
    pts = matches.points if hasattr(matches, "points") else np.asarray(matches, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 4:
        raise ValueError("matches must be [N, >=4] with columns x1 y1 x2 y2")
    return pts[:, :4]


def dlt_homography(matches) -> np.ndarray:
    """Hartley-normalized direct linear transform; returns H with H[2,2] = 1."""
    pts = _match_points(matches)
    if len(pts) < 4:
        raise ValueError("homography estimation needs at least 4 matches")
    src, t_src = _normalize_points(pts[:, 0:2])
    dst, t_dst = _normalize_points(pts[:, 2:4])
    n = len(pts)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    a = np.zeros((2 * n, 9))
    a[0::2] = np.c_[x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u]
    a[1::2] = np.c_[np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v]
    if np.linalg.matrix_rank(a, tol=1e-8 * max(1.0, np.abs(a).max())) < 8:
        raise GeometryError("degenerate configuration: DLT system is rank deficient")
    _, _, vt = np.linalg.svd(a)
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise GeometryError("degenerate homography (vanishing scale)")
    return h / h[2, 2]


def _transfer_errors(h_mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.concatenate([pts[:, 0:2], np.ones((len(pts), 1))], axis=1)
    q = ph @ h_mat.T
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = q[:, :2] / q[:, 2:3]
        err = np.sqrt(((proj - pts[:, 2:4]) ** 2).sum(axis=1))
    # points sent to infinity (vanishing scale) count as unbounded error
    return np.where(np.isfinite(err), err, np.inf)


def ransac_homography(matches, inlier_thresh_px: float = 2.0, iters: int = 2000,
                      seed: int = 0):
    """Best-consensus 4-point DLT, refit on the consensus set.

    Deterministic per seed: trial t draws from generator seeded (seed, t), and
    the lowest trial index wins consensus ties.  Success needs a consensus of
    min(n, max(8, 4 + ceil(0.08 n))), which sits above the measured chance
    consensus of wild minimal hypotheses on uniform outliers, so pure-outlier
    input raises instead of returning a chance self-fit.
    """
    pts = _match_points(matches)
    n = len(pts)
    if n < 4:
        raise ValueError("RANSAC needs at least 4 matches")
    min_consensus = min(n, max(8, 4 - (-2 * n) // 25))
    best_count, best_h = -1, None
    for trial in range(iters):
        idx = np.random.default_rng([seed, trial]).choice(n, size=4, replace=False)
        try:
            h_try = dlt_homography(pts[idx])
        except GeometryError:
            continue
        count = int((_transfer_errors(h_try, pts) < inlier_thresh_px).sum())
        if count > best_count:
            best_count, best_h = count, h_try
    if best_h is None or best_count < min_consensus:
        raise RansacError(f"no hypothesis reached consensus {min_consensus} "
                          f"(best {max(best_count, 0)})")
    inliers = _transfer_errors(best_h, pts) < inlier_thresh_px
    h_fit = dlt_homography(pts[inliers])
    inliers = _transfer_errors(h_fit, pts) < inlier_thresh_px
    return h_fit, np.flatnonzero(inliers)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def corner_error(h_est: np.ndarray, h_gt: np.ndarray, width: int, height: int) -> float:
    """Mean distance between the four image corners under both transforms."""
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1],
                        [0, height - 1]], dtype=np.float64)

    def apply(h):
        ph = np.concatenate([corners, np.ones((4, 1))], axis=1) @ h.T
        return ph[:, :2] / ph[:, 2:3]

    return float(np.sqrt(((apply(h_est) - apply(h_gt)) ** 2).sum(axis=1)).mean())


def mma(matches, h_gt: np.ndarray, thresholds=MMA_THRESHOLDS):
    """Fraction of matches within t px of the ground-truth mapping, per t.

    Returns (curve, warned); an empty match set yields a zero curve with the
    warning flag set.
    """
    pts = matches.points if hasattr(matches, "points") else np.asarray(matches, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros(len(thresholds)), True
    errs = _transfer_errors(h_gt, pts[:, :4])
    return (errs[None, :] <= thresholds[:, None]).mean(axis=1), False


@dataclass
class EvalReport:
    accuracy_1px: float
    accuracy_3px: float
    accuracy_5px: float
    mma_curve: np.ndarray            # mean over pairs, thresholds 1..10 px
    mean_matches: float
    mean_inliers: float
    n_pairs: int

    def rows(self):
        yield ("pairs", self.n_pairs)
        yield ("accuracy@1px", round(self.accuracy_1px, 4))
        yield ("accuracy@3px", round(self.accuracy_3px, 4))
        yield ("accuracy@5px", round(self.accuracy_5px, 4))
        for t, v in zip(MMA_THRESHOLDS, self.mma_curve):
            yield (f"mma@{t}px", round(float(v), 4))
        yield ("mean_matches", round(self.mean_matches, 2))
        yield ("mean_inliers", round(self.mean_inliers, 2))


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopsEntry:
    stage: str
    kind: str      # conv | linear | attention | matcher
    name: str
    flops: float


@dataclass
class FlopsBreakdown:
    entries: list = field(default_factory=list)
    input_size: tuple = (0, 0)
    n_images: int = 2

    def add(self, stage: str, kind: str, name: str, flops: float) -> None:
        self.entries.append(FlopsEntry(stage, kind, name, float(flops)))

    @property
    def total(self) -> float:
        return sum(e.flops for e in self.entries)

    def by_kind(self) -> dict:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.kind] = out.get(e.kind, 0.0) + e.flops
        return out

    def by_stage(self) -> dict:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.stage] = out.get(e.stage, 0.0) + e.flops
        return out

    @property
    def module_flops(self) -> float:
        """conv + linear subtotal (what module-hook profilers count)."""
        kinds = self.by_kind()
        return kinds.get("conv", 0.0) + kinds.get("linear", 0.0)

    @property
    def table_gflops(self) -> float:
        """Headline figure comparable to published per-pair GFLOPs."""
        return self.module_flops / 1e9

    @property
    def total_gflops(self) -> float:
        return self.total / 1e9


def _mac2(*dims) -> float:
    out = 2.0
    for d in dims:
        out *= d
    return out


def flops_count(cfg: ModelConfig, height: int, width: int,
                include_matcher: bool = False) -> FlopsBreakdown:
    """Analytic FLOPs for one matched pair (both streams counted).

    conv: 2 k^2 (C_in/groups) C_out H_out W_out; linear: 2 N C_in C_out;
    full/SEA attention: 2 N N' d per head for QK^T and again for PV, with N'
    reduced by R^2; LA: 2 N d^2 per head per factor.  The matcher adds the
    coarse score product and, as a documented upper-bound convention, one
    fine window correlation per A coarse cell.
    """
    bd = FlopsBreakdown(input_size=(height, width), n_images=2)
    plan = stage_plan(cfg, height, width)
    pair = 2  # encoder/decoder run once per image
    c_in = cfg.in_channels
    for i, (st, (c, h, w)) in enumerate(zip(cfg.stages, plan)):
        stage = f"stage{i + 1}"
        n = h * w
        k = st.pe_kernel
        bd.add(stage, "conv", "pe.proj", pair * _mac2(k * k, c_in, c, n))
        bd.add(stage, "conv", "pe.gate", pair * _mac2(9, 1, c, n))
        a = st.heads
        d = c // a
        r = st.reduction if st.attention == "sea" else 1
        n_kv = n // (r * r)
        for b in range(st.depth):
            blk = f"block{b}"
            bd.add(stage, "linear", f"{blk}.q", pair * _mac2(n, c, c))
            if r > 1:
                bd.add(stage, "conv", f"{blk}.sr", pair * _mac2(n_kv, r * r * c, c))
            bd.add(stage, "linear", f"{blk}.k", pair * _mac2(n_kv, c, c))
            bd.add(stage, "linear", f"{blk}.v", pair * _mac2(n_kv, c, c))
            bd.add(stage, "linear", f"{blk}.out", pair * _mac2(n, c, c))
            bd.add(stage, "attention", f"{blk}.kernel",
                   pair * attention_kernel_flops(st.attention, n, c, a, r))
            e = st.ffn_ratio
            bd.add(stage, "linear", f"{blk}.ffn.fc1", pair * _mac2(n, c, e * c))
            bd.add(stage, "conv", f"{blk}.ffn.dw", pair * _mac2(9, 1, e * c, n))
            bd.add(stage, "linear", f"{blk}.ffn.fc2", pair * _mac2(n, e * c, c))
        c_in = c

    fw = cfg.fusion_channels
    for i, (c, h, w) in enumerate(plan):
        bd.add("decoder", "conv", f"lateral{i + 1}", pair * _mac2(1, c, fw, h * w))
    for i in (2, 1, 0):
        _, h, w = plan[i]
        bd.add("decoder", "conv", f"smooth{i + 1}", pair * _mac2(9, fw, fw, h * w))
    _, h0, w0 = plan[0]
    _, hf, wf = plan[cfg.fine_level]
    bd.add("decoder", "conv", "coarse_head", pair * _mac2(1, fw, cfg.coarse_channels, h0 * w0))
    bd.add("decoder", "conv", "fine_head", pair * _mac2(1, fw, cfg.fine_channels, hf * wf))

    if include_matcher:
        (cc, hc, wc), (cf, hfo, wfo) = output_plan(cfg, height, width)
        n_c = hc * wc
        bd.add("matcher", "matcher", "coarse_scores", _mac2(n_c, n_c, cc))
        bd.add("matcher", "matcher", "fine_windows", _mac2(n_c, 25, cf))
    return bd


def attention_kernel_flops(kind: str, n_tokens: int, dim: int, heads: int,
                           reduction: int = 1) -> float:
    """Closed-form cost of the attention products alone (no projections)."""
    d = dim // heads
    if kind == "la":
        return 2.0 * _mac2(n_tokens, d, d, heads)  # two factors, 2 N d^2 per head
    n_kv = n_tokens // (reduction * reduction) if kind == "sea" else n_tokens
    return 2.0 * _mac2(n_tokens, n_kv, d, heads)   # QK^T and PV


def fit_power_law(xs, ys) -> float:
    """Least-squares exponent of y ~ x^a on a log-log scale."""
    xs = np.log(np.asarray(xs, dtype=np.float64))
    ys = np.log(np.asarray(ys, dtype=np.float64))
    return float(np.polyfit(xs, ys, 1)[0])


# ---------------------------------------------------------------------------
# Runtime benchmark
# ---------------------------------------------------------------------------


def _attention_kernel_numpy(kind: str, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                            chunk: int = 512):
    d = q.shape[-1]
    if kind == "la":
        qe = np.exp(q - q.max(axis=-1, keepdims=True))
        qn = qe / qe.sum(axis=-1, keepdims=True)
        ke = np.exp(k - k.max(axis=-2, keepdims=True))
        kn = ke / ke.sum(axis=-2, keepdims=True)
        return qn @ (np.swapaxes(kn, -1, -2) @ v)
    # full attention streamed over query chunks so the working set stays
    # cache-resident and the wall clock tracks the arithmetic, not DRAM
    kt = np.swapaxes(k, -1, -2)
    out = np.empty_like(q)
    for lo in range(0, q.shape[-2], chunk):
        hi = lo + chunk
        scores = q[..., lo:hi, :] @ kt / np.sqrt(d)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        out[..., lo:hi, :] = (e / e.sum(axis=-1, keepdims=True)) @ v
    return out


def bench_attention_kernel(kind: str, n_tokens: int, dim: int = 64,
                           heads: int = 1, repeats: int = 5,
                           seed: int = 0) -> float:
    """Best wall-clock seconds of one attention-kernel evaluation."""
    rng = np.random.default_rng(seed)
    d = dim // heads
    q = rng.normal(size=(1, heads, n_tokens, d))
    k = rng.normal(size=(1, heads, n_tokens, d))
    v = rng.normal(size=(1, heads, n_tokens, d))
    _attention_kernel_numpy(kind, q, k, v)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        _attention_kernel_numpy(kind, q, k, v)
        times.append(time.perf_counter() - t0)
    return float(min(times))


def complexity_exponents(ns=(256, 512, 1024, 2048, 4096), dim: int = 64,
                         measure_runtime: bool = False):
    """Analytic (and optionally measured) scaling exponents over token count."""
    out = {}
    for kind in ("full", "la"):
        counts = [attention_kernel_flops(kind, n, dim, 1) for n in ns]
        out[f"{kind}_analytic"] = fit_power_law(ns, counts)
        if measure_runtime:
            times = [bench_attention_kernel(kind, n, dim) for n in ns]
            out[f"{kind}_runtime"] = fit_power_law(ns, times)
    counts_sea = [attention_kernel_flops("sea", n, dim, 1, reduction=4) for n in ns]
    out["sea_analytic"] = fit_power_law(ns, counts_sea)
    return out
