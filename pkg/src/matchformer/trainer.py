"""Toy-scale supervised training on synthetic homography pairs.

One optimizer step per synthetic pair: the coarse head is trained with a
negative-log-likelihood over the dual-softmax probabilities at ground-truth
cell assignments, the fine head with a squared-distance regression on the
window-expectation offsets.  Fine supervision switches on only after the
coarse precision clears a warm-up bar, so the windows being supervised are
not garbage.  Everything is bit-reproducible from (seed, config).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import matcher as M
from . import tensor as T
from .encoder import NAMED_SCHEDULES, make_config, schedule_from_strings
from .model import MatchModel
from .tensor import Tensor


class EmptyAssignmentError(ValueError):
    """No labeled cells; the caller should skip this sample."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def coarse_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log probability at the labeled (i, j) cells.

    Probabilities are floored at 1e-12 before the log.
    """
    labeled = np.flatnonzero(labels >= 0)
    if len(labeled) == 0:
        raise EmptyAssignmentError("no labeled cells; skip this sample")
    picked = T.take_pairs(probs, labeled, labels[labeled])
    return -T.reduce_mean(T.log(T.maximum_scalar(picked, 1e-12)))


def fine_loss(pred_offsets: Tensor, gt_offsets: np.ndarray) -> Tensor:
    """Mean squared Euclidean distance, in fine-grid units."""
    diff = T.sub(pred_offsets, Tensor(np.asarray(gt_offsets, dtype=np.float64)))
    return T.reduce_mean(T.reduce_sum(T.mul(diff, diff), axis=1))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], t=0)


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place on the parameter data."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Training configuration and loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    batch_size: int = 1
    lambda_coarse: float = 1.0
    lambda_fine: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "lite"
    attention: str = "la"
    patch_embed: str = "pos"
    schedule: str = "interleaving"
    channels: tuple = (32, 48, 64, 128)
    coarse_channels: int = 64
    fine_channels: int = 64
    fusion_channels: int = 64
    image_size: tuple = (64, 64)
    tau: float = 0.1
    fine_tau: float = 0.025
    theta: float = 0.2
    window: int = 5
    max_rot: float = 0.12
    max_persp: float = 3e-4
    max_trans: float = 3.0
    max_scale: float = 0.06
    fine_warmup_precision: float = 0.3
    max_fine_matches: int = 48

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lambda_coarse < 0 or self.lambda_fine < 0 \
                or (self.lambda_coarse == 0 and self.lambda_fine == 0):
            raise ValueError("loss weights must be nonnegative and not both zero")

    def model_config(self):
        schedule = schedule_from_strings(NAMED_SCHEDULES[self.schedule]) \
            if self.schedule in NAMED_SCHEDULES \
            else schedule_from_strings(self.schedule.split())
        return make_config(self.variant, self.attention, self.patch_embed,
                           channels=self.channels, schedule=schedule,
                           coarse_channels=self.coarse_channels,
                           fine_channels=self.fine_channels,
                           fusion_channels=self.fusion_channels)


@dataclass
class TrainResult:
    model: MatchModel
    metrics: list            # (step, loss_coarse, loss_fine, precision) rows
    holdout_precision: float
    config: TrainConfig


def _sample_pair(cfg: TrainConfig, index: int) -> D.PairSample:
    h, w = cfg.image_size
    return D.make_pair(cfg.seed * 1_000_003 + index, h, w,
                       max_rot=cfg.max_rot, max_persp=cfg.max_persp,
                       max_trans=cfg.max_trans, max_scale=cfg.max_scale)


def _step_precision(probs: np.ndarray, labels: np.ndarray, theta: float,
                    grid: tuple) -> float:
    """Fraction of selected coarse matches within one cell of ground truth."""
    pairs = M.mutual_argmax_pairs(probs, theta)
    if len(pairs) == 0:
        return 0.0
    lab = labels[pairs[:, 0]]
    valid = lab >= 0
    if not valid.any():
        return 0.0
    wc = grid[1]
    pr, pc = np.divmod(pairs[valid, 1], wc)
    gr, gc = np.divmod(lab[valid], wc)
    hit = np.maximum(np.abs(pr - gr), np.abs(pc - gc)) <= 1
    return float(hit.mean())


def _fine_supervision(cfg: TrainConfig, model, pairs: np.ndarray,
                      h_mat: np.ndarray, grids, fine_shape, rng):
    """Window centers and ground-truth offsets for the usable labeled pairs."""
    grid_a, grid_b = grids
    r_c, r_f = model.cfg.coarse_stride, model.cfg.fine_stride
    radius = cfg.window // 2
    hf, wf = fine_shape
    scale = r_c / r_f

    rows_a, cols_a = np.divmod(pairs[:, 0], grid_a[1])
    rows_b, cols_b = np.divmod(pairs[:, 1], grid_b[1])
    ka = np.stack([np.floor((rows_a + 0.5) * scale).astype(int),
                   np.floor((cols_a + 0.5) * scale).astype(int)], axis=1)
    kb = np.stack([np.floor((rows_b + 0.5) * scale).astype(int),
                   np.floor((cols_b + 0.5) * scale).astype(int)], axis=1)
    # Target: where the A fine-cell CENTER lands in B fine coordinates.  The
    # center vector cannot see the query's sub-cell position, so supervising
    # the cell center keeps the target a function of the available input
    # (fine_refine re-adds the query's sub-cell offset at inference).
    centers_px = np.stack([(ka[:, 1] + 0.5) * r_f - 0.5,
                           (ka[:, 0] + 0.5) * r_f - 0.5], axis=1)
    mapped = D.hom_apply(h_mat, centers_px)
    gt_rc = np.stack([(mapped[:, 1] + 0.5) / r_f - 0.5,
                      (mapped[:, 0] + 0.5) / r_f - 0.5], axis=1)
    gt_off = gt_rc - kb
    # windows may be clamped at the map border (masked in fine_offsets);
    # only require the target itself to fall inside the window
    usable = ((ka[:, 0] >= 0) & (ka[:, 0] <= hf - 1)
              & (ka[:, 1] >= 0) & (ka[:, 1] <= wf - 1)
              & (kb[:, 0] >= 0) & (kb[:, 0] <= hf - 1)
              & (kb[:, 1] >= 0) & (kb[:, 1] <= wf - 1)
              & (np.abs(gt_off) <= radius).all(axis=1))
    idx = np.flatnonzero(usable)
    if len(idx) > cfg.max_fine_matches:
        idx = rng.choice(idx, size=cfg.max_fine_matches, replace=False)
    return ka[idx], kb[idx], gt_off[idx]


def train_toy(cfg: TrainConfig, log_path=None, checkpoint_path=None,
              progress=None) -> TrainResult:
    """Run the reference toy training loop; see module docstring."""
    model = MatchModel(cfg.model_config(), seed=cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed + 17)
    r_c = model.cfg.coarse_stride
    metrics = []
    running_precision = 0.0
    fine_active = False

    for step in range(cfg.steps):
        sample = _sample_pair(cfg, step)
        labels = D.gt_coarse_labels(sample.h_mat, cfg.image_size, r_c)
        if (labels >= 0).sum() == 0:
            continue
        img_a = Tensor(sample.image_a[None, None])
        img_b = Tensor(sample.image_b[None, None])
        coarse_a, fine_a, coarse_b, fine_b = model.forward_pair(img_a, img_b)
        sm = M.coarse_scores(coarse_a, coarse_b, tau=cfg.tau)
        probs = M.dual_softmax(sm)
        loss_c = coarse_loss(probs, labels)

        precision = _step_precision(probs.data, labels, cfg.theta, sm.grid_a)
        running_precision = 0.9 * running_precision + 0.1 * precision
        if running_precision > cfg.fine_warmup_precision:
            fine_active = True

        loss_f_val = 0.0
        loss = T.mul(loss_c, cfg.lambda_coarse)
        if fine_active and cfg.lambda_fine > 0:
            labeled = np.flatnonzero(labels >= 0)
            gt_pairs = np.stack([labeled, labels[labeled]], axis=1)
            ka, kb, gt_off = _fine_supervision(cfg, model, gt_pairs, sample.h_mat,
                                               (sm.grid_a, sm.grid_b),
                                               fine_a.shape[2:], rng)
            if len(ka):
                offsets = M.fine_offsets(fine_a, fine_b, ka, kb,
                                         radius=cfg.window // 2, tau=cfg.fine_tau)
                loss_f = fine_loss(offsets, gt_off)
                loss_f_val = float(loss_f.data)
                loss = T.add(loss, T.mul(loss_f, cfg.lambda_fine))

        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(step, f"non-finite loss {loss_val}")
        T.backward(loss)
        adam_step(params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        model.zero_grad()
        metrics.append((step, float(loss_c.data), loss_f_val, precision))
        if progress and step % progress == 0:
            print(f"step {step:5d}  loss_c {float(loss_c.data):.4f}  "
                  f"loss_f {loss_f_val:.4f}  precision {precision:.3f}")

    holdout = holdout_precision(model, cfg)
    if log_path is not None:
        write_metrics_csv(log_path, metrics)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return TrainResult(model=model, metrics=metrics, holdout_precision=holdout,
                       config=cfg)


def holdout_precision(model: MatchModel, cfg: TrainConfig, n_pairs: int = 16,
                      seed_offset: int = 900_000_000) -> float:
    """Coarse precision@1cell over fresh pairs never seen in training."""
    scores = []
    r_c = model.cfg.coarse_stride
    for k in range(n_pairs):
        sample = _sample_pair(cfg, seed_offset + k)
        labels = D.gt_coarse_labels(sample.h_mat, cfg.image_size, r_c)
        with T.no_grad():
            ca, _, cb, _ = model.forward_pair(Tensor(sample.image_a[None, None]),
                                              Tensor(sample.image_b[None, None]))
            sm = M.coarse_scores(ca, cb, tau=cfg.tau)
            probs = M.dual_softmax(sm)
        scores.append(_step_precision(probs.data, labels, cfg.theta, sm.grid_a))
    return float(np.mean(scores))


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_coarse", "loss_fine", "precision"])
        writer.writerows(metrics)


def config_from_dict(raw: dict) -> TrainConfig:
    """Build a TrainConfig from parsed `key: value` config text."""
    kwargs = {}
    annotations = TrainConfig.__annotations__  # strings under PEP 563
    for key, value in raw.items():
        if key not in annotations:
            raise ValueError(f"unknown trainer config key {key!r}")
        kind = annotations[key]
        if kind == "int":
            kwargs[key] = int(value)
        elif kind == "float":
            kwargs[key] = float(value)
        elif kind == "tuple":
            kwargs[key] = tuple(int(v) for v in value.split())
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)
