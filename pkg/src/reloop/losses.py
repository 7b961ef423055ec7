"""Per-sample training objectives and their exact logit derivatives.

Three objectives over a predicted click probability y_hat = sigmoid(z):

  ce      -y log(y_hat) - (1-y) log(1-y_hat)
  sc      y max(y_last - y_hat, 0) + (1-y) max(y_hat - y_last, 0)
  kd      -y_last log(y_hat) - (1-y_last) log(1-y_hat)

``sc`` is a hinge on the gap to the previous model version's score y_last: it
charges only when the current prediction is worse than the predecessor's in
the direction of the label, and is flat (zero, zero gradient) once the model
does at least as well. The trainable blend is alpha*sc + (1-alpha)*ce; ``kd``
is the soft-target baseline and is used alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CLIP = 1e-7

LOSS_KINDS = ("ce", "reloop", "kd")


class LossInputError(ValueError):
    """Loss configuration or required inputs are inconsistent."""


@dataclass(frozen=True)
class LossConfig:
    """Loss kind plus the blend weight alpha (ignored for kind='ce').

    reloop and kd both require every training instance to carry y_last.
    """

    kind: str = "ce"
    alpha: float = 0.2
    clip_eps: float = DEFAULT_CLIP

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossInputError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.clip_eps < 0.5:
            raise LossInputError("clip_eps must lie in (0, 0.5)")

    @property
    def needs_y_last(self) -> bool:
        return self.kind in ("reloop", "kd")


def clip_prob(p, eps: float = DEFAULT_CLIP):
    return np.clip(p, eps, 1.0 - eps)


def ce_loss(y: float, y_hat: float, clip_eps: float = DEFAULT_CLIP) -> float:
    """Binary cross-entropy with probability clipping."""
    p = min(max(y_hat, clip_eps), 1.0 - clip_eps)
    return -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)


def sc_loss(y: float, y_hat: float, y_last: float) -> float:
    """Self-correction hinge against the previous model's score.

    Zero exactly when the current prediction is at least as good as y_last
    in the direction of the label; otherwise grows linearly with the gap.
    """
    return y * max(y_last - y_hat, 0.0) + (1.0 - y) * max(y_hat - y_last, 0.0)


def kd_loss(y_last: float, y_hat: float, clip_eps: float = DEFAULT_CLIP) -> float:
    """Distillation cross-entropy against the previous score as soft target."""
    p = min(max(y_hat, clip_eps), 1.0 - clip_eps)
    t = min(max(y_last, clip_eps), 1.0 - clip_eps)
    return -t * np.log(p) - (1.0 - t) * np.log(1.0 - p)


def combined_loss(
    cfg: LossConfig, y: float, y_hat: float, y_last: float | None = None
) -> float:
    """Configured per-sample objective; reloop blends sc and ce by alpha."""
    if cfg.kind == "ce":
        return ce_loss(y, y_hat, cfg.clip_eps)
    if y_last is None:
        raise LossInputError(f"loss kind {cfg.kind!r} requires y_last")
    if cfg.kind == "kd":
        return kd_loss(y_last, y_hat, cfg.clip_eps)
    return cfg.alpha * sc_loss(y, y_hat, y_last) + (1.0 - cfg.alpha) * ce_loss(
        y, y_hat, cfg.clip_eps
    )


def loss_grad_z(
    cfg: LossConfig, y: float, y_hat: float, y_last: float | None = None
) -> float:
    """Exact dL/dz at y_hat = sigmoid(z).

    ce: y_hat - y. kd: y_hat - y_last. sc: the hinge slope in probability
    space chained through sigmoid'(z) = y_hat (1 - y_hat); the subgradient at
    y_hat == y_last is 0, so exact ties are penalty- and gradient-free.
    """
    if cfg.kind == "ce":
        return y_hat - y
    if y_last is None:
        raise LossInputError(f"loss kind {cfg.kind!r} requires y_last")
    if cfg.kind == "kd":
        return y_hat - y_last
    if y_last > y_hat:
        dl_dp = -y
    elif y_hat > y_last:
        dl_dp = 1.0 - y
    else:
        dl_dp = 0.0
    sc_grad = dl_dp * y_hat * (1.0 - y_hat)
    return cfg.alpha * sc_grad + (1.0 - cfg.alpha) * (y_hat - y)


# Vectorized forms used by the training loop; same math as the scalar ops.

def ce_vec(y: np.ndarray, p: np.ndarray, clip_eps: float = DEFAULT_CLIP) -> np.ndarray:
    pc = clip_prob(p, clip_eps)
    return -y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc)


def sc_vec(y: np.ndarray, p: np.ndarray, y_last: np.ndarray) -> np.ndarray:
    return y * np.maximum(y_last - p, 0.0) + (1.0 - y) * np.maximum(p - y_last, 0.0)


def kd_vec(
    y_last: np.ndarray, p: np.ndarray, clip_eps: float = DEFAULT_CLIP
) -> np.ndarray:
    pc = clip_prob(p, clip_eps)
    t = clip_prob(y_last, clip_eps)
    return -t * np.log(pc) - (1.0 - t) * np.log(1.0 - pc)


def combined_vec(cfg: LossConfig, y, p, y_last=None) -> np.ndarray:
    if cfg.kind == "ce":
        return ce_vec(y, p, cfg.clip_eps)
    if y_last is None:
        raise LossInputError(f"loss kind {cfg.kind!r} requires y_last")
    if cfg.kind == "kd":
        return kd_vec(y_last, p, cfg.clip_eps)
    return cfg.alpha * sc_vec(y, p, y_last) + (1.0 - cfg.alpha) * ce_vec(
        y, p, cfg.clip_eps
    )


def grad_z_vec(cfg: LossConfig, y, p, y_last=None) -> np.ndarray:
    if cfg.kind == "ce":
        return p - y
    if y_last is None:
        raise LossInputError(f"loss kind {cfg.kind!r} requires y_last")
    if cfg.kind == "kd":
        return p - y_last
    dl_dp = -y * (y_last > p) + (1.0 - y) * (p > y_last)
    return cfg.alpha * (dl_dp * p * (1.0 - p)) + (1.0 - cfg.alpha) * (p - y)


def emit_loss_curves(
    y: int, y_last: float, y_hat_grid: np.ndarray, clip_eps: float = DEFAULT_CLIP
) -> np.ndarray:
    """Table of (y_hat, l_ce, l_kd, l_sc) over a probability grid in (0, 1).

    Lays the three objectives side by side for one (label, prior score)
    scenario so their geometry can be compared numerically or plotted.
    """
    grid = np.asarray(y_hat_grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0.0) or np.any(grid >= 1.0):
        raise LossInputError("y_hat grid must lie strictly inside (0, 1)")
    ybc = np.full_like(grid, float(y))
    tbc = np.full_like(grid, float(y_last))
    return np.column_stack(
        [grid, ce_vec(ybc, grid, clip_eps), kd_vec(tbc, grid, clip_eps),
         sc_vec(ybc, grid, tbc)]
    )


def write_loss_curves(path, table: np.ndarray) -> None:
    """Write a curve table as CSV with 9-significant-digit decimals."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("y_hat,l_ce,l_kd,l_sc\n")
        for row in table:
            fh.write(",".join(format(v, ".9g") for v in row) + "\n")
