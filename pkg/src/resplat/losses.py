"""Image objectives with analytic pixel-space gradients.

The combined objective mirrors the training target: a source term anchoring
recorded views to ground truth (rgb + ssim + masked depth) plus a weighted
novel term comparing extrapolated renders to fixer outputs (rgb + ssim, no
depth). Terms are averaged per view before weighting.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0  # dynamic range of [0,1] images


class LossError(ValueError):
    pass


@dataclasses.dataclass
class LossWeights:
    """Nonnegative term weights; `lpips_slot` only applies when a perceptual hook is installed."""

    rgb: float = 0.8
    lpips_slot: float = 0.2
    ssim: float = 0.2
    depth: float = 0.01
    novel: float = 0.5

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise LossError(f"weight {f.name} must be finite and >= 0, got {v}")


@dataclasses.dataclass
class LossReport:
    total: float
    terms: dict[str, float]  # unweighted per-term means
    per_view: list[dict]

    def weighted_total(self, weights: LossWeights, perceptual: bool = False) -> float:
        """Recompute the total from terms; used to assert report consistency."""
        src = (
            weights.rgb * self.terms.get("src_rgb", 0.0)
            + weights.ssim * self.terms.get("src_ssim", 0.0)
            + weights.depth * self.terms.get("src_depth", 0.0)
        )
        novel = weights.rgb * self.terms.get("novel_rgb", 0.0) + weights.ssim * self.terms.get(
            "novel_ssim", 0.0
        )
        if perceptual:
            src += weights.lpips_slot * self.terms.get("src_perceptual", 0.0)
            novel += weights.lpips_slot * self.terms.get("novel_perceptual", 0.0)
        return src + weights.novel * novel


def _check_dims(pred, target):
    if pred.shape != target.shape:
        raise LossError(f"image shapes differ: {pred.shape} vs {target.shape}")


def l_rgb(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its pixel gradient (sign / count)."""
    _check_dims(pred, target)
    diff = pred - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


_base = np.exp(-0.5 * ((np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) / SSIM_SIGMA) ** 2)
SSIM_KERNEL = _base / _base.sum()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable gaussian window, zero-padded at the borders (self-adjoint)."""
    y = correlate1d(x, SSIM_KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, SSIM_KERNEL, axis=1, mode="constant", cval=0.0)


def _ssim_fields(x, y):
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mx = _blur(x)
    my = _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    s = (a1 * a2) / (b1 * b2)
    return s, mx, my, sxy, a1, a2, b1, b2


def ssim_value(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over pixels and channels; window 11, sigma 1.5, zero padding."""
    _check_dims(pred, target)
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise LossError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim")
    s, *_ = _ssim_fields(np.asarray(pred, np.float64), np.asarray(target, np.float64))
    return float(np.mean(s))


def l_ssim(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM and its analytic gradient with respect to pred."""
    _check_dims(pred, target)
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise LossError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim")
    x = np.asarray(pred, np.float64)
    y = np.asarray(target, np.float64)
    s, mx, my, sxy, a1, a2, b1, b2 = _ssim_fields(x, y)
    value = 1.0 - float(np.mean(s))

    upstream = -1.0 / s.size  # d(1 - mean S)/dS per pixel
    bb = b1 * b2
    ds_dmx = 2.0 * (my * a2 - mx * s * b2) / bb  # quotient rule, sxx/sxy mu-terms folded in
    # mu enters sxx and sxy estimators as well: sxx = blur(x^2) - mx^2, sxy = blur(xy) - mx my
    ds_dsxx = -s / b2
    ds_dsxy = 2.0 * a1 / bb
    # total derivative via the three blurred statistics
    u_mx = upstream * (ds_dmx + ds_dsxx * (-2.0 * mx) + ds_dsxy * (-my))
    u_sq = upstream * ds_dsxx  # coefficient on blur(x^2)
    u_xy = upstream * ds_dsxy  # coefficient on blur(x*y)
    grad = _blur(u_mx) + 2.0 * x * _blur(u_sq) + y * _blur(u_xy)
    return value, grad


def l_depth(
    pred_depth: np.ndarray, target_depth: np.ndarray, valid_mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Masked mean absolute depth error; zero (with zero gradient) on an empty mask."""
    _check_dims(pred_depth, target_depth)
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != pred_depth.shape:
        raise LossError(f"mask shape {mask.shape} does not match depth {pred_depth.shape}")
    count = int(mask.sum())
    grad = np.zeros_like(pred_depth)
    if count == 0:
        return 0.0, grad
    diff = (pred_depth - target_depth)[mask]
    grad[mask] = np.sign(diff) / count
    return float(np.mean(np.abs(diff))), grad


@dataclasses.dataclass
class RenderedView:
    """Prediction/target pair for one view; depth fields only matter for source views."""

    view_id: str
    pred: np.ndarray
    target: np.ndarray
    pred_depth: np.ndarray | None = None
    target_depth: np.ndarray | None = None
    depth_mask: np.ndarray | None = None


def combined(
    src_views: list[RenderedView],
    novel_views: list[RenderedView],
    weights: LossWeights,
    perceptual_fn=None,
) -> tuple[LossReport, list[np.ndarray]]:
    """Weighted source + novel objective.

    Returns the report and one (H, W, 4) pixel gradient of the *total* loss per
    view, ordered src then novel. The perceptual slot stays disabled unless a
    hook (pred, target) -> (value, grad) is supplied.
    """
    weights.validate()
    if not src_views:
        raise LossError("at least one source view is required")

    terms = {"src_rgb": 0.0, "src_ssim": 0.0, "src_depth": 0.0}
    if novel_views:
        terms.update({"novel_rgb": 0.0, "novel_ssim": 0.0})
    if perceptual_fn is not None:
        terms["src_perceptual"] = 0.0
        if novel_views:
            terms["novel_perceptual"] = 0.0
    per_view = []
    grads = []

    def eval_view(v: RenderedView, phase: str, n_views: int, outer: float):
        rgb, g_rgb = l_rgb(v.pred, v.target)
        ssim_loss, g_ssim = l_ssim(v.pred, v.target)
        pg = np.zeros(v.pred.shape[:2] + (4,))
        pg[:, :, :3] = outer * (weights.rgb * g_rgb + weights.ssim * g_ssim) / n_views
        entry = {"view": v.view_id, "phase": phase, "rgb": rgb, "ssim": ssim_loss}
        terms[f"{phase}_rgb"] += rgb / n_views
        terms[f"{phase}_ssim"] += ssim_loss / n_views
        if perceptual_fn is not None:
            p, g_p = perceptual_fn(v.pred, v.target)
            pg[:, :, :3] += outer * weights.lpips_slot * g_p / n_views
            terms[f"{phase}_perceptual"] += p / n_views
            entry["perceptual"] = p
        if phase == "src" and v.target_depth is not None:
            mask = v.depth_mask if v.depth_mask is not None else np.ones_like(v.target_depth, bool)
            d, g_d = l_depth(v.pred_depth, v.target_depth, mask)
            pg[:, :, 3] = outer * weights.depth * g_d / n_views
            terms["src_depth"] += d / n_views
            entry["depth"] = d
        per_view.append(entry)
        grads.append(pg)

    for v in src_views:
        eval_view(v, "src", len(src_views), 1.0)
    for v in novel_views:
        eval_view(v, "novel", len(novel_views), weights.novel)

    report = LossReport(total=0.0, terms=terms, per_view=per_view)
    report.total = report.weighted_total(weights, perceptual=perceptual_fn is not None)
    return report, grads
