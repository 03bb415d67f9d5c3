"""Region metrics (DSC, IoU, HD95) and the throughput benchmark.

HD95 follows one fixed convention end to end: boundary pixels are mask
pixels with at least one 4-neighbor outside the mask (image border counts
as outside), distances are center-to-center Euclidean in pixel units,
both directed distance sets are pooled, and the percentile interpolates
linearly between order statistics. The percentile is computed here rather
than through a library call so an independent brute-force implementation
can reproduce the value bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tensor, no_grad


def region_masks(label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(lumen, outer-region) boolean masks from a {0,1,2} index map; the
    outer region is wall plus lumen."""
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"label must be 2-d, got shape {label.shape}")
    if label.min() < 0 or label.max() > 2:
        raise ValueError("label values must lie in {0, 1, 2}")
    return label == 2, label >= 1


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / (sa + sb)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(k, 2) integer coordinates of mask pixels with an exposed 4-neighbor."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def percentile_95(values: np.ndarray) -> float:
    """95th percentile with linear interpolation between order statistics."""
    d = np.sort(np.asarray(values, dtype=np.float64))
    if d.size == 0:
        raise ValueError("percentile of an empty set")
    pos = 0.95 * (d.size - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    return float(d[lo] + (d[hi] - d[lo]) * (pos - lo))


def hd95(a: np.ndarray, b: np.ndarray, spacing_mm: float) -> float:
    """95th-percentile symmetric boundary distance in millimeters."""
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        raise ValueError("hd95 is undefined for an empty mask")
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return percentile_95(np.concatenate([d_ab, d_ba])) * spacing_mm


@dataclass
class RegionMetrics:
    dsc: float
    iou: float
    hd95_mm: float | None  # None when the prediction has no pixels


@dataclass
class MetricsReport:
    lumen_dsc: float = 0.0
    lumen_iou: float = 0.0
    lumen_hd95_mm: float = float("nan")
    eem_dsc: float = 0.0
    eem_iou: float = 0.0
    eem_hd95_mm: float = float("nan")
    n_samples: int = 0
    hd95_excluded: int = 0   # samples skipped in hd95 means (empty prediction)
    rows: list = field(default_factory=list)  # (sample_id, region, metrics)

    def summary(self) -> str:
        lines = [
            "region   dsc     iou     hd95_mm",
            f"lumen    {self.lumen_dsc:.4f}  {self.lumen_iou:.4f}  "
            f"{self.lumen_hd95_mm:.4f}",
            f"eem      {self.eem_dsc:.4f}  {self.eem_iou:.4f}  "
            f"{self.eem_hd95_mm:.4f}",
            f"samples  {self.n_samples}",
        ]
        if self.hd95_excluded:
            lines.append(f"warning: {self.hd95_excluded} empty-prediction "
                         "sample(s) excluded from hd95 means")
        return "\n".join(lines)


def sample_metrics(pred_label: np.ndarray, true_label: np.ndarray,
                   spacing_mm: float) -> dict[str, RegionMetrics]:
    out = {}
    for region, (pm, tm) in (
            ("lumen", (region_masks(pred_label)[0], region_masks(true_label)[0])),
            ("eem", (region_masks(pred_label)[1], region_masks(true_label)[1]))):
        h = None
        if pm.any() and tm.any():
            h = hd95(pm, tm, spacing_mm)
        out[region] = RegionMetrics(dsc=dsc(pm, tm), iou=iou(pm, tm), hd95_mm=h)
    return out


def predict_label(model, frames: np.ndarray) -> np.ndarray:
    """Argmax class map of an eval-mode forward on one (3, H, W) stack."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(Tensor(frames[None].astype(model.dtype)))
        return out.main_logits.data[0].argmax(axis=0).astype(np.uint8)
    finally:
        if was_training:
            model.train()


def evaluate(model, samples, spacing_mm: float | None = None) -> MetricsReport:
    """Mean per-sample metrics over a split. Samples whose prediction is
    empty for a region keep their dsc/iou and are dropped from that
    region's hd95 mean, counted in the report."""
    rep = MetricsReport()
    sums = {r: {"dsc": 0.0, "iou": 0.0, "hd": 0.0, "hd_n": 0}
            for r in ("lumen", "eem")}
    excluded = set()
    for s in samples:
        sp = spacing_mm if spacing_mm is not None else s.spacing_mm
        pred = predict_label(model, s.frames)
        ms = sample_metrics(pred, s.label, sp)
        for region, m in ms.items():
            sums[region]["dsc"] += m.dsc
            sums[region]["iou"] += m.iou
            if m.hd95_mm is None:
                excluded.add(s.id)
            else:
                sums[region]["hd"] += m.hd95_mm
                sums[region]["hd_n"] += 1
            rep.rows.append((s.id, region, m))
        rep.n_samples += 1
    if rep.n_samples == 0:
        raise ValueError("evaluate needs a nonempty split")
    n = rep.n_samples
    rep.lumen_dsc = sums["lumen"]["dsc"] / n
    rep.lumen_iou = sums["lumen"]["iou"] / n
    rep.eem_dsc = sums["eem"]["dsc"] / n
    rep.eem_iou = sums["eem"]["iou"] / n
    rep.lumen_hd95_mm = (sums["lumen"]["hd"] / sums["lumen"]["hd_n"]
                         if sums["lumen"]["hd_n"] else float("nan"))
    rep.eem_hd95_mm = (sums["eem"]["hd"] / sums["eem"]["hd_n"]
                       if sums["eem"]["hd_n"] else float("nan"))
    rep.hd95_excluded = len(excluded)
    return rep


def write_report_csv(path: str, rep: MetricsReport):
    with open(path, "w") as fh:
        fh.write("sample_id,region,dsc,iou,hd95_mm\n")
        for sid, region, m in rep.rows:
            hd = "" if m.hd95_mm is None else f"{m.hd95_mm:.6f}"
            fh.write(f"{sid},{region},{m.dsc:.6f},{m.iou:.6f},{hd}\n")


def fps_benchmark(model, input_hw: tuple[int, int], batch: int = 1,
                  warmup_iters: int = 2, timed_iters: int = 20,
                  seed: int = 0) -> dict:
    """Eval-mode forward throughput; wall-clock, single process."""
    if warmup_iters < 1 or timed_iters < 10:
        raise ValueError("need warmup >= 1 and timed iterations >= 10")
    model.eval()
    rng = np.random.Generator(np.random.PCG64(seed))
    x = Tensor(rng.uniform(0.0, 1.0,
                           size=(batch, model.config.in_frames,
                                 input_hw[0], input_hw[1]))
               .astype(model.dtype))
    with no_grad():
        for _ in range(warmup_iters):
            model(x)
        lat = []
        start = time.perf_counter()
        for _ in range(timed_iters):
            t0 = time.perf_counter()
            model(x)
            lat.append((time.perf_counter() - t0) * 1000.0)
        elapsed = time.perf_counter() - start
    lat = np.sort(np.array(lat))
    return {"fps": batch * timed_iters / elapsed,
            "p50_ms": float(np.median(lat)), "p95_ms": percentile_95(lat),
            "batch": batch, "input_hw": tuple(input_hw),
            "iters": timed_iters}
