"""One-pass evaluation metrics and paired adaptation experiments."""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import detector as det
from . import meta
from .boxes import BoundingBox, iou

THRESHOLDS = np.linspace(0.0, 1.0, 101)
PRECISION_PX = 20.0

__all__ = ["iou", "EvalReport", "evaluate", "AdaptationCurves", "AdaptationReport", "adaptation_gap"]


@dataclass
class EvalReport:
    ious: np.ndarray
    center_errors: np.ndarray
    success: np.ndarray
    auc: float
    precision: float
    sequence_ious: dict = field(default_factory=dict)

    @property
    def mean_iou(self):
        return float(self.ious.mean())

    def metrics(self):
        out = {"frames": len(self.ious), "mean_iou": self.mean_iou, "auc": self.auc,
               "precision_20px": self.precision}
        for name, v in sorted(self.sequence_ious.items()):
            out[f"seq.{name}.mean_iou"] = v
        return out

    def text(self):
        rows = [f"{'metric':<28}{'value':>12}"]
        rows += [f"{k:<28}{v:>12.6f}" if isinstance(v, float) else f"{k:<28}{v:>12}"
                 for k, v in self.metrics().items()]
        block = [f"{k}={v!r}" for k, v in self.metrics().items()]
        return "\n".join(rows) + "\n\n" + "\n".join(block) + "\n"

    def curve_text(self):
        return "".join(f"{t:.2f} {s!r}\n" for t, s in zip(THRESHOLDS, self.success))

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "report.txt"), "w") as fh:
            fh.write(self.text())
        with open(os.path.join(directory, "success_curve.txt"), "w") as fh:
            fh.write(self.curve_text())


def _center_error(a, b):
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def evaluate(predictions, gt, sequence_names=None):
    """OPE metrics for one sequence, or several concatenated.

    ``predictions`` and ``gt`` are equal-length box lists (or lists of such
    lists, one per sequence, with optional names).
    """
    if predictions and isinstance(predictions[0], (list, tuple)) and not isinstance(predictions[0], BoundingBox):
        if len(predictions) != len(gt):
            raise ValueError(f"{len(predictions)} prediction sequences for {len(gt)} ground-truth sequences")
        names = sequence_names or [str(i) for i in range(len(gt))]
        reports = [evaluate(p, g) for p, g in zip(predictions, gt)]
        merged = evaluate([b for p in predictions for b in p], [b for g in gt for b in g])
        merged.sequence_ious = {n: r.mean_iou for n, r in zip(names, reports)}
        return merged
    if len(predictions) != len(gt):
        raise ValueError(f"{len(predictions)} predictions for {len(gt)} ground-truth frames")
    if not gt:
        raise ValueError("cannot evaluate an empty sequence")
    ious = np.array([iou(p, g) for p, g in zip(predictions, gt)])
    errors = np.array([_center_error(p, g) for p, g in zip(predictions, gt)])
    success = np.array([np.mean(ious > t) for t in THRESHOLDS])
    return EvalReport(ious, errors, success, float(success.mean()), float(np.mean(errors <= PRECISION_PX)))


# -- adaptation experiments ------------------------------------------------------------

@dataclass
class AdaptationCurves:
    """Per-task, per-step measurements for one parameter set ([tasks, steps + 1])."""

    support_loss: np.ndarray
    target_loss: np.ndarray
    target_iou: np.ndarray

    @property
    def iou_before(self):
        return self.target_iou[:, 0]

    @property
    def iou_after(self):
        return self.target_iou[:, -1]

    def write(self, path):
        steps = self.target_iou.shape[1]
        with open(path, "w") as fh:
            fh.write("task step support_loss target_loss target_iou\n")
            for i in range(self.target_iou.shape[0]):
                for k in range(steps):
                    fh.write(f"{i} {k} {self.support_loss[i, k]!r} {self.target_loss[i, k]!r} "
                             f"{self.target_iou[i, k]!r}\n")


@dataclass
class AdaptationReport:
    meta: AdaptationCurves
    baseline: AdaptationCurves

    def summary(self):
        out = {}
        for name, c in (("meta", self.meta), ("baseline", self.baseline)):
            out[f"{name}.iou_before"] = float(c.iou_before.mean())
            out[f"{name}.iou_after"] = float(c.iou_after.mean())
            out[f"{name}.target_loss_before"] = float(c.target_loss[:, 0].mean())
            out[f"{name}.target_loss_after"] = float(c.target_loss[:, -1].mean())
        out["gap.meta_gain"] = out["meta.iou_after"] - out["meta.iou_before"]
        out["gap.meta_vs_baseline"] = out["meta.iou_after"] - out["baseline.iou_after"]
        return out

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.meta.write(os.path.join(directory, "meta_curves.txt"))
        self.baseline.write(os.path.join(directory, "baseline_curves.txt"))
        with open(os.path.join(directory, "adaptation.txt"), "w") as fh:
            fh.write("".join(f"{k}={v!r}\n" for k, v in self.summary().items()))


def _measure(params, support, target, samples):
    config = params.config
    with ad.no_grad():
        s_loss = meta.batch_loss(params.weights(), support, config).item()
        t_loss = meta.batch_loss(params.weights(), target, config).item()
    cls_maps, reg_maps = det.predict(np.stack([img for img, _ in samples]), params)
    ious = [iou(det.best_box(c, r, config)[0], box) for c, r, (_, box) in zip(cls_maps, reg_maps, samples)]
    return s_loss, t_loss, float(np.mean(ious))


def adaptation_curves(params, tasks, steps):
    n = len(tasks)
    s_loss = np.empty((n, steps + 1))
    t_loss = np.empty((n, steps + 1))
    t_iou = np.empty((n, steps + 1))
    for i, task in enumerate(tasks):
        support = meta.prepare(task.support, params)
        target = meta.prepare(task.target, params)
        current = params
        for k in range(steps + 1):
            if k:
                current = meta.gd_steps(current, support, 1, step_offset=k - 1)
            s_loss[i, k], t_loss[i, k], t_iou[i, k] = _measure(current, support, target, task.target)
    return AdaptationCurves(s_loss, t_loss, t_iou)


def adaptation_gap(meta_params, baseline_params, tasks, steps):
    """Adapt both parameter sets with the same GD procedure on each task's
    support set and record losses and target IoU after every step."""
    if meta_params.config != baseline_params.config:
        raise ValueError("meta and baseline parameter sets use different detector configs")
    return AdaptationReport(adaptation_curves(meta_params, tasks, steps),
                            adaptation_curves(baseline_params, tasks, steps))
