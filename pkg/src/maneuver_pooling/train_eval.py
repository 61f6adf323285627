"""Losses, the training loop and the maneuver-stratified RMSE harness."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .dataset import EVAL_CLASSES
from .errors import DataError, InvalidParameterError, ShapeError, TrainingDiverged, UsageError
from .model import GaussianSeq, ManeuverModel, ManeuverPosterior, collate, prepare
from .nn import Adam, Tensor, as_tensor, clip_global_norm, exp, log, log_softmax, square

LOG_2PI = math.log(2 * math.pi)
REPORT_CLASSES = ("overall",) + EVAL_CLASSES
HORIZONS = (1, 2, 3, 4, 5)

# RMSE (m) on NGSIM US-101/I-80 as published for the original method; shown
# next to desk-scale results for orientation only
NGSIM_REFERENCE_RMSE = {
    "slstm": {
        "overall": (0.33, 0.97, 1.72, 2.65, 3.83), "keep": (0.37, 1.01, 1.72, 2.57, 3.60),
        "merge": (0.35, 1.03, 1.89, 2.93, 4.19), "left": (0.54, 1.50, 2.70, 4.14, 5.87),
        "right": (0.60, 1.93, 3.53, 5.47, 7.59),
    },
    "csp": {
        "overall": (0.34, 0.98, 1.73, 2.68, 3.87), "keep": (0.38, 1.02, 1.76, 2.64, 3.72),
        "merge": (0.36, 1.06, 1.94, 2.96, 4.18), "left": (0.53, 1.50, 2.72, 4.18, 5.88),
        "right": (0.62, 1.87, 3.46, 5.46, 7.76),
    },
    "sgan": {
        "overall": (0.34, 0.98, 1.73, 2.66, 3.84), "keep": (0.38, 1.02, 1.75, 2.61, 3.66),
        "merge": (0.37, 1.07, 1.95, 2.93, 4.08), "left": (0.54, 1.54, 2.77, 4.23, 5.93),
        "right": (0.58, 1.76, 3.38, 5.35, 7.64),
    },
    "polar": {
        "overall": (0.34, 0.96, 1.71, 2.66, 3.85), "keep": (0.38, 1.01, 1.72, 2.58, 3.63),
        "merge": (0.34, 0.99, 1.82, 2.75, 3.85), "left": (0.48, 1.41, 2.61, 4.09, 5.83),
        "right": (0.54, 1.72, 3.28, 5.16, 7.32),
    },
    "polar_vr": {
        "overall": (0.25, 0.84, 1.58, 2.53, 3.75), "keep": (0.29, 0.89, 1.62, 2.51, 3.62),
        "merge": (0.25, 0.91, 1.76, 2.81, 4.04), "left": (0.37, 1.22, 2.38, 3.88, 5.69),
        "right": (0.39, 1.38, 2.83, 4.63, 6.74),
    },
}
STRATEGY_LABELS = {"slstm": "S-LSTM", "csp": "CSP", "sgan": "S-GAN", "polar": "Polar", "polar_vr": "Polar-Vr"}


# losses

def bivariate_nll(mu: Tensor, log_sigma: Tensor, rho: Tensor, target) -> Tensor:
    """Mean over all leading axes of the correlated bivariate negative log density.

    ``mu``/``log_sigma`` are ``(..., 2)``, ``rho`` is ``(...)``.
    """
    t = as_tensor(np.asarray(target), like=mu)
    if t.shape != mu.shape:
        raise ShapeError(f"target {t.shape} does not match prediction {mu.shape}")
    inv = exp(log_sigma * -1.0)
    nx = (t[..., 0] - mu[..., 0]) * inv[..., 0]
    ny = (t[..., 1] - mu[..., 1]) * inv[..., 1]
    one_m = 1.0 - square(rho)
    z = square(nx) + square(ny) - nx * ny * rho * 2.0
    per_step = (LOG_2PI + log_sigma[..., 0] + log_sigma[..., 1] + log(one_m) * 0.5
                + z / (one_m * 2.0))
    return per_step.mean()


def diagonal_nll(mu: Tensor, log_sigma: Tensor, target) -> Tensor:
    """Mean negative log density of a Gaussian with diagonal covariance."""
    t = as_tensor(np.asarray(target), like=mu)
    if t.shape != mu.shape:
        raise ShapeError(f"target {t.shape} does not match prediction {mu.shape}")
    d = mu.shape[-1]
    n = (t - mu) * exp(log_sigma * -1.0)
    per_step = (log_sigma + square(n) * 0.5).sum(axis=-1) + 0.5 * d * LOG_2PI
    return per_step.mean()


def gaussian_nll(g: GaussianSeq, target) -> float:
    """Negative log-likelihood of ``target`` (``(F, 2)`` or ``(F, 3)``) averaged over steps."""
    sigma = np.asarray(g.sigma, dtype=np.float64)
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise InvalidParameterError("standard deviations must be finite and > 0")
    target = np.asarray(target, dtype=np.float64)
    mu = Tensor(np.asarray(g.mu, dtype=np.float64))
    log_sigma = Tensor(np.log(sigma))
    if g.kind == "bivariate":
        rho = np.asarray(g.rho, dtype=np.float64)
        if not np.all(np.abs(rho) < 1):
            raise InvalidParameterError("correlation must satisfy |rho| < 1")
        return float(bivariate_nll(mu, log_sigma, Tensor(rho), target).data)
    if g.kind == "trivariate":
        return float(diagonal_nll(mu, log_sigma, target).data)
    raise InvalidParameterError(f"unknown Gaussian kind {g.kind!r}")


def maneuver_ce(post: ManeuverPosterior, label) -> float:
    """``-log p_loc[m_l] - log p_acc[m_a]``."""
    log_loc, log_acc = post.log_probs()
    return float(-log_loc[int(label.location)] - log_acc[int(label.acceleration)])


def maneuver_ce_logits(loc_logits: Tensor, acc_logits: Tensor, loc, acc) -> Tensor:
    rows = np.arange(loc_logits.shape[0])
    picked = log_softmax(loc_logits)[rows, np.asarray(loc)] + log_softmax(acc_logits)[rows, np.asarray(acc)]
    return picked.mean() * -1.0


def scaled_mse(model: ManeuverModel, mu: Tensor, target) -> Tensor:
    """Mean over steps and samples of the squared error summed over output coordinates.

    Coordinates are divided by the output scale first, so radius, angle and
    radial speed contribute on comparable footing.
    """
    t = as_tensor(np.asarray(target), like=mu)
    if t.shape != mu.shape:
        raise ShapeError(f"target {t.shape} does not match prediction {mu.shape}")
    inv = as_tensor(1.0 / model.output_scale()[:, None, :], like=mu)
    return square((t - mu) * inv).sum(axis=-1).mean()


def model_loss(model: ManeuverModel, batch, lambda_traj=1.0, lambda_mnv=1.0, trajectory="nll"):
    """Teacher-forced loss of a batch and its parts as floats.

    ``trajectory="mse"`` swaps the likelihood for :func:`scaled_mse` on the
    means, used as a warm-up before the likelihood takes over.
    """
    ctx = model.context(batch)
    parts = {}
    if model.cfg.maneuvers:
        raw = model.decode_raw(ctx, batch.loc, batch.acc)
    else:
        raw = model.decode_raw(ctx)
    mu, log_sigma, rho = model.squash(raw)
    if trajectory == "mse":
        traj = scaled_mse(model, mu, batch.target)
    elif rho is not None:
        traj = bivariate_nll(mu, log_sigma, rho, batch.target)
    else:
        traj = diagonal_nll(mu, log_sigma, batch.target)
    loss = traj * lambda_traj
    parts[trajectory] = float(traj.data)
    if model.cfg.maneuvers:
        ce = maneuver_ce_logits(*model.maneuver_logits(ctx), batch.loc, batch.acc)
        parts["ce"] = float(ce.data)
        if lambda_mnv:
            loss = loss + ce * lambda_mnv
    parts["loss"] = float(loss.data)
    return loss, parts


# evaluation

def horizon_index(k, rate: float = 5.0) -> int:
    idx = int(round(k * rate)) - 1
    if idx < 0:
        raise UsageError(f"horizon {k} s must be positive")
    return idx


def rmse_by_horizon(pred_xy, true_xy, horizons=HORIZONS, rate: float = 5.0) -> np.ndarray:
    """RMSE (m) at each horizon in seconds; index ``k * rate - 1`` of the future."""
    pred = np.asarray(pred_xy, dtype=np.float64)
    true = np.asarray(true_xy, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ShapeError(f"predictions {pred.shape} and ground truth {true.shape} must both be (N, F, 2)")
    if pred.shape[0] == 0:
        raise UsageError("RMSE of an empty set is undefined")
    out = []
    for k in horizons:
        idx = horizon_index(k, rate)
        if idx >= pred.shape[1]:
            raise UsageError(f"horizon {k} s is beyond the {pred.shape[1]}-step prediction")
        sq = np.sum((pred[:, idx] - true[:, idx]) ** 2, axis=-1)
        out.append(math.sqrt(float(np.mean(sq))))
    return np.array(out)


@dataclass
class RmseReport:
    """RMSE per maneuver class and horizon; absent cells are ``None``."""

    strategy: str
    horizons: tuple = HORIZONS
    rmse: dict = field(default_factory=dict)  # class -> list of float | None
    counts: dict = field(default_factory=dict)  # class -> int

    def value(self, cls: str, k) -> float | None:
        return self.rmse[cls][list(self.horizons).index(k)]

    def to_dict(self) -> dict:
        return {
            cls: {
                "count": self.counts[cls],
                "rmse": {str(k): v for k, v in zip(self.horizons, self.rmse[cls])},
            }
            for cls in REPORT_CLASSES
        }

    @classmethod
    def from_dict(cls, strategy, data) -> "RmseReport":
        horizons = tuple(int(k) for k in next(iter(data.values()))["rmse"])
        return cls(strategy, horizons,
                   {c: [data[c]["rmse"][str(k)] for k in horizons] for c in REPORT_CLASSES},
                   {c: data[c]["count"] for c in REPORT_CLASSES})


def report_from_predictions(strategy, pred_xy, true_xy, eval_classes, horizons=HORIZONS, rate=5.0):
    pred = np.asarray(pred_xy, dtype=np.float64)
    true = np.asarray(true_xy, dtype=np.float64)
    classes = np.asarray(list(eval_classes))
    report = RmseReport(strategy, tuple(horizons))
    for cls in REPORT_CLASSES:
        mask = np.ones(len(classes), bool) if cls == "overall" else classes == cls
        report.counts[cls] = int(mask.sum())
        if mask.any():
            report.rmse[cls] = [float(v) for v in rmse_by_horizon(pred[mask], true[mask], horizons, rate)]
        else:
            for k in horizons:
                if horizon_index(k, rate) >= pred.shape[1]:
                    raise UsageError(f"horizon {k} s is beyond the {pred.shape[1]}-step prediction")
            report.rmse[cls] = [None] * len(horizons)
    return report


def predict_all(model: ManeuverModel, samples, batch_size: int = 256):
    """MAP means ``(N, F, 2)``, ground truth ``(N, F, 2)`` and eval classes."""
    prepared = [prepare(s, model.cfg) for s in samples]
    if not prepared:
        raise DataError("no samples to evaluate")
    preds = []
    for start in range(0, len(prepared), batch_size):
        batch = collate(prepared[start:start + batch_size], model.cfg)
        preds.append(model.predict_means(batch))
    truth = np.stack([p.future_xy for p in prepared])
    return np.concatenate(preds), truth, [p.eval_class for p in prepared]


def evaluate_by_maneuver(model: ManeuverModel, samples, horizons=HORIZONS, rate: float = 5.0,
                         batch_size: int = 256, strategy: str | None = None) -> RmseReport:
    pred, truth, classes = predict_all(model, samples, batch_size)
    return report_from_predictions(strategy or model.cfg.pooling, pred, truth, classes, horizons, rate)


def maneuver_accuracy(model: ManeuverModel, samples, batch_size: int = 256) -> float:
    """Fraction of samples whose MAP pair equals the labeled pair."""
    prepared = [prepare(s, model.cfg) for s in samples]
    hits = 0
    for start in range(0, len(prepared), batch_size):
        batch = collate(prepared[start:start + batch_size], model.cfg)
        for post, loc, acc in zip(model.posteriors(model.context(batch)), batch.loc, batch.acc):
            hits += post.map_pair() == (int(loc), int(acc))
    return hits / len(prepared)


def _fmt(v, width=7):
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.2f}"


def format_report(report: RmseReport, reference: bool = True) -> str:
    """Aligned text table of one report, classes as rows and horizons as columns."""
    head = f"{'class':<10}{'n':>7}" + "".join(f"{f'{k} s':>7}" for k in report.horizons)
    lines = [f"RMSE (m), strategy {STRATEGY_LABELS.get(report.strategy, report.strategy)}", head]
    for cls in REPORT_CLASSES:
        if report.counts[cls] == 0 and cls != "overall":
            continue
        lines.append(f"{cls:<10}{report.counts[cls]:>7}" + "".join(_fmt(v) for v in report.rmse[cls]))
    ref = NGSIM_REFERENCE_RMSE.get(report.strategy)
    if reference and ref is not None and tuple(report.horizons) == HORIZONS:
        lines.append(f"NGSIM reference ({STRATEGY_LABELS[report.strategy]}, published):")
        for cls in REPORT_CLASSES:
            if report.counts[cls] or cls == "overall":
                lines.append(f"{cls:<10}{'':>7}" + "".join(_fmt(v) for v in ref[cls]))
    return "\n".join(lines) + "\n"


def format_comparison(reports, reference: bool = True) -> str:
    """Side-by-side table: one block per class, horizons as rows, strategies as columns."""
    reports = list(reports)
    names = [STRATEGY_LABELS.get(r.strategy, r.strategy) for r in reports]
    width = max(9, *(len(n) + 2 for n in names))
    horizons = reports[0].horizons
    lines = []
    for cls in REPORT_CLASSES:
        if cls != "overall" and all(r.counts[cls] == 0 for r in reports):
            continue
        counts = ", ".join(f"{n}={r.counts[cls]}" for n, r in zip(names, reports))
        lines.append(f"[{cls}] samples: {counts}")
        lines.append(f"{'horizon':<9}" + "".join(f"{n:>{width}}" for n in names))
        for i, k in enumerate(horizons):
            lines.append(f"{f'{k} s':<9}" + "".join(_fmt(r.rmse[cls][i], width) for r in reports))
        refs = [NGSIM_REFERENCE_RMSE.get(r.strategy) for r in reports]
        if reference and tuple(horizons) == HORIZONS and any(refs):
            lines.append("NGSIM reference (published):")
            for i, k in enumerate(horizons):
                lines.append(f"{f'{k} s':<9}" + "".join(
                    _fmt(None if ref is None else ref[cls][i], width) for ref in refs))
        lines.append("")
    return "\n".join(lines)


def reports_to_json(reports, reference: bool = True) -> dict:
    """Machine-readable form keyed by strategy, then class, then horizon."""
    out = {"results": {r.strategy: r.to_dict() for r in reports}}
    if reference:
        out["ngsim_reference"] = {
            r.strategy: {cls: dict(zip(map(str, HORIZONS), NGSIM_REFERENCE_RMSE[r.strategy][cls]))
                         for cls in REPORT_CLASSES}
            for r in reports if r.strategy in NGSIM_REFERENCE_RMSE
        }
    return out


# training

@dataclass
class TrainResult:
    model: ManeuverModel
    log: list
    steps: int


def _write_record(record, sink):
    if sink is not None:
        sink.write(json.dumps(record, sort_keys=True) + "\n")
        sink.flush()


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Step size for optimizer step ``step`` (0-based) out of ``total``."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    frac = min(step / (total - 1), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def train(model: ManeuverModel, train_set, val_set, cfg: TrainConfig, log_sink=None,
          horizons=HORIZONS, rate: float = 5.0) -> TrainResult:
    """Mini-batch Adam on the teacher-forced loss.

    Batch order comes from ``cfg.seed`` alone and every reduction runs in a
    fixed order, so equal inputs give bitwise equal parameters. One JSON
    record per split and epoch goes to ``log_sink`` (a text stream).
    """
    train_set = list(train_set)
    if not train_set:
        raise DataError("training set is empty")
    dtype = np.dtype(cfg.dtype)
    if model.dtype != dtype:
        model = model.astype(dtype)
    prepared = [prepare(s, model.cfg) for s in train_set]
    val_set = list(val_set or [])
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    log_records, step = [], 0
    n = len(prepared)
    total = cfg.epochs * -(-n // cfg.batch_size)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        totals, seen = {}, 0
        stop = False
        for start in range(0, n, cfg.batch_size):
            batch = collate([prepared[i] for i in order[start:start + cfg.batch_size]], model.cfg)
            phase = "mse" if epoch <= cfg.mse_pretrain_epochs else "nll"
            loss, parts = model_loss(model, batch, cfg.lambda_traj, cfg.lambda_mnv, phase)
            if not all(math.isfinite(v) for v in parts.values()):
                shown = ", ".join(batch.ids[:8]) + (" ..." if len(batch.ids) > 8 else "")
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}): {parts}; batch samples: {shown}",
                    step=step, batch=batch.ids)
            opt.zero_grad()
            loss.backward()
            clip_global_norm(params, cfg.clip_norm)
            opt.lr = learning_rate(cfg, step, total)
            opt.step()
            step += 1
            for key, v in parts.items():
                totals[key] = totals.get(key, 0.0) + v * batch.size
            seen += batch.size
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        record = {"epoch": epoch, "split": "train", "steps": step, "objective": phase}
        record.update({k: v / seen for k, v in totals.items()})
        log_records.append(record)
        _write_record(record, log_sink)
        if val_set:
            record = {"epoch": epoch, "split": "val", **validation_metrics(model, val_set, cfg, horizons, rate)}
            log_records.append(record)
            _write_record(record, log_sink)
        if stop:
            break
    return TrainResult(model, log_records, step)


def validation_metrics(model, samples, cfg: TrainConfig, horizons=HORIZONS, rate=5.0) -> dict:
    prepared = [prepare(s, model.cfg) for s in samples]
    totals, preds = {}, []
    for start in range(0, len(prepared), cfg.batch_size):
        batch = collate(prepared[start:start + cfg.batch_size], model.cfg)
        _, parts = model_loss(model, batch, cfg.lambda_traj, cfg.lambda_mnv)
        for key, v in parts.items():
            totals[key] = totals.get(key, 0.0) + v * batch.size
        preds.append(model.predict_means(batch))
    out = {k: v / len(prepared) for k, v in totals.items()}
    rmse = rmse_by_horizon(np.concatenate(preds), np.stack([p.future_xy for p in prepared]), horizons, rate)
    out.update({f"rmse@{k}s": float(v) for k, v in zip(horizons, rmse)})
    return out


__all__ = [
    "HORIZONS", "NGSIM_REFERENCE_RMSE", "REPORT_CLASSES", "RmseReport", "TrainResult",
    "bivariate_nll", "diagonal_nll", "evaluate_by_maneuver", "format_comparison", "format_report",
    "gaussian_nll", "learning_rate", "scaled_mse", "maneuver_accuracy", "maneuver_ce", "maneuver_ce_logits", "model_loss",
    "predict_all", "report_from_predictions", "reports_to_json", "rmse_by_horizon", "train",
]
