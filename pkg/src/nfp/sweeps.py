"""Metric and tap-placement sweeps over the training harness."""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import metrics as M
from .backbone import FilterBank
from .training import TrainConfig, TrainReport, closed_form_parameter_count, prepare_features, train


@dataclass
class SweepResult:
    reports: dict[str, TrainReport]
    summary: list[dict]

    def to_dict(self) -> dict:
        return {"summary": self.summary, "reports": {k: r.to_dict() for k, r in self.reports.items()}}


def _ranked(rows: list[dict]) -> list[dict]:
    # stable sort keeps registry / declaration order among ties
    ranked = sorted(rows, key=lambda r: -r["test_accuracy"])
    for i, row in enumerate(ranked, 1):
        row["rank"] = i
    return ranked


def metric_sweep(template: TrainConfig, data, metrics=None, include_all: bool = False) -> SweepResult:
    """Train one model per similarity metric on identical data and seed.

    By default only metrics with analytic gradients are swept; pass
    ``include_all=True`` for all 18. Explicit ``metrics`` take precedence.
    """
    if metrics is None:
        metrics = M.METRIC_IDS if include_all else M.ANALYTIC_METRIC_IDS
    order = {m: i for i, m in enumerate(M.METRIC_IDS)}
    metrics = sorted({M.get_metric(m).id for m in metrics}, key=order.__getitem__)
    bank = FilterBank(template.stage_channels, in_channels=data[0].images.shape[1], seed=template.backbone_seed)
    reports, rows = {}, []
    for metric in metrics:
        cfg = replace(template, metric=metric, baseline=False)
        _, rep = train(cfg, data, prepare_features(cfg, data, bank))
        reports[metric] = rep
        rows.append({
            "metric": metric,
            "name": M.get_metric(metric).name,
            "test_accuracy": rep.test_accuracy,
            "best_val_accuracy": rep.best_val_accuracy,
            "parameter_count": rep.parameter_count,
            "silhouette": rep.silhouette,
        })
    return SweepResult(reports, _ranked(rows))


def tap_configurations(num_stages: int) -> list[tuple[int, ...]]:
    """Each single stage, then all stages concatenated."""
    singles = [(s,) for s in range(num_stages)]
    return singles + [tuple(range(num_stages))] if num_stages > 1 else singles


def placement_sweep(template: TrainConfig, data) -> SweepResult:
    """Train with NFP on each backbone stage alone and on all stages together."""
    reports, rows = {}, []
    bank = FilterBank(template.stage_channels, in_channels=data[0].images.shape[1], seed=template.backbone_seed)
    num_classes = int(max(ds.labels.max() for ds in data)) + 1
    for taps in tap_configurations(len(template.stage_channels)):
        cfg = replace(template, taps=taps, baseline=False)
        _, rep = train(cfg, data, prepare_features(cfg, data, bank))
        key = "all" if len(taps) > 1 else f"stage{taps[0]}"
        reports[key] = rep
        rows.append({
            "taps": key,
            "stages": list(taps),
            "channels": sum(cfg.stage_channels[t] for t in taps),
            "test_accuracy": rep.test_accuracy,
            "parameter_count": rep.parameter_count,
            "closed_form_parameter_count": closed_form_parameter_count(cfg, num_classes),
        })
    return SweepResult(reports, _ranked(rows))
