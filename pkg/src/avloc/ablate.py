"""Cross-product ablations over config axes, reported in the mAP table layout."""
import itertools
import json
import os
from dataclasses import dataclass, replace

from .evaluation import TABLE_THRESHOLDS, EvalReport

G_TYPE_LABELS = {
    "diagonal": "Diagonal matrix",
    "softened": "Softened target",
    "fixed_gaussian": "Fixed gaussian",
    "adjustable_gaussian": "Adjustable gaussian",
}
ATTENTION_LABELS = {"global": "Global", "fixed": "Fixed", "adaptive": "Adaptive"}
AXIS_TITLES = {
    "g_type": "G-type",
    "attention_mode": "Attention strategy",
    "W": "Base window size",
    "H": "Head number",
    "alpha": "alpha",
}


def value_label(axis, value):
    if axis == "g_type":
        return G_TYPE_LABELS.get(value, str(value))
    if axis == "attention_mode":
        return ATTENTION_LABELS.get(value, str(value))
    return f"{axis}={value}"


def row_label(overrides):
    if not overrides:
        return "Baseline"
    return ", ".join(value_label(k, v) for k, v in overrides.items())


def enumerate_axes(axes):
    """Cross product of ``{axis: [values]}`` -> list of override dicts (empty axes -> one)."""
    axes = axes or {}
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


@dataclass
class AblationRow:
    label: str
    overrides: dict
    report: EvalReport


def format_table(rows, axes=None):
    names = list(axes or {})
    title = " / ".join(AXIS_TITLES.get(n, n) for n in names) or "Setting"
    width = max([len(title)] + [len(r.label) for r in rows]) + 2
    head = f"{title:<{width}}" + "".join(f"{t:>8.1f}" for t in TABLE_THRESHOLDS) + f"{'Avg.':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.label:<{width}}"
                     + "".join(f"{100 * r.report.map_at[t]:>8.1f}" for t in TABLE_THRESHOLDS)
                     + f"{100 * r.report.avg_map:>8.1f}")
    return "\n".join(lines)


def ablate(cfg, train_set, test_set, axes=None, run_dir=None, train_fn=None):
    """Train and evaluate one model per axis combination, all from ``cfg.seed``.

    ``train_fn(cfg, train_set, test_set, run_dir) -> EvalReport`` defaults to a
    full :class:`~avloc.train.Trainer` run.
    """
    if train_fn is None:
        train_fn = _train_and_eval
    rows = []
    for i, overrides in enumerate(enumerate_axes(axes)):
        variant = replace(cfg, **overrides)
        if "L_c" in overrides:
            variant = replace(variant, regression_ranges=None)
        variant.validate()
        sub = os.path.join(run_dir, f"variant_{i:02d}") if run_dir else None
        rows.append(AblationRow(row_label(overrides), overrides,
                                train_fn(variant, train_set, test_set, sub)))
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "ablation.txt"), "w") as f:
            f.write(format_table(rows, axes) + "\n")
        with open(os.path.join(run_dir, "ablation.json"), "w") as f:
            json.dump([{"label": r.label, "overrides": r.overrides, **r.report.to_json()}
                       for r in rows], f, indent=1)
    return rows


def _train_and_eval(cfg, train_set, test_set, run_dir):
    from .train import Trainer
    trainer = Trainer(cfg, train_set, None, run_dir)
    trainer.fit()
    return trainer.evaluate(test_set)
