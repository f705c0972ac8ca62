"""Selection metrics, essential-matrix deviation and experiment reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import baseline, compat
from .errors import DegenerateConfiguration, EmptyInput, InsufficientCorrespondences, NMNetError

SELECTORS = ("nmnet", "nmnet_sp", "score_sum", "ransac")


@dataclass(frozen=True)
class SelectionMetrics:
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class EDeviationStats:
    mse: float
    mae: float
    median: float
    max: float
    min: float


def prf(pred, gt) -> SelectionMetrics:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    tn = int(np.sum(~pred & ~gt))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return SelectionMetrics(p, r, f, tp, fp, fn, tn)


def essential_deviation(e_est, e_gt) -> float:
    """Frobenius distance between unit-norm essentials, resolving the sign."""
    a = np.asarray(e_est, dtype=float)
    b = np.asarray(e_gt, dtype=float)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def aggregate_deviation(values) -> EDeviationStats:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise EmptyInput("no deviations to aggregate")
    s = np.sort(v)
    return EDeviationStats(
        mse=float(np.mean(v * v)),
        mae=float(np.mean(np.abs(v))),
        median=float(s[(len(s) - 1) // 2]),
        max=float(s[-1]),
        min=float(s[0]),
    )


# ---------------------------------------------------------------------------
# Pipeline evaluation
# ---------------------------------------------------------------------------


@dataclass
class SceneRow:
    scene: int
    selector: str
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int
    tn: int
    selected: int
    deviation: float | None
    flag: str | None


def estimate_from_selection(corrs, labels):
    """Eight-point estimate on the selected correspondences; ``(E, flag)``."""
    sel = np.asarray(corrs)[np.asarray(labels).astype(bool)]
    if len(sel) < baseline.SAMPLE_SIZE:
        return None, "NoEstimate"
    try:
        return baseline.eight_point(sel), None
    except (DegenerateConfiguration, InsufficientCorrespondences):
        return None, "NoEstimate"


def make_selector(name: str, **options):
    """Return ``fn(scene) -> labels`` for one of :data:`SELECTORS`.

    Options: ``model``/``config`` for the networks, ``threshold``, ``k`` and
    ``lam`` for ``score_sum``, ``ransac_config`` for ``ransac``.
    """
    if name in ("nmnet", "nmnet_sp"):
        from .net.train import infer

        model, config = options["model"], options["config"]
        return lambda scene: infer(model, scene, config)[1]
    if name == "score_sum":
        k = options.get("k", compat.DEFAULT_K)
        lam = options.get("lam", compat.DEFAULT_LAMBDA)
        threshold = options.get("threshold", 7.0)

        def score_sum(scene):
            matrix = compat.score_matrix(scene.corrs, lam)
            graph = compat.mine_cs_knn(matrix, k, include_self=False)
            return compat.score_sum_classifier(graph, matrix, threshold)

        return score_sum
    if name == "ransac":
        cfg = options.get("ransac_config", baseline.RansacConfig())

        def run_ransac(scene):
            try:
                return baseline.ransac(scene.corrs, cfg)[1]
            except NMNetError:
                return np.zeros(len(scene.corrs), dtype=np.int64)

        return run_ransac
    raise ValueError(f"unknown selector {name!r}; choose from {SELECTORS}")


def evaluate_scenes(scenes, selector_name: str, select) -> list[SceneRow]:
    rows = []
    for i, scene in enumerate(scenes):
        flag = None
        try:
            pred = np.asarray(select(scene))
        except NMNetError as exc:
            pred = np.zeros(len(scene.labels), dtype=np.int64)
            flag = f"SelectorError: {type(exc).__name__}"
        m = prf(pred, scene.labels)
        e, eflag = estimate_from_selection(scene.corrs, pred)
        dev = essential_deviation(e, scene.e_gt) if e is not None else None
        rows.append(SceneRow(i, selector_name, m.precision, m.recall, m.f_measure, m.tp, m.fp, m.fn, m.tn, int(pred.sum()), dev, flag or eflag))
    return rows


def summarize(rows: list[SceneRow]) -> dict:
    """Aggregate block for one selector, recomputable from its rows."""
    if not rows:
        raise EmptyInput("no rows to summarize")
    devs = [r.deviation for r in rows if r.deviation is not None]
    out = {
        "scenes": len(rows),
        "flagged": sum(r.flag is not None for r in rows),
        "precision": float(np.mean([r.precision for r in rows])),
        "recall": float(np.mean([r.recall for r in rows])),
        "f_measure": float(np.mean([r.f_measure for r in rows])),
        "deviation": asdict(aggregate_deviation(devs)) if devs else None,
    }
    return out


def evaluate_pipeline(scenes, selectors: dict) -> dict:
    """Evaluate several selectors on labeled scenes.

    ``selectors`` maps a selector name to a ``fn(scene) -> labels``.  The
    report holds per-scene rows and per-selector aggregates; scenes where
    no essential matrix could be estimated are flagged and left out of the
    deviation statistics but still counted.
    """
    scenes = list(scenes)
    rows, aggregate = [], {}
    for name, select in selectors.items():
        sel_rows = evaluate_scenes(scenes, name, select)
        rows.extend(sel_rows)
        aggregate[name] = summarize(sel_rows)
    return {"rows": [asdict(r) for r in rows], "aggregate": aggregate}


def recompute_aggregate(report: dict) -> dict:
    by_sel: dict = {}
    for r in report["rows"]:
        by_sel.setdefault(r["selector"], []).append(SceneRow(**r))
    return {name: summarize(rows) for name, rows in by_sel.items()}


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def format_table(report: dict) -> str:
    head = f"{'selector':<10} {'P':>7} {'R':>7} {'F':>7} {'MSE':>8} {'MAE':>8} {'median':>8} {'max':>8} {'min':>8} {'flagged':>7}"
    lines = [head]
    for name, agg in report["aggregate"].items():
        dev = agg["deviation"]
        cells = [f"{dev[k]:>8.4f}" for k in ("mse", "mae", "median", "max", "min")] if dev else [f"{'n/a':>8}"] * 5
        lines.append(
            f"{name:<10} {agg['precision']:>7.4f} {agg['recall']:>7.4f} {agg['f_measure']:>7.4f} {' '.join(cells)} {agg['flagged']:>7d}"
        )
    return "\n".join(lines)
