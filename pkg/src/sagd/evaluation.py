"""Detection metrics (AUROC, FPR at a target TPR), adversarial AUC variants,
report files and score histograms.

OOD is the positive class and higher scores mean more OOD. A sample is
flagged OOD when its score is strictly above the threshold, matching
:func:`sagd.scoring.detect`.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackConfig, attack_for_eval
from .errors import ContractViolation, IngestionError

REPORT_COLUMNS = ("condition", "attack", "fpr95", "auc", "auc_in", "auc_out", "n_id", "n_ood", "seed")
REPORT_VERSION = 1


@dataclass(frozen=True)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.id_scores, dtype=np.float64).ravel()
        ood = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if ids.size == 0 or ood.size == 0:
            raise ContractViolation("both ID and OOD scores must be non-empty")
        if not (np.isfinite(ids).all() and np.isfinite(ood).all()):
            raise ContractViolation("scores must be finite")
        object.__setattr__(self, "id_scores", ids)
        object.__setattr__(self, "ood_scores", ood)


@dataclass(frozen=True)
class ROCResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float
    fpr_at_95_tpr: float


def _as_scoreset(scores, ood_scores=None) -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet(scores, ood_scores)


def _count_above(sorted_vals: np.ndarray, thresholds) -> np.ndarray:
    return sorted_vals.size - np.searchsorted(sorted_vals, thresholds, side="right")


def auroc(scores, ood_scores=None) -> float:
    """Mann-Whitney AUROC: P(ood > id) with ties counted one half."""
    s = _as_scoreset(scores, ood_scores)
    ids = np.sort(s.id_scores)
    below = np.searchsorted(ids, s.ood_scores, side="left").sum()
    ties = (np.searchsorted(ids, s.ood_scores, side="right")
            - np.searchsorted(ids, s.ood_scores, side="left")).sum()
    return (int(below) + 0.5 * int(ties)) / (ids.size * s.ood_scores.size)


def roc_curve(scores, ood_scores=None) -> ROCResult:
    """ROC swept over every distinct score (descending) and finally ``-inf``."""
    s = _as_scoreset(scores, ood_scores)
    thresholds = np.concatenate([np.unique(np.concatenate([s.id_scores, s.ood_scores]))[::-1], [-np.inf]])
    ids, ood = np.sort(s.id_scores), np.sort(s.ood_scores)
    tpr = _count_above(ood, thresholds) / ood.size
    fpr = _count_above(ids, thresholds) / ids.size
    return ROCResult(thresholds, tpr, fpr, auroc(s), fpr_at_tpr(s, 0.95))


def fpr_at_tpr(scores, target_tpr: float = 0.95, ood_scores=None) -> float:
    """FPR at the largest threshold whose TPR reaches ``target_tpr`` (no interpolation)."""
    if not 0 < target_tpr <= 1:
        raise ContractViolation("target_tpr must lie in (0, 1]")
    s = _as_scoreset(scores, ood_scores)
    ids, ood = np.sort(s.id_scores), np.sort(s.ood_scores)
    thresholds = np.concatenate([np.unique(np.concatenate([ids, ood]))[::-1], [-np.inf]])
    tpr = _count_above(ood, thresholds) / ood.size
    first = int(np.argmax(tpr >= target_tpr))  # -inf always reaches tpr 1
    return float(_count_above(ids, thresholds[first:first + 1])[0] / ids.size)


def compute_scores(model, scorer, x, batch_size=1024) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(scorer(model.embed_for_scoring(x[i:i + batch_size])).cpu().numpy())
    return np.concatenate(out).astype(np.float64)


def adversarial_auc_variants(model, scorer, id_data, ood_data, cfg: AttackConfig, attack="pgd",
                             generator=None, batch_size=1024):
    """AUC with both sides attacked, inliers only (AUC_In) and outliers only (AUC_Out).

    ``id_data`` is ``(x, y)``; ``ood_data`` is ``x``. Returns a dict with the
    three AUCs, the attacked-both FPR95, and the four score vectors.
    """
    x_id, y_id = id_data
    adv_id, adv_ood = [], []
    for i in range(0, x_id.shape[0], batch_size):
        a, _ = attack_for_eval((x_id[i:i + batch_size], y_id[i:i + batch_size]), ood_data[:1], model,
                               scorer, cfg, "id_only", attack, generator)
        adv_id.append(a.perturbed)
    for i in range(0, ood_data.shape[0], batch_size):
        _, b = attack_for_eval((x_id[:1], y_id[:1]), ood_data[i:i + batch_size], model, scorer, cfg,
                               "ood_only", attack, generator)
        adv_ood.append(b.perturbed)
    clean_id = compute_scores(model, scorer, x_id, batch_size)
    clean_ood = compute_scores(model, scorer, ood_data, batch_size)
    att_id = compute_scores(model, scorer, torch.cat(adv_id), batch_size)
    att_ood = compute_scores(model, scorer, torch.cat(adv_ood), batch_size)
    both = ScoreSet(att_id, att_ood)
    return {
        "auc": auroc(both),
        "auc_in": auroc(att_id, clean_ood),
        "auc_out": auroc(clean_id, att_ood),
        "fpr95": fpr_at_tpr(both, 0.95),
        "clean_auc": auroc(clean_id, clean_ood),
        "scores": {"clean_id": clean_id, "clean_ood": clean_ood, "attacked_id": att_id, "attacked_ood": att_ood},
    }


@dataclass(frozen=True)
class EvalRow:
    condition: str
    attack: str
    fpr95: float
    auc: float
    auc_in: float
    auc_out: float
    n_id: int
    n_ood: int
    seed: int


@dataclass
class EvalReport:
    rows: list

    def aggregate(self) -> EvalRow:
        """Mean of every metric over the member rows; counts are summed."""
        if not self.rows:
            raise ContractViolation("report has no rows")
        m = len(self.rows)

        def mean(name):
            return sum(getattr(r, name) for r in self.rows) / m

        return EvalRow("aggregate", "mean", mean("fpr95"), mean("auc"), mean("auc_in"), mean("auc_out"),
                       sum(r.n_id for r in self.rows), sum(r.n_ood for r in self.rows), self.rows[0].seed)


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in [*report.rows, report.aggregate()]:
        w.writerow([_cell(getattr(row, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _render_json(report: EvalReport) -> str:
    payload = {
        "version": REPORT_VERSION,
        "columns": list(REPORT_COLUMNS),
        "rows": [asdict(r) for r in report.rows],
        "aggregate": asdict(report.aggregate()),
    }
    return json.dumps(payload, indent=2) + "\n"


def emit_report(report: EvalReport, path, fmt=None) -> Path:
    """Write the report as ``csv`` or ``json`` (inferred from the suffix by default)."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    if fmt not in ("csv", "json"):
        raise ContractViolation(f"unknown report format {fmt!r}")
    text = _render_csv(report) if fmt == "csv" else _render_json(report)
    try:
        path.write_text(text)
    except OSError as exc:
        raise IngestionError(f"cannot write report ({exc.strerror})", path) from exc
    return path


def _row_from_strings(d) -> EvalRow:
    kinds = {f.name: f.type for f in fields(EvalRow)}
    vals = {}
    for name in REPORT_COLUMNS:
        v = d[name]
        t = kinds[name]
        vals[name] = float(v) if t == "float" else int(v) if t == "int" else str(v)
    return EvalRow(**vals)


def load_report(path) -> EvalReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read report ({exc.strerror})", path) from exc
    if path.suffix == ".json":
        payload = json.loads(text)
        if payload.get("version") != REPORT_VERSION:
            raise IngestionError("unsupported report version", path)
        return EvalReport([_row_from_strings(r) for r in payload["rows"]])
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0].keys()) != REPORT_COLUMNS:
        raise IngestionError("report header does not match the expected columns", path)
    return EvalReport([_row_from_strings(r) for r in rows if r["condition"] != "aggregate"])


def histogram_table(scores: ScoreSet, bins=30):
    """Shared bin edges, per-side counts and overlap mass of normalised histograms."""
    both = np.concatenate([scores.id_scores, scores.ood_scores])
    edges = np.histogram_bin_edges(both, bins=bins)
    id_counts, _ = np.histogram(scores.id_scores, edges)
    ood_counts, _ = np.histogram(scores.ood_scores, edges)
    overlap = float(np.minimum(id_counts / scores.id_scores.size, ood_counts / scores.ood_scores.size).sum())
    return edges, id_counts, ood_counts, overlap


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "condition"


def emit_histograms(scores_by_condition, out_dir, bins=30) -> list:
    """One overlaid ID/OOD histogram PNG plus a text sidecar per condition."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, s in scores_by_condition.items():
            s = _as_scoreset(s)
            edges, id_c, ood_c, overlap = histogram_table(s, bins)
            stem = out_dir / f"hist_{_slug(name)}"
            lines = [f"# condition={name}", f"# overlap_mass={float(overlap)!r}",
                     "# left_edge,right_edge,id_count,ood_count"]
            lines += [f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(id_c[i])},{int(ood_c[i])}"
                      for i in range(len(id_c))]
            stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")

            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.hist(s.id_scores, bins=edges, alpha=0.6, density=True, label="ID")
            ax.hist(s.ood_scores, bins=edges, alpha=0.6, density=True, label="OOD")
            ax.set_xlabel("OOD score")
            ax.set_ylabel("density")
            ax.set_title(name)
            ax.legend()
            fig.tight_layout()
            fig.savefig(stem.with_suffix(".png"), dpi=100, metadata={"Software": None})
            plt.close(fig)
            written += [stem.with_suffix(".png"), stem.with_suffix(".txt")]
    except OSError as exc:
        raise IngestionError(f"cannot write histograms ({exc.strerror})", exc.filename) from exc
    return written


def read_histogram_sidecar(path):
    """Parse a sidecar back into ``(overlap_mass, rows)``."""
    overlap, rows = None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# overlap_mass="):
            overlap = float(line.split("=", 1)[1])
        elif line and not line.startswith("#"):
            l, r, a, b = line.split(",")
            rows.append((float(l), float(r), int(a), int(b)))
    return overlap, rows
