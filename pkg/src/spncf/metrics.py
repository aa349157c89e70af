"""Counterfactual and classifier evaluation, plus tabular report emission."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

FRECHET_MODES = ("standard", "paper")
REPORT_COLUMNS = ("beta1", "classifier", "beta", "gamma", "validity_latent",
                  "validity_pipeline", "l2", "frechet_standard", "frechet_paper",
                  "switch_epoch")
JITTER = 1e-6


class MetricError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# counterfactual metrics


def validity(original_preds: Sequence[int], cf_preds: Sequence[int]) -> float:
    """Flip rate: fraction of positions where the prediction changed."""
    a, b = np.asarray(original_preds), np.asarray(cf_preds)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricError("validity of an empty set is undefined")
    return float(np.mean(a != b))


def proximity_l2(x: np.ndarray, x_cf: np.ndarray) -> float:
    x, x_cf = np.asarray(x, dtype=float), np.asarray(x_cf, dtype=float)
    if x.shape != x_cf.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_cf.shape}")
    return float(np.linalg.norm((x - x_cf).ravel()))


def fit_gaussian(embed: np.ndarray, jitter: float = JITTER) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance with ``jitter`` added on the diagonal."""
    e = np.asarray(embed, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if len(e) < 2:
        raise MetricError("need at least two samples to fit a covariance")
    mu = e.mean(axis=0)
    cov = np.atleast_2d(np.cov(e, rowvar=False))
    return mu, cov + jitter * np.eye(len(mu))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_moments(mu1, cov1, mu2, cov2, mode: str = "standard") -> float:
    """Frechet distance between two Gaussians given by their moments.

    ``paper`` drops the matrix square root from the cross term and can go
    negative; ``standard`` is the usual FID and is clamped at 0.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    c1, c2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    if mu1.shape != mu2.shape or c1.shape != c2.shape or c1.shape != (len(mu1), len(mu1)):
        raise MetricError("moment dimensions do not agree")
    mean_term = float(np.sum((mu1 - mu2) ** 2))
    if mode == "paper":
        return mean_term + float(np.trace(c1 + c2)) - 2.0 * float(np.trace(c1 @ c2))
    if mode != "standard":
        raise MetricError(f"unknown frechet mode {mode!r}")
    # tr (C1 C2)^1/2 = tr (S1 C2 S1)^1/2 with S1 = C1^1/2, which is symmetric
    s1 = _sqrt_psd(c1)
    w = np.linalg.eigvalsh(s1 @ c2 @ s1)
    cross = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    return max(0.0, mean_term + float(np.trace(c1) + np.trace(c2)) - 2.0 * cross)


def frechet(embed_org: np.ndarray, embed_cf: np.ndarray, mode: str = "standard",
            jitter: float = JITTER) -> float:
    e1, e2 = np.asarray(embed_org, float), np.asarray(embed_cf, float)
    if e1.ndim != e2.ndim or (e1.ndim == 2 and e1.shape[1] != e2.shape[1]):
        raise MetricError("embedding dimensions differ")
    mu1, c1 = fit_gaussian(e1, jitter)
    mu2, c2 = fit_gaussian(e2, jitter)
    return frechet_from_moments(mu1, c1, mu2, c2, mode)


# --------------------------------------------------------------------------
# classifier statistics


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with average ranks for ties; class 1 is positive."""
    s, y = np.asarray(scores, dtype=float), np.asarray(labels)
    pos = y == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC is undefined with a single class")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def classifier_stats(posteriors: np.ndarray, labels: Sequence[int]) -> dict[str, float]:
    p = np.asarray(posteriors, dtype=float)
    y = np.asarray(labels)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) != len(y):
        raise MetricError("expected (n, 2) posteriors and n labels")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError("posterior rows must sum to 1")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be binary")
    pred = np.argmax(p, axis=1)  # first maximum wins ties
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    tp = int(np.sum((pred == 1) & (y == 1)))
    npos_pred, npos = int(np.sum(pred == 1)), int(np.sum(y == 1))
    return {
        "accuracy": float(np.mean(pred == y)),
        "entropy": float(ent.mean()),
        "auc": auc(p[:, 1], y),
        "precision": tp / npos_pred if npos_pred else 0.0,
        "recall": tp / npos if npos else 0.0,
    }


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    beta1: float
    backend: str
    beta: float
    gamma: float
    validity_latent: float
    validity_pipeline: float
    mean_l2: float
    frechet_standard: float
    frechet_paper: float
    mean_switch_epoch: float
    classifier: dict = field(default_factory=dict)
    num_instances: int = 0

    def row(self) -> dict:
        return {
            "beta1": self.beta1, "classifier": self.backend, "beta": self.beta,
            "gamma": self.gamma, "validity_latent": self.validity_latent,
            "validity_pipeline": self.validity_pipeline, "l2": self.mean_l2,
            "frechet_standard": self.frechet_standard, "frechet_paper": self.frechet_paper,
            "switch_epoch": self.mean_switch_epoch,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(**doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(results, originals: np.ndarray, embed: Callable[[np.ndarray], np.ndarray],
                 beta1: float, classifier: dict | None = None) -> MetricsReport:
    """Aggregate persisted counterfactual results for one configuration.

    ``originals`` holds the input instance for each result in order and
    ``embed`` maps flattened images to embedding vectors for the Frechet terms.
    """
    if not results:
        raise MetricError("no counterfactual results")
    originals = np.asarray(originals, dtype=float)
    if len(originals) != len(results):
        raise MetricError("need one original instance per result")
    cfg = results[0].config
    src_rep = [r.source_prediction for r in results for _ in r.replicates]
    cf_rep = [rep.final_prediction for r in results for rep in r.replicates]
    switches = [rep.switch_epoch for r in results for rep in r.replicates
                if rep.switch_epoch is not None]
    x_cf = np.stack([r.x_cf for r in results])
    e_org, e_cf = embed(originals), embed(x_cf)
    return MetricsReport(
        beta1=float(beta1), backend=cfg.backend, beta=float(cfg.beta), gamma=float(cfg.gamma),
        validity_latent=validity(src_rep, cf_rep),
        validity_pipeline=validity([r.source_prediction for r in results],
                                   [r.pipeline_prediction for r in results]),
        mean_l2=float(np.mean([proximity_l2(x, r.x_cf) for x, r in zip(originals, results)])),
        frechet_standard=frechet(e_org, e_cf, "standard"),
        frechet_paper=frechet(e_org, e_cf, "paper"),
        mean_switch_epoch=float(np.mean(switches)) if switches else float("nan"),
        classifier=dict(classifier or {}), num_instances=len(results),
    )


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return "%.6g" % v


def sort_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (-r["beta1"], r["classifier"], r["beta"], r["gamma"]))


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def format_text(rows: list[dict]) -> str:
    cells = [list(REPORT_COLUMNS)] + [[_fmt(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() + "\n"
                   for row in cells)


def emit_report(results_dir: str | Path, out_stem: str | Path | None = None) -> list[dict]:
    """Collect every ``*.metrics.json`` under ``results_dir`` into sorted tables.

    Writes ``<out_stem>.csv`` and ``<out_stem>.txt`` (default ``report`` inside
    the directory) and returns the rows.
    """
    d = Path(results_dir)
    files = sorted(d.glob("**/*.metrics.json")) if d.is_dir() else []
    if not files:
        raise ReportError(f"no metrics files under {d}")
    rows = sort_rows([MetricsReport.load(f).row() for f in files])
    stem = Path(out_stem) if out_stem is not None else d / "report"
    _write_atomic(stem.with_suffix(".csv"), format_csv(rows))
    _write_atomic(stem.with_suffix(".txt"), format_text(rows))
    return rows


def parse_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({k: (v if k == "classifier" else float(v)) for k, v in rec.items()})
    return out


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
