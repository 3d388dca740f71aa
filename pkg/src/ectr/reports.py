"""Report serialization and human-readable summaries."""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Sequence

from pydantic import BaseModel

from .models import RunManifest, RunReport, SweepAggregate, SweepRow, VerifySummary


def to_record(model: BaseModel, kind: str) -> Dict[str, Any]:
    """JSON-ready dict tagged with its record kind."""
    return {"record": kind, **model.model_dump(mode="json", by_alias=True)}


def dumps(record: Dict[str, Any]) -> str:
    # float repr round-trips, so repeated runs diff cleanly
    return json.dumps(record, sort_keys=False, separators=(",", ":"))


def report_records(report: RunReport) -> Iterator[Dict[str, Any]]:
    """One record per epoch followed by the summary record."""
    for epoch in report.epochs:
        yield to_record(epoch, "epoch")
    summary = report.model_dump(mode="json", by_alias=True, exclude={"epochs"})
    yield {"record": "summary", **summary}


def write_jsonl(records: Iterable[Dict[str, Any]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(dumps(record) + "\n")
    return path


def write_report(report: RunReport, path: Path) -> Path:
    return write_jsonl(report_records(report), path)


def write_manifest(manifest: RunManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path


def sweep_records(rows: Sequence[SweepRow], aggregates: Sequence[SweepAggregate]) -> List[Dict[str, Any]]:
    return [to_record(r, "row") for r in rows] + [to_record(a, "aggregate") for a in aggregates]


def _pct(value: float, metric: str) -> str:
    return f"{100 * value:.2f}%" if metric == "accuracy" else f"{value:.6g}"


def format_run_summary(report: RunReport) -> str:
    """Format a run report into a readable summary."""
    lines = [
        f"**{report.method}** (seed {report.seed})",
        f"Mean {report.metric}: {_pct(report.mean, report.metric)} | "
        f"Worst: {_pct(report.worst, report.metric)}",
    ]
    for m in report.test_metrics:
        lines.append(f"  test env {m.env} (n={m.n}): {_pct(m.metric, report.metric)}")

    if final := report.final_train:
        lines.append(
            f"Final train: total {final.total:.6g} | R_main {final.r_main:.6g} | "
            f"P_TV {final.p_tv:.6g} | KL_env {final.kl_env:.6g} | lambda {final.lambda_:.6g}"
        )
    if report.degenerate_events:
        lines.append(f"Degenerate environment events: {len(report.degenerate_events)}")
    return "\n".join(lines) + "\n"


def format_sweep_table(rows: Sequence[SweepRow], aggregates: Sequence[SweepAggregate]) -> str:
    """Plot-ready text table: one line per run, then one per grid point."""
    lines = ["point\tseed\tparams\tmean\tworst\tkl_env\tp_tv"]
    for r in rows:
        params = ",".join(f"{k}={v!r}" for k, v in r.params.items())
        lines.append(
            f"{r.point}\t{r.seed}\t{params}\t{r.mean!r}\t{r.worst!r}\t{r.final_kl_env!r}\t{r.final_p_tv!r}"
        )
    lines.append("")
    lines.append("point\tn_seeds\tparams\tmean±std\tworst±std\tkl_env")
    for a in aggregates:
        params = ",".join(f"{k}={v!r}" for k, v in a.params.items())
        lines.append(
            f"{a.point}\t{a.n_seeds}\t{params}\t{a.mean_mean:.12g}±{a.mean_std:.12g}\t"
            f"{a.worst_mean:.12g}±{a.worst_std:.12g}\t{a.final_kl_env_mean:.12g}"
        )
    return "\n".join(lines) + "\n"


def format_verify_listing(summary: VerifySummary) -> str:
    """Format check outcomes as a pass/fail listing."""
    lines = []
    for check in summary.checks:
        status = "PASS" if check.passed else "FAIL"
        worst = f" (worst {check.worst_error:.3g})" if check.worst_error is not None else ""
        detail = f": {check.detail}" if check.detail else ""
        lines.append(f"{status} {check.name}{worst}{detail}")
    passed = sum(c.passed for c in summary.checks)
    lines.append(f"{passed}/{len(summary.checks)} checks passed at tolerance {summary.tolerance:g}")
    return "\n".join(lines) + "\n"
