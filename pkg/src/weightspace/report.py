"""Merge per-stage JSON outputs of a run directory into one report."""

from __future__ import annotations

import json
import os
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from .errors import PartialReport

STAGES = {
    "ingest": "ingest.json",
    "tokenize": "tokens/index.json",
    "train": "train.json",
    "sample": "sample.json",
    "eval": "eval.json",
    "probe": "probe.json",
}

# only these keys change between otherwise identical runs
VOLATILE_KEYS = ("created",)


def report_schema() -> dict:
    return json.loads(resources.files("weightspace").joinpath("report_schema.json").read_text())


def _summary(stages: dict) -> dict:
    out: dict = {}
    if "ingest" in stages:
        stats = stages["ingest"]["stats"]
        out["padding_fraction_dense"] = stats["padding_fraction_dense"]
        out["padding_fraction_sparse"] = stats["padding_fraction_sparse"]
    if "train" in stages:
        out["final_loss"] = stages["train"]["final_loss"]
        out["final_reconstruction_loss"] = stages["train"]["log"]["epochs"][-1]["reconstruction"]
        out["reconstruction_r2"] = stages["train"]["reconstruction_r2"]
    if "sample" in stages:
        out["generated_accuracies"] = [c["accuracy"] for c in stages["sample"]["candidates"]]
    if "eval" in stages:
        out["finetuned_accuracies"] = [m["finetuned"][-1] for m in stages["eval"]["models"] if m["finetuned"]]
    if "probe" in stages:
        out["probe_r2"] = stages["probe"]["r2"]
    return out


def pipeline_report(run_dir: str | os.PathLike) -> dict:
    """Consolidated report; raises ``PartialReport`` listing absent stages."""
    run_dir = Path(run_dir)
    stages, missing = {}, []
    for stage, rel in STAGES.items():
        path = run_dir / rel
        if path.exists():
            stages[stage] = json.loads(path.read_text(encoding="utf-8"))
        else:
            missing.append(stage)
    report = {
        "created": datetime.now(timezone.utc).isoformat(),
        "complete": not missing,
        "missing": missing,
        "summary": _summary(stages),
        "stages": stages,
    }
    if missing:
        raise PartialReport(report, missing)
    return report


def strip_volatile(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in VOLATILE_KEYS}
