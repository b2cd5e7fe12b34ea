"""Misclassification rates, entropy/size statistics and transfer measurements."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fgam import imaging, manipulations, pe_format
from fgam.attack import AttackConfig, AttackTrace, attack, init_perturbation, perturbation_size
from fgam.errors import EmptyInput, PreconditionViolation
from fgam.manipulations import InjectionSpec
from fgam.neural.models import THRESHOLD, ByteSeqNet, ImageConvNet, Model
from fgam.seeding import derive_seed


def entropy(data: bytes) -> float:
    """Shannon entropy of the byte histogram, in bits per byte."""
    if len(data) == 0:
        raise EmptyInput("entropy of an empty byte string")
    counts = np.bincount(np.frombuffer(bytes(data), dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum()) + 0.0


def score_files(model: Model, files: Sequence[bytes]) -> np.ndarray:
    """Malicious scores for raw files under either detector."""
    if isinstance(model, ImageConvNet):
        return model.scores([imaging.to_model_input(f, model.input_size) for f in files])
    return model.scores(list(files))


def misclassification_rate(model: Model, files: Sequence[bytes],
                           originals: Sequence[bytes] | None = None) -> float:
    """Fraction of ``files`` the model calls benign.

    Every file must stem from a sample the model detects; pass ``originals``
    (aligned with ``files``) when ``files`` are modified variants.
    """
    files = list(files)
    if not files:
        return float("nan")
    reference = files if originals is None else list(originals)
    if len(reference) != len(files):
        raise PreconditionViolation("originals and files differ in length")
    if np.any(score_files(model, reference) < THRESHOLD):
        raise PreconditionViolation("some originals are not detected as malware by this model")
    return float(np.mean(score_files(model, files) < THRESHOLD))


def mr_at(traces: Sequence[AttackTrace], k: int) -> float:
    """MR after ``k`` gradient rounds, read off full-length attack traces."""
    if not traces:
        return float("nan")
    return float(np.mean([tr.evaded_within(k) for tr in traces]))


def random_injection(original: bytes, rate: float, method, seed: int,
                     section_name: bytes = manipulations.DEFAULT_SECTION_NAME) -> bytes:
    pe = pe_format.parse(original)
    amount = perturbation_size(len(original), rate)
    out, _ = manipulations.inject(pe, InjectionSpec(method, amount, section_name), init_perturbation(amount, seed))
    return pe_format.serialize(out)


def random_baseline(model: Model, files: Sequence[bytes], rate: float, method, seed: int,
                    ids: Sequence[str] | None = None) -> float:
    """MR after a single uniform-random injection per file, no gradient rounds.

    Per-file seeds are derived from ``seed`` and the file id (or index), the
    same fan-out the attack harness uses, so the baseline equals MR(0).
    """
    files = list(files)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(files))]
    injected = [random_injection(f, rate, method, derive_seed(seed, "attack", sid))
                for f, sid in zip(files, ids)]
    return misclassification_rate(model, injected, files)


def run_attacks(model: ImageConvNet, files: Sequence[bytes], ids: Sequence[str],
                config: AttackConfig) -> list[AttackTrace]:
    traces = []
    for data, sid in zip(files, ids):
        cfg = AttackConfig(**{**config.__dict__, "seed": derive_seed(config.seed, "attack", sid)})
        traces.append(attack(data, model, cfg))
    return traces


def _quantiles(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(v.mean()),
        "p5": float(np.percentile(v, 5)),
        "p50": float(np.percentile(v, 50)),
        "p95": float(np.percentile(v, 95)),
    }


def interval_overlap(a: dict, b: dict) -> float:
    """Length of the intersection of two [p5, p95] intervals (0 when disjoint)."""
    return max(0.0, min(a["p95"], b["p95"]) - max(a["p5"], b["p5"]))


def cohort_stats(cohorts: dict[str, Sequence[bytes]], reference: str | None = None) -> dict:
    """Size and whole-file entropy distributions per cohort.

    With ``reference`` (e.g. the benign cohort), each other cohort also gets
    the overlap of its entropy interval with the reference and a
    ``separated`` flag for disjoint intervals.
    """
    stats = {}
    for name, files in cohorts.items():
        files = list(files)
        if not files:
            continue
        stats[name] = {
            "n": len(files),
            "size": _quantiles([len(f) for f in files]),
            "entropy": _quantiles([entropy(f) for f in files]),
        }
    if reference is not None and reference in stats:
        ref = stats[reference]["entropy"]
        for name, st in stats.items():
            if name == reference:
                continue
            st["entropy_overlap"] = interval_overlap(st["entropy"], ref)
            st["separated"] = st["entropy_overlap"] == 0.0
    return stats


@dataclass
class TransferResult:
    mr: float
    n_eligible: int
    n_excluded: int


def transfer_eval(originals: Sequence[bytes], adversarial: Sequence[bytes], transfer_model: Model) -> TransferResult:
    """MR of adversarial files on a second model.

    Only samples whose original the transfer model detects count, so the
    originals themselves always give MR 0.
    """
    originals, adversarial = list(originals), list(adversarial)
    if len(originals) != len(adversarial):
        raise PreconditionViolation("originals and adversarial files differ in length")
    if not originals:
        return TransferResult(float("nan"), 0, 0)
    detected = score_files(transfer_model, originals) >= THRESHOLD
    if not detected.any():
        return TransferResult(float("nan"), 0, len(originals))
    adv = [a for a, d in zip(adversarial, detected) if d]
    evaded = score_files(transfer_model, adv) < THRESHOLD
    return TransferResult(float(evaded.mean()), int(detected.sum()), int((~detected).sum()))


@dataclass
class EvalReport:
    """Assembled evaluation results plus per-sample records."""

    header: dict = field(default_factory=dict)
    mr: dict = field(default_factory=dict)  # (method, rate) -> {k: MR}
    baseline: dict = field(default_factory=dict)  # (method, rate) -> MR
    stop_reasons: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    cohorts: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        if self.mr:
            ks = sorted({k for row in self.mr.values() for k in row})
            lines.append("")
            lines.append("misclassification rate")
            lines.append("\t".join(["method", "rate", "random"] + [f"MR({k})" for k in ks]))
            for (method, rate), row in sorted(self.mr.items()):
                base = self.baseline.get((method, rate), float("nan"))
                lines.append("\t".join([method, f"{rate:g}", _pct(base)] + [_pct(row[k]) for k in ks]))
        if self.stop_reasons:
            lines.append("")
            lines.append("stop reasons")
            for (method, rate), counts in sorted(self.stop_reasons.items()):
                body = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
                lines.append(f"{method}\t{rate:g}\t{body}")
        if self.transfer:
            lines.append("")
            lines.append("transfer (byte-sequence model)")
            lines.append("method\trate\tthreshold\ttarget_MR\ttransfer_MR\teligible")
            for (method, rate, thr), res in sorted(self.transfer.items()):
                lines.append(f"{method}\t{rate:g}\t{thr:g}\t{_pct(res['target_mr'])}\t"
                             f"{_pct(res['transfer_mr'])}\t{res['eligible']}")
        if self.cohorts:
            lines.append("")
            lines.append(format_cohorts(self.cohorts))
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        """Aggregate numbers as JSON, one entry per (method, rate) cell."""
        cells = []
        for (method, rate), row in sorted(self.mr.items()):
            cells.append({
                "method": method,
                "rate": rate,
                "mr": {str(k): v for k, v in sorted(row.items())},
                "random": self.baseline.get((method, rate)),
                "stop_reasons": self.stop_reasons.get((method, rate), {}),
                "transfer": [dict(res, threshold=thr) for (m, r, thr), res in sorted(self.transfer.items())
                             if (m, r) == (method, rate)],
            })
        return json.dumps({"header": self.header, "cells": cells}, indent=1, sort_keys=True) + "\n"

    def records_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _pct(x: float) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}%"


def format_cohorts(stats: dict) -> str:
    lines = ["cohort\tn\tsize_mean\tsize_p5\tsize_p95\tentropy_mean\tentropy_p5\tentropy_p95\toverlap_vs_ref"]
    for name, st in stats.items():
        s, e = st["size"], st["entropy"]
        ov = st.get("entropy_overlap")
        lines.append(
            f"{name}\t{st['n']}\t{s['mean']:.0f}\t{s['p5']:.0f}\t{s['p95']:.0f}\t"
            f"{e['mean']:.3f}\t{e['p5']:.3f}\t{e['p95']:.3f}\t{'-' if ov is None else f'{ov:.3f}'}"
        )
    return "\n".join(lines)


def trace_records(ids: Iterable[str], cohort: str, traces: Sequence[AttackTrace]) -> list[dict]:
    return [
        {
            "sample_id": sid,
            "cohort": cohort,
            "score_before": tr.original_score,
            "score_after": tr.final_score,
            "entropy": entropy(tr.adversarial),
            "size": len(tr.adversarial),
            "stop_reason": tr.stop_reason.value,
            "t": tr.t,
        }
        for sid, tr in zip(ids, traces)
    ]
