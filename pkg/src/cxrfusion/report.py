"""Write evaluation results as JSON, CSV tables and a short Markdown digest."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

from .consensus import SensitivityTable
from .fsutil import atomic_write
from .stats import EvalSummary


def _csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r.get(k) is None else r[k] for k in fields})
    return buf.getvalue()


def _fmt(x: Optional[float], digits: int = 1) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def backend_rows(d: dict) -> list[dict]:
    rows = []
    for bid, m in d["backends"].items():
        cm = m["confusion"]
        rows.append({"backend_id": bid, **cm, "n": m["n"], "correct": m["correct"], "accuracy_pct": m["accuracy_pct"],
                     "precision_weighted": m["precision_weighted"], "recall_weighted": m["recall_weighted"],
                     "f1_weighted": m["f1_weighted"], "parse_failures": m["parse_failures"],
                     "backend_failures": m["backend_failures"]})
    return rows


def mcnemar_rows(d: dict) -> list[dict]:
    rows = [{"comparison": f"{k}|consensus", **v} for k, v in d["mcnemar"]["tests"].items()]
    return rows + [{"comparison": k, **v} for k, v in d["mcnemar"].get("pairwise", {}).items()]


def render_markdown(d: dict) -> str:
    a = d["agreement"]
    lines = ["# Evaluation summary", ""]
    meta = d["metadata"]
    if meta:
        lines += [f"- {k}: `{json.dumps(v, sort_keys=True)}`" for k, v in sorted(meta.items())] + [""]
    c = d["cases"]
    lines += [f"Cases: {c['total']} total, {c['evaluable']} evaluable, {c['unevaluable']} unevaluable.", ""]
    lines += ["## Backends", "", "| backend | TN | FP | FN | TP | accuracy % | precision | recall | F1 |", "|---|---|---|---|---|---|---|---|---|"]
    for r in backend_rows(d):
        lines.append(f"| {r['backend_id']} | {r['tn']} | {r['fp']} | {r['fn']} | {r['tp']} | {_fmt(r['accuracy_pct'])} "
                     f"| {_fmt(r['precision_weighted'], 5)} | {_fmt(r['recall_weighted'], 5)} | {_fmt(r['f1_weighted'], 5)} |")
    lines += ["", "## Agreement", "",
              f"- agreed: {a['agreement_count']} ({_fmt(a['agreement_rate_pct'])}%)",
              f"- agreed and correct: {a['agreement_correct']} ({_fmt(a['agreement_correct_pct'])}%)",
              f"- agreed and incorrect: {a['agreement_incorrect']} ({_fmt(a['agreement_incorrect_pct'])}%)",
              f"- disagreed or flagged: {a['disagreement_count']} ({_fmt(a['disagreement_pct'])}%)",
              f"- consensus accuracy: {_fmt(d['consensus']['accuracy_pct'])}%", ""]
    if d["flag_reasons"]:
        lines += ["Flag reasons: " + ", ".join(f"{k}={v}" for k, v in d["flag_reasons"].items()), ""]
    lines += [f"## McNemar ({d['mcnemar']['universe']}, no continuity correction)", "",
              "| backend | b | c | chi-square | p |", "|---|---|---|---|---|"]
    for r in (x for x in mcnemar_rows(d) if x["comparison"].endswith("|consensus")):
        chi = "not applicable" if not r["applicable"] else f"{r['chi_square']:.4f}"
        p = "not applicable" if not r["applicable"] else f"{r['p_value']:.4g}"
        lines.append(f"| {r['comparison'].split('|')[0]} | {r['b']} | {r['c']} | {chi} | {p} |")
    pairs = d["mcnemar"].get("pairwise", {})
    if pairs:
        lines += ["", "Paired backend comparison (b: first correct only, c: second correct only):", "",
                  "| pair | b | c | chi-square | p |", "|---|---|---|---|---|"]
        for k, r in pairs.items():
            chi = "not applicable" if not r["applicable"] else f"{r['chi_square']:.4f}"
            p = "not applicable" if not r["applicable"] else f"{r['p_value']:.4g}"
            lines.append(f"| {k.replace('|', ' vs ')} | {r['b']} | {r['c']} | {chi} | {p} |")
    lines += ["", "## Threshold sensitivity", "", "| threshold | consensus cases | correct | accuracy |", "|---|---|---|---|"]
    for r in d["sensitivity"]:
        lines.append(f"| {r['threshold']:g} | {r['consensus_count']} | {r['consensus_correct']} | {_fmt(r['consensus_accuracy'], 4)} |")
    return "\n".join(lines) + "\n"


def write_sensitivity(table: SensitivityTable, out: Path) -> dict[str, Path]:
    recs = table.to_records()
    paths = {"sensitivity_csv": out / "tables" / "sensitivity.csv", "sensitivity_json": out / "sensitivity.json"}
    atomic_write(paths["sensitivity_csv"], _csv(recs, ["threshold", "consensus_count", "consensus_correct", "consensus_accuracy"]))
    atomic_write(paths["sensitivity_json"], json.dumps(recs, indent=2) + "\n")
    return paths


def write_reports(summary: EvalSummary, out: Path) -> dict[str, Path]:
    d = summary.to_dict()
    tables = out / "tables"
    paths = {
        "summary": out / "summary.json",
        "markdown": out / "summary.md",
        "backends_csv": tables / "backends.csv",
        "agreement_csv": tables / "agreement.csv",
        "mcnemar_csv": tables / "mcnemar.csv",
    }
    atomic_write(paths["summary"], json.dumps(d, sort_keys=True, indent=2) + "\n")
    atomic_write(paths["markdown"], render_markdown(d))
    b = backend_rows(d)
    atomic_write(paths["backends_csv"], _csv(b, list(b[0]) if b else ["backend_id"]))
    a = d["agreement"]
    atomic_write(paths["agreement_csv"], _csv([a], list(a)))
    m = mcnemar_rows(d)
    atomic_write(paths["mcnemar_csv"], _csv(m, ["comparison", "b", "c", "n", "chi_square", "p_value", "applicable"]))
    paths.update(write_sensitivity(summary.sensitivity, out))
    return paths
