"""File-level pipeline stages: ingest, notegen, run, evaluate, sweep.

Every stage reads and writes inside ``RunConfig.out``::

    config.resolved.json   cases.jsonl   manifest.jsonl   ingest_report.json
    images/                notes/        run/cases/       run/raw/
    outcomes.jsonl         review_queue.jsonl             requests.jsonl
    summary.json           summary.md    tables/*.csv
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import Mode, RunConfig
from .consensus import ConsensusConfig, fuse, scored_case, sweep, write_review_queue
from .core import (
    CaseRecord,
    ConsensusOutcome,
    ConsensusStatus,
    CxrFusionError,
    ExcludedCase,
    LabelVector,
    ModelOutput,
    ValidationError,
    Verdict,
)
from .fsutil import atomic_write, dumps, read_jsonl, sha256_file, write_jsonl
from .embeddings import concat_multimodal, cross_modal_cosine, make_provider
from .ingest import DecodeError, SamplingSpec, encode_file, load_dataset_index
from .notegen import ClinicalNote, PhraseBank, default_bank, extract_labels, generate_note
from .orchestrator import ConfigError, ImagePart, PromptPayload, RequestLog, dispatch_all, make_backend
from .report import write_reports, write_sensitivity
from .stats import build_eval_summary

log = logging.getLogger(__name__)

OK, PARTIAL, FAILED = "ok", "partial", "failed"


class AuditError(CxrFusionError):
    pass


@dataclass
class StageResult:
    status: str
    counts: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


# ---------------------------------------------------------------- file helpers


def echo_config(cfg: RunConfig) -> None:
    d = cfg.to_dict()
    d["config_hash"] = cfg.config_hash()
    atomic_write(cfg.out / "config.resolved.json", json.dumps(d, sort_keys=True, indent=2) + "\n")


def _safe_name(case_id: str) -> str:
    if not case_id or "/" in case_id or "\\" in case_id or case_id in (".", ".."):
        raise ValidationError(f"case_id {case_id!r} is not usable as a file name")
    return case_id


def load_cases(out: Path) -> list[CaseRecord]:
    path = out / "cases.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} not found; run ingest first")
    return [CaseRecord.from_dict(r) for r in read_jsonl(path)]


# ---------------------------------------------------------------- ingest


def run_ingest(cfg: RunConfig) -> StageResult:
    cfg.validate_paths("dataset")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg)
    sample = SamplingSpec(cfg.sample_count, cfg.seed) if cfg.sample_count is not None else None
    index = load_dataset_index(cfg.dataset, cfg.uncertain_policy, sample)
    image_root = Path(cfg.image_root) if cfg.image_root else Path(cfg.dataset).parent

    images_dir = out / "images"
    if images_dir.exists():
        shutil.rmtree(images_dir)
    images_dir.mkdir(parents=True)

    cases, manifest = [], []
    rejected = list(index.rejected)
    for case in index.records:
        name = _safe_name(case.case_id)
        entries = []
        try:
            for k, ref in enumerate(case.image_refs):
                enc = encode_file(image_root / ref, cfg.jpeg_quality)
                rel = f"images/{name}.jpg" if k == 0 else f"images/{name}_{k}.jpg"
                atomic_write(out / rel, enc.jpeg_bytes)
                entries.append({"path": rel, "width": enc.width, "height": enc.height, "source_format": enc.source_format.value})
        except (OSError, DecodeError, ValidationError) as exc:
            for e in entries:
                (out / e["path"]).unlink(missing_ok=True)
            rejected.append({"case_id": case.case_id, "kind": "image", "reason": str(exc)})
            log.warning("case %s rejected: %s", case.case_id, exc)
            continue
        cases.append(case)
        first = entries[0]
        manifest.append({"case_id": case.case_id, **first, "images": entries})

    write_jsonl(out / "cases.jsonl", (c.to_dict() for c in cases))
    write_jsonl(out / "manifest.jsonl", manifest)
    report = index.report()
    report.update(records=len(cases), rejected=len(rejected), rejections=rejected)
    atomic_write(out / "ingest_report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")

    hard = [r for r in rejected if r["kind"] != "policy"]
    status = FAILED if not cases and hard else PARTIAL if hard else OK
    return StageResult(status, {"records": len(cases), "rejected": len(rejected)}, {"manifest": out / "manifest.jsonl"})


# ---------------------------------------------------------------- notegen


def note_seed(base_seed: int, case_id: str) -> int:
    """Per-case 64-bit seed so notes do not depend on case order."""
    digest = hashlib.blake2b(f"{base_seed}\x1f{case_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _bank(cfg: RunConfig) -> PhraseBank:
    return PhraseBank.load(cfg.phrase_bank) if cfg.phrase_bank else default_bank()


def build_note(case: CaseRecord, cfg: RunConfig, bank: PhraseBank) -> ClinicalNote:
    resolved = case.labels.resolve(cfg.uncertain_policy)
    # No Finding is derived from the 13 abnormalities, as extraction derives it
    labels = LabelVector.from_positive(resolved.positives())
    return generate_note(labels, note_seed(cfg.resolved_notegen_seed, case.case_id), bank)


def run_notegen(cfg: RunConfig, audit: Optional[bool] = None) -> StageResult:
    cases = load_cases(cfg.out)
    bank = _bank(cfg)
    audit = cfg.notegen_audit if audit is None else audit
    notes_dir = cfg.resolved_notes_dir
    notes_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = 0, []
    for case in cases:
        try:
            note = build_note(case, cfg, bank)
        except (ValidationError, ExcludedCase) as exc:
            skipped.append({"case_id": case.case_id, "reason": str(exc)})
            log.warning("note for %s skipped: %s", case.case_id, exc)
            continue
        text = note.render()
        if audit:
            back = extract_labels(ClinicalNote.parse(text), bank)
            if back != note.labels:
                raise AuditError(f"{case.case_id}: note does not round-trip to its labels")
        atomic_write(notes_dir / f"{_safe_name(case.case_id)}.txt", text)
        written += 1
    report = {"written": written, "skipped": skipped, "seed": cfg.resolved_notegen_seed, "audit": audit}
    atomic_write(cfg.out / "notegen_report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    status = PARTIAL if skipped else OK
    return StageResult(status, {"written": written, "skipped": len(skipped)}, {"notes": notes_dir})


# ---------------------------------------------------------------- run


def _payload(case: CaseRecord, manifest: dict, cfg: RunConfig, context: str) -> PromptPayload:
    images = [
        ImagePart(base64.b64encode((cfg.out / e["path"]).read_bytes()).decode("ascii"))
        for e in manifest["images"]
    ]
    return PromptPayload.build(case.case_id, images, cfg.question, context)


def _context(case: CaseRecord, cfg: RunConfig, bank: PhraseBank) -> str:
    if cfg.mode is Mode.UNIMODAL:
        return ""
    path = cfg.resolved_notes_dir / f"{case.case_id}.txt"
    if path.exists():
        return path.read_text(encoding="utf-8").strip()
    if cfg.notegen_seed is None:
        raise ConfigError(f"multimodal run needs notes ({path} missing) or a notegen seed")
    return build_note(case, cfg, bank).render().strip()


def _persist_case(run_dir: Path, case_id: str, outputs: Sequence[ModelOutput], unevaluable: bool) -> None:
    name = _safe_name(case_id)
    recs = []
    for o in outputs:
        raw_path = None
        if o.raw_text is not None:
            raw_path = f"run/raw/{name}/{o.backend_id}.txt"
            atomic_write(run_dir.parent / raw_path, o.raw_text.encode("utf-8"))
        recs.append(
            {
                "backend_id": o.backend_id,
                "raw_text_path": raw_path,
                "verdict": None if o.verdict is None else int(o.verdict),
                "error": o.error,
                "latency_ms": o.latency_ms,
            }
        )
    atomic_write(run_dir / "cases" / f"{name}.json", dumps({"case_id": case_id, "unevaluable": unevaluable, "outputs": recs}) + "\n")


def _load_case_outputs(out: Path, rec: dict) -> list[ModelOutput]:
    outputs = []
    for o in rec["outputs"]:
        raw = None
        if o["raw_text_path"]:
            raw = (out / o["raw_text_path"]).read_bytes().decode("utf-8")
        verdict = None if o["verdict"] is None else Verdict(o["verdict"])
        outputs.append(ModelOutput(o["backend_id"], rec["case_id"], raw, verdict, o.get("latency_ms", 0), o["error"]))
    return outputs


def consensus_config(cfg: RunConfig) -> ConsensusConfig:
    provider = None
    if cfg.metric.value in ("embedding_cosine", "bertscore_f1"):
        provider = make_provider(cfg.embedding_provider, cache_path=cfg.out / "embedding_cache.jsonl")
    return ConsensusConfig(cfg.threshold, cfg.metric, provider)


def _alignment(case: CaseRecord, manifest: dict, cfg: RunConfig, context: str, providers) -> dict:
    img_provider, text_provider = providers
    img = img_provider.embed((cfg.out / manifest["path"]).read_bytes())
    text = text_provider.embed(context or " ")
    joint = concat_multimodal(img, text)
    return {
        "image_dim": img.dimension,
        "text_dim": text.dimension,
        "multimodal_dim": joint.dimension,
        "cross_modal_cosine": cross_modal_cosine(img, text),
    }


def outcome_record(o: ConsensusOutcome, truth: Verdict, raw_paths: dict[str, Optional[str]]) -> dict:
    return {
        "case_id": o.case_id,
        "status": o.status.value,
        "similarity": o.similarity,
        "fused_verdict": None if o.fused_verdict is None else int(o.fused_verdict),
        "reason": o.reason,
        "ground_truth": int(truth),
        "outputs": [
            {
                "backend_id": x.backend_id,
                "verdict": None if x.verdict is None else int(x.verdict),
                "error": x.error,
                "raw_text_path": raw_paths.get(x.backend_id),
            }
            for x in o.outputs
        ],
    }


def run_inference(cfg: RunConfig, resume: bool = False, backends=None) -> StageResult:
    """Dispatch every case, persist raw outputs, then fuse and write outcomes.

    With ``resume`` cases that already have a persisted result are skipped;
    fusion always runs over the persisted results so a resumed run ends in
    the same files as an uninterrupted one.
    """
    out = cfg.out
    cases = load_cases(out)
    manifest = {r["case_id"]: r for r in read_jsonl(out / "manifest.jsonl")}
    truths = {c.case_id: c.ground_truth for c in cases}
    if backends is None:
        cfg.validate_paths()
        if len(cfg.backends) < 2:
            raise ConfigError(f"need at least two backends, got {len(cfg.backends)}")
        backends = [make_backend(b, truths) for b in cfg.backends]
    if len(backends) < 2:
        raise ConfigError(f"need at least two backends, got {len(backends)}")
    echo_config(cfg)

    run_dir = out / "run"
    if not resume and run_dir.exists():
        shutil.rmtree(run_dir)
    (run_dir / "cases").mkdir(parents=True, exist_ok=True)
    done = {p.stem for p in (run_dir / "cases").glob("*.json")}

    bank = _bank(cfg)
    contexts = {c.case_id: _context(c, cfg, bank) for c in cases}
    todo = [(c, _payload(c, manifest[c.case_id], cfg, contexts[c.case_id])) for c in cases if c.case_id not in done]
    request_log = RequestLog(out / "requests.jsonl")
    if not resume and request_log.path.exists():
        request_log.path.unlink()

    def persist(res) -> None:
        _persist_case(run_dir, res.case_id, res.outputs, res.unevaluable)

    asyncio.run(dispatch_all(todo, backends, cfg.concurrency, request_log, on_result=persist))

    providers = None
    if cfg.alignment:
        providers = (make_provider(cfg.image_embedding_provider), make_provider(cfg.embedding_provider))
    ccfg = consensus_config(cfg)
    records, outcomes, raw_paths, unevaluable = [], [], {}, []
    for case in sorted(cases, key=lambda c: c.case_id):
        rec = json.loads((run_dir / "cases" / f"{case.case_id}.json").read_text(encoding="utf-8"))
        paths = {o["backend_id"]: o["raw_text_path"] for o in rec["outputs"]}
        if rec["unevaluable"]:
            unevaluable.append(case.case_id)
            records.append({"case_id": case.case_id, "status": "unevaluable", "ground_truth": int(case.ground_truth),
                            "outputs": [{"backend_id": o["backend_id"], "error": o["error"]} for o in rec["outputs"]]})
            continue
        outcome = fuse(_load_case_outputs(out, rec), ccfg)
        outcomes.append(outcome)
        raw_paths[case.case_id] = paths
        r = outcome_record(outcome, case.ground_truth, paths)
        if providers:
            r["alignment"] = _alignment(case, manifest[case.case_id], cfg, contexts[case.case_id], providers)
        records.append(r)

    write_jsonl(out / "outcomes.jsonl", records)
    flagged = write_review_queue(out / "review_queue.jsonl", outcomes, raw_paths)
    counts = {
        "cases": len(cases),
        "consensus": sum(o.is_consensus for o in outcomes),
        "flagged": flagged,
        "unevaluable": len(unevaluable),
        "dispatched": len(todo),
        "resumed": len(done),
        "consensus_settings": {"threshold": cfg.threshold, "metric": cfg.metric.value},
    }
    atomic_write(out / "run_report.json", json.dumps(counts, sort_keys=True, indent=2) + "\n")
    status = FAILED if cases and len(unevaluable) == len(cases) else PARTIAL if unevaluable else OK
    return StageResult(status, counts, {"outcomes": out / "outcomes.jsonl"})


# ---------------------------------------------------------------- evaluate / sweep


def load_outcomes(out: Path) -> tuple[list[ConsensusOutcome], list[str], dict[str, Verdict]]:
    path = out / "outcomes.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} not found; run the inference stage first")
    outcomes, unevaluable, truths = [], [], {}
    for r in read_jsonl(path):
        truths[r["case_id"]] = Verdict(r["ground_truth"])
        if r["status"] == "unevaluable":
            unevaluable.append(r["case_id"])
            continue
        outputs = []
        for o in r["outputs"]:
            raw = (out / o["raw_text_path"]).read_bytes().decode("utf-8") if o["raw_text_path"] else None
            verdict = None if o["verdict"] is None else Verdict(o["verdict"])
            outputs.append(ModelOutput(o["backend_id"], r["case_id"], raw, verdict, 0, o["error"]))
        fused = None if r["fused_verdict"] is None else Verdict(r["fused_verdict"])
        outcomes.append(ConsensusOutcome(r["case_id"], r["similarity"], ConsensusStatus(r["status"]), fused, tuple(outputs), r["reason"]))
    return outcomes, unevaluable, truths


def run_metadata(cfg: RunConfig) -> dict:
    seeds = {"seed": cfg.seed, "notegen_seed": cfg.resolved_notegen_seed}
    for b in cfg.backends:
        if b.error_profile is not None:
            seeds[f"mock:{b.backend_id}"] = b.error_profile.seed
    settings = {"threshold": cfg.threshold, "metric": cfg.metric.value}
    run_report = cfg.out / "run_report.json"
    if run_report.exists():
        # the outcomes were gated by the run stage; report what it used
        settings = json.loads(run_report.read_text(encoding="utf-8")).get("consensus_settings", settings)
    meta = {
        "mode": cfg.mode.value,
        "config_hash": cfg.config_hash(),
        "cases_hash": sha256_file(cfg.out / "cases.jsonl"),
        "metric": settings["metric"],
        "threshold": settings["threshold"],
        "uncertain_policy": cfg.uncertain_policy.value,
        "seeds": seeds,
    }
    if cfg.dataset and Path(cfg.dataset).exists():
        meta["dataset_hash"] = sha256_file(cfg.dataset)
    return meta


def run_evaluate(cfg: RunConfig) -> StageResult:
    outcomes, unevaluable, truths = load_outcomes(cfg.out)
    backend_ids = sorted({o.backend_id for oc in outcomes for o in oc.outputs})
    summary = build_eval_summary(truths, outcomes, backend_ids, cfg.thresholds, unevaluable, cfg.mcnemar_universe, run_metadata(cfg))
    paths = write_reports(summary, cfg.out)
    status = PARTIAL if unevaluable else OK
    return StageResult(status, {"evaluable": len(outcomes), "unevaluable": len(unevaluable)}, {**paths, "summary_obj": summary})


def run_sweep(cfg: RunConfig, thresholds: Optional[Sequence[float]] = None) -> StageResult:
    outcomes, _, truths = load_outcomes(cfg.out)
    table = sweep([scored_case(o, truths[o.case_id]) for o in outcomes], tuple(thresholds or cfg.thresholds))
    paths = write_sensitivity(table, cfg.out)
    return StageResult(OK, {"rows": len(table.rows)}, {**paths, "table": table})
