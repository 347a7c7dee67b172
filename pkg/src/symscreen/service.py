"""HTTP service: extraction runs, review queue, adjudications, and gold
projection, persisted via append-only logs under a data directory.

One extraction run executes at a time; adjudications are authoritative
over detections when projecting gold labels. Replaying the logs after a
crash reconstructs identical state (gold projections are byte-identical).
"""

from __future__ import annotations

import datetime as dt
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import extract as ex
from .corpus import Corpus, GoldLabel, Span, gold_to_jsonl, ingest
from .screen import vectorize
from .storage import AppendLog
from .taxonomy import category_ids

VERDICTS = ("accept", "reject", "modify")


@dataclass
class Run:
    run_id: str
    backend_id: str
    corpus_ref: str
    state: str = "pending"
    created_at: str = ""
    finished_at: str | None = None
    done_pairs: int = 0
    total_pairs: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "backend_id": self.backend_id,
            "corpus_ref": self.corpus_ref,
            "state": self.state,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "progress": {"done_pairs": self.done_pairs, "total_pairs": self.total_pairs},
            "error": self.error,
        }


@dataclass
class Adjudication:
    adjudication_id: str
    note_id: str
    category_id: str
    verdict: str
    corrected_evidence: list[dict] | None
    reviewer: str
    timestamp: str
    seq: int

    def to_json(self) -> dict:
        return {
            "adjudication_id": self.adjudication_id,
            "note_id": self.note_id,
            "category_id": self.category_id,
            "verdict": self.verdict,
            "corrected_evidence": self.corrected_evidence,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
        }


class ServiceStore:
    """In-memory index over the append-only logs; rebuilt by replay."""

    def __init__(self, data_dir: str | Path, backends: dict[str, ex.BackendConfig]):
        self.data_dir = Path(data_dir)
        self.backends = dict(backends)
        self.runs_log = AppendLog(self.data_dir / "runs.log")
        self.adj_log = AppendLog(self.data_dir / "adjudications.log")
        self.runs: dict[str, Run] = {}
        self.adjudications: list[Adjudication] = []
        self._idempotency: dict[str, Adjudication] = {}
        self._det_cache: dict[str, list[ex.Detection]] = {}
        self._corpus_cache: dict[str, Corpus] = {}
        self._mutate = threading.Lock()
        self._run_queue: list[str] = []
        self._worker: threading.Thread | None = None
        self._replay()

    # -- replay / persistence -------------------------------------------------

    def _replay(self) -> None:
        for rec in self.runs_log.replay():
            if rec["type"] == "run_created":
                self.runs[rec["run_id"]] = Run(
                    run_id=rec["run_id"],
                    backend_id=rec["backend_id"],
                    corpus_ref=rec["corpus_ref"],
                    created_at=rec["created_at"],
                    total_pairs=rec.get("total_pairs", 0),
                )
            elif rec["type"] == "run_state":
                run = self.runs[rec["run_id"]]
                run.state = rec["state"]
                run.finished_at = rec.get("finished_at")
                run.done_pairs = rec.get("done_pairs", run.done_pairs)
                run.total_pairs = rec.get("total_pairs", run.total_pairs)
                run.error = rec.get("error")
        for rec in self.adj_log.replay():
            adj = Adjudication(
                adjudication_id=rec["adjudication_id"],
                note_id=rec["note_id"],
                category_id=rec["category_id"],
                verdict=rec["verdict"],
                corrected_evidence=rec.get("corrected_evidence"),
                reviewer=rec["reviewer"],
                timestamp=rec["timestamp"],
                seq=len(self.adjudications),
            )
            self.adjudications.append(adj)
            key = rec.get("idempotency_key")
            if key:
                self._idempotency.setdefault(key, adj)

    # -- corpora / detections --------------------------------------------------

    def corpus(self, corpus_ref: str) -> Corpus:
        if corpus_ref not in self._corpus_cache:
            path = Path(corpus_ref)
            if not path.is_absolute():
                path = self.data_dir / "corpora" / corpus_ref
            self._corpus_cache[corpus_ref] = ingest(path)
        return self._corpus_cache[corpus_ref]

    def detections_path(self, run_id: str) -> Path:
        return self.data_dir / "detections" / f"{run_id}.jsonl"

    def detections(self, run_id: str) -> list[ex.Detection]:
        if run_id not in self._det_cache:
            path = self.detections_path(run_id)
            self._det_cache[run_id] = ex.read_detections(path) if path.exists() else []
        return self._det_cache[run_id]

    # -- runs ------------------------------------------------------------------

    def start_run(self, backend_id: str, corpus_ref: str) -> Run:
        if backend_id not in self.backends:
            raise LookupError(f"unknown backend: {backend_id}")
        corpus = self.corpus(corpus_ref)  # raises on missing corpus
        with self._mutate:
            run_id = f"run-{len(self.runs) + 1:06d}"
            run = Run(
                run_id=run_id,
                backend_id=backend_id,
                corpus_ref=corpus_ref,
                created_at=dt.datetime.now(dt.timezone.utc).isoformat(),
                total_pairs=len(corpus.notes) * len(category_ids()),
            )
            self.runs[run_id] = run
            self.runs_log.append(
                {
                    "type": "run_created",
                    "run_id": run_id,
                    "backend_id": backend_id,
                    "corpus_ref": corpus_ref,
                    "created_at": run.created_at,
                    "total_pairs": run.total_pairs,
                }
            )
            self._run_queue.append(run_id)
            if self._worker is None or not self._worker.is_alive():
                self._worker = threading.Thread(target=self._drain_queue, daemon=True)
                self._worker.start()
        return run

    def _drain_queue(self) -> None:
        while True:
            with self._mutate:
                if not self._run_queue:
                    return
                run_id = self._run_queue.pop(0)
            self._execute(run_id)

    def _execute(self, run_id: str) -> None:
        run = self.runs[run_id]
        self._set_state(run, "running")
        try:
            corpus = self.corpus(run.corpus_ref)
            backend = self.backends[run.backend_id]
            detections = ex.run_extraction(backend, corpus)
            path = self.detections_path(run_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            ex.write_detections(detections, path)
            self._det_cache[run_id] = detections
            run.done_pairs = len(detections)
            self._set_state(run, "done")
        except Exception as e:  # run failure is a state, not a crash
            run.error = str(e)
            self._set_state(run, "failed")

    def _set_state(self, run: Run, state: str) -> None:
        run.state = state
        if state in ("done", "failed"):
            run.finished_at = dt.datetime.now(dt.timezone.utc).isoformat()
        self.runs_log.append(
            {
                "type": "run_state",
                "run_id": run.run_id,
                "state": state,
                "finished_at": run.finished_at,
                "done_pairs": run.done_pairs,
                "total_pairs": run.total_pairs,
                "error": run.error,
            }
        )

    def wait_for(self, run_id: str, timeout: float = 60.0) -> Run:
        deadline = dt.datetime.now() + dt.timedelta(seconds=timeout)
        run = self.runs[run_id]
        while run.state not in ("done", "failed"):
            if dt.datetime.now() > deadline:
                raise TimeoutError(f"run {run_id} did not finish")
            threading.Event().wait(0.02)
        return run

    # -- adjudications ---------------------------------------------------------

    def adjudicate(
        self,
        note_id: str,
        category_id: str,
        verdict: str,
        reviewer: str,
        corrected_evidence: list[dict] | None = None,
        idempotency_key: str | None = None,
    ) -> Adjudication:
        if verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        if verdict == "modify" and not corrected_evidence:
            raise ValueError("modify requires corrected_evidence")
        if category_id not in category_ids():
            raise ValueError(f"unknown category_id: {category_id}")
        with self._mutate:
            if idempotency_key and idempotency_key in self._idempotency:
                return self._idempotency[idempotency_key]
            adj = Adjudication(
                adjudication_id=f"adj-{len(self.adjudications) + 1:06d}",
                note_id=note_id,
                category_id=category_id,
                verdict=verdict,
                corrected_evidence=corrected_evidence,
                reviewer=reviewer,
                timestamp=dt.datetime.now(dt.timezone.utc).isoformat(),
                seq=len(self.adjudications),
            )
            self.adjudications.append(adj)
            if idempotency_key:
                self._idempotency[idempotency_key] = adj
            rec = {
                "adjudication_id": adj.adjudication_id,
                "note_id": adj.note_id,
                "category_id": adj.category_id,
                "verdict": adj.verdict,
                "corrected_evidence": adj.corrected_evidence,
                "reviewer": adj.reviewer,
                "timestamp": adj.timestamp,
            }
            if idempotency_key:
                rec["idempotency_key"] = idempotency_key
            self.adj_log.append(rec)
        return adj

    def live_adjudications(self) -> dict[tuple[str, str], Adjudication]:
        """Latest adjudication per (note, category); per-reviewer entries
        supersede, and across reviewers the newest wins."""
        live: dict[tuple[str, str], Adjudication] = {}
        for adj in self.adjudications:  # log order == ascending seq
            live[(adj.note_id, adj.category_id)] = adj
        return live

    # -- review queue / gold projection ----------------------------------------

    def review_queue(
        self,
        run_id: str,
        category: str | None = None,
        only_positive: bool = False,
        unreviewed_only: bool = False,
    ) -> list[dict]:
        run = self.runs[run_id]
        if run.state != "done":
            raise RuntimeError(f"run {run_id} is not done (state={run.state})")
        corpus = self.corpus(run.corpus_ref)
        notes = {n.note_id: n for n in corpus.notes}
        live = self.live_adjudications()
        items = []
        for d in self.detections(run_id):  # already sorted (note_id, category_id)
            if category and d.category_id != category:
                continue
            if only_positive and not d.present:
                continue
            adj = live.get((d.note_id, d.category_id))
            if unreviewed_only and adj is not None:
                continue
            items.append(
                {
                    "note_id": d.note_id,
                    "category_id": d.category_id,
                    "present": d.present,
                    "status": d.status,
                    "evidence": [
                        {"quote": e.quote, "start": e.start, "end": e.end} for e in d.evidence
                    ],
                    "note_text": notes[d.note_id].text,
                    "adjudication": adj.to_json() if adj else None,
                }
            )
        return items

    def project_gold(self, run_id: str) -> str:
        """Adjudicated pairs become gold labels: accept keeps the detection's
        verdict and evidence, reject negates it, modify forces positive with
        the corrected evidence. Unadjudicated pairs are omitted."""
        live = self.live_adjudications()
        gold: list[GoldLabel] = []
        for d in self.detections(run_id):
            adj = live.get((d.note_id, d.category_id))
            if adj is None:
                continue
            if adj.verdict == "accept":
                present = d.present
                spans = tuple(
                    Span(e.start, e.end) for e in d.evidence if e.start is not None
                )
            elif adj.verdict == "reject":
                present = not d.present
                spans = ()
            else:  # modify
                present = True
                spans = tuple(Span(e["start"], e["end"]) for e in adj.corrected_evidence or [])
            gold.append(GoldLabel(d.note_id, d.category_id, present, evidence=spans))
        gold.sort(key=lambda g: (g.note_id, g.category_id))
        return gold_to_jsonl(gold)

    def compact(self) -> None:
        """Rewrite logs to their live state (maintenance operation)."""
        run_records = []
        for run in self.runs.values():
            run_records.append(
                {
                    "type": "run_created",
                    "run_id": run.run_id,
                    "backend_id": run.backend_id,
                    "corpus_ref": run.corpus_ref,
                    "created_at": run.created_at,
                    "total_pairs": run.total_pairs,
                }
            )
            if run.state != "pending":
                run_records.append(
                    {
                        "type": "run_state",
                        "run_id": run.run_id,
                        "state": run.state,
                        "finished_at": run.finished_at,
                        "done_pairs": run.done_pairs,
                        "total_pairs": run.total_pairs,
                        "error": run.error,
                    }
                )
        self.runs_log.compact(run_records)


# ---------------------------------------------------------------------------
# FastAPI app

def create_app(
    data_dir: str | Path,
    backends: dict[str, ex.BackendConfig] | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    if backends is None:
        backends = default_backends()
    store = ServiceStore(data_dir, backends)
    app = FastAPI(title="symscreen")
    app.state.store = store
    metrics = {"runs_started": 0, "adjudications": 0, "requests": 0}

    @app.middleware("http")
    async def count_requests(request: Request, call_next):
        metrics["requests"] += 1
        return await call_next(request)

    @app.post("/api/runs", status_code=201)
    async def start_run(body: dict):
        try:
            run = store.start_run(body["backend_id"], body["corpus_ref"])
        except (LookupError, FileNotFoundError) as e:
            raise HTTPException(status_code=404, detail=str(e))
        except KeyError as e:
            raise HTTPException(status_code=422, detail=f"missing field {e}")
        except Exception as e:
            raise HTTPException(status_code=404, detail=str(e))
        metrics["runs_started"] += 1
        return run.to_json()

    def _run_or_404(run_id: str) -> Run:
        run = store.runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return run

    @app.get("/api/runs/{run_id}")
    async def get_run(run_id: str):
        return _run_or_404(run_id).to_json()

    @app.get("/api/runs/{run_id}/detections")
    async def get_detections(run_id: str):
        _run_or_404(run_id)
        return JSONResponse(
            [
                {
                    "note_id": d.note_id,
                    "category_id": d.category_id,
                    "present": d.present,
                    "evidence": [
                        {"quote": e.quote, "start": e.start, "end": e.end} for e in d.evidence
                    ],
                    "backend_id": d.backend_id,
                    "status": d.status,
                }
                for d in store.detections(run_id)
            ]
        )

    @app.get("/api/runs/{run_id}/review")
    async def get_review(
        run_id: str,
        category: str | None = Query(default=None),
        only_positive: bool = Query(default=False),
        unreviewed_only: bool = Query(default=False),
    ):
        _run_or_404(run_id)
        try:
            return store.review_queue(
                run_id,
                category=category,
                only_positive=only_positive,
                unreviewed_only=unreviewed_only,
            )
        except RuntimeError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.post("/api/adjudications", status_code=201)
    async def post_adjudication(
        body: dict, idempotency_key: str | None = Header(default=None)
    ):
        try:
            adj = store.adjudicate(
                note_id=body["note_id"],
                category_id=body["category_id"],
                verdict=body["verdict"],
                reviewer=body.get("reviewer", "anonymous"),
                corrected_evidence=body.get("corrected_evidence"),
                idempotency_key=idempotency_key,
            )
        except KeyError as e:
            raise HTTPException(status_code=422, detail=f"missing field {e}")
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        metrics["adjudications"] += 1
        return adj.to_json()

    @app.get("/api/runs/{run_id}/gold")
    async def get_gold(run_id: str):
        _run_or_404(run_id)
        return PlainTextResponse(store.project_gold(run_id))

    @app.get("/api/patients/{patient_id}/vector")
    async def get_vector(patient_id: str, run_id: str | None = Query(default=None)):
        if run_id is None:
            done = [r for r in store.runs.values() if r.state == "done"]
            if not done:
                raise HTTPException(status_code=404, detail="no completed runs")
            run_id = done[-1].run_id
        run = _run_or_404(run_id)
        corpus = store.corpus(run.corpus_ref)
        if patient_id not in corpus.patients:
            raise HTTPException(status_code=404, detail=f"unknown patient {patient_id}")
        vectors, _ = vectorize(store.detections(run_id), corpus)
        for v in vectors:
            if v.patient_id == patient_id:
                return {
                    "patient_id": v.patient_id,
                    "values": list(v.values),
                    "n_notes": v.n_notes,
                    "categories": list(category_ids()),
                    "run_id": run_id,
                }
        raise HTTPException(status_code=404, detail=f"patient {patient_id} has no notes")

    @app.get("/api/metrics")
    async def get_metrics():
        return dict(metrics, runs_total=len(store.runs))

    @app.get("/api/taxonomy")
    async def get_taxonomy():
        from .taxonomy import taxonomy

        return [
            {
                "category_id": c.category_id,
                "display_name": c.display_name,
                "phq_question": c.phq_question,
                "direction": c.direction,
            }
            for c in taxonomy()
        ]

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def default_backends(seed: int = 7) -> dict[str, ex.BackendConfig]:
    return {
        "keyword": ex.BackendConfig(backend_id="keyword", kind="keyword"),
        "mock": ex.BackendConfig(backend_id="mock", kind="mock", seed=seed),
        "noisy_mock": ex.BackendConfig(
            backend_id="noisy_mock", kind="noisy_mock", fp_rate=0.1, fn_rate=0.2, seed=seed
        ),
    }
