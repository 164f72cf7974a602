"""Session-oriented HTTP API: upload -> optimize -> feedback -> finalize.

Sessions and their episode traces live in a file-backed store (JSON
documents plus JSONL event logs), so a restarted service resumes exactly
where it stopped. The test split is never materialized before finalize;
until then every report is validation-only.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from fastapi import Body, FastAPI, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .actions import CorrectionPlan, apply_plan, derive_seed
from .batch import ForecastBatch, SplitSpec, mse, per_channel_report
from .data import (
    BASELINE_NAMES,
    WindowSpec,
    baseline_predictions,
    channel_stats,
    chronological_split,
    load_predictions,
    make_windows,
    normalize_series,
    parse_csv,
    read_prediction_file,
    sidecar_path,
)
from .errors import (
    ConfigError,
    StateConflictError,
    TransportError,
    ValidationError,
)
from .feedback import DirectiveRejected, LlmConfig, inject, parse_grammar, parse_llm
from .search import Objective, OptimizerConfig, run

STATES = ("created", "data_loaded", "optimizing", "awaiting_feedback", "finalized", "failed")


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    store_path: str = "./postcast_store"
    workers: int = 2
    token: str | None = None
    static_dir: str | None = None
    llm: LlmConfig = field(default_factory=LlmConfig)

    @classmethod
    def load(cls, path: str | None = None) -> "ServiceConfig":
        """Read the config file (if any) and apply POSTCAST_* env overrides."""
        raw: dict = {}
        if path:
            raw = json.loads(Path(path).read_text())
        llm_raw = dict(raw.get("llm", {}))
        env = os.environ
        if "POSTCAST_LLM_ENDPOINT" in env:
            llm_raw["endpoint"] = env["POSTCAST_LLM_ENDPOINT"]
        if "POSTCAST_LLM_MODEL" in env:
            llm_raw["model"] = env["POSTCAST_LLM_MODEL"]
        if "POSTCAST_LLM_TIMEOUT" in env:
            llm_raw["timeout"] = float(env["POSTCAST_LLM_TIMEOUT"])
        return cls(
            host=env.get("POSTCAST_HOST", raw.get("host", cls.host)),
            port=int(env.get("POSTCAST_PORT", raw.get("port", cls.port))),
            store_path=env.get("POSTCAST_STORE", raw.get("store", cls.store_path)),
            workers=int(env.get("POSTCAST_WORKERS", raw.get("workers", cls.workers))),
            token=env.get("POSTCAST_TOKEN", raw.get("token")),
            static_dir=env.get("POSTCAST_STATIC_DIR", raw.get("static_dir")),
            llm=LlmConfig(**llm_raw),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class SessionStore:
    """One directory per deployment: session docs, traces, uploaded data."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        for sub in ("sessions", "traces", "data"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _doc_path(self, session_id: str) -> Path:
        return self.root / "sessions" / f"{session_id}.json"

    def _trace_path(self, session_id: str) -> Path:
        return self.root / "traces" / f"{session_id}.jsonl"

    def data_dir(self, session_id: str) -> Path:
        d = self.root / "data" / session_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def exists(self, session_id: str) -> bool:
        return self._doc_path(session_id).exists()

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "sessions").glob("*.json"))

    def load(self, session_id: str) -> dict:
        path = self._doc_path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        return json.loads(path.read_text())

    def save(self, doc: dict) -> None:
        path = self._doc_path(doc["id"])
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True))
        os.replace(tmp, path)

    def append_event(self, session_id: str, event: dict) -> None:
        with self._trace_path(session_id).open("a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")
            f.flush()

    def read_events(self, session_id: str, start: int = 0) -> list[dict]:
        path = self._trace_path(session_id)
        if not path.exists():
            return []
        lines = path.read_text().splitlines()
        return [json.loads(line) for line in lines[start:] if line.strip()]

    def count_events(self, session_id: str) -> int:
        path = self._trace_path(session_id)
        if not path.exists():
            return 0
        return sum(1 for line in path.read_text().splitlines() if line.strip())

    def truncate_events(self, session_id: str, keep: int) -> None:
        path = self._trace_path(session_id)
        if not path.exists():
            return
        lines = [line for line in path.read_text().splitlines() if line.strip()]
        path.write_text("".join(line + "\n" for line in lines[:keep]))

    def audit(self, record: dict) -> None:
        with (self.root / "feedback_audit.jsonl").open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _error(status: int, code: str, message: str, details: dict | None = None) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"code": code, "message": message, "details": details or {}},
    )


def _require_state(doc: dict, *allowed: str) -> None:
    if doc["state"] not in allowed:
        raise StateConflictError(
            f"operation requires state in {allowed}, session is {doc['state']!r}"
        )


class _Workspace:
    """Batches rebuilt on demand from the stored upload; test stays sealed."""

    def __init__(self, store: SessionStore, doc: dict):
        data = doc["data"]
        self.wspec = WindowSpec(data["window"], data["horizon"], data.get("stride", 1))
        split = SplitSpec(*data["splits"])
        series = parse_csv((store.data_dir(doc["id"]) / "series.csv").read_bytes())
        segments = chronological_split(series, split, self.wspec)
        if data.get("normalize"):
            mean, std = channel_stats(segments[0])
            segments = tuple(normalize_series(s, mean, std) for s in segments)
            self._norm = (mean, std)
        else:
            self._norm = None
        self.train_series, self.val_series, self.test_series = segments
        self.data = data
        self.store = store
        self.doc = doc
        train_w = make_windows(self.train_series, self.wspec)
        self._baseline = None
        if data.get("baseline"):
            self._baseline = baseline_predictions(
                data["baseline"], train_w, self.wspec, lam=data.get("ridge_lambda", 1e-2)
            )
        self._train_w = train_w

    def _batch(self, windows) -> ForecastBatch:
        if self._baseline is not None:
            return self._baseline.batch(windows)
        pred_file = read_prediction_file(
            self.store.data_dir(self.doc["id"]) / "predictions.csv"
        )
        batch = load_predictions(pred_file, windows)
        if self._norm is not None:
            mean, std = self._norm
            safe = std.copy()
            safe[safe == 0] = 1.0
            batch = ForecastBatch(
                (batch.predictions - mean) / safe, batch.truth, batch.sample_ids
            )
        return batch

    def train_batch(self) -> ForecastBatch:
        return self._batch(self._train_w)

    def val_batch(self) -> ForecastBatch:
        return self._batch(make_windows(self.val_series, self.wspec))

    def test_batch(self) -> ForecastBatch:
        # only finalize calls this; the rest of the service never touches test
        return self._batch(make_windows(self.test_series, self.wspec))


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    cfg = config or ServiceConfig()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        _resume_interrupted()
        yield
        app.state.executor.shutdown(wait=False)

    app = FastAPI(title="postcast correction service", lifespan=lifespan)
    store = SessionStore(cfg.store_path)
    app.state.config = cfg
    app.state.store = store
    app.state.executor = ThreadPoolExecutor(max_workers=cfg.workers)
    app.state.running: dict[str, object] = {}
    app.state.running_guard = threading.Lock()

    # ---- plumbing ---------------------------------------------------------

    @app.exception_handler(DirectiveRejected)
    async def _rejected(_, exc: DirectiveRejected):
        return _error(422, "rejected", exc.reason, {"hint": exc.hint})

    @app.exception_handler(StateConflictError)
    async def _conflict(_, exc: StateConflictError):
        return _error(409, "conflict", str(exc), getattr(exc, "details", None))

    @app.exception_handler(TransportError)
    async def _transport(_, exc: TransportError):
        return _error(502, "transport", str(exc))

    @app.exception_handler(ValidationError)
    async def _invalid(_, exc: ValidationError):
        return _error(422, "invalid", str(exc))

    @app.exception_handler(KeyError)
    async def _missing(_, exc: KeyError):
        return _error(404, "not_found", f"unknown session {exc.args[0]!r}")

    @app.middleware("http")
    async def _auth(request: Request, call_next):
        token = app.state.config.token
        if token and request.url.path.startswith("/sessions"):
            if request.headers.get("x-api-token") != token:
                return _error(401, "unauthorized", "missing or wrong x-api-token")
        return await call_next(request)

    # ---- optimization worker ---------------------------------------------

    def _run_round(session_id: str) -> None:
        try:
            doc = store.load(session_id)
            ws = _Workspace(store, doc)
            base_cfg = OptimizerConfig.from_dict(doc["config"])
            round_no = doc["rounds"] + 1
            # round 1 uses the configured seed verbatim so a single-round
            # session is reproducible with the headless CLI
            seed = base_cfg.seed if round_no == 1 else derive_seed(base_cfg.seed, round_no)
            run_cfg = replace(base_cfg, seed=seed)
            obj = Objective(val=ws.val_batch(), train=ws.train_batch(), rng_seed=seed)

            def on_record(rec):
                event = rec.to_dict()
                event["round"] = round_no
                event["label"] = rec.plan.describe()
                store.append_event(session_id, event)

            trace, _ = run(obj, run_cfg, test=None, on_record=on_record)
            store.append_event(
                session_id,
                {
                    "terminal": True,
                    "round": round_no,
                    "best_plan": trace.best_plan.to_dict(),
                    "best_val_mse": trace.best_val_mse,
                    "baseline_val_mse": trace.baseline_val_mse,
                    "evaluations": trace.n_evaluations,
                    "report": None,
                },
            )
            with store.lock(session_id):
                doc = store.load(session_id)
                best = doc.get("best")
                if best is None or trace.best_val_mse <= best["val_mse"]:
                    doc["best"] = {
                        "plan": trace.best_plan.to_dict(),
                        "val_mse": trace.best_val_mse,
                        "round": round_no,
                        "seed": seed,
                    }
                doc["rounds"] = round_no
                doc["baseline_val_mse"] = trace.baseline_val_mse
                doc["state"] = "awaiting_feedback"
                store.save(doc)
        except Exception as e:  # noqa: BLE001 -- worker boundary
            with store.lock(session_id):
                try:
                    doc = store.load(session_id)
                except KeyError:
                    return
                doc["state"] = "failed"
                doc["error"] = str(e)
                store.save(doc)
            store.append_event(session_id, {"error": str(e)})
        finally:
            with app.state.running_guard:
                app.state.running.pop(session_id, None)

    def _launch(session_id: str) -> None:
        with app.state.running_guard:
            if session_id in app.state.running:
                raise StateConflictError("an optimization run is already active")
            app.state.running[session_id] = app.state.executor.submit(
                _run_round, session_id
            )

    def _resume_interrupted() -> None:
        for sid in store.list_ids():
            doc = store.load(sid)
            if doc["state"] != "optimizing":
                continue
            events = store.read_events(sid)
            # keep only fully completed rounds, then restart the current one
            completed = 0
            keep = 0
            for i, e in enumerate(events):
                if e.get("terminal"):
                    completed = e["round"]
                    keep = i + 1
            store.truncate_events(sid, keep)
            doc["rounds"] = completed
            store.save(doc)
            _launch(sid)

    # ---- endpoints ---------------------------------------------------------

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(default={})):
        opt = OptimizerConfig.from_dict(payload)  # raises ConfigError on bad fields
        session_id = uuid.uuid4().hex[:12]
        doc = {
            "id": session_id,
            "state": "created",
            "created_at": _now(),
            "config": opt.to_dict(),
            "data": None,
            "rounds": 0,
            "best": None,
            "baseline_val_mse": None,
            "feedback": [],
            "report": None,
            "error": None,
        }
        store.save(doc)
        return {"id": session_id, "state": "created"}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        doc = store.load(session_id)
        return {
            "id": doc["id"],
            "state": doc["state"],
            "rounds": doc["rounds"],
            "config": doc["config"],
            "data": (doc.get("data") or {}).get("summary"),
            "best": doc.get("best"),
            "baseline_val_mse": doc.get("baseline_val_mse"),
            "feedback": doc["feedback"],
            "error": doc.get("error"),
        }

    @app.post("/sessions/{session_id}/data")
    def upload_data(session_id: str, payload: dict = Body(...)):
        with store.lock(session_id):
            doc = store.load(session_id)
            _require_state(doc, "created")

            for name in ("csv", "window", "horizon"):
                if name not in payload:
                    raise ValidationError(f"missing field {name!r}")
            wspec = WindowSpec(
                int(payload["window"]), int(payload["horizon"]),
                int(payload.get("stride", 1)),
            )
            splits = payload.get("splits", [0.6, 0.2, 0.2])
            split = SplitSpec(*[float(s) for s in splits])
            baseline = payload.get("baseline")
            has_preds = "predictions_csv" in payload
            if bool(baseline) == has_preds:
                raise ValidationError(
                    "provide exactly one of 'baseline' or 'predictions_csv'"
                )
            if baseline and baseline not in BASELINE_NAMES:
                raise ValidationError(
                    f"unknown baseline {baseline!r}; expected one of {BASELINE_NAMES}"
                )

            # validate everything before committing any state
            series = parse_csv(payload["csv"])
            segments = chronological_split(series, split, wspec)
            windows = [make_windows(s, wspec) for s in segments]

            if has_preds:
                meta = payload.get("predictions_meta")
                if not isinstance(meta, dict):
                    raise ValidationError("predictions_csv needs predictions_meta")
                data_dir = store.data_dir(session_id)
                pred_path = data_dir / "predictions.csv"
                pred_path.write_text(payload["predictions_csv"])
                sidecar_path(pred_path).write_text(json.dumps(meta, sort_keys=True))
                pred_file = read_prediction_file(pred_path)
                for w in windows:  # presence check only; no test evaluation
                    missing = [
                        sid
                        for sid in w.sample_ids
                        if (sid, 0) not in pred_file.values
                    ]
                    if missing:
                        raise ValidationError(
                            f"predictions missing {len(missing)} sample ids "
                            f"(first: {missing[:3]})"
                        )

            (store.data_dir(session_id) / "series.csv").write_text(
                payload["csv"] if isinstance(payload["csv"], str) else payload["csv"].decode()
            )
            summary = {
                "rows": series.n_rows,
                "channels": series.n_channels,
                "columns": list(series.column_names),
                "windows": {
                    "train": len(windows[0]),
                    "val": len(windows[1]),
                    "test": len(windows[2]),
                },
                "source": baseline or "predictions",
            }
            doc["data"] = {
                "window": wspec.window,
                "horizon": wspec.horizon,
                "stride": wspec.stride,
                "splits": [split.train_fraction, split.val_fraction, split.test_fraction],
                "normalize": bool(payload.get("normalize", False)),
                "baseline": baseline,
                "ridge_lambda": float(payload.get("ridge_lambda", 1e-2)),
                "summary": summary,
            }
            doc["state"] = "data_loaded"
            store.save(doc)
            return summary

    @app.post("/sessions/{session_id}/optimize")
    def run_optimization(session_id: str):
        with store.lock(session_id):
            doc = store.load(session_id)
            _require_state(doc, "data_loaded", "awaiting_feedback")
            round_no = doc["rounds"] + 1
            start_index = store.count_events(session_id)
            doc["state"] = "optimizing"
            store.save(doc)
        _launch(session_id)

        def stream():
            sent = start_index
            deadline = time.monotonic() + 600.0
            while time.monotonic() < deadline:
                events = store.read_events(session_id, sent)
                for event in events:
                    sent += 1
                    yield f"data: {json.dumps(event, sort_keys=True)}\n\n"
                    if event.get("terminal") and event.get("round") == round_no:
                        return
                    if "error" in event:
                        return
                if not events:
                    time.sleep(0.05)

        return StreamingResponse(stream(), media_type="text/event-stream")

    @app.get("/sessions/{session_id}/events")
    def get_events(session_id: str, start: int = Query(0, alias="from")):
        doc = store.load(session_id)
        events = store.read_events(session_id, start)
        return {
            "state": doc["state"],
            "from": start,
            "next": start + len(events),
            "events": events,
        }

    @app.post("/sessions/{session_id}/feedback")
    def submit_feedback(session_id: str, payload: dict = Body(...)):
        text = payload.get("text", "")
        path = payload.get("path", "grammar")
        preview = bool(payload.get("preview", False))
        if path not in ("grammar", "llm"):
            raise ValidationError(f"path must be 'grammar' or 'llm', got {path!r}")
        with store.lock(session_id):
            doc = store.load(session_id)
            _require_state(doc, "awaiting_feedback")
            audit = {
                "ts": _now(),
                "session": session_id,
                "raw_text": text,
                "provenance": path,
            }
            try:
                if path == "grammar":
                    directive = parse_grammar(text)
                else:
                    directive = parse_llm(text, app.state.config.llm)
            except DirectiveRejected as e:
                if not preview:
                    audit.update({"accepted": False, "reason": e.reason})
                    store.audit(audit)
                    doc["feedback"].append(audit)
                    store.save(doc)
                raise
            if preview:
                # parse-only echo so a human can confirm before injection
                return {
                    "accepted": False,
                    "preview": True,
                    "directive": directive.to_dict(),
                    "warnings": list(directive.warnings),
                }
            new_cfg = inject(directive, OptimizerConfig.from_dict(doc["config"]))
            audit.update({"accepted": True, "directive": directive.to_dict()})
            store.audit(audit)
            doc["feedback"].append(audit)
            doc["config"] = new_cfg.to_dict()
            store.save(doc)
            return {
                "accepted": True,
                "directive": directive.to_dict(),
                "warnings": list(directive.warnings),
            }

    @app.post("/sessions/{session_id}/finalize")
    def finalize(session_id: str):
        with store.lock(session_id):
            doc = store.load(session_id)
            if doc["state"] == "finalized":
                err = StateConflictError("session already finalized")
                err.details = {"report": doc["report"]}
                raise err
            _require_state(doc, "awaiting_feedback")
            ws = _Workspace(store, doc)
            test = ws.test_batch()  # the one and only test materialization
            best = doc["best"]
            plan = CorrectionPlan.from_dict(best["plan"])
            corrected = apply_plan(plan, test.predictions, rng_seed=best["seed"])
            report = per_channel_report(test, test.with_predictions(corrected))

            train = ws.train_batch()
            train_after = apply_plan(plan, train.predictions, rng_seed=best["seed"])
            guard = OptimizerConfig.from_dict(doc["config"]).guard_tol
            consistent = mse(train_after, train.truth) <= mse(
                train.predictions, train.truth
            ) * (1.0 + guard)
            report = replace(report, train_consistent=consistent)

            doc["report"] = report.to_dict()
            doc["state"] = "finalized"
            store.save(doc)
            return doc["report"]

    @app.get("/sessions/{session_id}/report")
    def get_report(session_id: str):
        doc = store.load(session_id)
        if doc["state"] != "finalized" or doc["report"] is None:
            raise StateConflictError("session has no finalized report yet")
        return doc["report"]

    @app.get("/sessions/{session_id}/report/sample")
    def get_report_sample(session_id: str, index: int = 0):
        """Overlay data for one finalized test sample: context, truth,
        initial and corrected predictions."""
        doc = store.load(session_id)
        if doc["state"] != "finalized":
            raise StateConflictError("overlay data is available after finalize only")
        ws = _Workspace(store, doc)
        test = ws.test_batch()
        if not 0 <= index < test.n_samples:
            raise ValidationError(
                f"sample index {index} out of range [0, {test.n_samples})"
            )
        plan = CorrectionPlan.from_dict(doc["best"]["plan"])
        corrected = apply_plan(plan, test.predictions, rng_seed=doc["best"]["seed"])
        contexts = make_windows(ws.test_series, ws.wspec).contexts
        return {
            "count": test.n_samples,
            "index": index,
            "sample_id": test.sample_ids[index],
            "context": contexts[index].tolist(),
            "truth": test.truth[index].tolist(),
            "before": test.predictions[index].tolist(),
            "after": corrected[index].tolist(),
        }

    if cfg.static_dir and Path(cfg.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=cfg.static_dir, html=True), name="ui")

    return app
