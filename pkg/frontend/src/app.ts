/** DOM shell: wires the API client and the pure view models to the page. */

import { ApiClient, ServiceError, DirectiveEcho } from "./api.js";
import { renderBestCurve, renderLineChart } from "./chart.js";
import { formatMse, formatPercent } from "./format.js";
import {
  applyEvents,
  buildReportView,
  emptyView,
  SessionView,
} from "./traceModel.js";

const api = new ApiClient("");

interface AppState {
  sessionId: string | null;
  sessionState: string;
  view: SessionView;
  running: boolean;
  feedbackPending: boolean;
  pendingDirective: DirectiveEcho | null;
  statusChip: string;
  sampleIndex: number;
  sampleCount: number;
}

const state: AppState = {
  sessionId: null,
  sessionState: "-",
  view: emptyView(),
  running: false,
  feedbackPending: false,
  pendingDirective: null,
  statusChip: "idle",
  sampleIndex: 0,
  sampleCount: 0,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string, kind: "ok" | "warn" | "err" = "ok"): void {
  state.statusChip = text;
  const chip = el<HTMLSpanElement>("status-chip");
  chip.textContent = text;
  chip.className = `chip ${kind}`;
}

function showError(e: unknown): void {
  const message =
    e instanceof ServiceError
      ? `${e.info.code}: ${e.info.message}`
      : String(e);
  setStatus(message, "err");
}

async function createSession(): Promise<void> {
  const config = {
    strategy: el<HTMLSelectElement>("cfg-strategy").value,
    budget: Number(el<HTMLInputElement>("cfg-budget").value),
    seed: Number(el<HTMLInputElement>("cfg-seed").value),
    affine_tail: el<HTMLInputElement>("cfg-affine").checked,
  };
  const created = await api.createSession(config);
  state.sessionId = created.id;
  state.sessionState = created.state;
  state.view = emptyView();
  el<HTMLSpanElement>("session-id").textContent = created.id;
  renderAll();
  setStatus(`session ${created.id} created`);
}

async function uploadData(): Promise<void> {
  if (!state.sessionId) throw new Error("create a session first");
  const fileInput = el<HTMLInputElement>("data-file");
  let csv = el<HTMLTextAreaElement>("data-text").value;
  if (fileInput.files && fileInput.files.length > 0) {
    csv = await fileInput.files[0].text();
  }
  const summary = await api.uploadData(state.sessionId, {
    csv,
    window: Number(el<HTMLInputElement>("data-window").value),
    horizon: Number(el<HTMLInputElement>("data-horizon").value),
    stride: Number(el<HTMLInputElement>("data-stride").value),
    baseline: el<HTMLSelectElement>("data-baseline").value,
  });
  state.sessionState = "data_loaded";
  el<HTMLDivElement>("data-summary").textContent =
    `${summary.rows} rows x ${summary.channels} channels; windows ` +
    `train=${summary.windows.train} val=${summary.windows.val} test=${summary.windows.test}`;
  renderAll();
  setStatus("data loaded");
}

async function runOptimization(): Promise<void> {
  if (!state.sessionId || state.running) return;
  state.running = true;
  setStatus("optimizing (live)");
  try {
    await api.runRound(
      state.sessionId,
      (event, index) => {
        state.view = applyEvents(state.view, [event], index);
        renderTrace();
      },
      (mode) => setStatus(mode === "stream" ? "optimizing (live)" : "optimizing (polling)", mode === "stream" ? "ok" : "warn")
    );
    const info = await api.getSession(state.sessionId);
    state.sessionState = info.state;
    renderAll();
    setStatus(`round finished; state ${info.state}`);
  } finally {
    state.running = false;
  }
}

async function previewFeedback(): Promise<void> {
  if (!state.sessionId || state.feedbackPending) return;
  const text = el<HTMLTextAreaElement>("fb-text").value;
  const path = el<HTMLSelectElement>("fb-path").value as "grammar" | "llm";
  state.feedbackPending = true;
  renderFeedback();
  try {
    state.pendingDirective = await api.submitFeedback(state.sessionId, text, path, true);
    setStatus("directive parsed; confirm to inject");
  } catch (e) {
    state.pendingDirective = null;
    if (e instanceof ServiceError && e.info.code === "rejected") {
      el<HTMLDivElement>("fb-result").innerHTML =
        `<div class="reject">rejected: ${e.info.message}<br>` +
        `<span class="hint">${String(e.info.details.hint ?? "")}</span></div>`;
      setStatus("feedback rejected", "warn");
    } else {
      showError(e);
    }
  } finally {
    state.feedbackPending = false;
    renderFeedback();
  }
}

async function confirmFeedback(): Promise<void> {
  if (!state.sessionId || !state.pendingDirective) return;
  const d = state.pendingDirective.directive;
  await api.submitFeedback(state.sessionId, d.raw_text, d.provenance as "grammar" | "llm");
  state.pendingDirective = null;
  renderFeedback();
  setStatus("feedback injected; run optimization again");
}

async function finalizeSession(): Promise<void> {
  if (!state.sessionId) return;
  const report = await api.finalize(state.sessionId);
  state.sessionState = "finalized";
  renderReport(report);
  setStatus("finalized");
}

function renderTrace(): void {
  const rows = state.view.episodes
    .map((r) => {
      const cls = r.accepted ? "accepted" : "failed";
      return (
        `<tr class="${cls}"><td>${r.round}</td><td>${r.episode}</td>` +
        `<td>${r.label}</td><td>${formatMse(r.valMse)}</td>` +
        `<td>${r.accepted ? "accepted" : "no improvement"}</td></tr>`
      );
    })
    .join("");
  el<HTMLTableSectionElement>("trace-body").innerHTML = rows;
  el<HTMLDivElement>("curve").innerHTML = renderBestCurve(
    state.view.bestCurve,
    state.view.episodes.length
  );
  const last = state.view.rounds[state.view.rounds.length - 1];
  if (last) {
    el<HTMLDivElement>("round-summary").textContent =
      `round ${last.round}: best ${last.bestLabel}, validation MSE ` +
      `${formatMse(last.baselineValMse)} -> ${formatMse(last.bestValMse)} ` +
      `(${last.evaluations} evaluations)`;
  }
}

function renderFeedback(): void {
  el<HTMLButtonElement>("fb-preview").disabled =
    state.feedbackPending || state.sessionState !== "awaiting_feedback";
  const card = el<HTMLDivElement>("fb-result");
  if (state.pendingDirective) {
    const d = state.pendingDirective;
    const items = d.directive.items
      .map(
        (item) =>
          `<li><code>${item.kind}</code> ` +
          Object.entries(item.overrides)
            .map(([k, [lo, hi]]) => (lo === hi ? `${k}=${lo}` : `${k} in [${lo}, ${hi}]`))
            .join(", ") +
          `</li>`
      )
      .join("");
    const warnings = d.warnings.length
      ? `<div class="warn">${d.warnings.join("<br>")}</div>`
      : "";
    card.innerHTML =
      `<div class="echo"><strong>parsed directive</strong><ul>${items}</ul>${warnings}` +
      `<button id="fb-confirm">confirm and inject</button></div>`;
    el<HTMLButtonElement>("fb-confirm").addEventListener("click", () =>
      confirmFeedback().catch(showError)
    );
  }
}

function renderReport(report?: import("./traceModel.js").ReportPayload): void {
  const panel = el<HTMLDivElement>("report-panel");
  if (!report) {
    panel.innerHTML =
      state.sessionState === "awaiting_feedback"
        ? `<p class="hint">finalize the session to evaluate the sealed test split</p>`
        : `<p class="hint">run an optimization first</p>`;
    return;
  }
  const view = buildReportView(report);
  const rows = view.channels
    .map(
      (c) =>
        `<tr><td>${c.channel}</td><td>${formatMse(c.mseBefore)}</td>` +
        `<td>${formatMse(c.mseAfter)}</td><td>${formatPercent(c.improvement)}</td></tr>`
    )
    .join("");
  panel.innerHTML =
    `<p>test MSE ${formatMse(view.mseBefore)} -> ${formatMse(view.mseAfter)} ` +
    `(<strong>${formatPercent(view.improvement)}</strong> improvement); ` +
    `train-consistent: ${view.trainConsistent}</p>` +
    `<table><thead><tr><th>channel</th><th>MSE before</th><th>MSE after</th>` +
    `<th>improvement</th></tr></thead><tbody>${rows}</tbody></table>` +
    `<div class="sample-nav">sample <input id="sample-idx" type="number" min="0" ` +
    `value="${state.sampleIndex}" style="width:5em"> of ` +
    `<span id="sample-count">?</span> <button id="sample-load">show overlay</button></div>` +
    `<div id="overlay"></div>`;
  el<HTMLButtonElement>("sample-load").addEventListener("click", () =>
    loadOverlay().catch(showError)
  );
  loadOverlay().catch(showError);
}

async function loadOverlay(): Promise<void> {
  if (!state.sessionId) return;
  const input = el<HTMLInputElement>("sample-idx");
  const index = Math.max(0, Math.min(Number(input.value), Math.max(state.sampleCount - 1, 0)));
  const sample = await api.getReportSample(state.sessionId, index);
  state.sampleCount = sample.count;
  state.sampleIndex = sample.index;
  input.max = String(sample.count - 1);
  el<HTMLSpanElement>("sample-count").textContent = String(sample.count);
  const channel = 0;
  const ctx = sample.context.map((row) => row[channel]);
  const pad = ctx.map(() => null as number | null);
  const series = [
    { label: "context", values: [...ctx, ...sample.truth.map(() => null as number | null)], color: "#888" },
    { label: "truth", values: [...pad, ...sample.truth.map((r) => r[channel])], color: "#222" },
    { label: "initial", values: [...pad, ...sample.before.map((r) => r[channel])], color: "#d62" , dash: "4 3"},
    { label: "corrected", values: [...pad, ...sample.after.map((r) => r[channel])], color: "#2a7" },
  ];
  el<HTMLDivElement>("overlay").innerHTML = renderLineChart(series);
}

function renderAll(): void {
  el<HTMLSpanElement>("session-state").textContent = state.sessionState;
  el<HTMLButtonElement>("run-btn").disabled =
    state.running ||
    !["data_loaded", "awaiting_feedback"].includes(state.sessionState);
  el<HTMLButtonElement>("finalize-btn").disabled =
    state.sessionState !== "awaiting_feedback";
  renderTrace();
  renderFeedback();
  if (state.sessionState !== "finalized") renderReport();
}

export function mount(): void {
  el<HTMLButtonElement>("create-btn").addEventListener("click", () =>
    createSession().catch(showError)
  );
  el<HTMLButtonElement>("upload-btn").addEventListener("click", () =>
    uploadData().catch(showError)
  );
  el<HTMLButtonElement>("run-btn").addEventListener("click", () =>
    runOptimization().catch(showError)
  );
  el<HTMLButtonElement>("fb-preview").addEventListener("click", () =>
    previewFeedback().catch(showError)
  );
  el<HTMLButtonElement>("finalize-btn").addEventListener("click", () =>
    finalizeSession().catch(showError)
  );
  renderAll();
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", mount);
}
