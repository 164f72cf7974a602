/**
 * Pure reducer from service trace events to the rendered session view.
 *
 * Events are identified by their global index in the session's event log;
 * the reducer drops anything below its cursor and additionally dedupes by
 * (round, episode), so replaying an overlapping range after a reconnect can
 * never duplicate a row. No numbers are computed here beyond selecting
 * fields from payloads: the best-MSE curve is the sequence of accepted
 * episodes' val_mse values, which the engine guarantees is non-increasing.
 */

export interface PlanStep {
  kind: string;
  params: Record<string, number>;
}

export interface PlanPayload {
  steps: PlanStep[];
  affine: { a: number | number[]; b: number | number[]; scope: string } | null;
}

export interface TraceEvent {
  round?: number;
  episode?: number;
  plan?: PlanPayload;
  label?: string;
  val_mse?: number;
  accepted?: boolean;
  terminal?: boolean;
  best_plan?: PlanPayload;
  best_val_mse?: number;
  baseline_val_mse?: number;
  evaluations?: number;
  error?: string;
}

export interface EpisodeRow {
  round: number;
  episode: number;
  label: string;
  valMse: number;
  accepted: boolean;
}

export interface RoundSummary {
  round: number;
  bestValMse: number;
  baselineValMse: number;
  evaluations: number;
  bestLabel: string;
}

export interface CurvePoint {
  seq: number; // position in the episode list when the best improved
  valMse: number;
}

export interface SessionView {
  episodes: EpisodeRow[];
  rounds: RoundSummary[];
  bestCurve: CurvePoint[];
  nextEventIndex: number;
  lastError: string | null;
}

export function emptyView(): SessionView {
  return {
    episodes: [],
    rounds: [],
    bestCurve: [],
    nextEventIndex: 0,
    lastError: null,
  };
}

export function planLabel(plan: PlanPayload | undefined, fallback?: string): string {
  if (fallback) return fallback;
  if (!plan || plan.steps.length === 0) {
    return plan && plan.affine ? `affine[${plan.affine.scope}]` : "identity";
  }
  const steps = plan.steps.map((s) => {
    const params = Object.entries(s.params)
      .map(([k, v]) => `${k}=${Number(v.toPrecision(4))}`)
      .join(", ");
    return params ? `${s.kind}(${params})` : s.kind;
  });
  if (plan.affine) steps.push(`affine[${plan.affine.scope}]`);
  return steps.join(" -> ");
}

function episodeKey(e: TraceEvent): string {
  return `${e.round ?? 1}:${e.episode}`;
}

/**
 * Fold events [fromIndex, fromIndex + events.length) into the view.
 * Returns a new view; the input is not mutated.
 */
export function applyEvents(
  view: SessionView,
  events: TraceEvent[],
  fromIndex: number
): SessionView {
  const next: SessionView = {
    episodes: [...view.episodes],
    rounds: [...view.rounds],
    bestCurve: [...view.bestCurve],
    nextEventIndex: view.nextEventIndex,
    lastError: view.lastError,
  };
  const seen = new Set(next.episodes.map((r) => `${r.round}:${r.episode}`));

  events.forEach((event, i) => {
    const index = fromIndex + i;
    if (index < next.nextEventIndex) return; // replayed range
    next.nextEventIndex = index + 1;

    if (event.error) {
      next.lastError = event.error;
      return;
    }
    if (event.terminal) {
      next.rounds.push({
        round: event.round ?? 1,
        bestValMse: event.best_val_mse ?? NaN,
        baselineValMse: event.baseline_val_mse ?? NaN,
        evaluations: event.evaluations ?? 0,
        bestLabel: planLabel(event.best_plan),
      });
      return;
    }
    if (event.episode === undefined || event.val_mse === undefined) return;
    const key = episodeKey(event);
    if (seen.has(key)) return;
    seen.add(key);
    const row: EpisodeRow = {
      round: event.round ?? 1,
      episode: event.episode,
      label: planLabel(event.plan, event.label),
      valMse: event.val_mse,
      accepted: event.accepted === true,
    };
    next.episodes.push(row);
    if (row.accepted) {
      next.bestCurve.push({ seq: next.episodes.length - 1, valMse: row.valMse });
    }
  });
  return next;
}

export function curveIsNonIncreasing(view: SessionView): boolean {
  for (let i = 1; i < view.bestCurve.length; i++) {
    // rounds restart from the round's own baseline, so compare within rounds
    const prev = view.bestCurve[i - 1];
    const cur = view.bestCurve[i];
    const prevRound = view.episodes[prev.seq].round;
    const curRound = view.episodes[cur.seq].round;
    if (curRound === prevRound && cur.valMse > prev.valMse) return false;
  }
  return true;
}

export interface ChannelRow {
  channel: number;
  mseBefore: number;
  mseAfter: number;
  improvement: number | null;
}

export interface ReportPayload {
  mse_before: number;
  mse_after: number;
  improvement: number | null;
  per_channel: {
    channel: number;
    mse_before: number;
    mse_after: number;
    improvement: number | null;
  }[];
  train_consistent: boolean | null;
}

export interface ReportView {
  mseBefore: number;
  mseAfter: number;
  improvement: number | null;
  trainConsistent: boolean | null;
  channels: ChannelRow[];
}

export function buildReportView(report: ReportPayload): ReportView {
  return {
    mseBefore: report.mse_before,
    mseAfter: report.mse_after,
    improvement: report.improvement,
    trainConsistent: report.train_consistent,
    channels: report.per_channel.map((c) => ({
      channel: c.channel,
      mseBefore: c.mse_before,
      mseAfter: c.mse_after,
      improvement: c.improvement,
    })),
  };
}
