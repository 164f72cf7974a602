/** DOM-free SVG chart builders: pure functions from data to markup. */

export interface Series {
  label: string;
  values: (number | null)[];
  color: string;
  dash?: string;
}

export interface ChartOptions {
  width: number;
  height: number;
  pad: number;
}

const DEFAULTS: ChartOptions = { width: 560, height: 220, pad: 30 };

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!isFinite(lo)) return [0, 1];
  if (lo === hi) return [lo - 1, hi + 1];
  return [lo, hi];
}

export function linePath(
  values: (number | null)[],
  xOf: (i: number) => number,
  yOf: (v: number) => number
): string {
  const parts: string[] = [];
  let pen = false;
  values.forEach((v, i) => {
    if (v === null || !isFinite(v)) {
      pen = false;
      return;
    }
    parts.push(`${pen ? "L" : "M"}${xOf(i).toFixed(1)},${yOf(v).toFixed(1)}`);
    pen = true;
  });
  return parts.join(" ");
}

/** Step-after path for best-so-far curves. */
export function stepPath(
  points: { x: number; y: number }[],
  xOf: (x: number) => number,
  yOf: (y: number) => number,
  xEnd: number
): string {
  if (points.length === 0) return "";
  const parts = [`M${xOf(points[0].x).toFixed(1)},${yOf(points[0].y).toFixed(1)}`];
  for (let i = 1; i < points.length; i++) {
    parts.push(`H${xOf(points[i].x).toFixed(1)}`);
    parts.push(`V${yOf(points[i].y).toFixed(1)}`);
  }
  parts.push(`H${xOf(xEnd).toFixed(1)}`);
  return parts.join(" ");
}

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function renderLineChart(
  series: Series[],
  options: Partial<ChartOptions> = {}
): string {
  const { width, height, pad } = { ...DEFAULTS, ...options };
  const numeric = series.flatMap((s) =>
    s.values.filter((v): v is number => v !== null && isFinite(v))
  );
  const [yLo, yHi] = extent(numeric);
  const n = Math.max(...series.map((s) => s.values.length), 2);
  const xOf = (i: number) => pad + (i / (n - 1)) * (width - 2 * pad);
  const yOf = (v: number) =>
    height - pad - ((v - yLo) / (yHi - yLo)) * (height - 2 * pad);

  const paths = series
    .map((s) => {
      const d = linePath(s.values, xOf, yOf);
      const dash = s.dash ? ` stroke-dasharray="${s.dash}"` : "";
      return `<path d="${d}" fill="none" stroke="${s.color}" stroke-width="1.5"${dash}/>`;
    })
    .join("");
  const legend = series
    .map(
      (s, i) =>
        `<text x="${pad + i * 140}" y="${height - 6}" fill="${s.color}" ` +
        `font-size="11">${esc(s.label)}</text>`
    )
    .join("");
  const frame =
    `<rect x="${pad}" y="${pad / 2}" width="${width - 2 * pad}" ` +
    `height="${height - 1.5 * pad}" fill="none" stroke="#ccc"/>`;
  const labels =
    `<text x="4" y="${pad / 2 + 10}" font-size="10" fill="#666">${formatTick(yHi)}</text>` +
    `<text x="4" y="${height - pad}" font-size="10" fill="#666">${formatTick(yLo)}</text>`;
  return (
    `<svg viewBox="0 0 ${width} ${height}" xmlns="http://www.w3.org/2000/svg">` +
    frame +
    paths +
    legend +
    labels +
    `</svg>`
  );
}

export function renderBestCurve(
  points: { seq: number; valMse: number }[],
  totalEpisodes: number,
  options: Partial<ChartOptions> = {}
): string {
  const { width, height, pad } = { ...DEFAULTS, ...options };
  if (points.length === 0) {
    return `<svg viewBox="0 0 ${width} ${height}"><text x="${pad}" y="${
      height / 2
    }" font-size="12" fill="#888">no accepted episodes yet</text></svg>`;
  }
  const ys = points.map((p) => p.valMse);
  const [yLo, yHi] = extent(ys);
  const xMax = Math.max(totalEpisodes - 1, 1);
  const xOf = (x: number) => pad + (x / xMax) * (width - 2 * pad);
  const yOf = (v: number) =>
    height - pad - ((v - yLo) / (yHi - yLo)) * (height - 2 * pad);
  const path = stepPath(
    points.map((p) => ({ x: p.seq, y: p.valMse })),
    xOf,
    yOf,
    xMax
  );
  const dots = points
    .map(
      (p) =>
        `<circle cx="${xOf(p.seq).toFixed(1)}" cy="${yOf(p.valMse).toFixed(1)}" ` +
        `r="2.5" fill="#2a7"/>`
    )
    .join("");
  return (
    `<svg viewBox="0 0 ${width} ${height}" xmlns="http://www.w3.org/2000/svg">` +
    `<rect x="${pad}" y="${pad / 2}" width="${width - 2 * pad}" height="${
      height - 1.5 * pad
    }" fill="none" stroke="#ccc"/>` +
    `<path d="${path}" fill="none" stroke="#2a7" stroke-width="1.5"/>` +
    dots +
    `<text x="4" y="${pad / 2 + 10}" font-size="10" fill="#666">${formatTick(yHi)}</text>` +
    `<text x="4" y="${height - pad}" font-size="10" fill="#666">${formatTick(yLo)}</text>` +
    `</svg>`
  );
}

function formatTick(v: number): string {
  if (v !== 0 && (Math.abs(v) < 1e-3 || Math.abs(v) >= 1e4)) {
    return v.toExponential(1);
  }
  return v.toPrecision(3);
}
