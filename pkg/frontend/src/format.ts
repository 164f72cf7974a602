/** Presentation-only number formatting; all values come from API payloads. */

export function formatPercent(fraction: number | null | undefined, digits = 1): string {
  if (fraction === null || fraction === undefined || !isFinite(fraction)) {
    return "n/a";
  }
  return `${(fraction * 100).toFixed(digits)}%`;
}

export function formatMse(value: number | null | undefined): string {
  if (value === null || value === undefined || !isFinite(value)) {
    return "n/a";
  }
  if (value !== 0 && (Math.abs(value) < 1e-3 || Math.abs(value) >= 1e4)) {
    return value.toExponential(3);
  }
  return value.toPrecision(4);
}

export function formatCount(n: number): string {
  return n.toLocaleString("en-US");
}
