"""Turn human feedback into validated action-space restrictions.

Two paths produce the same directive structure:

  - a deterministic controlled grammar (always available, clamps
    out-of-catalog requests with a warning, since a human typed them);
  - an optional external LLM endpoint (fails closed: responses outside the
    schema or the catalog are rejected, never clamped).

Directives can only narrow the catalog, never widen it, and the baseline
(no correction) always stays in the candidate pool, so feedback cannot
force a regression past the consistency guard.
"""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass, field, replace

import httpx

from .actions import CATALOG, ActionKind, ActionSpace
from .errors import TransportError, ValidationError
from .search.core import OptimizerConfig

PHRASEBOOK = (
    "increase values above quantile <Q> by <X>% [to <Y>%]",
    "decrease values below quantile <Q> by <X>% [to <Y>%]",
    "increase the amplitude by <X>% [to <Y>%]",
    "decrease the minimum by <X>% [to <Y>%]",
    "increase the trend by <X>% [to <Y>%]",
    "shift the series by <N> steps",
)


class DirectiveRejected(ValidationError):
    def __init__(self, reason: str, hint: str | None = None, raw_response: str | None = None):
        self.reason = reason
        self.hint = hint or "supported phrasings: " + "; ".join(PHRASEBOOK)
        self.raw_response = raw_response
        super().__init__(reason)


@dataclass(frozen=True)
class DirectiveItem:
    """One restriction: an action kind plus sub-ranges for its parameters."""

    kind: ActionKind
    overrides: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "overrides": {k: list(v) for k, v in self.overrides.items()},
        }


@dataclass(frozen=True)
class FeedbackDirective:
    raw_text: str
    items: tuple[DirectiveItem, ...]
    provenance: str  # "grammar" or "llm"
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "items": [i.to_dict() for i in self.items],
            "provenance": self.provenance,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class LlmConfig:
    """Endpoint settings for the free-text path; endpoint=None disables it."""

    endpoint: str | None = None
    model: str = "qwen2-72b-32k"
    timeout: float = 30.0
    max_retries: int = 2


_CLAUSE_SPLIT = re.compile(r"\s*(?:;|,|\band\b)\s+", re.IGNORECASE)

_NUM = r"(-?\d+(?:\.\d+)?)"
_PCT_TAIL = rf"by\s+{_NUM}\s*%?(?:\s+to\s+{_NUM}\s*%?)?"

_QUANTILE_RE = re.compile(
    rf"^(increase|decrease)\s+(?:the\s+)?(?:all\s+)?values?\s+(above|below)\s+"
    rf"(?:the\s+)?quantile\s+{_NUM}\s*(?:%|th)?\s+{_PCT_TAIL}$",
    re.IGNORECASE,
)
_SIMPLE_RE = re.compile(
    rf"^(increase|decrease)\s+(?:the\s+)?(amplitude|minimum|trend)"
    rf"(?:\s+of\s+(?:the\s+)?(?:predictions?|series))?\s+{_PCT_TAIL}$",
    re.IGNORECASE,
)
_SHIFT_RE = re.compile(
    r"^shift\s+(?:the\s+)?(?:series|predictions?)?\s*by\s+(-?\d+)\s+steps?"
    r"(?:\s+(forward|backwards?|back))?$",
    re.IGNORECASE,
)

_SIMPLE_KINDS = {
    "amplitude": (ActionKind.SCALE_AMPLITUDE, "factor"),
    "minimum": (ActionKind.INCREASE_MINIMUM_FACTOR, "factor"),
    "trend": (ActionKind.LINEAR_TREND_SLOPE, "slope"),
}


def _catalog_range(kind: ActionKind, name: str):
    for r in CATALOG[kind]:
        if r.name == name:
            return r
    raise ValidationError(f"{kind.value} has no parameter {name!r}")


def _clamp_to_catalog(
    kind: ActionKind, name: str, lo: float, hi: float, warnings: list[str]
) -> tuple[float, float]:
    """Intersect a requested range with the catalog; empty overlap rejects."""
    r = _catalog_range(kind, name)
    clo, chi = max(lo, r.low), min(hi, r.high)
    if clo > chi:
        raise DirectiveRejected(
            f"{kind.value}.{name} request [{lo:g}, {hi:g}] is entirely outside "
            f"the catalog range [{r.low:g}, {r.high:g}]"
        )
    if (clo, chi) != (lo, hi):
        warnings.append(
            f"{kind.value}.{name} clamped from [{lo:g}, {hi:g}] to [{clo:g}, {chi:g}]"
        )
    return clo, chi


def _snap_to_catalog(
    kind: ActionKind, name: str, value: float, warnings: list[str]
) -> float:
    """Move a point selection to the nearest value the catalog admits."""
    r = _catalog_range(kind, name)
    snapped = r.clamp(value)
    if snapped != value:
        warnings.append(
            f"{kind.value}.{name} moved from {value:g} to {snapped:g} "
            f"(catalog range [{r.low:g}, {r.high:g}])"
        )
    return snapped


def _percent_bounds(direction: str, x: float, y: float | None) -> tuple[float, float]:
    lo, hi = (x, y) if y is not None else (x, x)
    if direction.lower() == "decrease":
        lo, hi = -hi, -lo
    return (lo, hi) if lo <= hi else (hi, lo)


def _parse_clause(clause: str, warnings: list[str]) -> DirectiveItem:
    m = _QUANTILE_RE.match(clause)
    if m:
        direction, side, q_s, x_s, y_s = m.groups()
        q = float(q_s)
        if not 0.0 < q < 100.0:
            raise DirectiveRejected(f"quantile {q:g} must be strictly between 0 and 100")
        kind = (
            ActionKind.PIECEWISE_SCALE_HIGH
            if side.lower() == "above"
            else ActionKind.PIECEWISE_SCALE_LOW
        )
        q_snap = _snap_to_catalog(kind, "quantile", q, warnings)
        f_lo, f_hi = _percent_bounds(direction, float(x_s), float(y_s) if y_s else None)
        f_lo, f_hi = _clamp_to_catalog(kind, "factor", f_lo, f_hi, warnings)
        return DirectiveItem(kind, {"quantile": (q_snap, q_snap), "factor": (f_lo, f_hi)})

    m = _SIMPLE_RE.match(clause)
    if m:
        direction, target, x_s, y_s = m.groups()
        kind, pname = _SIMPLE_KINDS[target.lower()]
        lo, hi = _percent_bounds(direction, float(x_s), float(y_s) if y_s else None)
        lo, hi = _clamp_to_catalog(kind, pname, lo, hi, warnings)
        return DirectiveItem(kind, {pname: (lo, hi)})

    m = _SHIFT_RE.match(clause)
    if m:
        n_s, dir_word = m.groups()
        n = float(n_s)
        if dir_word and dir_word.lower().startswith("back"):
            n = -n
        lo, hi = _clamp_to_catalog(ActionKind.SHIFT_SERIES, "steps", n, n, warnings)
        return DirectiveItem(ActionKind.SHIFT_SERIES, {"steps": (lo, hi)})

    hint_pool = list(PHRASEBOOK)
    close = difflib.get_close_matches(clause.lower(), [t.lower() for t in hint_pool], n=1, cutoff=0.0)
    nearest = hint_pool[[t.lower() for t in hint_pool].index(close[0])] if close else hint_pool[0]
    raise DirectiveRejected(
        f"could not parse {clause!r}", hint=f"nearest template: {nearest!r}"
    )


def parse_grammar(text: str) -> FeedbackDirective:
    """Parse controlled-phrasebook feedback; total and deterministic.

    Raises DirectiveRejected (with the nearest template as a hint) for
    anything outside the phrasebook.
    """
    cleaned = " ".join(text.split()).strip().rstrip(".")
    if not cleaned:
        raise DirectiveRejected("empty feedback text")
    warnings: list[str] = []
    items = tuple(
        _parse_clause(c.strip(), warnings)
        for c in _CLAUSE_SPLIT.split(cleaned)
        if c.strip()
    )
    if not items:
        raise DirectiveRejected("empty feedback text")
    return FeedbackDirective(
        raw_text=text, items=items, provenance="grammar", warnings=tuple(warnings)
    )


LLM_SYSTEM_PROMPT = (
    "You translate forecasting feedback into a JSON object and nothing else. "
    'Schema: {"actions": [{"kind": <kind>, "params": {<name>: <number or [low, high]>}}]}. '
    "Kinds and parameters: "
    + "; ".join(
        f"{k.value}({', '.join(f'{r.name} in [{r.low:g}, {r.high:g}]' for r in CATALOG[k])})"
        for k in ActionKind
    )
    + ". Never emit code, prose or parameters outside these ranges."
)


def _coerce_bounds(kind: ActionKind, raw_params: dict) -> dict[str, tuple[float, float]]:
    """Accept {name: x}, {name: [lo, hi]} and {name_low/name_high} forms."""
    names = {r.name for r in CATALOG[kind]}
    merged: dict[str, dict[str, float]] = {}
    out: dict[str, tuple[float, float]] = {}
    for key, value in raw_params.items():
        base, _, suffix = key.rpartition("_")
        if suffix in ("low", "high") and base in names:
            merged.setdefault(base, {})[suffix] = float(value)
        elif key in names:
            if isinstance(value, (list, tuple)):
                if len(value) != 2:
                    raise DirectiveRejected(f"{kind.value}.{key}: expected [low, high]")
                out[key] = (float(value[0]), float(value[1]))
            else:
                out[key] = (float(value), float(value))
        else:
            raise DirectiveRejected(f"{kind.value}: unknown parameter {key!r}")
    for name, bounds in merged.items():
        if set(bounds) != {"low", "high"}:
            raise DirectiveRejected(f"{kind.value}.{name}: needs both _low and _high")
        out[name] = (bounds["low"], bounds["high"])
    return out


def validate_directive_payload(payload, raw_text: str, provenance: str) -> FeedbackDirective:
    """Strict schema validation for machine-produced directives.

    Out-of-catalog ranges are rejected outright rather than clamped.
    """
    if isinstance(payload, dict) and "actions" in payload:
        actions = payload["actions"]
    elif isinstance(payload, dict) and "kind" in payload:
        actions = [payload]
    else:
        raise DirectiveRejected("response does not match the directive schema")
    if not isinstance(actions, list) or not actions:
        raise DirectiveRejected("directive contains no actions")

    items = []
    for entry in actions:
        if not isinstance(entry, dict):
            raise DirectiveRejected("directive entries must be objects")
        try:
            kind = ActionKind(entry.get("kind"))
        except ValueError:
            raise DirectiveRejected(f"unknown action kind {entry.get('kind')!r}") from None
        bounds = _coerce_bounds(kind, entry.get("params", {}) or {})
        for name, (lo, hi) in bounds.items():
            r = _catalog_range(kind, name)
            if lo > hi:
                raise DirectiveRejected(f"{kind.value}.{name}: low {lo:g} > high {hi:g}")
            if lo < r.low or hi > r.high:
                raise DirectiveRejected(
                    f"{kind.value}.{name} range [{lo:g}, {hi:g}] exceeds catalog "
                    f"[{r.low:g}, {r.high:g}]"
                )
        items.append(DirectiveItem(kind, bounds))
    return FeedbackDirective(
        raw_text=raw_text, items=tuple(items), provenance=provenance
    )


def parse_llm(
    text: str, cfg: LlmConfig, client: httpx.Client | None = None
) -> FeedbackDirective:
    """Send free-form feedback to the configured endpoint; validate strictly.

    Schema-invalid responses are retried up to cfg.max_retries, then
    rejected with the raw response attached for auditing. Network failures
    raise TransportError and never partially apply anything.
    """
    if not cfg.endpoint:
        raise DirectiveRejected("no LLM endpoint configured; use the grammar path")
    owns_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    request = {"system": LLM_SYSTEM_PROMPT, "user": text, "model": cfg.model}
    last_error: DirectiveRejected | None = None
    try:
        for _ in range(cfg.max_retries + 1):
            try:
                response = client.post(cfg.endpoint, json=request, timeout=cfg.timeout)
                response.raise_for_status()
            except httpx.HTTPError as e:
                raise TransportError(f"LLM endpoint failure: {e}") from e
            body = response.text
            try:
                payload = json.loads(body)
                return validate_directive_payload(payload, text, "llm")
            except (json.JSONDecodeError, DirectiveRejected) as e:
                reason = e.reason if isinstance(e, DirectiveRejected) else "response is not JSON"
                last_error = DirectiveRejected(reason, raw_response=body)
        raise last_error
    finally:
        if owns_client:
            client.close()


def inject(directive: FeedbackDirective, cfg: OptimizerConfig) -> OptimizerConfig:
    """Restrict the next round's action space to the directive's kinds/ranges.

    Each round restricts from the full catalog again, so directives do not
    compose across rounds unless re-stated. An empty directive leaves the
    config unchanged.
    """
    if not directive.items:
        return cfg
    overrides: dict[ActionKind, dict[str, tuple[float, float]]] = {}
    for item in directive.items:
        overrides.setdefault(item.kind, {}).update(item.overrides)
    return replace(cfg, space=ActionSpace.full().restricted(overrides))
