#!/usr/bin/env python3
"""Record a real service session into JSON fixtures for the UI tests.

Run from the repository root after installing the python package:
    python3 frontend/fixtures/record_fixtures.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient

from postcast.service import ServiceConfig, create_app

HERE = Path(__file__).parent


def planted_csv(t=320, d=2, seed=7):
    """AR(2) channels; a heavily shrunk ridge baseline underestimates them."""
    rng = np.random.default_rng(seed)
    values = np.zeros((t, d))
    values[:2] = rng.normal(size=(2, d))
    for i in range(2, t):
        values[i] = (
            0.55 * values[i - 1] + 0.3 * values[i - 2] + rng.normal(scale=0.4, size=d)
        )
    header = ",".join(f"c{i}" for i in range(d))
    rows = [",".join(repr(float(v)) for v in row) for row in values]
    return header + "\n" + "\n".join(rows) + "\n"


def main():
    with tempfile.TemporaryDirectory() as tmp:
        app = create_app(ServiceConfig(store_path=tmp))
        with TestClient(app) as client:
            sid = client.post(
                "/sessions", json={"strategy": "random", "budget": 40, "seed": 12}
            ).json()["id"]
            client.post(
                f"/sessions/{sid}/data",
                json={
                    "csv": planted_csv(),
                    "window": 8,
                    "horizon": 4,
                    "baseline": "ridge",
                    "ridge_lambda": 120.0,
                },
            ).raise_for_status()
            with client.stream("POST", f"/sessions/{sid}/optimize") as r:
                for _ in r.iter_lines():
                    pass
            events = client.get(f"/sessions/{sid}/events").json()["events"]
            report = client.post(f"/sessions/{sid}/finalize").json()

    (HERE / "trace_events.json").write_text(json.dumps(events, indent=1) + "\n")
    (HERE / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    accepted = sum(1 for e in events if e.get("accepted"))
    rejected = sum(1 for e in events if e.get("accepted") is False)
    print(
        f"recorded {len(events)} events ({accepted} accepted, {rejected} rejected) "
        f"and a report with {len(report['per_channel'])} channels"
    )


if __name__ == "__main__":
    main()
