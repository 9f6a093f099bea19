"""Run the configured end-to-end pipeline and print the report summary.

    python scripts/demo_pipeline.py [--config scripts/configs/demo.json] [-o runs/demo]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from patterncloth.pipeline import load_config, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "demo.json"))
    ap.add_argument("-o", "--output", default="runs/demo")
    a = ap.parse_args()
    t0 = time.perf_counter()
    res = run_pipeline(load_config(a.config), a.output)
    print(f"finished in {time.perf_counter() - t0:.1f} s, {len(res.manifest['artifacts'])} artifacts in {res.output}")
    print(json.dumps({k: v.get("aggregate", v) if isinstance(v, dict) else v for k, v in res.report.items()}, indent=2))


if __name__ == "__main__":
    main()
