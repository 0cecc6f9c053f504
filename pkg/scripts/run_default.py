#!/usr/bin/env python3
"""Run the bundled suburban-feeder scenario end to end and print a summary.

Writes result files to the directory given by --output-dir (default
./gridroll-out).  Equivalent to `gridroll run` but handy when working
from a source checkout.
"""

import argparse
import json

from gridroll.pipeline import emit_results, run_pipeline, summarize
from gridroll.scenario import default_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output-dir", default="gridroll-out")
    ap.add_argument("--emit-plots", action="store_true")
    args = ap.parse_args()

    report = run_pipeline(default_scenario())
    paths = emit_results(report, args.output_dir, emit_plots=args.emit_plots)
    summary = summarize(report)
    summary["timings_s"] = {k: round(v, 3) for k, v in report.timings.items()}
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"\nwrote {len(paths)} files to {args.output_dir}")


if __name__ == "__main__":
    main()
