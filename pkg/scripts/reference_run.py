"""Desk reference run: pretrain once, finetune Baseline-Aug, Baseline-MD and FROM, evaluate all.

Writes <out>/results.json and, with --freeze, tests/fixtures/reference_run.json which the
acceptance suite reads. Takes about 15 minutes on one CPU core.
"""

import argparse
import json
import logging
from pathlib import Path

from fromnet.experiments import directional_checks, reference_run, to_jsonable

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "reference_run.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--freeze", action="store_true", help="write the acceptance fixture")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    results = to_jsonable(reference_run(args.out))
    for part, (ok, detail) in directional_checks(results).items():
        print(f"[{'PASS' if ok else 'FAIL'}] 7{part}: {detail}")
    print(f"total {results['timings']['total'] / 60:.1f} min")
    if args.freeze:
        FIXTURE.parent.mkdir(parents=True, exist_ok=True)
        FIXTURE.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
        print(f"wrote {FIXTURE}")


if __name__ == "__main__":
    main()
