"""Run every verification suite and print a per-case summary with CI exit status.

Exit code 0 when all cases pass, 1 otherwise. Use --jobs to spread the Monte
Carlo work over processes; results are identical regardless of job count.
"""

import argparse
import json

from dualspike.verification import SUITES, run_suites


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", help="also write rows as line-delimited records")
    args = ap.parse_args()

    rows = run_suites(sorted(SUITES), samples=args.samples, seed=args.seed, jobs=args.jobs)
    failed = 0
    for row in rows:
        status = "ok" if row["passed"] else "FAIL"
        case = " ".join(f"{k}={v}" for k, v in row["case"].items())
        print(f"{status:4s} {row['suite']:10s} {case}")
        failed += 0 if row["passed"] else 1

    if args.out:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    print(f"{len(rows)} cases, {failed} failed")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
