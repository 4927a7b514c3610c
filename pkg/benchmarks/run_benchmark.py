"""Scale benchmark: generate a cohort, run ``all`` on it, report time and memory.

    python benchmarks/run_benchmark.py --records 10000000 --memory-mb 2048

Each stage runs as a separate ``hospnet`` process so that peak resident
memory can be read per stage from the child rusage.
"""
from __future__ import annotations

import argparse
import json
import os
import resource
import subprocess
import sys
import tempfile
import time

# generated stays per patient under the default generator config
RECORDS_PER_PATIENT = 1.93


def _stage(cmd: list[str]) -> dict:
    before = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, stderr=subprocess.PIPE, text=True)
    wall = time.perf_counter() - t0
    peak = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    if proc.returncode not in (0, 2):
        sys.stderr.write(proc.stderr)
        raise SystemExit(f"stage failed: {' '.join(cmd)}")
    return {"cmd": " ".join(cmd), "exit": proc.returncode, "wall_s": round(wall, 2),
            # ru_maxrss only ever grows, so a stage that stays below an earlier one reports that one
            "peak_rss_mb": round(max(peak, before) / 1024, 1)}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--records", type=int, default=10_000_000)
    p.add_argument("--memory-mb", type=int, default=2048)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--workdir", help="keep files here instead of a temporary directory")
    p.add_argument("--report", help="write the JSON report to this file")
    args = p.parse_args(argv)

    patients = max(1, round(args.records / RECORDS_PER_PATIENT))
    workdir = args.workdir or tempfile.mkdtemp(prefix="hospnet-bench-")
    exe = [sys.executable, "-m", "hospnet.cli"]
    gen_dir, out_dir = os.path.join(workdir, "gen"), os.path.join(workdir, "out")
    report = {"target_records": args.records, "patients": patients,
              "memory_budget_mb": args.memory_mb, "workers": args.workers,
              "cpus": os.cpu_count()}
    report["gen"] = _stage(exe + ["gen", "-q", "--seed", str(args.seed), "--patients", str(patients),
                                  "--workers", str(args.workers), "--out", gen_dir])
    cohort = os.path.join(gen_dir, "cohort.tsv")
    with open(cohort, "rb") as fh:
        report["records"] = sum(1 for line in fh if not line.startswith(b"#")) - 1
    report["input_mb"] = round(os.path.getsize(cohort) / 2**20, 1)
    report["all"] = _stage(exe + ["all", "-q", "--input", cohort, "--out", out_dir,
                                  "--memory-mb", str(args.memory_mb), "--spill-dir", workdir])
    report["total_wall_s"] = round(report["gen"]["wall_s"] + report["all"]["wall_s"], 2)
    report["within_memory_budget"] = report["all"]["peak_rss_mb"] <= args.memory_mb
    report["within_15_minutes"] = report["total_wall_s"] < 15 * 60
    text = json.dumps(report, indent=2)
    print(text)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
