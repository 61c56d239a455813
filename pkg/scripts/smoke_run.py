"""Run the smoke pipeline twice in clean directories and compare manifests.

    python scripts/smoke_run.py --out /tmp/smoke
"""
import argparse
import time
from pathlib import Path

from abmcal.pipeline import load_pipeline_config, run_pipeline

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "smoke.yaml")
    args = ap.parse_args()
    cfg = load_pipeline_config(args.config)
    digests = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        digests.append(run_pipeline(cfg, args.out / name).digest())
        print(f"run {name}: {time.perf_counter() - t0:.0f}s, manifest {digests[-1]}")
    print("identical" if digests[0] == digests[1] else "DIFFERENT")


if __name__ == "__main__":
    main()
