#!/usr/bin/env python3
"""End-to-end check: simulate a phantom, run the pipeline, compare field errors."""

import csv
import os
import sys
import tempfile
from pathlib import Path

# Add app directory to path
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from app.main import main as cli_main

CONFIGS = Path(__file__).parent / "configs"


def read_pooled(csv_path: Path) -> dict:
    with open(csv_path, newline="") as handle:
        return {
            row["metric"]: float(row["value"])
            for row in csv.DictReader(handle)
            if row["frame_pair"] in ("all", "0")
        }


def run_case(name: str, workdir: Path, seed: int) -> bool:
    config = CONFIGS / f"{name}.cfg"
    data_dir = workdir / name
    print(f"\n🔬 {name}")

    if cli_main(["simulate", "--config", str(config), "--seed", str(seed), "--output-dir", str(data_dir)]) != 0:
        print("   ❌ simulate failed")
        return False
    code = cli_main([
        "pipeline",
        "--input", str(data_dir / "frames_complex.ocer"),
        "--config", str(config),
        "--truth-dir", str(data_dir),
        "--output-dir", str(data_dir / "out"),
    ])
    if code != 0:
        print("   ❌ pipeline failed")
        return False

    metrics = read_pooled(data_dir / "out" / "metrics.csv")
    ok = True
    for axis in ("lateral", "axial"):
        initial = metrics[f"field_rmse_{axis}_initial"]
        final = metrics[f"field_rmse_{axis}_final"]
        better = final < initial or initial == 0.0
        ok &= better
        print(f"   {'✅' if better else '❌'} {axis} displacement RMSE {initial:.4f} -> {final:.4f} px")
    print(f"   image RMSE original {metrics['image_rmse_original']:.4f}, "
          f"frame average {metrics['image_rmse_frame_average']:.4f}, "
          f"warped mean {metrics['image_rmse_warped_mean']:.4f}, "
          f"proposed {metrics['image_rmse_proposed']:.4f}")
    return ok


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    with tempfile.TemporaryDirectory() as tmp:
        results = {name: run_case(name, Path(tmp), seed) for name in ("uniform_lateral", "compression")}

    print("\n📊 Summary:")
    for name, ok in results.items():
        print(f"   - {name}: {'passed' if ok else 'FAILED'}")
    sys.exit(0 if all(results.values()) else 1)


if __name__ == "__main__":
    main()
