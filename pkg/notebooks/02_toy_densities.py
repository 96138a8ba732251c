"""Training energy models on a 2-D toy density with DCD, CD and PCD.

CD and PCD run ten Langevin steps, so ten score evaluations per update.
DCD with the exact Laplacian needs 1 + D, which is three here. Takes a couple of minutes on one core.
Pass a dataset name as the first argument (default ``moons``).
"""

import sys
from pathlib import Path

from dcdebm.experiments import ExperimentConfig, export_grid, run_train

name = sys.argv[1] if len(sys.argv) > 1 else "moons"
out = Path("runs") / name

for kind in ("dcd_ve", "cd", "pcd"):
    cfg = ExperimentConfig().replace(**{
        "dataset.name": name, "loss.kind": kind,
        "model.hidden": "32,32,32", "optimizer.batch_size": "256", "optimizer.iterations": "1000",
        "sampler.pcd_steps": "10", "eval.n_eval": "2000", "eval.every": "250",
    })
    cfg.out_dir = str(out / kind)
    rec = run_train(cfg)
    curve = [round(r["sm_loss"], 2) for r in rec.rows if r["sm_loss"] == r["sm_loss"]]
    ms = sum(r["wall_ms"] for r in rec.rows[1:]) / max(1, len(rec.rows) - 1)
    print(f"{kind:7s} evals/step={rec.score_evals_per_iter:2d}  {ms:5.1f} ms/step  SM loss curve {curve}")
    if not rec.diverged:
        # exp(f) on a grid, written as CSV and a PGM image
        export_grid(rec.model, resolution=80, out_prefix=out / kind / "density")

print(f"\nmetrics, checkpoints and density images are under {out}/")
