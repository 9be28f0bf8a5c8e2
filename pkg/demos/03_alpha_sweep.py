"""Sweep the adversarial weight and render the trade-off curve.

Writes sweep.csv, sweep_summary.csv and a text table plus SVG chart into
./demo_sweep.  Small sizes keep this to a few minutes on one core.
"""

from pathlib import Path

from agnostic_net.dann import TrainConfig
from agnostic_net.data import DatasetSpec, generate
from agnostic_net.evaluation import ProbeConfig, sweep_alpha
from agnostic_net.report import render, sweep_table

out = Path("demo_sweep")
out.mkdir(exist_ok=True)
dataset = generate(DatasetSpec(n_target_per_class=100, n_context_per_class=200, n_test_per_class=100))
result = sweep_alpha(dataset, TrainConfig.desk(epochs=8), [0.0, 0.4, 0.8], repeats=3,
                     probe_cfg=ProbeConfig(epochs=5))
result.to_csv(out / "sweep.csv")
result.summary_csv(out / "sweep_summary.csv")
print(sweep_table(result))
for path in render(out / "sweep.csv", out):
    print("wrote", path)
