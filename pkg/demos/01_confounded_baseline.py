"""Why a confounded training set is a problem.

Shapes (disc, square) are drawn over textures (stripes, checkerboard).  With
rho=1 every disc sits on stripes, so a classifier trained on shapes can get
away with reading the texture instead.  Here we train one plain CNN on the
shape task and one on the texture task, then score each on the other's test
set.  High cross accuracy means the two concepts are entangled in what the
networks learned.  A rho=0.5 control breaks the correlation.

Run: python3 demos/01_confounded_baseline.py   (a few CPU minutes)
"""

from agnostic_net.dann import TrainConfig
from agnostic_net.data import DatasetSpec, generate
from agnostic_net.evaluation import cross_domain_eval

SIZES = dict(n_target_per_class=250, n_context_per_class=500, n_test_per_class=100)

for rho in (1.0, 0.5):
    dataset = generate(DatasetSpec(rho=rho, **SIZES))
    table = cross_domain_eval(dataset, TrainConfig.desk(epochs=10))
    print(f"rho={rho}")
    print(f"  shape model   on shapes   {table.target_model_on_target:.3f}"
          f"   on textures {table.target_model_on_context:.3f}")
    print(f"  texture model on textures {table.context_model_on_context:.3f}"
          f"   on shapes   {table.context_model_on_target:.3f}")
