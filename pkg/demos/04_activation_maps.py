"""Where does each model look?

For every test image we take the channel-wise max of the last feature map,
upsample it to the crop, and ask how much of its top 10% falls on the shape.
The images on which the alpha=0 and alpha=0.8 maps disagree most (lowest
Pearson correlation) are listed first and saved as PGM files.
"""

from pathlib import Path

import numpy as np

from agnostic_net.dann import TrainConfig, make_network, train
from agnostic_net.data import DatasetSpec, generate
from agnostic_net.evaluation import activation_maps, least_correlated
from agnostic_net.pgm import write_pgm

dataset = generate(DatasetSpec(rho=1.0, n_target_per_class=150, n_context_per_class=300, n_test_per_class=50))
split = dataset["target_test_iid"]
maps = {}
for alpha in (0.0, 0.8):
    net = make_network(dataset, seed=2)
    train(net, dataset, TrainConfig.desk(alpha_max=alpha, epochs=10, seed=2))
    maps[alpha], masks = activation_maps(net, split, dataset.crop_size)
    mass = np.mean([m.in_mask_mass(mk) for m, mk in zip(maps[alpha], masks)])
    print(f"alpha={alpha}: mean top-10% mass on the shape {mass:.3f}")

out = Path("demo_maps")
out.mkdir(exist_ok=True)
for index, r in least_correlated(maps[0.0], maps[0.8], k=5):
    print(f"image {index}: correlation {r:+.3f}")
    for alpha in (0.0, 0.8):
        write_pgm(out / f"{index:05d}_alpha{alpha}.pgm", maps[alpha][index].values)
