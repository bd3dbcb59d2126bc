"""Watch the siamese objective with and without the stop-gradient.

Prints the per-dimension spread of unit-normalized projector outputs
after each training length.  With the stop-gradient the spread stays
near that of a healthy embedding (about 1/sqrt(128) = 0.088); without it
the two branches can agree by shrinking towards one direction.

    python demos/siamese_collapse.py
"""

import numpy as np

from ctxpairs.evaluation import output_std
from ctxpairs.losses import LossConfig
from ctxpairs.model import TrainConfig, train
from ctxpairs.pairing import Strategy
from ctxpairs.synthcam import WorldConfig, generate_world

ds = generate_world(WorldConfig(n_train=500, n_test=0, held_out_fraction=0.0))
print(f"healthy reference: {1 / np.sqrt(128):.4f}")
print(f"{'epochs':>6}{'batch':>7}{'stop-grad':>12}{'no stop-grad':>14}")
for epochs, batch in [(30, 256), (30, 32), (100, 32)]:
    row = []
    for sg in (True, False):
        res = train(ds, Strategy("augment"), LossConfig("simsiam", stop_gradient=sg),
                    TrainConfig(epochs=epochs, batch_size=batch, seed=0))
        row.append(output_std(res.params, ds.features))
    print(f"{epochs:6d}{batch:7d}{row[0]:12.4f}{row[1]:14.4f}")
