"""How often does each pairing rule hand the model a same-class positive?

Draws one epoch of positives on the default synthetic world for every
strategy and reports the fraction whose class matches the anchor's, and
how often the positive is the anchor itself (augmentation-only pairs).

    python demos/positive_quality.py
"""

import numpy as np

from ctxpairs.context import positive_distribution
from ctxpairs.pairing import Strategy, select_positives
from ctxpairs.synthcam import make_benchmark

world, train, test = make_benchmark()
rng = np.random.default_rng(0)
anchors = np.arange(len(train))

print(f"train split: {len(train)} frames, {train.n_classes} classes, "
      f"{len(np.unique(train.locations))} locations\n")
print(f"{'strategy':<22}{'same class':>12}{'self':>8}")
for st in [Strategy("augment"), Strategy("sequence"), Strategy("context"),
           Strategy("context", tau_c=0.5), Strategy("oracle"), Strategy("oracle_noisy", lam=0.3)]:
    pos = select_positives(st, anchors, train, rng)
    same = np.mean(train.labels[pos] == train.labels[anchors])
    self_ = np.mean(pos == anchors)
    name = st.label if st.kind != "context" else f"context(tau={st.tau_c:g})"
    print(f"{name:<22}{same:12.3f}{self_:8.3f}")

# where does the context mass of one anchor go?
i = 17
p = positive_distribution(i, train.contexts, 0.05)
top = np.argsort(-p)[:8]
hours = (train.timestamps % 86400) / 3600
print(f"\nanchor {i}: location {train.locations[i]}, {hours[i]:.1f}h, class {train.labels[i]}")
print(f"{'idx':>6}{'p':>8}{'loc':>5}{'hour':>7}{'class':>7}")
for j in top:
    print(f"{j:6d}{p[j]:8.3f}{train.locations[j]:5d}{hours[j]:7.1f}{train.labels[j]:7d}")
