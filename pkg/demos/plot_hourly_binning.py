"""
From event logs to an embedding
===============================

Irregular timestamped measurements are binned into an hourly grid, sparse
variables are dropped, and the trained kernel gives a 2-D picture of the
records.
"""

import tempfile
from pathlib import Path

import numpy as np

from tckim.dataset import LongEvent, drop_high_missing_variables, ingest_long_format, missing_rates
from tckim.evaluation import export_embedding, kpca_fit
from tckim.kernel import EnsembleConfig, train_tck_im

rng = np.random.default_rng(3)

# %%
# Simulate 60 stays of 24 hours. Sicker patients get heart rate measured
# more often, and lactate is almost never taken.
events = []
labels = {}
for i in range(60):
    sick = i % 2
    labels[f"p{i}"] = sick + 1
    for _ in range(rng.poisson(30 if sick else 12)):
        t = rng.uniform(0, 24)
        events.append(LongEvent(f"p{i}", t, "HR", 80 + 10 * sick + rng.normal(0, 8)))
    for _ in range(rng.poisson(10)):
        events.append(LongEvent(f"p{i}", rng.uniform(0, 24), "Temp", 37 + 0.5 * sick + rng.normal(0, 0.4)))
    if rng.random() < 0.005:
        events.append(LongEvent(f"p{i}", rng.uniform(0, 24), "Lactate", 2.0))

data = ingest_long_format(events, n_bins=24, horizon=24.0, variables=["HR", "Temp", "Lactate"])
data = data.replace(labels=np.array([labels[i] for i in data.ids]))
rates, overall = missing_rates(data)
print({name: round(float(r), 3) for name, r in zip(data.variable_names, rates)}, "overall", round(overall, 3))

# %%
# Drop variables that are essentially never observed.
data, dropped = drop_high_missing_variables(data, 0.99)
print("dropped:", dropped)

# %%
# Train the kernel and embed the records with kernel PCA.
trained, gram = train_tck_im(data, EnsembleConfig(q_inits=5, components=(2, 3), min_segment_length=6, seed=0))
_, emb = kpca_fit(gram.entries, d=2)
for c in (1, 2):
    print(f"class {c}: mean first coordinate {emb[data.labels == c, 0].mean():+.2f}")

out = Path(tempfile.gettempdir()) / "hourly_embedding.svg"
export_embedding(emb, data.labels, out, "svg", ids=data.ids)
print("scatter written to", out)
