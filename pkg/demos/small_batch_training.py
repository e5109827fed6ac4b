"""Train the toy ConvNet with two samples per normalization batch.

Batch norm, batch renorm and moving-average batch norm are trained on the
same synthetic task; batch norm with 32 samples is the reference. The trained
moving-average model is then folded into plain convolutions for inference.

    python3 demos/small_batch_training.py [iterations]

The default of 1500 iterations takes a few minutes on one core; 6000 matches
the acceptance runs.
"""

import sys
from dataclasses import replace

import numpy as np

from mabnlab.norm import preset
from mabnlab.train import TrainConfig, Trainer, synth_dataset

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
base = TrainConfig(iterations=iterations, milestones=(iterations // 2, iterations * 3 // 4),
                   eval_every=max(1, iterations // 4), trace_every=0)
data = synth_dataset(spec=base.dataset)

runs = {
    "batch norm, 32 samples": (preset("bn"), 32),
    "batch norm, 2 samples": (preset("bn"), 2),
    "batch renorm, 2 samples": (preset("brn"), 2),
    "moving-average BN, 2 samples": (preset("mabn"), 2),
}
trainers = {}
for label, (norm, nb) in runs.items():
    t = Trainer(replace(base, norm=norm, norm_batch=nb), seed=0, data=data)
    report = t.run()
    trainers[label] = t
    print(f"{label:30s} val err {100 * report.final_val_err:6.2f}%")

t = trainers["moving-average BN, 2 samples"]
x = data.x_val[:200]
plain = t.model.forward(x, training=False)
folded = t.model.forward_folded(x)
print(f"folded inference max |diff| on 200 samples: {np.abs(plain - folded).max():.2e}")
