import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from snapflow import datakit, trainer


@pytest.fixture(scope="session")
def quick_drift():
    """A small trained drift model shared by evaluation-oriented tests.

    Deliberately undersized (latent 4, hidden 32) so the whole fixture
    builds in seconds; quality is far above the naive baseline but below
    the acceptance-scale runs.
    """
    spec = datakit.SyntheticSpec(kind="drift-gaussian", dim=2, genes=6,
                                 timepoints=8, cells=80, noise=0.1,
                                 lift_noise=0.02, seed=3)
    full = datakit.synth_generate(spec)
    train_ds, split = datakit.split_holdout(full, interp_times=[4.0], extrap_times=[])
    cfg = trainer.TrainConfig(latent_dim=4, vae_hidden=32, field_hidden=32,
                              time_dim=8, batch=32, top_k=4, e_warm=30,
                              k_ot=10, max_steps=250, vae_epochs=60, seed=1)
    model, log = trainer.fit(train_ds, cfg)
    return {"full": full, "train": train_ds, "split": split, "spec": spec,
            "model": model, "log": log, "config": cfg}
