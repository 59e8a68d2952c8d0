"""Named dataset/training settings used by the experiment scripts and the
acceptance suite."""

from __future__ import annotations

from .synthdata import SynthSpec
from .training import TrainConfig

# 3 classes, 200 train / 100 test videos, D = 32, noise 1
LEARNABILITY_DATA = SynthSpec(seed=0)
LEARNABILITY_TRAIN = TrainConfig(iterations=3000, log_every=0)  # default lr 0.0006

# noisier and with longer instances, so receptive field matters
ABLATION_DATA = SynthSpec(seed=0, noise=2.0, max_duration_s=20.0, min_frames=3200, max_frames=6000)
ABLATION_TRAIN = TrainConfig(lr=0.01, iterations=3000, lr_step=1000, log_every=0)
ABLATION_SEEDS = (0, 1, 2)
