"""Small synthetic datasets shared by the training tests."""

import dataclasses

import numpy as np

from pfml.functionals import FunctionalSet, precompute_dataset_functionals
from pfml.synth import PRESETS, generate
from pfml.timeseries import frames_for_sequences


def frames(preset="unlabeled", count=50, seed=1, **overrides):
    spec = dataclasses.replace(PRESETS[preset], count=count, seed=seed, **overrides)
    signals, labels, groups = generate(spec)
    x = frames_for_sequences(signals, spec.frame_config, spec.num_frames).astype(np.float32)
    return x, labels, groups


def targets(x, fset=FunctionalSet()):
    store = precompute_dataset_functionals(list(x), fset)
    return store.rows.reshape(x.shape[0], x.shape[1], -1)
