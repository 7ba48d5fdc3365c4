"""Instrument a random desk backbone with each PETL mode and look at what changes.

Fresh adapters start with a zero up-projection, so they leave the layer outputs
untouched.  A fresh prefix does not: its rows always take some attention mass.
"""

import numpy as np

from petlsv.backbone import Backbone, encode_layers
from petlsv.model import SpeakerModel
from petlsv.petl import PetlConfig, apply_petl

MODES = [
    PetlConfig("fixed"),
    PetlConfig("bottleneck", d_bottleneck=8),
    PetlConfig("prefix", l=4),
    PetlConfig("mam", d_bottleneck=8, l=4),
    PetlConfig("full"),
]


def shift(cfg, wave):
    plain = encode_layers(Backbone("desk", seed=0), wave)
    inst = encode_layers(apply_petl(Backbone("desk", seed=0), cfg), wave)
    return max(float(np.abs(a.data - b.data).max()) for a, b in zip(plain, inst))


if __name__ == "__main__":
    wave = np.random.default_rng(0).standard_normal(16000).astype(np.float32) * 0.3
    print(f"{'mode':<12}{'trainable':>11}{'census':>10}{'ratio':>8}{'shift at init':>15}")
    for cfg in MODES:
        m = SpeakerModel("desk", cfg)
        print(f"{cfg.mode:<12}{m.trainable_count():>11,d}{m.census():>10,d}{m.trainable_count() / m.census():>8.3f}{shift(cfg, wave):>15.2e}")
