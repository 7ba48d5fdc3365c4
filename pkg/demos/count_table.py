"""Trainable PETL parameters at the 12-layer, 768-wide shape, exact and rounded."""

from petlsv.petl import PetlConfig, count_params

CONFIGS = [
    PetlConfig("bottleneck", d_bottleneck=128),
    PetlConfig("bottleneck", d_bottleneck=64),
    PetlConfig("bottleneck", d_bottleneck=32),
    PetlConfig("prefix", l=200),
    PetlConfig("prefix", l=40),
    PetlConfig("mam", d_bottleneck=256, l=40),
    PetlConfig("mam", d_bottleneck=128, l=40),
    PetlConfig("mam", d_bottleneck=64, l=40),
]

if __name__ == "__main__":
    print(f"{'config':<22}{'PETL params':>14}{'M':>6}{'ratio':>9}")
    for cfg in CONFIGS:
        rep = count_params("base", cfg)
        dims = {"bottleneck": (cfg.d_bottleneck,), "prefix": (cfg.l,), "mam": (cfg.d_bottleneck, cfg.l)}[cfg.mode]
        label = f"{cfg.mode}{dims}".replace(",)", ")")
        print(f"{label:<22}{rep.trainable_petl:>14,d}{rep.trainable_petl / 1e6:>6.1f}{rep.ratio:>9.4f}")
    fixed = count_params("base", PetlConfig("fixed"))
    print(f"\nbackbone {fixed.backbone:,}  back-end {fixed.trainable_backend:,}")
