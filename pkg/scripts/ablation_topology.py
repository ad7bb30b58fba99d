"""Compare the three network variants: parameter counts, layer kinds and output shapes.

    python scripts/ablation_topology.py --preset full
"""
import argparse

from sacnn.model import PRESETS, VARIANTS, ModelConfig, build_model
from sacnn.tensor import make_rng


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--preset", choices=tuple(PRESETS), default="tiny")
    parser.add_argument("--size", type=int, default=64, help="square input size for the shape probe")
    args = parser.parse_args()

    rng = make_rng(0)
    x = rng.uniform(size=(1, 1, args.size, args.size))
    print(f"{'variant':<16} {'params':>10}  {'conv':>4} {'pool':>4} {'concat':>6} {'deconv':>6}  output")
    for variant in VARIANTS:
        model = build_model(ModelConfig.preset(variant, args.preset), rng)
        kinds = model.kind_counts()
        shape = model.forward(x).density.grid.shape
        print(f"{variant:<16} {model.param_count():>10}  {kinds.get('conv', 0):>4} {kinds.get('pool', 0):>4} "
              f"{kinds.get('concat', 0):>6} {kinds.get('deconv', 0):>6}  {shape}")


if __name__ == "__main__":
    main()
