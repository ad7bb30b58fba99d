"""Overfit the tiny scale-adaptive model on five synthetic scenes.

Prints the density-loss ratio and the training-set MAE after each phase,
optionally for several training seeds, and writes the loss history as CSV.

    python scripts/overfit_experiment.py --seeds 0 1 2 3 --loss-csv overfit.csv
"""
import argparse
import dataclasses

from sacnn.experiments import OVERFIT_LOSS_RATIO, OVERFIT_MAE_THRESHOLD, OVERFIT_TRAIN, overfit_experiment
from sacnn.training import write_loss_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[OVERFIT_TRAIN.seed])
    parser.add_argument("--loss-csv", help="loss history of the first seed")
    args = parser.parse_args()

    print("seed  L_D_initial  L_D_final  ratio   MAE_phase1  MAE_final  seconds")
    worst_ratio = 0.0
    for i, seed in enumerate(args.seeds):
        out = overfit_experiment(train_cfg=dataclasses.replace(OVERFIT_TRAIN, seed=seed))
        ratio = out.final_loss / out.initial_loss
        worst_ratio = max(worst_ratio, ratio)
        print(f"{seed:<5d} {out.initial_loss:<12.4f} {out.final_loss:<10.4f} {ratio:<7.3f} "
              f"{out.phase1_mae:<11.3f} {out.final_mae:<10.3f} {out.seconds:.1f}")
        if i == 0 and args.loss_csv:
            write_loss_csv(args.loss_csv, out.result.history)
    print(f"thresholds: ratio < {OVERFIT_LOSS_RATIO}, final MAE < {OVERFIT_MAE_THRESHOLD}; worst ratio {worst_ratio:.3f}")


if __name__ == "__main__":
    main()
