"""Toy version of the annotated-size x strategy segmentation grid.

Equivalent to ``stedm grid --config demos/toy_grid.ini``; this script calls
the library directly and prints the summary table and a text bar plot.
Expect roughly half an hour on one CPU core with the settings below.
"""

import logging

from stedm.pipelines import (SegTrainConfig, TrainConfig, run_experiment_grid, summarize_grid,
                             text_bar_plot)


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    train = TrainConfig(epochs=10, samples_per_epoch=3000, batch_size=64, lr=1e-3, n_style=10)
    seg = SegTrainConfig(epochs=8, samples_per_epoch=2000, lr=1e-3, depth=2, base_channels=16)
    rows = run_experiment_grid([4], ["real_only", "multipatch"], seeds=[0, 1], train_cfg=train,
                               seg_cfg=seg, synthetic_count=1000, real_count=1000,
                               cohort_kwargs={"patients": 30, "slide_size": 256, "test_patients": 6})
    print("annotated\tstrategy\tmean IoU\tvariance x100")
    for r in summarize_grid(rows):
        print(f"{r['annotated']}\t{r['strategy']}\t{r['mean_iou']}\t{r['iou_variance']}")
    print()
    print(text_bar_plot(rows))


if __name__ == "__main__":
    main()
