"""Hand-built metric tables shared by the plan-search tests and the acceptance suite."""

import numpy as np

from coopir.core import Prng


def selection_table():
    """20 plans x 5 metrics (psnr, ssim, gsim, nr_sharp, nr_balance).

    With N = 20 the per-metric cutoff is 2.  Filler rows sit well below the
    hand-placed winners:

    ========  ===========================  ============================
    plan      good under                   verdict
    ========  ===========================  ============================
    3         psnr, ssim, gsim             rejected: no no-reference metric
    7         psnr, gsim, nr_balance       selected
    11        ssim, nr_sharp, nr_balance   selected
    15        nr_sharp                     rejected: one metric
    19        (ties plan 7 on psnr)        rejected: loses the tie on index
    ========  ===========================  ============================
    """
    r = Prng(2718)
    table = np.column_stack([
        r.uniform(15, 20, 20), r.uniform(0.3, 0.6, 20), r.uniform(0.3, 0.6, 20),
        r.uniform(0.2, 0.5, 20), r.uniform(0.2, 0.5, 20),
    ])
    table[3, :3] = (30.0, 0.95, 0.92)
    table[7, [0, 2, 4]] = (29.0, 0.93, 0.80)
    table[11, [1, 3, 4]] = (0.94, 0.90, 0.78)
    table[15, 3] = 0.85
    table[19, 0] = 29.0
    return table


SELECTION_EXPECTED = [7, 11]


def oos_fixture():
    """Four-tool study registry ids: 0 noise, 1 rain, 2 haze, 3 defocus_blur.

    Ground truth {rain}; plans are ``enumerate_plans(4, 2)``.  Selected plans:
    [1] (derain), [0, 1], [1, 1], [2, 1].  Hand answers:

    * out-of-scope among selected: [0, 1] and [2, 1] -> fraction 0.5
    * best aggregated rank over plans with an out-of-scope tool: 1.0 (plan [0, 1])
    * best over strictly matched plans ([1] and [1, 1]): 2.0
    * duplicates among selected: only [1, 1] -> counterpart [1] at index 1,
      ranks (2.0, 2.5), dup fraction 0.25, mean shift +0.5
    """
    agg = 10.0 + np.arange(20, dtype=float)
    agg[5], agg[1], agg[9], agg[13] = 1.0, 2.5, 2.0, 4.0
    return {
        "selected": [1, 5, 9, 13],
        "agg": agg,
        "gt_set": {"rain"},
        "oos_fraction": 0.5,
        "best_rank_oos": 1.0,
        "best_rank_matched": 2.0,
        "dup_pairs": [(9, 1, 2.0, 2.5)],
        "dup_fraction": 0.25,
        "mean_shift": 0.5,
    }


def nr_boost_table():
    """Five plans on a {rain} input; plan 2 adds an out-of-scope denoiser, keeps FR
    quality level with plan 0 and is the only plan that lifts the NR metrics.

    Plans: [derain], [derain, derain], [denoise, derain], [dehaze], [defocus].
    """
    plans = [(1,), (1, 1), (0, 1), (2,), (3,)]
    table = np.array([
        [24.0, 0.80, 0.70, 0.30, 0.30],
        [23.5, 0.79, 0.69, 0.28, 0.29],
        [24.1, 0.81, 0.69, 0.60, 0.55],
        [18.0, 0.60, 0.50, 0.25, 0.20],
        [19.0, 0.62, 0.55, 0.20, 0.22],
    ])
    return plans, table
