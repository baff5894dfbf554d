"""Switch the loss terms and the global classifier on and off.

Mirrors the usual ablation grid: CE alone, CE with either regularizer, the
full objective, and the full objective with the server classifier disabled.
"""
import numpy as np

from fedpall import parse_config, run

VARIANTS = {
    "ce": {"enable_kl": False, "enable_infonce": False},
    "ce + kl": {"enable_infonce": False},
    "ce + infonce": {"enable_kl": False},
    "full": {},
    "full, local classifiers": {"enable_global_classifier": False},
}

for name, flags in VARIANTS.items():
    accs = [run(parse_config(None, {**flags, "seed": s, "global_rounds": 30})).report.macro_avg for s in (0, 1, 2)]
    print(f"{name:24s} {100 * np.mean(accs):6.2f}")
