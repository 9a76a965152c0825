"""Phantom registration suite shared by the direction-of-effect and
significance acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from cxreg.grid import warp_mask_hard
from cxreg.metrics import dcl, dcr, full_report, neg_jacobian_fraction
from cxreg.phantom import phantom_pair
from cxreg.registration import (RegistrationConfig, register_multistage,
                                stage1_native_field)

MODES = ("unsup", "lung", "ribcage", "ribpairs")


def mode_masks(mode, moving, fixed):
    return {
        "unsup": (None, None),
        "lung": (moving.lungs, fixed.lungs),
        "ribcage": (moving.ribcage, fixed.ribcage),
        "ribpairs": (moving.ribs, fixed.ribs),
    }[mode]


@dataclass
class SuiteResult:
    n_pairs: int
    # per mode: (n_pairs, 3) arrays of dcr, dcl, negjac
    stage1: dict = dc_field(default_factory=dict)
    stage2: dict = dc_field(default_factory=dict)
    reports: dict = dc_field(default_factory=dict)

    def mean(self, stage, mode, col):
        idx = {"dcr": 0, "dcl": 1, "negjac": 2}[col]
        return float(np.mean((self.stage1 if stage == 1 else self.stage2)[mode][:, idx]))


def _scores(moving, fixed, f):
    return [dcr(warp_mask_hard(moving.ribs, f), fixed.ribs),
            dcl(warp_mask_hard(moving.lungs, f), fixed.lungs),
            neg_jacobian_fraction(f)]


def run_suite(n_pairs=20, size=256, modes=MODES, **cfg):
    out = SuiteResult(n_pairs)
    rows1 = {m: [] for m in modes}
    rows2 = {m: [] for m in modes}
    out.reports = {m: [] for m in modes}
    for seed in range(n_pairs):
        pair = phantom_pair(seed, size)
        mv, fx = pair.moving, pair.fixed
        for mode in modes:
            res = register_multistage(mv.image, fx.image, *mode_masks(mode, mv, fx),
                                      RegistrationConfig(mode=mode, **cfg))
            rows1[mode].append(_scores(mv, fx, stage1_native_field(res)))
            rows2[mode].append(_scores(mv, fx, res.field_native))
            f = res.field_native
            out.reports[mode].append(full_report(
                res.warped, fx.image, f,
                warp_mask_hard(mv.ribs, f), fx.ribs,
                warp_mask_hard(mv.lungs, f), fx.lungs,
                provenance={"seed": seed, "mode": mode}))
    out.stage1 = {m: np.array(v) for m, v in rows1.items()}
    out.stage2 = {m: np.array(v) for m, v in rows2.items()}
    return out


if __name__ == "__main__":
    import sys
    import time
    t = time.time()
    r = run_suite(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
    print(f"{time.time() - t:.1f} s")
    print("mode      DCR1   DCL1   nJ1      DCR2   DCL2   nJ2")
    for m in MODES:
        a = np.r_[r.stage1[m].mean(0), r.stage2[m].mean(0)]
        print(f"{m:9s}", " ".join(f"{v:.4f}" for v in a))
