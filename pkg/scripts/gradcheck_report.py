"""Worst finite-difference relative error per differentiable op over ten seeds.

    python3 scripts/gradcheck_report.py
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from growthcast.tensor import RngStream, finite_diff_check  # noqa: E402
from helpers import reduced_model  # noqa: E402
from test_acceptance import (_activation_case, _bn_case, _ce_case, _cell_case, _conv_case,  # noqa: E402
                             _seg_loss_case)

CASES = {
    "conv2d": _conv_case,
    "sigmoid": lambda r: _activation_case(r, "sigmoid"),
    "tanh": lambda r: _activation_case(r, "tanh"),
    "relu": lambda r: _activation_case(r, "relu"),
    "batch_norm": _bn_case,
    "cross_entropy": _ce_case,
    "seg_loss": _seg_loss_case,
    "convlstm_cell[prev]": lambda r: _cell_case(r, "prev"),
    "convlstm_cell[new]": lambda r: _cell_case(r, "new"),
}


def main(seeds=range(10)):
    print(f"{'op':<22}{'worst rel. error':>18}{'seconds':>10}")
    for name, make in CASES.items():
        t = time.perf_counter()
        worst = max(finite_diff_check(*make(RngStream(s))) for s in seeds)
        print(f"{name:<22}{worst:>18.2e}{time.perf_counter() - t:>10.2f}")
    for steps in (1, 3):
        t = time.perf_counter()
        worst = max(finite_diff_check(f, m.parameters(), loss=loss)
                    for m, f, loss in (reduced_model(s, steps) for s in seeds))
        print(f"{f'reduced_model[T={steps}]':<22}{worst:>18.2e}{time.perf_counter() - t:>10.2f}")


if __name__ == "__main__":
    main()
