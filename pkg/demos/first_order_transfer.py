"""Train a first-order ODE trunk, then solve unseen equations in one shot.

    python demos/first_order_transfer.py --iterations 3000
"""

import argparse
import time

import numpy as np

from oneshot_pinn import TrainConfig, evaluate, held_out_samples, train_bundles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--tests", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    start = time.perf_counter()
    params, log = train_bundles(TrainConfig("first_order", seed=args.seed, iterations=args.iterations, log_every=500))
    print(f"trained {args.iterations} iterations in {time.perf_counter() - start:.1f}s, final loss {log[-1]['loss']:.3e}")

    report = evaluate("first_order", params, held_out_samples("first_order", args.tests, seed=args.seed + 1))
    res = report.values("residual_mse")
    sol = report.values("solution_mse")
    print(f"{len(report.rows)} unseen equations solved in {report.inference_time * 1e3:.1f} ms ({report.timing_note})")
    print(f"residual MSE  mean {res.mean():.2e}  median {np.median(res):.2e}  worst {res.max():.2e}")
    print(f"MSE vs RK4    mean {sol.mean():.2e}  median {np.median(sol):.2e}  worst {sol.max():.2e}")
    worst = report.rows[int(np.argmax(res))]["sample"]
    print("hardest equation:", worst)


if __name__ == "__main__":
    main()
