"""Instance training on one 64^2 synthetic pair with periodic evaluation.

Used to pick the desk learning rate, width and lambda.

    python scripts/calibrate.py --lam 0.1 --iters 1000 --every 100
"""
import argparse
import time

import numpy as np

from sgdir.grid import compose, interior_mask, jacobian_det, rms, warp_image
from sgdir.loss import LossConfig, local_ncc
from sgdir.model import FieldModelConfig, TimeEmbeddingConfig, deformation_at, init_params
from sgdir.synth import make_pair, phantom, random_svf
from sgdir.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--channels", default="8,16,32")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--lam", type=float, default=1e3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    dims = (64, 64)
    pair = make_pair(phantom("rings", dims, args.seed), random_svf(dims, 6, 4, 1000 + args.seed))
    channels = tuple(int(c) for c in args.channels.split(","))
    m = init_params(FieldModelConfig(2, channels), TimeEmbeddingConfig(), 0)
    cfg = TrainConfig(iters=args.iters, lr=args.lr, seed=0)
    mask = interior_mask(dims)
    t0, state = time.time(), None
    print("iter,seconds,epe,ncc,pct_neg_jac,inverse_rms,sim,semigroup")
    for stop in range(args.every, args.iters + 1, args.every):
        m, log = train(pair, m, cfg, LossConfig(lam=args.lam), resume=state, stop_at=stop)
        state = log.state
        u1 = deformation_at(m, pair.fixed, pair.moving, 1.0)
        um = deformation_at(m, pair.fixed, pair.moving, -1.0)
        epe = np.sqrt(((u1.vectors - pair.gt_forward.vectors) ** 2).sum(0)).mean()
        ncc = local_ncc(pair.fixed, warp_image(pair.moving, u1))
        neg = (jacobian_det(u1).values <= 0).mean() * 100
        ic = rms(compose(u1, um).vectors, mask)
        print(f"{stop},{time.time() - t0:.0f},{epe:.3f},{ncc:.4f},{neg:.3f},{ic:.3f},"
              f"{np.mean(log.sim_loss[-args.every:]):.4f},{np.mean(log.semigroup_loss[-args.every:]):.5f}",
              flush=True)


if __name__ == "__main__":
    main()
