"""Toy segmentation study: MSIM agreement vs k-means over several seeds."""

import argparse

import numpy as np

from upsam import attnet, fusion, synth
from upsam.attnet import NetworkConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--maps", type=int, default=4)
    ap.add_argument("--iters", type=int, default=8000)
    ap.add_argument("--snr", type=float, default=synth.TOY_SNR_DB)
    args = ap.parse_args()

    print(f"{'seed':>4} | {'MSIM':>7} | {'k-means':>7} | map usage")
    rows = []
    for seed in args.seeds:
        toy = synth.gen_toy(seed, snr_db=args.snr)
        cfg = NetworkConfig(bands=toy.msi.shape[0], pieces2=args.maps, iterations=args.iters, seed=seed)
        msim = fusion.compute_msim(attnet.encode_image(attnet.train(toy.msi, cfg), toy.msi))
        a = synth.label_agreement(msim, toy.labels)
        k = synth.label_agreement(synth.kmeans_labels(toy.msi, 3, seed=seed), toy.labels)
        counts = np.bincount(msim.ravel(), minlength=args.maps)
        rows.append((a, k))
        print(f"{seed:>4} | {a:7.4f} | {k:7.4f} | {counts.tolist()}")
    a, k = np.mean(rows, axis=0)
    print(f"{'mean':>4} | {a:7.4f} | {k:7.4f} |")


if __name__ == "__main__":
    main()
