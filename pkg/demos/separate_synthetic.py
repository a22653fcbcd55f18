"""Separate one synthetic chest recording and compare NMCF with both baselines.

Run from the repository root after installing the package:

    python demos/separate_synthetic.py --seed 3 --out demo_out

The mixture has a known heart, lung and noise decomposition, so every stem
can be scored against ground truth. Expect NMCF to lift the heart SDR by
several dB over the raw mixture; the clustering baselines usually gain less.
"""
import argparse
import os
import time

from chestsep import baselines, metrics, nmcf, synth
from chestsep.audio_io import write_wav
from chestsep.nmf_core import NmfConfig
from chestsep.spectral import StftConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--db-size", type=int, default=10)
    ap.add_argument("--max-iter", type=int, default=500)
    ap.add_argument("--out", help="directory for the NMCF stems")
    args = ap.parse_args()

    stft_cfg = StftConfig()
    # exemplar recordings use their own seeds so they never coincide with the mixture
    heart_db = nmcf.ExemplarDb.from_buffers(synth.exemplar_buffers("heart", args.db_size, 1000), stft_cfg)
    lung_db = nmcf.ExemplarDb.from_buffers(synth.exemplar_buffers("lung", args.db_size, 2000), stft_cfg)

    mix = synth.synthesize(synth.preset_spec("default", args.seed))
    print(f"heart {mix.spec.heart.rate_bpm:.1f} bpm, breathing {mix.spec.lung.rate_bpm:.1f}/min, "
          f"noise {mix.spec.noise.kind} at {mix.spec.noise.snr_db:g} dB")

    nmf_cfg = NmfConfig(max_iter=args.max_iter)
    runs = {}
    t = time.perf_counter()
    runs["nmcf"] = nmcf.separate(mix.mixture, heart_db, lung_db, nmcf.NmcfConfig(nmf_cfg), stft_cfg)
    print(f"nmcf took {time.perf_counter() - t:.1f}s")
    runs["shah"] = baselines.shah_separate(mix.mixture, NmfConfig(sparsity=0.0, max_iter=args.max_iter), stft_cfg)
    runs["cq"] = baselines.cq_separate(mix.mixture, heart_db, nmf_cfg, stft_cfg)

    n = len(runs["nmcf"].stems["heart"])
    heart_ref = mix.truth["heart"].samples[:n]
    lung_ref = mix.truth["lung"].samples[:n]
    print(f"{'method':<8} {'heart SDR':>10} {'lung SDR':>10} {'HR b/10s':>9} {'BR b/10s':>9}")
    print(f"{'truth':<8} {'':>10} {'':>10} {mix.heart_rate:9.2f} {mix.breathing_rate:9.2f}")
    print(f"{'mixture':<8} {metrics.sdr(mix.mixture.samples[:n], heart_ref):10.2f} "
          f"{metrics.sdr(mix.mixture.samples[:n], lung_ref):10.2f}")
    for name, res in runs.items():
        heart, lung = res.stems["heart"], res.stems["lung"]
        print(f"{name:<8} {metrics.sdr(heart, heart_ref):10.2f} {metrics.sdr(lung, lung_ref):10.2f} "
              f"{metrics.heart_rate(heart).rate:9.2f} {metrics.breathing_rate(lung).rate:9.2f}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_wav(os.path.join(args.out, "mixture.wav"), mix.mixture)
        for name, buf in runs["nmcf"].stems.items():
            write_wav(os.path.join(args.out, f"{name}.wav"), buf)
        print(f"stems written to {args.out}")


if __name__ == "__main__":
    main()
