"""
Command-line interface: ``chestsep separate | bench | synth | inspect``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

Configuration is JSON; a file given with ``--config`` (or named by the
``CHESTSEP_CONFIG`` environment variable) is read first, command-line flags
override it, and the full effective configuration is written next to every
run's outputs as ``run_config.json``, which ``--config`` accepts as is::

    {
      "method": "nmcf",            # nmcf | supervised | semi_supervised | shah | cq
      "sample_rate": 4000,
      "stft": {"window_length": 2048, "overlap_fraction": 0.75,
               "window_kind": "hann", "fft_length": 2048},
      "nmf": {"beta": 1.0, "sparsity": 0.001, "max_iter": 500, "seed": 0,
              "floor": 1e-12, "tol": 0.0},
      "components": [20, 20, 10],  # omitted or null: (20, 20, 0) for supervised
      "heart_db": null, "lung_db": null
    }
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio_io, baselines, metrics, nmcf, synth
from .errors import DataError, NumericalError
from .nmf_core import NmfConfig
from .spectral import StftConfig, plot_matrix_png, write_matrix_csv

log = logging.getLogger("chestsep")

CONFIG_ENV = "CHESTSEP_CONFIG"
METHODS = ("nmcf", "supervised", "semi_supervised", "shah", "cq")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYNTH_PEAK = 0.99


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    nmf: NmfConfig = field(default_factory=NmfConfig)
    components: tuple | None = None
    method: str = "nmcf"
    sample_rate: float = audio_io.WORKING_RATE
    heart_db: str | None = None
    lung_db: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")

    @property
    def seed(self) -> int:
        return self.nmf.seed

    @property
    def mode(self) -> str:
        return {"nmcf": "cofactorise"}.get(self.method, self.method)

    @property
    def effective_components(self) -> tuple:
        """Explicit block sizes, else the mode's default (no noise block for supervised)."""
        if self.components is not None:
            return tuple(self.components)
        mode = self.mode if self.mode in nmcf.MODES else "cofactorise"
        return nmcf.NmcfConfig.for_mode(mode).components

    def nmcf_config(self) -> nmcf.NmcfConfig:
        return nmcf.NmcfConfig(self.nmf, self.effective_components, self.mode)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sample_rate": self.sample_rate,
            "stft": self.stft.to_dict(),
            "nmf": self.nmf.to_dict(),
            "components": list(self.effective_components),
            "heart_db": self.heart_db,
            "lung_db": self.lung_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"method", "sample_rate", "stft", "nmf", "components", "heart_db", "lung_db"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        try:
            return cls(
                stft=StftConfig(**{**base.stft.to_dict(), **d.get("stft", {})}),
                nmf=NmfConfig(**{**base.nmf.to_dict(), **d.get("nmf", {})}),
                components=tuple(d["components"]) if d.get("components") is not None else None,
                method=d.get("method", base.method),
                sample_rate=d.get("sample_rate", base.sample_rate),
                heart_db=d.get("heart_db"),
                lung_db=d.get("lung_db"),
            )
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from exc


def _load_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc


def resolve_config(args) -> RunConfig:
    """Defaults < config file (``--config`` or $CHESTSEP_CONFIG) < flags."""
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    cfg = RunConfig.from_dict(_load_config_file(path)) if path else RunConfig()
    nmf_over = {k: v for k, v in {
        "seed": args.seed, "max_iter": args.max_iter, "sparsity": args.sparsity,
        "beta": args.beta, "tol": args.tol}.items() if v is not None}
    stft_over = {k: v for k, v in {
        "window_length": args.window_length, "overlap_fraction": args.overlap}.items() if v is not None}
    if stft_over.get("window_length") is not None:
        stft_over["fft_length"] = stft_over["window_length"]
    try:
        cfg = replace(
            cfg,
            nmf=replace(cfg.nmf, **nmf_over),
            stft=StftConfig(**{**cfg.stft.to_dict(), **stft_over}),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.components is not None:
        cfg = replace(cfg, components=tuple(args.components))
    if getattr(args, "method", None) is not None:
        cfg = replace(cfg, method=args.method)
    if args.rate is not None:
        cfg = replace(cfg, sample_rate=args.rate)
    for key in ("heart_db", "lung_db"):
        if getattr(args, key, None) is not None:
            cfg = replace(cfg, **{key: getattr(args, key)})
        if getattr(cfg, key) is not None:
            cfg = replace(cfg, **{key: os.path.abspath(getattr(cfg, key))})
    return cfg


def write_run_config(path, cfg: RunConfig):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dbs(cfg: RunConfig):
    need_heart = cfg.method in ("nmcf", "supervised", "semi_supervised", "cq")
    need_lung = cfg.method in ("nmcf", "supervised")
    dbs = {}
    for key, need in (("heart_db", need_heart), ("lung_db", need_lung)):
        path = getattr(cfg, key)
        if not need:
            dbs[key] = None
            continue
        if path is None:
            raise UsageError(f"method {cfg.method} needs --{key.replace('_', '-')}")
        dbs[key] = nmcf.load_database(path, cfg.stft, cfg.sample_rate)
    return dbs["heart_db"], dbs["lung_db"]


def run_method(mixture: audio_io.AudioBuffer, cfg: RunConfig, heart_db, lung_db) -> nmcf.SeparationResult:
    if cfg.method == "shah":
        res = baselines.shah_separate(mixture, replace(cfg.nmf, sparsity=0.0), cfg.stft)
    elif cfg.method == "cq":
        res = baselines.cq_separate(mixture, heart_db, cfg.nmf, cfg.stft)
    else:
        res = nmcf.separate(mixture, heart_db, lung_db, cfg.nmcf_config(), cfg.stft)
    res.config["run"] = cfg.to_dict()
    return res


def cmd_separate(args) -> int:
    cfg = resolve_config(args)
    heart_db, lung_db = _load_dbs(cfg)
    buf = audio_io.resample(audio_io.read_wav(args.input), cfg.sample_rate)
    if args.segment is not None:
        buf = audio_io.extract_segment(buf, *args.segment)
    res = run_method(buf, cfg, heart_db, lung_db)
    res.config["input"] = os.path.abspath(args.input)
    res.config["segment"] = args.segment
    res.save(args.out, write_masks=args.masks, png=args.png)
    write_run_config(os.path.join(args.out, "run_config.json"), cfg)
    log.info("wrote %s", ", ".join(sorted(res.stems)))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = args.out
    os.makedirs(os.path.join(out, "mixtures"), exist_ok=True)
    entries = []
    for i in range(args.n):
        seed = args.seed + i
        spec = synth.preset_spec(args.preset, seed, args.duration)
        mix = synth.synthesize(spec)
        name = f"mix_{i:03d}"
        d = os.path.join(out, "mixtures", name)
        os.makedirs(d, exist_ok=True)
        # one gain for all files keeps 16-bit output unclipped and the stems summing to the mixture
        bufs = {"mixture": mix.mixture, **mix.truth}
        peak = max(float(np.max(np.abs(b.samples))) for b in bufs.values())
        gain = min(1.0, SYNTH_PEAK / peak) if peak > 0 else 1.0
        for stem, buf in bufs.items():
            audio_io.write_wav(os.path.join(d, f"{stem}.wav"), audio_io.AudioBuffer(buf.samples * gain, buf.sample_rate))
        manifest = {"name": name, "spec": spec.to_dict(), "noise_scale": mix.noise_scale, "gain": gain,
                    "heart_rate": mix.heart_rate, "breathing_rate": mix.breathing_rate,
                    "beat_times": mix.beat_times.tolist(), "breath_peaks": mix.breath_peaks.tolist()}
        with open(os.path.join(d, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        entries.append(name)
    # database seeds are offset far away from the mixture seeds
    db_seed = 100000 + args.seed
    for kind, offset in (("heart", 0), ("lung", 50000)):
        d = os.path.join(out, f"{kind}_db")
        os.makedirs(d, exist_ok=True)
        items = []
        for j, buf in enumerate(synth.exemplar_buffers(kind, args.db_size, db_seed + offset, args.duration)):
            fname = f"{kind}_{j:03d}.wav"
            audio_io.write_wav(os.path.join(d, fname), buf)
            items.append({"path": fname, "label": f"{kind}_{j:03d}", "weight": 1.0})
        nmcf.write_manifest(os.path.join(d, "manifest.json"), items)
    with open(os.path.join(out, "dataset.json"), "w") as fh:
        json.dump({"preset": args.preset, "n": args.n, "seed": args.seed, "duration": args.duration,
                   "db_size": args.db_size, "mixtures": entries}, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def _list_mixtures(data):
    root = os.path.join(data, "mixtures")
    if not os.path.isdir(root):
        raise DataError(f"no mixtures/ directory in {data}")
    names = sorted(n for n in os.listdir(root) if os.path.isfile(os.path.join(root, n, "mixture.wav")))
    if not names:
        raise DataError(f"dataset {data} contains no mixtures")
    return [(n, os.path.join(root, n)) for n in names]


def _truth_rates(d, truth):
    manifest = {}
    path = os.path.join(d, "manifest.json")
    if os.path.isfile(path):
        with open(path) as fh:
            manifest = json.load(fh)
    hr = manifest.get("heart_rate")
    br = manifest.get("breathing_rate")
    if hr is None:
        hr = metrics.heart_rate(truth["heart"]).rate
    if br is None:
        br = metrics.breathing_rate(truth["lung"]).rate
    return hr, br


def _zero_if_missing(stems, name, n, rate):
    buf = stems.get(name)
    return buf if buf is not None else audio_io.AudioBuffer(np.zeros(n), rate)


def benchmark_records(mixtures, methods, cfg: RunConfig, heart_db, lung_db):
    """Evaluate every method on every ``(name, directory)`` mixture."""
    records = []
    for name, d in mixtures:
        mix = audio_io.resample(audio_io.read_wav(os.path.join(d, "mixture.wav")), cfg.sample_rate)
        truth = {k: audio_io.resample(audio_io.read_wav(os.path.join(d, f"{k}.wav")), cfg.sample_rate)
                 for k in ("heart", "lung")}
        hr_true, br_true = _truth_rates(d, truth)
        runs = {"mixture": None}
        for method in methods:
            log.info("%s: %s", name, method)
            runs[method] = run_method(mix, replace(cfg, method=method), heart_db, lung_db)
        n = None
        for res in runs.values():
            if res is not None:
                n = len(next(iter(res.stems.values())))
        n = n or len(mix)
        h_ref = truth["heart"].samples[:n]
        l_ref = truth["lung"].samples[:n]
        mix_n = audio_io.AudioBuffer(mix.samples[:n], mix.sample_rate)
        h_mix, l_mix = metrics.sdr(mix_n, h_ref), metrics.sdr(mix_n, l_ref)
        for method, res in runs.items():
            if res is None:
                heart, lung = mix_n, mix_n
            else:
                heart = _zero_if_missing(res.stems, "heart", n, mix.sample_rate)
                lung = _zero_if_missing(res.stems, "lung", n, mix.sample_rate)
            records.append({
                "method": method, "mixture": name,
                "hr": metrics.heart_rate(heart).rate, "hr_true": hr_true,
                "br": metrics.breathing_rate(lung).rate, "br_true": br_true,
                "heart_sdr": metrics.sdr(heart, h_ref), "lung_sdr": metrics.sdr(lung, l_ref),
                "heart_sdr_mix": h_mix, "lung_sdr_mix": l_mix,
            })
    return records


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    mixtures = _list_mixtures(args.data)
    heart_db = lung_db = None
    if any(m != "shah" for m in methods):
        hpath = cfg.heart_db or os.path.join(args.data, "heart_db")
        heart_db = nmcf.load_database(hpath, cfg.stft, cfg.sample_rate)
        if any(m in ("nmcf", "supervised") for m in methods):
            lpath = cfg.lung_db or os.path.join(args.data, "lung_db")
            lung_db = nmcf.load_database(lpath, cfg.stft, cfg.sample_rate)
    records = benchmark_records(mixtures, methods, cfg, heart_db, lung_db)
    report = metrics.benchmark_report(records, reference=methods[0])
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "report.csv"))
    report.pvalues_to_csv(os.path.join(args.out, "pvalues.csv"))
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    keys = list(records[0])
    with open(os.path.join(args.out, "records.csv"), "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in records:
            fh.write(",".join(str(r[k]) if isinstance(r[k], str) else repr(float(r[k])) for k in keys) + "\n")
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump({"run": cfg.to_dict(), "methods": methods, "data": os.path.abspath(args.data)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_config(os.path.join(args.out, "run_config.json"), cfg)
    sys.stdout.write(report.to_text())
    return EXIT_OK


INSPECT_WHAT = ("masks", "dictionary", "activations")


def cmd_inspect(args) -> int:
    path = os.path.join(args.run, "factors.npz")
    if not os.path.isfile(path):
        raise DataError(f"no factors.npz in run directory {args.run}")
    out = args.out or os.path.join(args.run, "inspect")
    os.makedirs(out, exist_ok=True)
    with np.load(path) as z:
        freqs = z["freqs"]
        rate, hop = float(z["sample_rate"]), int(z["hop"])
        blocks = json.loads(str(z["blocks"]))
        if args.what == "masks":
            for key in sorted(k for k in z.files if k.startswith("mask_")):
                write_matrix_csv(os.path.join(out, f"{key}.csv"), z[key], freqs)
                if args.png:
                    plot_matrix_png(os.path.join(out, f"{key}.png"), z[key], rate, hop, key, db=False)
        elif args.what == "dictionary":
            write_matrix_csv(os.path.join(out, "dictionary.csv"), z["W"], freqs)
            if args.png:
                plot_matrix_png(os.path.join(out, "dictionary.png"), z["W"], title="dictionary")
        else:
            write_matrix_csv(os.path.join(out, "activations.csv"), z["H"])
            if args.png:
                plot_matrix_png(os.path.join(out, "activations.png"), z["H"], title="activations")
    with open(os.path.join(out, "blocks.json"), "w") as fh:
        json.dump(blocks, fh)
        fh.write("\n")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tol", type=float, help="relative cost-decrease stopping threshold")
    p.add_argument("--components", type=int, nargs=3, metavar=("HEART", "LUNG", "NOISE"))
    p.add_argument("--window-length", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--rate", type=float, help="working sample rate in Hz")
    p.add_argument("--heart-db", help="heart database directory or manifest")
    p.add_argument("--lung-db", help="lung database directory or manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chestsep", description="Heart/lung/noise separation of chest sounds.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("separate", help="separate one recording")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--segment", type=float, nargs=2, metavar=("START", "DURATION"))
    p.add_argument("--masks", action="store_true", help="also write mask CSVs")
    p.add_argument("--png", action="store_true", help="with --masks, also write PNG heat maps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("bench", help="benchmark methods on a synthetic dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="nmcf,shah,cq")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic mixtures and exemplar databases")
    p.add_argument("--preset", default="default", choices=synth.PRESETS)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--db-size", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="dump factors and masks of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--what", choices=INSPECT_WHAT, default="masks")
    p.add_argument("--out")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"chestsep: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"chestsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"chestsep: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
