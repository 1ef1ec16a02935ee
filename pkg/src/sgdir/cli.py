"""Command line: ``sgdir {synth,register,warp,verify,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace
from typing import List, Optional, Sequence

import numpy as np

from . import codec
from .config import RunConfig, from_dict, load
from .errors import (CodecError, ConfigError, NonFiniteLoss, TimeOutOfRange,
                     UnsupportedCheckpoint)
from .grid import DisplacementField, LandmarkSet, warp_image
from .metrics import REPORT_HEADER, evaluate
from .model import deformation_at, init_params
from .synth import make_pair, phantom, random_svf
from .train import checkpoint_load, checkpoint_save, train
from .verify import flow_report

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

PAIR_FILES = {
    "fixed": "fixed.sgv",
    "moving": "moving.sgv",
    "labels_fixed": "labels_fixed.sgv",
    "labels_moving": "labels_moving.sgv",
    "landmarks_fixed": "landmarks_fixed.csv",
    "landmarks_moving": "landmarks_moving.csv",
    "gt_forward": "gt_forward.sgv",
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ pair I/O

def write_landmarks(path, lm: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{a}" for a in range(lm.points.shape[1])])
        for p in lm.points:
            w.writerow([repr(float(x)) for x in p])


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return LandmarkSet(np.array([[float(x) for x in r] for r in rows[1:]]).reshape(len(rows) - 1, -1))


def write_pair(directory: Path, pair, meta: dict) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    codec.write_image(directory / PAIR_FILES["fixed"], pair.fixed)
    codec.write_image(directory / PAIR_FILES["moving"], pair.moving)
    codec.write_labels(directory / PAIR_FILES["labels_fixed"], pair.labels_fixed)
    codec.write_labels(directory / PAIR_FILES["labels_moving"], pair.labels_moving)
    write_landmarks(directory / PAIR_FILES["landmarks_fixed"], pair.landmarks_fixed)
    write_landmarks(directory / PAIR_FILES["landmarks_moving"], pair.landmarks_moving)
    codec.write_field(directory / PAIR_FILES["gt_forward"], pair.gt_forward)
    entry = dict(meta, files=dict(PAIR_FILES))
    (directory / "pair.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
    return entry


def read_pair(directory) -> SimpleNamespace:
    """Load a pair directory.  Only the two images are mandatory; missing
    labels, landmarks or ground truth come back as ``None``."""
    directory = Path(directory)
    files = dict(PAIR_FILES)
    manifest = directory / "pair.json"
    if manifest.exists():
        files.update(json.loads(manifest.read_text()).get("files", {}))
    out = {}
    readers = {"fixed": codec.read_image, "moving": codec.read_image,
               "labels_fixed": codec.read_labels, "labels_moving": codec.read_labels,
               "landmarks_fixed": read_landmarks, "landmarks_moving": read_landmarks,
               "gt_forward": codec.read_field}
    for role, reader in readers.items():
        path = directory / files[role] if files.get(role) else None
        if path is not None and path.exists():
            out[role] = reader(path)
        elif role in ("fixed", "moving"):
            raise FileNotFoundError(f"{directory}: missing {role} image")
        else:
            out[role] = None
    return SimpleNamespace(**out)


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig, out: Path) -> None:
    s = cfg.synth
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(s.n_pairs):
        phantom_seed, velocity_seed = s.seed + i, s.seed + 1000 + i
        base = phantom(s.phantom_kind, s.dims, phantom_seed)
        v = random_svf(s.dims, s.smooth_sigma, s.amplitude, velocity_seed)
        name = f"pair_{i:03d}"
        meta = {"name": name, "phantom_seed": phantom_seed, "velocity_seed": velocity_seed,
                "gt": PAIR_FILES["gt_forward"]}
        entries.append(write_pair(out / name, make_pair(base, v), meta))
    manifest = {"config": cfg.to_dict(), "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _report_rows(pair, u: DisplacementField):
    zero = DisplacementField.zeros(u.geom)
    rows = []
    for stage, field in (("pre", zero), ("post", u)):
        if pair.labels_fixed is None or pair.labels_moving is None:
            rows.append([stage] + [""] * len(REPORT_HEADER))
            continue
        rep = evaluate(field, pair.labels_fixed, pair.labels_moving,
                       pair.landmarks_fixed, pair.landmarks_moving, pair.gt_forward)
        rows.append([stage] + rep.row())
    return rows


def run_register(pair, cfg: RunConfig, out: Path):
    """Train on ``pair`` and write every artifact of a registration run."""
    out.mkdir(parents=True, exist_ok=True)
    model = init_params(cfg.model, cfg.embed, cfg.train.seed)
    model, log = train(pair, model, cfg.train, cfg.loss)
    state = log.state
    checkpoint_save(model, state.adam, out / "checkpoint.sgck", state.rng_state,
                    extra={"config": cfg.to_dict()})
    u_fwd = deformation_at(model, pair.fixed, pair.moving, 1.0)
    u_bwd = deformation_at(model, pair.fixed, pair.moving, -1.0)
    codec.write_field(out / "u_t+1.sgv", u_fwd)
    codec.write_field(out / "u_t-1.sgv", u_bwd)
    codec.write_image(out / "warped_moving_t+1.sgv", warp_image(pair.moving, u_fwd))
    codec.write_image(out / "warped_fixed_t-1.sgv", warp_image(pair.fixed, u_bwd))
    log.write_csv(out / "train_log.csv", timing=False)
    rows = _report_rows(pair, u_fwd)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage",) + REPORT_HEADER)
        w.writerows(rows)
    return model, log, rows


def cmd_warp(checkpoint: Path, pair_dir: Path, t: float, out: Path) -> None:
    if not -1.0 <= t <= 1.0:
        raise CliError(EXIT_CONFIG, f"--t {t} outside [-1, 1]")
    model = checkpoint_load(checkpoint).model
    pair = read_pair(pair_dir)
    u = deformation_at(model, pair.fixed, pair.moving, t)
    # negative times carry the fixed image towards the moving one
    source = pair.moving if t >= 0 else pair.fixed
    codec.write_image(out, warp_image(source, u))


def cmd_verify(checkpoint: Path, pair_dir: Path, out: Path) -> None:
    model = checkpoint_load(checkpoint).model
    pair = read_pair(pair_dir)
    flow_report(model, pair).write_csv(out)


def _time_mode(value: str):
    return "continuous" if value in ("continuous", "inf") else int(value)


SWEEP_HEADER = ("axis", "value", "n_ok", "n_failed", "dice_mean", "dice_std",
                "pct_neg_jac_mean", "pct_neg_jac_std", "status")


def cmd_sweep(axis: str, values: Sequence[str], seeds: int, cfg: RunConfig, pair, out: Path) -> List[list]:
    if len(values) < 2:
        raise CliError(EXIT_CONFIG, "a sweep needs at least two values")
    try:
        arms = [float(v) for v in values] if axis == "lambda" else [_time_mode(v) for v in values]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad sweep value: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, arm in zip(values, arms):
        dices, jacs, failed = [], [], 0
        for k in range(seeds):
            tcfg = replace(cfg.train, seed=cfg.train.seed + k)
            if axis == "lambda":
                run = replace(cfg, train=replace(tcfg, lam=None), loss=replace(cfg.loss, lam=arm))
            else:
                run = replace(cfg, train=replace(tcfg, time_mode=arm))
            try:
                _, _, report = run_register(pair, run, out / f"{axis}_{label}_seed{k}")
            except (NonFiniteLoss, FloatingPointError) as exc:
                print(f"warning: arm {axis}={label} seed {k} failed: {exc}", file=sys.stderr)
                failed += 1
                continue
            post = report[1]
            if post[1] != "":
                dices.append(float(post[1]))
                jacs.append(float(post[3]))

        def stat(xs, f):
            return repr(float(f(xs))) if xs else ""
        status = "ok" if failed == 0 else ("failed" if failed == seeds else "partial")
        rows.append([axis, label, seeds - failed, failed, stat(dices, np.mean), stat(dices, np.std),
                     stat(jacs, np.mean), stat(jacs, np.std), status])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    return rows


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdir", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic pairs")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("register", help="train on one pair and write the run artifacts")
    r.add_argument("--pair", type=Path, required=True)
    r.add_argument("--config", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)

    w = sub.add_parser("warp", help="warp an image of the pair at time t")
    w.add_argument("--checkpoint", type=Path, required=True)
    w.add_argument("--pair", type=Path, required=True)
    w.add_argument("--t", type=float, required=True)
    w.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("verify", help="flow-map residual report")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--pair", type=Path, required=True)
    v.add_argument("--out", type=Path, required=True)

    sw = sub.add_parser("sweep", help="lambda or time-step ablation")
    sw.add_argument("--axis", choices=("lambda", "timesteps"), required=True)
    sw.add_argument("--values", nargs="+", required=True)
    sw.add_argument("--seeds", type=int, default=5)
    sw.add_argument("--config", type=Path)
    sw.add_argument("--pair", type=Path, help="pair directory; defaults to the first synth pair of the config")
    sw.add_argument("--out", type=Path, required=True)
    return p


def _dispatch(args) -> None:
    if args.command == "synth":
        cmd_synth(load(args.config), args.out)
    elif args.command == "register":
        cfg = load(args.config)
        run_register(read_pair(args.pair), cfg, args.out)
    elif args.command == "warp":
        cmd_warp(args.checkpoint, args.pair, args.t, args.out)
    elif args.command == "verify":
        cmd_verify(args.checkpoint, args.pair, args.out)
    elif args.command == "sweep":
        cfg = load(args.config) if args.config else from_dict({})
        if args.seeds < 1:
            raise CliError(EXIT_CONFIG, "--seeds must be >= 1")
        if args.pair is not None:
            pair = read_pair(args.pair)
        else:
            s = cfg.synth
            pair = make_pair(phantom(s.phantom_kind, s.dims, s.seed),
                             random_svf(s.dims, s.smooth_sigma, s.amplitude, s.seed + 1000))
        cmd_sweep(args.axis, args.values, args.seeds, cfg, pair, args.out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TimeOutOfRange as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CodecError, UnsupportedCheckpoint) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
