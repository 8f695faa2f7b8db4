"""driftsyn command-line entry point.

Exit codes: 0 success, 1 user/config/input error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import (
    PairedSample,
    Volume,
    VolumeFormatError,
    generate_phantom_pair,
    preprocess_pair,
    read_volume,
    slices_from_pairs,
    write_pgm,
    write_volume,
)
from .drift import drift_field_batch, reference_drift_field
from .generator import CheckpointError, Generator, GeneratorError
from .metrics import MetricError, MetricsReport, pixel_std, time_inference
from .trainer import ConfigError, NonFiniteLossError, train
from .trainer import _git_describe

log = logging.getLogger("driftsyn")

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "driftsyn-manifest"


class UserError(Exception):
    pass


class InvariantError(Exception):
    pass


# ---------------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, subjects: list, kind: str, extra=None) -> Path:
    man = {"format": MANIFEST_FORMAT, "version": 1, "kind": kind, "subjects": subjects}
    if extra:
        man.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _read_manifest(d: Path) -> dict:
    path = d / MANIFEST
    if not path.exists():
        raise UserError(f"{d}: no {MANIFEST} found")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: malformed manifest ({exc})") from None
    if man.get("format") != MANIFEST_FORMAT:
        raise UserError(f"{path}: not a {MANIFEST_FORMAT} file")
    return man


def _volume_entry(out: Path, stem: str) -> dict:
    return {"file": stem, "sha256": _sha256(out / f"{stem}.vraw")}


def _load(d: Path, stem: str, subject: str, role: str) -> Volume:
    hdr = d / f"{stem}.vhdr"
    if not hdr.exists() or not (d / f"{stem}.vraw").exists():
        raise UserError(f"subject {subject}: missing {role} volume {stem}")
    try:
        return read_volume(hdr)
    except (VolumeFormatError, ValueError) as exc:
        raise UserError(f"{hdr}: {exc}") from None


def load_pairs(d: Path) -> list:
    man = _read_manifest(d)
    pairs = []
    for s in man["subjects"]:
        sid = s["id"]
        if "condition" not in s or "target" not in s:
            raise UserError(f"subject {sid}: manifest entry lacks a condition/target pair")
        m = _load(d, s["condition"]["file"], sid, "condition")
        c = _load(d, s["target"]["file"], sid, "target")
        pairs.append(PairedSample(m, c, sid))
    return pairs


def _run_meta(out: Path, cfg: RunConfig | None, command: str, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        cfg.dump(out / "config.resolved.yaml")
    meta = {"command": command, "version": _git_describe(), "argv": sys.argv[1:], **extra}
    (out / "run.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def _load_generator(path) -> Generator:
    try:
        return Generator.load(path)
    except FileNotFoundError:
        raise UserError(f"checkpoint {path} not found") from None


def _conditions(d: Path):
    """Yield (subject, condition Volume) from a data dir manifest."""
    man = _read_manifest(d)
    for s in man["subjects"]:
        if "condition" not in s:
            raise UserError(f"subject {s['id']}: no condition volume listed")
        yield s["id"], _load(d, s["condition"]["file"], s["id"], "condition")


def _slice_seed(seed: int, subject_index: int, z: int) -> int:
    return int(np.random.SeedSequence([seed, subject_index, z]).generate_state(1)[0])


# ---------------------------------------------------------------------- commands


def cmd_phantom(args) -> int:
    cfg = RunConfig.load(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.count < 0:
        raise UserError("--count must be >= 0")
    subjects = []
    for i in range(args.count):
        sid = f"subj{i:03d}"
        pair = generate_phantom_pair(replace(cfg.phantom, seed=cfg.phantom.seed + i), subject=sid)
        write_volume(out / f"{sid}_cond", pair.m)
        write_volume(out / f"{sid}_target", pair.c)
        subjects.append(
            {"id": sid, "condition": _volume_entry(out, f"{sid}_cond"), "target": _volume_entry(out, f"{sid}_target")}
        )
    man = _write_manifest(out, subjects, "phantom", {"seed": cfg.phantom.seed})
    _run_meta(out, cfg, "phantom", count=args.count)
    print(f"wrote {args.count} phantom pairs to {out} (manifest sha256 {_sha256(man)[:16]})")
    return 0


def cmd_prep(args) -> int:
    cfg = RunConfig.load(args.config)
    src, out = Path(args.inp), Path(args.out)
    pairs = load_pairs(src)
    out.mkdir(parents=True, exist_ok=True)
    subjects, shapes = [], set()
    for pair in pairs:
        try:
            pp = preprocess_pair(pair, cfg.prep)
        except ValueError as exc:
            raise UserError(str(exc)) from None
        shapes.add(pp.m.shape[1:])
        write_volume(out / f"{pair.subject}_cond", pp.m)
        write_volume(out / f"{pair.subject}_target", pp.c)
        subjects.append(
            {
                "id": pair.subject,
                "condition": _volume_entry(out, f"{pair.subject}_cond"),
                "target": _volume_entry(out, f"{pair.subject}_target"),
                "normalization": {"condition": asdict(pp.m.norm), "target": asdict(pp.c.norm)},
            }
        )
    if len(shapes) > 1:
        raise InvariantError(f"preprocessed in-plane shapes differ: {sorted(shapes)}")
    _write_manifest(out, subjects, "prep")
    _run_meta(out, cfg, "prep", source=str(src))
    print(f"preprocessed {len(pairs)} subjects into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, max_epochs=args.epochs)
    data = slices_from_pairs(load_pairs(Path(args.data)))
    if len(data) == 0:
        raise UserError(f"{args.data}: no usable slices")
    out = Path(args.out)
    _run_meta(out, cfg, "train", data=str(args.data))

    def progress(epoch, rep, val):
        print(f"epoch {epoch:4d}  drift {rep.drift_loss:.5f}  l1 {rep.l1_loss:.5f}  total {rep.total:.5f}  val_l1 {val:.5f}", flush=True)

    try:
        res = train(data, cfg.train, cfg.generator, out_dir=out / "train", progress=None if args.quiet else progress)
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc}; last good checkpoint kept in {out / 'train'}", file=sys.stderr)
        return 2
    print(f"trained {res.epochs_run} epochs; checkpoints in {out / 'train'}")
    return 0


def cmd_infer(args) -> int:
    gen = _load_generator(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for idx, (sid, vol) in enumerate(_conditions(Path(args.inp))):
        preds = []
        for z in range(vol.shape[0]):
            m = vol.values[z].astype(np.float64)
            eps = gen.noise(m.shape, n=1, seed=_slice_seed(args.seed, idx, z))
            if args.no_noise:
                eps = np.zeros_like(eps)
            try:
                preds.append(gen.generate(m, eps))
            except GeneratorError as exc:
                raise UserError(f"subject {sid}: {exc}") from None
        pred = np.clip(np.stack(preds), 0.0, 1.0)
        write_volume(out / f"{sid}_pred", Volume(pred, vol.spacing, modality="target", domain="normalized"))
        for z in range(pred.shape[0]):
            write_pgm(out / f"{sid}_pred_z{z:03d}.pgm", pred[z])
        subjects.append({"id": sid, "prediction": _volume_entry(out, f"{sid}_pred")})
    _write_manifest(out, subjects, "prediction")
    _run_meta(out, None, "infer", checkpoint=str(args.ckpt), seed=args.seed, no_noise=args.no_noise, noise_sampling="per-slice")
    print(f"wrote predictions for {len(subjects)} subjects to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    preds = {s["id"]: s for s in _read_manifest(pred_dir)["subjects"]}
    rep = MetricsReport()
    for s in _read_manifest(ref_dir)["subjects"]:
        sid = s["id"]
        if sid not in preds:
            raise UserError(f"subject {sid}: no prediction in {pred_dir}")
        entry = preds[sid].get("prediction") or preds[sid].get("target")
        p = _load(pred_dir, entry["file"], sid, "prediction").values.astype(np.float64)
        r = _load(ref_dir, s["target"]["file"], sid, "target").values.astype(np.float64)
        if p.shape != r.shape:
            raise UserError(f"subject {sid}: prediction shape {p.shape} vs reference {r.shape}")
        for z in range(r.shape[0]):
            try:
                rep.add((sid, z), p[z], r[z], cfg.metrics)
            except MetricError as exc:
                raise UserError(f"subject {sid} slice {z}: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["# metrics per slice; summary = mean ± std over slices"])
        w.writerow(["subject", "slice", "ssim", "psnr", "rmse"])
        for (sid, z), s_, p_, r_ in zip(rep.keys, rep.ssim, rep.psnr, rep.rmse):
            w.writerow([sid, z, f"{s_:.6f}", f"{p_:.4f}", f"{r_:.6f}"])
        summ = rep.summary()
        w.writerow(["mean±std", "all"] + [f"{summ[k][0]:.6f} ± {summ[k][1]:.6f}" for k in ("ssim", "psnr", "rmse")])
    summ = rep.summary()
    print(
        f"{len(rep.ssim)} slices: SSIM {summ['ssim'][0]:.4f} ± {summ['ssim'][1]:.4f}  "
        f"PSNR {summ['psnr'][0]:.2f} ± {summ['psnr'][1]:.2f}  RMSE {summ['rmse'][0]:.4f} ± {summ['rmse'][1]:.4f}"
    )
    return 0


def cmd_uncertainty(args) -> int:
    if args.K < 1:
        raise UserError("--K must be >= 1")
    gen = _load_generator(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for idx, (sid, vol) in enumerate(_conditions(Path(args.inp))):
        maps = []
        for z in range(vol.shape[0]):
            m = vol.values[z].astype(np.float64)
            outs = []
            for k in range(args.K):
                eps = gen.noise(m.shape, n=1, seed=_slice_seed(args.seed + k, idx, z))
                if args.no_noise:
                    eps = np.zeros_like(eps)
                outs.append(gen.generate(m, eps))
            std = pixel_std(outs).std
            if np.any(std < 0):
                raise InvariantError("negative standard deviation")
            maps.append(std)
        std_vol = np.stack(maps)
        write_volume(out / f"{sid}_std", Volume(std_vol, vol.spacing, modality="target", domain="normalized"))
        peak = float(std_vol.max()) or 1.0
        for z in range(std_vol.shape[0]):
            write_pgm(out / f"{sid}_std_z{z:03d}.pgm", std_vol[z], 0.0, peak)
        subjects.append({"id": sid, "std": _volume_entry(out, f"{sid}_std"), "max_std": float(std_vol.max())})
    _write_manifest(out, subjects, "uncertainty", {"K": args.K})
    _run_meta(out, None, "uncertainty", checkpoint=str(args.ckpt), K=args.K, seed=args.seed, no_noise=args.no_noise)
    print(f"wrote K={args.K} uncertainty maps for {len(subjects)} subjects to {out}")
    return 0


DEFAULT_DRIFTCHECK_SIZES = [(8, 8, 16), (32, 32, 64), (16, 32, 1024), (32, 32, 4096)]


def driftcheck(sizes=None, instances: int = 100, seed: int = 0, tol: float = 1e-12) -> dict:
    """Compare the vectorized drift field against the pairwise-loop reference on random
    instances. Relative error per instance is ||dV||_inf / ||V_ref||_inf."""
    sizes = sizes or DEFAULT_DRIFTCHECK_SIZES
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(instances):
        nq, ns, d = sizes[i % len(sizes)]
        nq = int(rng.integers(1, nq + 1))
        npos, nneg = (int(v) for v in rng.integers(1, ns + 1, size=2))
        q = rng.normal(size=(nq, d))
        pos = rng.normal(0.5, 1.0, size=(npos, d))
        neg = rng.normal(-0.5, 1.5, size=(nneg, d))
        tau = float(rng.uniform(0.3, 1.5)) * np.sqrt(d)
        fast = drift_field_batch(q, pos, neg, tau)
        for j in range(nq):
            ref = reference_drift_field(q[j], pos, neg, tau)
            err = np.max(np.abs(fast.V[j] - ref.V)) / np.max(np.abs(ref.V))
            worst = max(worst, float(err))
    return {"instances": instances, "max_rel_error": worst, "seconds": time.perf_counter() - t0, "ok": worst <= tol}


def cmd_driftcheck(args) -> int:
    sizes = None
    if args.sizes:
        if len(args.sizes) % 3:
            raise UserError("--sizes takes triples: queries set_size dim ...")
        sizes = [tuple(args.sizes[i : i + 3]) for i in range(0, len(args.sizes), 3)]
    res = driftcheck(sizes, args.instances, args.seed, args.tol)
    rel = "≤" if res["ok"] else ">"
    print(
        f"driftcheck: {res['instances']} instances, max relative error {res['max_rel_error']:.3e} "
        f"{rel} {args.tol:g} ({res['seconds']:.1f} s)"
    )
    return 0 if res["ok"] else 2


def cmd_bench(args) -> int:
    gen = _load_generator(args.ckpt)
    m = np.random.default_rng(args.seed).random((args.batch, 1, args.size, args.size))
    try:
        rec = time_inference(gen, m, warmup=args.warmup, reps=args.reps, seed=args.seed)
    except GeneratorError as exc:
        raise UserError(str(exc)) from None
    except AssertionError as exc:
        raise InvariantError(str(exc)) from None
    lo, hi = rec.spread
    print(f"median {rec.median * 1e3:.2f} ms over {rec.reps} reps (min {lo * 1e3:.2f}, max {hi * 1e3:.2f}); batch {rec.batch_size}, {args.size}x{args.size}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rep", "seconds", "batch_size", "height", "width", "warmup"])
            for i, s in enumerate(rec.samples):
                w.writerow([i, f"{s:.6f}", rec.batch_size, *rec.image_size, rec.warmup])
    return 0


# ---------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """Usage errors are user errors: exit 1 rather than argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="driftsyn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"driftsyn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate paired phantom volumes")
    s.add_argument("--spec", help="config file (phantom section is used)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("prep", help="resample, crop/pad and normalize pairs")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train", help="train a generator on preprocessed pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, help="override train.max_epochs")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="one-step synthesis for every condition volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-noise", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="SSIM/PSNR/RMSE per slice against references")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("uncertainty", help="pixel-wise std over K repeated samplings")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--K", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-noise", action="store_true")
    s.set_defaults(func=cmd_uncertainty)

    s = sub.add_parser("driftcheck", help="drift field vs brute-force reference")
    s.add_argument("--sizes", type=int, nargs="*", help="triples: max queries, max set size, dim")
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-12)
    s.set_defaults(func=cmd_driftcheck)

    s = sub.add_parser("bench", help="one-step inference latency")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="optional CSV of per-rep timings")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, CheckpointError, GeneratorError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
