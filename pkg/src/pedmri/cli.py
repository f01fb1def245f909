"""Command-line interface.

Exit status: 0 on success, 1 on usage errors, 2 on data errors (bad files,
invalid configs, failed checks).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff.checkpoint import atomic_write
from .geometry import build_scheme
from .io import (ensure_parent, read_dvol, read_gradient_table, read_json, read_phantom, thread_cap,
                 write_dvol, write_json, write_phantom)
from .models import ModelConfig, parameter_count
from .phantom import PhantomSpec, adc_transform, synthesize_phantom
from .pipeline import (EvalReport, TrainConfig, build_dataset, evaluate, load_checkpoint, model_report,
                       timestamp, train)
from .resample import build_weights, resample_volume, symmetrize
from .volume import DataError, Volume4D

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SCHEMES = ("icosa6", "icosa21", "icosa46")

log = logging.getLogger("pedmri")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> Parser:
    p = Parser(prog="pedmri", description="Icosahedral q-space resampling and dMRI estimators.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    mesh = sub.add_parser("mesh", help="icosahedral meshes")
    msub = mesh.add_subparsers(dest="action", metavar="ACTION")
    msub.required = True
    exp = msub.add_parser("export", help="write a scheme as JSON")
    exp.add_argument("--scheme", required=True, choices=SCHEMES, help="icosahedral level")
    exp.add_argument("--out", required=True, help="output JSON path")

    ph = sub.add_parser("phantom", help="synthetic phantoms")
    psub = ph.add_subparsers(dest="action", metavar="ACTION")
    psub.required = True
    gen = psub.add_parser("generate", help="synthesize a phantom directory")
    gen.add_argument("--config", required=True, help="phantom spec JSON")
    gen.add_argument("--out", required=True, help="output directory")

    rs = sub.add_parser("resample", help="resample a DWI volume onto icosahedral face centroids")
    rs.add_argument("--dwi", required=True, help="input DVOL")
    rs.add_argument("--bval", required=True, help="b-values file")
    rs.add_argument("--bvec", required=True, help="b-vectors file (three lines)")
    rs.add_argument("--scheme", required=True, choices=SCHEMES, help="target centroid set")
    rs.add_argument("--space", default="adc", choices=("adc", "signal"),
                    help="resample ADC (default) or raw diffusion-weighted signal")
    rs.add_argument("--k", type=int, default=None, help="k-nearest truncation (default: all)")
    rs.add_argument("--out", required=True, help="output DVOL")

    tr = sub.add_parser("train", help="train one estimator on a phantom directory")
    tr.add_argument("--model", required=True, choices=("pe", "vanilla", "shcnn"), help="estimator")
    tr.add_argument("--scheme", default="icosa21", choices=SCHEMES,
                    help="resampling level for the pe model (default: icosa21)")
    tr.add_argument("--data", required=True, help="phantom directory")
    tr.add_argument("--config", help="JSON with optional 'train' and 'model' sections")
    tr.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True, help="PECK1 checkpoint")
    ev.add_argument("--data", required=True, help="phantom directory")
    ev.add_argument("--split", default="test", choices=("val", "test"), help="held-out split")
    ev.add_argument("--report", required=True, help="output report JSON")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--ops-only", action="store_true", help="skip the toy model checks")
    gc.add_argument("--seed", type=int, default=0, help="seed for the random test tensors")

    md = sub.add_parser("model", help="model utilities")
    mdsub = md.add_subparsers(dest="action", metavar="ACTION")
    mdsub.required = True
    desc = mdsub.add_parser("describe", help="print checkpoint config and parameter counts")
    desc.add_argument("--ckpt", required=True, help="PECK1 checkpoint")

    run = sub.add_parser("run", help="end-to-end pipeline from a JSON config")
    run.add_argument("--config", required=True, help="pipeline config JSON")
    run.add_argument("--out", required=True, help="output directory")
    return p


def _out_dir(path) -> Path:
    out = ensure_parent(Path(path))
    out.mkdir(exist_ok=True)
    return out


def cmd_mesh(args) -> int:
    scheme = build_scheme(args.scheme)
    atomic_write(ensure_parent(args.out), scheme.to_json().encode("utf-8"))
    print(f"{scheme.level.name}: {len(scheme.vertices)} vertices, {scheme.token_count} faces -> {args.out}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_dict(read_json(args.config))
    out = _out_dir(args.out)
    write_phantom(synthesize_phantom(spec), out)
    print(f"phantom {spec.dims} -> {out}")
    return EXIT_OK


def cmd_resample(args) -> int:
    dwi = read_dvol(args.dwi)
    table = read_gradient_table(args.bval, args.bvec)
    table.check_single_shell()
    dw = table.dwi_subset()
    if args.space == "adc":
        src = adc_transform(dwi, table)
    else:
        src = Volume4D(np.asarray(dwi.data)[..., table.dwi_indices], dict(dwi.meta, quantity="signal"))
    sym_table, sym = symmetrize(dw, src)
    w = build_weights(sym_table.bvecs, build_scheme(args.scheme), k=args.k)
    out = resample_volume(sym, w)
    out.meta["space"] = args.space
    write_dvol(out, ensure_parent(args.out))
    print(f"resampled {dw.bvals.size} directions -> {out.channels} centroids ({args.out})")
    return EXIT_OK


def cmd_train(args) -> int:
    conf = read_json(args.config) if args.config else {}
    model_over = dict(conf.get("model", {}))
    model_over.update(model_type=args.model, scheme_level=args.scheme)
    cfg = ModelConfig.from_dict(model_over)
    tcfg = TrainConfig.from_dict(conf.get("train", {}))
    out = _out_dir(args.out)
    ph = read_phantom(args.data)
    ds = build_dataset(ph, cfg, tcfg)

    def progress(step, tl, vl):
        log.info("step %d train %.5f val %.5f", step, tl, vl)

    res = train(cfg, tcfg, ds, progress)
    atomic_write(out / "checkpoint.peck", res.checkpoint_bytes())
    write_json({"loss": res.loss_curve, "val": res.val_curve, "best_step": res.best_step},
               out / "loss_curve.json")
    print(f"trained {cfg.model_type} for {tcfg.steps} steps (best step {res.best_step}) -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import sha256_file

    cfg, tcfg, params, header = load_checkpoint(args.ckpt)
    ph = read_phantom(args.data)
    ds = build_dataset(ph, cfg, tcfg, header["config"].get("input_norm"))
    ev = evaluate(params, cfg, ds, args.split, tcfg.eval_batch_size)
    name = cfg.model_type + (f"-{cfg.scheme_level.lower()}" if cfg.model_type == "pe" else "")
    ckpt_hash = sha256_file(args.ckpt)
    rep = EvalReport(timestamp(), args.split, None, {name: model_report(cfg, ev, ckpt_hash)},
                     {"dataset_hash": ds.digest, "checkpoint_hashes": {name: ckpt_hash},
                      "config": {"model": cfg.to_dict(), "train": tcfg.to_dict()}})
    atomic_write(ensure_parent(args.report), rep.to_json().encode("utf-8"))
    acc = "n/a" if ev.mean_acc is None else f"{ev.mean_acc:.4f}"
    print(f"{name}: fwf_rmse={ev.fwf_rmse:.5f} mean_acc={acc} n={ev.n_voxels}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_suite

    ok = True
    for name, err in run_suite(include_models=not args.ops_only, seed=args.seed):
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:24s} rel_err={err:.3e}")
    return EXIT_OK if ok else EXIT_DATA


def cmd_model(args) -> int:
    cfg, tcfg, params, header = load_checkpoint(args.ckpt)
    print(f"model_type: {header['model_type']}")
    for k, v in cfg.to_dict().items():
        print(f"  {k}: {v}")
    groups: dict = {}
    for name, arr in params.items():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + arr.size
    for g, n in groups.items():
        print(f"  params[{g}]: {n}")
    total = sum(a.size for a in params.values())
    print(f"total parameters: {total} (formula: {parameter_count(cfg)})")
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run_pipeline

    return run_pipeline(read_json(args.config), args.out)


COMMANDS = {"mesh": cmd_mesh, "phantom": cmd_phantom, "resample": cmd_resample, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "model": cmd_model, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = thread_cap()
        if cap:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=cap):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"pedmri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
