"""End-to-end pipeline: phantom -> ADC -> model inputs -> train -> evaluate -> report."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from pathlib import Path

from .autodiff.checkpoint import atomic_write
from .io import (ensure_parent, read_phantom, sha256_file, write_dvol, write_json, write_phantom)
from .models import ModelConfig
from .phantom import PhantomSpec, adc_transform, synthesize_phantom
from .pipeline import (EvalReport, TrainConfig, build_dataset, evaluate, model_report, timestamp,
                       train)
from .volume import DataError, Volume4D

log = logging.getLogger(__name__)


class StageError(DataError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except (DataError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def model_entries(config: dict) -> list[tuple[str, ModelConfig]]:
    raw = config.get("models")
    if raw is None:
        raw = [config.get("model", {})]
    if not isinstance(raw, list) or not raw:
        raise ValueError("config 'models' must be a non-empty list")
    out, seen = [], set()
    for entry in raw:
        entry = dict(entry)
        name = entry.pop("name", None)
        cfg = ModelConfig.from_dict(entry)
        if name is None:
            name = cfg.model_type + (f"-{cfg.scheme_level.lower()}" if cfg.model_type == "pe" else "")
        if name in seen:
            raise ValueError(f"duplicate model name {name!r}")
        seen.add(name)
        out.append((name, cfg))
    return out


KNOWN_KEYS = {"phantom", "train", "model", "models", "reference_model", "eval_split"}


def run_pipeline(config: dict, out_dir) -> int:
    """Run every stage and write all artifacts plus a hashed manifest under ``out_dir``."""
    unknown = set(config) - KNOWN_KEYS
    if unknown:
        raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
    out = ensure_parent(Path(out_dir))
    out.mkdir(exist_ok=True)
    with _stage("config"):
        spec = PhantomSpec.from_dict(config.get("phantom", {}))
        tcfg = TrainConfig.from_dict(config.get("train", {}))
        entries = model_entries(config)
        split = config.get("eval_split", "test")
        if split not in ("val", "test"):
            raise ValueError("eval_split must be 'val' or 'test'")
        names = [n for n, _ in entries]
        ref_name = config.get("reference_model", names[0] if len(names) > 1 else None)
        if ref_name is not None and ref_name not in names:
            raise ValueError(f"reference_model {ref_name!r} is not among {names}")

    with _stage("phantom"):
        ph = synthesize_phantom(spec)
        write_phantom(ph, out / "phantom")
        ph = read_phantom(out / "phantom")  # everything downstream sees the on-disk float32 data

    with _stage("adc"):
        (out / "prepared").mkdir(exist_ok=True)
        write_dvol(adc_transform(ph.dwi, ph.table), out / "prepared" / "adc.dvol")

    evals, results, hashes = {}, {}, {}
    for name, cfg in entries:
        with _stage(f"prepare:{name}"):
            ds = build_dataset(ph, cfg, tcfg)
            write_dvol(Volume4D(ds.inputs, {"model": name, "model_type": cfg.model_type}),
                       out / "prepared" / f"{name}_input.dvol")
        with _stage(f"train:{name}"):
            res = train(cfg, tcfg, ds)
            mdir = out / "models" / name
            mdir.mkdir(parents=True, exist_ok=True)
            atomic_write(mdir / "checkpoint.peck", res.checkpoint_bytes())
            write_json({"loss": res.loss_curve, "val": res.val_curve, "best_step": res.best_step},
                       mdir / "loss_curve.json")
            hashes[name] = sha256_file(mdir / "checkpoint.peck")
        with _stage(f"eval:{name}"):
            evals[name] = evaluate(res.params, cfg, ds, split, tcfg.eval_batch_size)
            results[name] = (cfg, res)

    with _stage("report"):
        ref = evals.get(ref_name) if ref_name else None
        models = {}
        for name, (cfg, res) in results.items():
            models[name] = model_report(cfg, evals[name], hashes[name], res,
                                        ref if ref is not None and name != ref_name else None)
        report = EvalReport(timestamp(), split, ref_name, models,
                            {"dataset_hash": ds.digest, "checkpoint_hashes": hashes, "config": config})
        atomic_write(out / "report.json", report.to_json().encode("utf-8"))
        artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"
                           and not p.name.startswith(".tmp-"))
        write_json({"artifacts": {str(p.relative_to(out)): sha256_file(p) for p in artifacts}},
                   out / "manifest.json")
    return 0
