"""Dataset assembly, training, evaluation metrics and benchmark reports."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff.checkpoint import checkpoint_bytes, read_checkpoint
from .geometry import build_scheme
from .models import ModelConfig, forward, init_params
from .phantom import GradientTable, Phantom, adc_transform
from .resample import build_weights, resample_volume, symmetrize
from .shbasis import N_COEFFS, ShFitter, acc_batch
from .volume import DataError, Volume4D

log = logging.getLogger(__name__)

INPUT_SCALE = 1e3  # ADC in mm^2/s -> um^2/ms, O(1) network inputs
SPLITS = ("train", "val", "test")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 500
    eval_every: int = 100
    loss_lambda_fod: float = 1.0
    seed: int = 0
    split_fractions: tuple = (0.7, 0.15, 0.15)
    block_size: int = 8
    sh_lambda: float = 0.006
    eval_batch_size: int = 64

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be three non-negative numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.split_fractions)}")
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.batch_size <= 0 or self.eval_every <= 0 or self.eval_batch_size <= 0:
            raise ValueError("batch_size, eval_every and eval_batch_size must be > 0")
        if self.block_size < 3:
            raise ValueError("block_size must be >= 3")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


# -- inputs ---------------------------------------------------------------------------

def prepare_inputs(dwi: Volume4D, table: GradientTable, cfg: ModelConfig, sh_lambda: float = 0.006):
    """Model-specific input volume from raw DWI.

    All models start from the ADC of the float32 DWI. The PE-Transformer
    gets ADC resampled onto the scheme's face centroids, the vanilla
    transformer the antipodally symmetrized ADC channels (plus their
    directions), and the SH-CNN per-voxel SH coefficients of the ADC.
    Returns ``(inputs, dirs, valid)``.
    """
    table.check_single_shell()
    dwi32 = Volume4D(np.asarray(dwi.data, dtype=np.float32), dwi.meta)
    adc, valid = adc_transform(dwi32, table, return_valid=True)
    dw = table.dwi_subset()
    dirs = None
    if cfg.model_type == "pe":
        sym_table, sym = symmetrize(dw, adc)
        w = build_weights(sym_table.bvecs, build_scheme(cfg.level))
        data = resample_volume(sym, w).data
    elif cfg.model_type == "vanilla":
        sym_table, sym = symmetrize(dw, adc)
        data, dirs = sym.data, sym_table.bvecs.astype(np.float32)
    else:
        fitter = ShFitter(dw.bvecs, sh_lambda)
        data = fitter.fit(adc.data)
        if cfg.sh_channels != N_COEFFS:
            data = data[..., :cfg.sh_channels]
    inputs = (np.asarray(data) * INPUT_SCALE).astype(np.float32)
    return inputs, dirs, valid


# -- patches and splits ----------------------------------------------------------------

@dataclass
class PatchSample:
    patch: np.ndarray          # (3, 3, 3, C)
    aux: np.ndarray | None     # symmetrized directions for the vanilla model
    target_fwf: float
    target_fod: np.ndarray     # (45,)
    center: tuple


def _block_key(seed: int, block: tuple) -> str:
    return hashlib.sha256(f"{seed}:{block[0]}:{block[1]}:{block[2]}".encode()).hexdigest()


def assign_blocks(dims, seed: int, fractions, block: int = 8) -> np.ndarray:
    """Split label (0 train, 1 val, 2 test) per voxel, constant on block x block x block cubes.

    Blocks are ordered by a seeded hash and dealt out by the split fractions;
    any split with a nonzero fraction gets at least one block when possible.
    """
    nb = [math.ceil(d / block) for d in dims[:3]]
    blocks = [(i, j, k) for i in range(nb[0]) for j in range(nb[1]) for k in range(nb[2])]
    blocks.sort(key=lambda b: _block_key(seed, b))
    n = len(blocks)
    n_val = max(1, round(fractions[1] * n)) if fractions[1] > 0 else 0
    n_test = max(1, round(fractions[2] * n)) if fractions[2] > 0 else 0
    if n - n_val - n_test < 1:
        n_val = min(n_val, max(0, (n - 1) // 2))
        n_test = min(n_test, max(0, n - 1 - n_val))
    labels = np.zeros(nb, dtype=np.int8)
    for r, b in enumerate(blocks):
        labels[b] = 0 if r < n - n_val - n_test else (1 if r < n - n_test else 2)
    ix = np.arange(dims[0]) // block
    iy = np.arange(dims[1]) // block
    iz = np.arange(dims[2]) // block
    return labels[np.ix_(ix, iy, iz)]


_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


def split_centers(mask: np.ndarray, seed: int, fractions, block: int = 8) -> dict:
    """Interior masked voxels per split, raster order.

    A center is kept only if its whole 3x3x3 neighborhood lies inside the
    grid and inside blocks of the center's own split, so no input patch
    reaches into another split.
    """
    mask = np.asarray(mask).reshape(np.asarray(mask).shape[:3]) > 0
    H, W, D = mask.shape
    labels = assign_blocks(mask.shape, seed, fractions, block)
    out = {}
    interior = np.zeros_like(mask)
    interior[1:-1, 1:-1, 1:-1] = True
    cand = np.argwhere(interior & mask)
    if len(cand):
        nb = cand[:, None, :] + _OFFSETS[None]
        lab = labels[nb[..., 0], nb[..., 1], nb[..., 2]]
        same = np.all(lab == lab[:, 13:14], axis=1)
    for s, name in enumerate(SPLITS):
        if not len(cand):
            out[name] = np.zeros((0, 3), dtype=np.int64)
            continue
        keep = same & (lab[:, 13] == s)
        out[name] = cand[keep].astype(np.int64)
    return out


def gather_patches(volume: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, 3, 3, 3, C) neighborhoods around ``centers``; axes follow the volume's (x, y, z)."""
    nb = centers[:, None, :] + _OFFSETS[None]
    p = volume[nb[..., 0], nb[..., 1], nb[..., 2]]
    return p.reshape(len(centers), 3, 3, 3, volume.shape[-1])


def extract_patches(vol, mask, fwf, fod, centers: np.ndarray | None = None, aux=None) -> Iterator[PatchSample]:
    """Yield one sample per interior masked voxel (or per given center), raster order."""
    v = vol.data if isinstance(vol, Volume4D) else np.asarray(vol)
    m = mask.data if isinstance(mask, Volume4D) else np.asarray(mask)
    f = (fwf.data if isinstance(fwf, Volume4D) else np.asarray(fwf)).reshape(v.shape[:3])
    o = (fod.data if isinstance(fod, Volume4D) else np.asarray(fod)).reshape(v.shape[:3] + (N_COEFFS,))
    if centers is None:
        m = m.reshape(v.shape[:3]) > 0
        interior = np.zeros_like(m)
        interior[1:-1, 1:-1, 1:-1] = True
        centers = np.argwhere(m & interior)
    for c in centers:
        x, y, z = (int(t) for t in c)
        yield PatchSample(v[x - 1:x + 2, y - 1:y + 2, z - 1:z + 2, :], aux, float(f[x, y, z]),
                          o[x, y, z], (x, y, z))


@dataclass
class Dataset:
    inputs: np.ndarray                 # (H, W, D, C) float32
    dirs: np.ndarray | None            # vanilla only
    fwf: np.ndarray                    # (H, W, D)
    fod: np.ndarray                    # (H, W, D, 45)
    centers: dict = field(default_factory=dict)
    digest: str = ""
    norm: tuple = (0.0, 1.0)           # (mean, std) already applied to ``inputs``

    def batch(self, centers: np.ndarray):
        c = centers
        return (gather_patches(self.inputs, c), self.fwf[c[:, 0], c[:, 1], c[:, 2]],
                self.fod[c[:, 0], c[:, 1], c[:, 2]])

    def samples(self, split: str) -> Iterator[PatchSample]:
        return extract_patches(self.inputs, None, self.fwf, self.fod, self.centers[split], self.dirs)


def dataset_hash(ph: Phantom) -> str:
    h = hashlib.sha256()
    for arr in (ph.dwi.data, ph.truth.fwf.data, ph.truth.fod.data, ph.truth.mask.data):
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(ph.table.bvals, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ph.table.bvecs, dtype="<f8").tobytes())
    return h.hexdigest()


def input_norm(inputs: np.ndarray, centers: np.ndarray) -> tuple[float, float]:
    """Scalar mean and std of the inputs at the given voxels, over all channels."""
    if len(centers) == 0:
        return 0.0, 1.0
    v = inputs[centers[:, 0], centers[:, 1], centers[:, 2]].astype(np.float64)
    sd = float(v.std())
    return float(np.float32(v.mean())), float(np.float32(sd)) if sd > 0 else 1.0


def build_dataset(ph: Phantom, cfg: ModelConfig, tcfg: TrainConfig, norm=None) -> Dataset:
    """Model inputs, targets and split centers for a phantom.

    Inputs are standardized with ``norm = (mean, std)``; when omitted the
    statistics come from the training split's center voxels.
    """
    inputs, dirs, valid = prepare_inputs(ph.dwi, ph.table, cfg, tcfg.sh_lambda)
    mask = (np.asarray(ph.truth.mask.data)[..., 0] > 0) & valid
    centers = split_centers(mask, tcfg.seed, tcfg.split_fractions, tcfg.block_size)
    if norm is None:
        norm = input_norm(inputs, centers["train"])
    mu, sd = (float(t) for t in norm)
    inputs = ((inputs - np.float32(mu)) / np.float32(sd)).astype(np.float32)
    fwf = np.asarray(ph.truth.fwf.data, dtype=np.float32)[..., 0]
    fod = np.asarray(ph.truth.fod.data, dtype=np.float32)
    return Dataset(inputs, dirs, fwf, fod, centers, dataset_hash(ph), (mu, sd))


# -- loss and training ------------------------------------------------------------------

def loss(pred_fwf, pred_fod, target_fwf, target_fod, lam: float = 1.0):
    """MSE on FWF plus ``lam`` times MSE over the 45 FOD coefficients.

    Works on autodiff Tensors (returns a scalar Tensor) and on plain arrays
    (returns a float).
    """
    if isinstance(pred_fwf, ad.Tensor) or isinstance(pred_fod, ad.Tensor):
        pf = pred_fwf if isinstance(pred_fwf, ad.Tensor) else ad.Tensor(pred_fwf)
        po = pred_fod if isinstance(pred_fod, ad.Tensor) else ad.Tensor(pred_fod)
        df = ad.sub(pf, np.asarray(target_fwf, dtype=pf.dtype).reshape(pf.shape))
        do = ad.sub(po, np.asarray(target_fod, dtype=po.dtype).reshape(po.shape))
        total = ad.mean(ad.mul(df, df))
        if lam:
            total = ad.add(total, ad.mul(ad.mean(ad.mul(do, do)), pf.dtype.type(lam)))
        return total
    df = np.asarray(pred_fwf, dtype=float) - np.asarray(target_fwf, dtype=float)
    do = np.asarray(pred_fod, dtype=float) - np.asarray(target_fod, dtype=float)
    out = float(np.mean(df ** 2))
    if lam:
        out += lam * float(np.mean(do ** 2))
    return out


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    train_config: TrainConfig
    loss_curve: list
    val_curve: list
    best_step: int
    norm: tuple = (0.0, 1.0)

    def checkpoint_config(self) -> dict:
        return {"model": self.model_config.to_dict(), "train": self.train_config.to_dict(),
                "input_scale": INPUT_SCALE, "input_norm": list(self.norm), "best_step": self.best_step}

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.model_config.model_type, self.checkpoint_config(), self.params)


def predict(params, cfg: ModelConfig, ds: Dataset, centers: np.ndarray, batch_size: int = 64):
    fw, fo = [], []
    for s in range(0, len(centers), batch_size):
        x, _, _ = ds.batch(centers[s:s + batch_size])
        pf, po = forward(params, cfg, x, ds.dirs)
        fw.append(pf.data)
        fo.append(po.data)
    if not fw:
        return np.zeros(0), np.zeros((0, N_COEFFS))
    return np.concatenate(fw).astype(np.float64), np.concatenate(fo).astype(np.float64)


def train(cfg: ModelConfig, tcfg: TrainConfig, ds: Dataset, progress=None) -> TrainResult:
    """Adam on seeded shuffled minibatches; keeps the best-validation parameters."""
    train_c = ds.centers.get("train", np.zeros((0, 3), int))
    if len(train_c) == 0:
        raise DataError("training split is empty")
    if len(train_c) < tcfg.batch_size:
        raise DataError(f"{len(train_c)} training samples < batch size {tcfg.batch_size}")
    val_c = ds.centers.get("val", np.zeros((0, 3), int))
    params = init_params(cfg)
    state = ad.AdamState(lr=tcfg.lr)
    rng = np.random.default_rng([tcfg.seed, 7])
    order, pos = rng.permutation(len(train_c)), 0
    curve, val_curve = [], []
    best, best_step, best_val = None, 0, math.inf
    for step in range(1, tcfg.steps + 1):
        if pos + tcfg.batch_size > len(order):
            order, pos = rng.permutation(len(train_c)), 0
        idx = order[pos:pos + tcfg.batch_size]
        pos += tcfg.batch_size
        x, tf, to = ds.batch(train_c[idx])
        leaves = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        pf, po = forward(leaves, cfg, x, ds.dirs)
        total = loss(pf, po, tf, to, tcfg.loss_lambda_fod)
        ad.backward(total)
        ad.adam_step(params, {k: t.grad for k, t in leaves.items()}, state)
        curve.append(float(total.data))
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            if len(val_c):
                vf, vo = predict(params, cfg, ds, val_c, tcfg.eval_batch_size)
                tf_, _, to_ = (ds.fwf[val_c[:, 0], val_c[:, 1], val_c[:, 2]], None,
                               ds.fod[val_c[:, 0], val_c[:, 1], val_c[:, 2]])
                vloss = loss(vf, vo, tf_, to_, tcfg.loss_lambda_fod)
            else:
                vloss = curve[-1]
            val_curve.append([step, vloss])
            if vloss < best_val:
                best_val, best_step = vloss, step
                best = {k: v.copy() for k, v in params.items()}
            if progress:
                progress(step, curve[-1], vloss)
    return TrainResult(best, cfg, tcfg, curve, val_curve, best_step, ds.norm)


# -- metrics -----------------------------------------------------------------------------

class WilcoxonError(ValueError):
    pass


def wilcoxon_signed_rank(errors_a, errors_b, min_pairs: int = 10) -> tuple[float, float]:
    """Two-sided signed-rank test, normal approximation with tie correction.

    Zero differences are dropped. Returns ``(statistic, p)`` where the
    statistic is min(W+, W-).
    """
    d = np.asarray(errors_a, dtype=float) - np.asarray(errors_b, dtype=float)
    d = d[d != 0]
    if len(d) < min_pairs:
        raise WilcoxonError(f"only {len(d)} nonzero paired differences; need >= {min_pairs}")
    res = stats.wilcoxon(d, zero_method="wilcox", correction=False, method="approx")
    return float(res.statistic), float(res.pvalue)


@dataclass
class Evaluation:
    fwf_rmse: float
    mean_acc: float | None
    n_voxels: int
    n_acc_undefined: int
    mean_predictor_rmse: float
    fwf_abs_error: np.ndarray
    acc: np.ndarray
    centers: np.ndarray


def evaluate_predictions(pred_fwf, pred_fod, gt_fwf, gt_fod, centers=None) -> Evaluation:
    pred_fwf, gt_fwf = np.asarray(pred_fwf, float), np.asarray(gt_fwf, float)
    err = pred_fwf - gt_fwf
    rmse = float(np.sqrt(np.mean(err ** 2))) if len(err) else float("nan")
    floor = float(np.std(gt_fwf)) if len(gt_fwf) else float("nan")
    accs = acc_batch(pred_fod, gt_fod)
    defined = np.isfinite(accs)
    mean_acc = float(np.mean(accs[defined])) if defined.any() else None
    centers = np.zeros((len(err), 3), int) if centers is None else centers
    return Evaluation(rmse, mean_acc, int(len(err)), int((~defined).sum()), floor, np.abs(err), accs,
                      centers)


def evaluate(params, cfg: ModelConfig, ds: Dataset, split: str = "test", batch_size: int = 64) -> Evaluation:
    c = ds.centers[split]
    if len(c) == 0:
        raise DataError(f"{split} split is empty")
    pf, po = predict(params, cfg, ds, c, batch_size)
    return evaluate_predictions(pf, po, ds.fwf[c[:, 0], c[:, 1], c[:, 2]],
                                ds.fod[c[:, 0], c[:, 1], c[:, 2]], c)


def paired_wilcoxon(ev: Evaluation, ref: Evaluation, metric: str = "fwf"):
    """Signed-rank test of per-voxel errors against a reference model.

    Voxels are paired by center coordinate. ``metric='fwf'`` compares
    absolute FWF errors, ``'acc'`` compares 1 - ACC on voxels where both
    are defined. Returns ``(statistic, p)`` or ``(None, None)`` when the
    test is not applicable.
    """
    key = {tuple(c): i for i, c in enumerate(ref.centers)}
    pairs = [(i, key[tuple(c)]) for i, c in enumerate(ev.centers) if tuple(c) in key]
    if not pairs:
        return None, None
    a_idx, b_idx = np.array(pairs).T
    if metric == "fwf":
        a, b = ev.fwf_abs_error[a_idx], ref.fwf_abs_error[b_idx]
    else:
        a, b = 1.0 - ev.acc[a_idx], 1.0 - ref.acc[b_idx]
        ok = np.isfinite(a) & np.isfinite(b)
        a, b = a[ok], b[ok]
    try:
        return wilcoxon_signed_rank(a, b)
    except WilcoxonError:
        return None, None


# -- reports ---------------------------------------------------------------------------------

@dataclass
class ModelReport:
    model_type: str
    scheme_level: str | None
    fwf_rmse: float
    mean_acc: float | None
    n_voxels: int
    n_acc_undefined: int
    mean_predictor_rmse: float
    wilcoxon_statistic: float | None = None
    wilcoxon_p: float | None = None
    wilcoxon_p_acc: float | None = None
    checkpoint_hash: str = ""
    initial_train_loss: float | None = None
    final_train_loss: float | None = None
    steps: int | None = None
    best_step: int | None = None


@dataclass
class EvalReport:
    generated_at: str
    split: str
    reference_model: str | None
    models: dict
    provenance: dict

    def to_dict(self) -> dict:
        return {"generated_at": self.generated_at, "split": self.split,
                "reference_model": self.reference_model,
                "models": {k: asdict(v) for k, v in self.models.items()},
                "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["generated_at"], d["split"], d.get("reference_model"),
                   {k: ModelReport(**v) for k, v in d["models"].items()}, d["provenance"])

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def timestamp() -> str:
    """ISO-8601 UTC time; honours SOURCE_DATE_EPOCH for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat().replace("+00:00", "Z")


def smoothed_endpoints(curve, window: int = 10) -> tuple[float, float]:
    """Mean of the first and last ``window`` per-step losses."""
    w = max(1, min(window, len(curve) // 2 or 1))
    return float(np.mean(curve[:w])), float(np.mean(curve[-w:]))


def model_report(cfg: ModelConfig, ev: Evaluation, ckpt_hash: str = "", result: TrainResult | None = None,
                 ref: Evaluation | None = None) -> ModelReport:
    rep = ModelReport(cfg.model_type, cfg.scheme_level if cfg.model_type == "pe" else None,
                      ev.fwf_rmse, ev.mean_acc, ev.n_voxels, ev.n_acc_undefined, ev.mean_predictor_rmse,
                      checkpoint_hash=ckpt_hash)
    if result is not None:
        rep.initial_train_loss, rep.final_train_loss = smoothed_endpoints(result.loss_curve)
        rep.steps, rep.best_step = len(result.loss_curve), result.best_step
    if ref is not None:
        rep.wilcoxon_statistic, rep.wilcoxon_p = paired_wilcoxon(ev, ref, "fwf")
        _, rep.wilcoxon_p_acc = paired_wilcoxon(ev, ref, "acc")
    return rep


def load_checkpoint(path) -> tuple[ModelConfig, TrainConfig, dict, dict]:
    header, params = read_checkpoint(path)
    cfg = header["config"]
    return (ModelConfig.from_dict(cfg["model"]), TrainConfig.from_dict(cfg["train"]), params, header)
