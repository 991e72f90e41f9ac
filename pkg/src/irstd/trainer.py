"""Training loop: AdaGrad + cosine annealing, periodic evaluation,
best-IoU checkpointing, and a binary checkpoint format that resumes
bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import augment
from .losses import LossConfig, make_loss
from .metrics import MatchConfig, MetricAccumulator, compute_metrics
from .model import ModelState, NetworkConfig, build, forward
from .optim import AdaGrad, DivergenceError, cosine_lr

CKPT_MAGIC = b"RRCA"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class TrainConfig:
    lr0: float = 0.05
    batch_size: int = 8
    epochs: int = 1500
    eval_every: int = 25
    crop_size: int = 256
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    keep_snapshots: bool = False  # also save an epoch-tagged checkpoint at evals

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")
        self.loss.validate()
        return self


@dataclass
class TrainResult:
    log_path: str
    best_path: str
    last_path: str
    best_iou: float
    final_iou: float
    final_pd: float
    final_fa: float


# ---------------------------------------------------------------------------
# checkpoint format: magic RRCA, u32 version, then tagged sections of
# length-prefixed (name, shape, little-endian float payload) records


def _write_blob(f, tag, payload):
    f.write(tag)
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _write_arrays(f, tag, arrays):
    records = bytearray()
    records += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        records += struct.pack("<H", len(nb))
        records += nb
        records += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for d in arr.shape:
            records += struct.pack("<I", d)
        records += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    _write_blob(f, tag, bytes(records))


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def _read_sections(f):
    sections = {}
    while True:
        tag = f.read(4)
        if not tag:
            break
        (length,) = struct.unpack("<I", _read_exact(f, 4))
        sections[tag] = _read_exact(f, length)
    return sections


def _parse_arrays(blob):
    (count,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        arrays[name] = arr.astype(_CODE_DTYPES[code])
    return arrays


def save_checkpoint(path, state, opt, epoch, rng_state, best_iou):
    cfg_blob = json.dumps(
        {**dataclasses.asdict(state.cfg), "dtype": state.dtype.name},
        sort_keys=True,
    ).encode("utf-8")
    meta_blob = json.dumps(
        {"epoch": epoch, "best_iou": best_iou, "rng_state": rng_state},
        sort_keys=True,
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        _write_blob(f, b"CFG ", cfg_blob)
        _write_arrays(f, b"PARM", {n: p.value for n, p in state.params.items()})
        _write_arrays(f, b"BNST", state.running)
        _write_arrays(f, b"OPTS", opt.acc)
        _write_blob(f, b"META", meta_blob)
    os.replace(tmp, path)


def _open_checkpoint(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {version} unsupported "
                f"(expected {CKPT_VERSION})"
            )
        return _read_sections(f)


def load_checkpoint(path):
    """Rebuild (state, optimizer, meta) from a checkpoint file."""
    sections = _open_checkpoint(path)
    cfg_d = json.loads(sections[b"CFG "].decode("utf-8"))
    dtype = np.dtype(cfg_d.pop("dtype"))
    state = build(NetworkConfig(**cfg_d), dtype=dtype)
    opt = AdaGrad(state.params)
    meta = _load_arrays_into(sections, state, opt)
    return state, opt, meta


def load_checkpoint_into(path, state, opt):
    """Restore a checkpoint into an existing state/optimizer pair."""
    sections = _open_checkpoint(path)
    cfg_d = json.loads(sections[b"CFG "].decode("utf-8"))
    dtype = cfg_d.pop("dtype")
    if NetworkConfig(**cfg_d) != state.cfg or dtype != state.dtype.name:
        raise ValueError(f"{path}: checkpoint config does not match the model")
    return _load_arrays_into(sections, state, opt)


def _load_arrays_into(sections, state, opt):
    params = _parse_arrays(sections[b"PARM"])
    if set(params) != set(state.params):
        raise ValueError("checkpoint parameter names do not match the model")
    for name, arr in params.items():
        state.params[name].value[...] = arr
    running = _parse_arrays(sections[b"BNST"])
    for name, arr in running.items():
        state.running[name][...] = arr
    for name, arr in _parse_arrays(sections[b"OPTS"]).items():
        opt.acc[name][...] = arr
    return json.loads(sections[b"META"].decode("utf-8"))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(state, samples, match_cfg: MatchConfig = None):
    """IoU/Pd/Fa of the binarized predictions over a sample list."""
    match_cfg = match_cfg or MatchConfig()
    acc = MetricAccumulator()
    for s in samples:
        pred = predict_probabilities(state, s.image)
        acc.add_image(pred > match_cfg.binarize_threshold, s.mask > 0, match_cfg)
    return compute_metrics(acc)


def predict_probabilities(state, image):
    """Probability map for one 2-D image, eval-mode statistics."""
    x = np.ascontiguousarray(image, dtype=state.dtype)[None, None]
    out = forward(state, x, train=False)
    if isinstance(out, list):
        out = out[-1]
    return out.data[0, 0]


# ---------------------------------------------------------------------------
# training


def _batch_loss(state, loss_fn, x, g, tape):
    pred = forward(state, x, train=True, tape=tape)
    if isinstance(pred, list):
        total = None
        for head in pred:
            li = loss_fn(head, g)
            total = li if total is None else ad.add(total, li)
        return ad.scale(total, 1.0 / len(pred))
    return loss_fn(pred, g)


def train(state, train_set, test_set, tcfg: TrainConfig, out_dir, resume=None):
    """Run the optimisation loop, logging `epoch,lr,loss,iou,pd,fa` per epoch.

    Evaluation runs every ``eval_every`` epochs and at the final epoch; the
    best-IoU checkpoint is kept alongside the rolling last checkpoint. On a
    non-finite loss or gradient the loop raises DivergenceError, leaving the
    last saved checkpoint on disk.
    """
    tcfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    loss_fn = make_loss(tcfg.loss)
    opt = AdaGrad(state.params)
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 907)))
    start_epoch = 0
    best_iou = -1.0
    if resume is not None:
        meta = load_checkpoint_into(resume, state, opt)
        start_epoch = meta["epoch"] + 1
        best_iou = meta["best_iou"]
        rng.bit_generator.state = meta["rng_state"]

    log_path = os.path.join(out_dir, "log.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    final = (math.nan, math.nan, math.nan)
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("epoch,lr,loss,iou,pd,fa\n")
        for epoch in range(start_epoch, tcfg.epochs):
            lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr0)
            order = rng.permutation(len(train_set))
            total = 0.0
            for start in range(0, len(order), tcfg.batch_size):
                idxs = order[start : start + tcfg.batch_size]
                xs, gs = [], []
                for di in idxs:
                    s = augment(
                        train_set[int(di)],
                        np.random.SeedSequence((tcfg.seed, epoch, int(di))),
                        size=tcfg.crop_size,
                    )
                    xs.append(s.image)
                    gs.append(s.mask)
                x = np.stack(xs)[:, None].astype(state.dtype)
                g = np.stack(gs)[:, None].astype(state.dtype)
                tape = Tape(state.dtype)
                loss = _batch_loss(state, loss_fn, x, g, tape)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
                opt.step(lr)
                total += lv * len(idxs)
            mean_loss = total / len(order)

            is_eval = (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1
            if is_eval:
                iou, pd, fa = evaluate(state, test_set)
                final = (iou, pd, fa)
                if iou > best_iou:
                    best_iou = iou
                    save_checkpoint(
                        best_path, state, opt, epoch, rng.bit_generator.state, best_iou
                    )
                save_checkpoint(
                    last_path, state, opt, epoch, rng.bit_generator.state, best_iou
                )
                if tcfg.keep_snapshots:
                    save_checkpoint(
                        os.path.join(out_dir, f"ckpt_ep{epoch:04d}.ckpt"),
                        state, opt, epoch, rng.bit_generator.state, best_iou,
                    )
                log.write(
                    f"{epoch},{lr:.10g},{mean_loss:.10g},"
                    f"{iou:.10g},{pd:.10g},{fa:.10g}\n"
                )
            else:
                log.write(f"{epoch},{lr:.10g},{mean_loss:.10g},,,\n")
            log.flush()
    return TrainResult(log_path, best_path, last_path, best_iou, *final)
