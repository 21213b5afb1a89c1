"""Adam training loop, evaluation and checkpoint persistence."""

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .config import TrainConfig, config_from_dict, config_to_dict
from .metrics import accumulate, scores
from .model import CEBSNet
from .objective import total_loss
from .tensor import ContractError, NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"CEBSCKPT"
LOSS_COLUMNS = ("M1", "M2", "M3", "M4", "M5", "Mhat", "M")


class CheckpointError(ContractError):
    pass


class TrainingDiverged(NonFiniteError):
    pass


class Adam:
    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    model: CEBSNet
    optimizer: Adam
    history: list = field(default_factory=list)  # per-iteration loss rows
    evals: list = field(default_factory=list)    # (epoch, ScoreSet)
    checkpoint: str = None
    initial_loss: float = None


def train_step(model, opt, a, b, gt):
    opt.zero_grad()
    masks = model(Tensor(a.astype(model.dtype)), Tensor(b.astype(model.dtype)))
    report = total_loss(masks, gt)
    if not np.isfinite(report.value):
        raise TrainingDiverged(f"non-finite loss {report.value}")
    report.total.backward()
    opt.step()
    return report


def train(model_cfg, train_cfg, manifest, out_dir=None, history_csv=None, model=None, progress=None):
    """Optimize a fresh (or given) model on the manifest's train split.

    ``progress(iteration, report)`` is called after every step when given.
    """
    train_cfg.validate()
    a_all, b_all, gt_all, _ = data_mod.load_split(manifest, "train")
    model = model or CEBSNet(model_cfg, seed=train_cfg.seed)
    model.train()
    opt = Adam(model.named_parameters(), train_cfg.learning_rate, train_cfg.adam_beta1,
               train_cfg.adam_beta2, train_cfg.adam_eps, train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(model, opt)
    out_dir = out_dir or train_cfg.checkpoint_dir
    writer = None
    if history_csv:
        os.makedirs(os.path.dirname(os.path.abspath(history_csv)), exist_ok=True)
        fh = open(history_csv, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(("iteration",) + LOSS_COLUMNS + ("total",))
    n = len(a_all)
    iteration = 0
    try:
        for epoch in range(train_cfg.epochs):
            model.train()
            order = rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                a, b, gt = a_all[idx], b_all[idx], gt_all[idx]
                if train_cfg.augment:
                    trip = [data_mod.augment(a[j], b[j], gt[j], rng) for j in range(len(idx))]
                    a, b, gt = (np.stack(t) for t in zip(*trip))
                try:
                    report = train_step(model, opt, a, b, gt)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"training diverged at iteration {iteration + 1}: {exc}") from exc
                iteration += 1
                row = [iteration] + [report.terms[k] for k in LOSS_COLUMNS] + [report.value]
                result.history.append(row)
                if result.initial_loss is None:
                    result.initial_loss = report.value
                if writer:
                    writer.writerow(row)
                if progress:
                    progress(iteration, report)
                if train_cfg.max_iters and iteration >= train_cfg.max_iters:
                    break
            if manifest.ids("val") and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
                s, _ = evaluate(model, manifest, "val")
                result.evals.append((epoch + 1, s))
                log.info("epoch %d val %s", epoch + 1, s)
            if out_dir:
                result.checkpoint = save_checkpoint(
                    os.path.join(out_dir, "last.ckpt"), model, train_cfg, opt, epoch + 1, rng
                )
            if train_cfg.max_iters and iteration >= train_cfg.max_iters:
                break
        if train_cfg.epochs == 0 and manifest.ids("val"):
            s, _ = evaluate(model, manifest, "val")
            result.evals.append((0, s))
    finally:
        if writer:
            fh.close()
    return result


def predict_masks(model, a, b, batch_size=4):
    """Binary change maps (N, S, S) from the final map thresholded at p = 0.5."""
    model.eval()
    out = []
    for start in range(0, len(a), batch_size):
        p = model.predict_proba(a[start:start + batch_size].astype(model.dtype),
                                b[start:start + batch_size].astype(model.dtype))
        out.append((p > 0.5).astype(np.uint8))
    return np.concatenate(out)


def evaluate(model, manifest, split="test", batch_size=4):
    """Micro-averaged scores of ``model`` over a split; returns (ScoreSet, ConfusionCounts)."""
    ids = manifest.ids(split)
    if not ids:
        raise data_mod.DatasetError(f"no samples in split {split!r}")
    a, b, gt, _ = data_mod.load_split(manifest, split)
    was_training = model.training
    pred = predict_masks(model, a, b, batch_size)
    model.train(was_training)
    counts = None
    for p, g in zip(pred, gt):
        counts = accumulate(p, g, counts)
    return scores(counts), counts


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, train_cfg=None, opt=None, epoch=0, rng=None):
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        for name, _ in opt.params:
            arrays[f"adam_m/{name}"] = opt.m[name]
            arrays[f"adam_v/{name}"] = opt.v[name]
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(model.cfg, train_cfg or TrainConfig()),
        "epoch": epoch,
        "adam_t": opt.t if opt is not None else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "arrays": {k: [list(v.shape), v.dtype.str] for k, v in arrays.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(digest)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    """Verify and decode a checkpoint into (meta, arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(MAGIC) + 4 + 32
    if len(blob) < head or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad header)")
    version = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 4], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest, payload = blob[len(MAGIC) + 4:head], blob[head:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    with np.load(io.BytesIO(payload)) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    for k, (shape, dtype) in meta["arrays"].items():
        if k not in arrays or list(arrays[k].shape) != shape or arrays[k].dtype.str != dtype:
            raise CheckpointError(f"{path}: array {k!r} does not match its descriptor")
    return meta, arrays


def load_checkpoint(path, model=None):
    """Return (model, train_cfg, meta). A given model must match the stored shapes."""
    meta, arrays = read_checkpoint(path)
    model_cfg, train_cfg = config_from_dict(meta["config"])
    if model is None:
        model = CEBSNet(model_cfg, seed=train_cfg.seed)
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, train_cfg, meta


def restore_optimizer(opt, path):
    meta, arrays = read_checkpoint(path)
    for name, _ in opt.params:
        opt.m[name][...] = arrays[f"adam_m/{name}"]
        opt.v[name][...] = arrays[f"adam_v/{name}"]
    opt.t = meta["adam_t"]
    return meta
