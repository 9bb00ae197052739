"""Training loop: Adam with poly learning-rate decay, deterministic seeding,
atomic checkpointing, flip-ensemble test-time augmentation, and
sliding-window inference for volumes larger than the training crop.
"""

import itertools
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import MODALITIES, AugmentPolicy, TrainConfig, asdict
from .data import augment_case, normalize_case
from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     ConfigMismatch, NonFiniteLoss, RangeError)
from .network import SegmentationNetwork

CHECKPOINT_VERSION = 1


def poly_lr(epoch, cfg):
    """base_lr * (1 - epoch/total_epochs)^p, stepped per epoch."""
    if epoch < 0 or epoch > cfg.total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.base_lr * (1.0 - epoch / cfg.total_epochs) ** cfg.poly_power


def make_optimizer(model, cfg):
    if cfg.decoupled_weight_decay:
        return torch.optim.AdamW(model.parameters(), lr=cfg.base_lr,
                                 betas=(cfg.adam_beta1, cfg.adam_beta2),
                                 weight_decay=cfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay)


def default_augment_policy(cfg):
    """The training-protocol augmentation: random crop, 0.5-probability flips
    per axis, intensity shift in [-0.1, 0.1], scale in [0.9, 1.1]."""
    return AugmentPolicy(crop_size=cfg.crop, seed=cfg.seed)


class Trainer:
    """Owns the model, optimizer, data order, and RNG state for one run."""

    def __init__(self, cfg, cases, augment=None, log_path=None):
        if not cases:
            raise ConfigError("trainer needs at least one training case")
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = SegmentationNetwork(cfg.model)
        self.optimizer = make_optimizer(self.model, cfg)
        self.cases = [normalize_case(c) for c in cases]
        self.augment = augment or default_augment_policy(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self._order = []
        self.clip_events = 0
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    @property
    def steps_per_epoch(self):
        return max(1, -(-len(self.cases) // self.cfg.batch_size))

    def _next_batch(self):
        batch = []
        for _ in range(self.cfg.batch_size):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.cases)))
            case = self.cases[self._order.pop(0)]
            batch.append(augment_case(case, self.augment, self.rng))
        x = torch.from_numpy(np.stack([c.stacked() for c in batch]))
        y = torch.from_numpy(np.stack([c.labels for c in batch]))
        return x, y

    def compute_losses(self, outputs, labels):
        """Total objective and per-component breakdown for one forward pass."""
        cfg = self.cfg.model
        w = self.cfg.loss
        deep = L.deep_supervision_loss(outputs.deep_supervision, labels, w)
        ctp = share = expert = None
        if outputs.prototype_maps is not None:
            ctp = L.ctp_loss(outputs.prototype_maps, labels, w)
        if outputs.expert_maps is not None:
            expert = L.expert_loss(outputs.expert_maps, labels, w)
        if outputs.share_probs:
            preds = list(outputs.share_probs.values())
            if len(preds) == 5:
                share = L.share_loss(outputs.share_probs, labels, w)
            else:
                share = L.branch_sum_loss(preds, labels, w)
        if cfg.enable_ctp and cfg.enable_pfrf and cfg.enable_kiimi:
            total = L.total_loss(ctp, share, expert, deep)
        else:
            total = deep
            for part in (ctp, share, expert):
                if part is not None:
                    total = total + part
        breakdown = L.LossBreakdown(
            ctp=ctp.item() if ctp is not None else 0.0,
            share=share.item() if share is not None else 0.0,
            expert=expert.item() if expert is not None else 0.0,
            deep=deep.item(),
            total=total.item())
        return total, breakdown

    def _set_lr(self):
        lr = poly_lr(min(self.epoch, self.cfg.total_epochs), self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def train_step(self, batch=None):
        """One optimization step; returns the loss breakdown."""
        self.model.train()
        x, y = batch if batch is not None else self._next_batch()
        lr = self._set_lr()
        outputs = self.model(x)
        total, breakdown = self.compute_losses(outputs, y)
        if not torch.isfinite(total):
            raise NonFiniteLoss(self.step, float(total))
        self.optimizer.zero_grad()
        total.backward()
        if self.cfg.grad_clip_norm is not None:
            norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(),
                                                  self.cfg.grad_clip_norm)
            if norm > self.cfg.grad_clip_norm:
                self.clip_events += 1
        self.optimizer.step()
        self.step += 1
        self.epoch = self.step // self.steps_per_epoch
        if self.log_path:
            record = {"step": self.step, "lr": lr, **breakdown.as_dict()}
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return breakdown

    def run_steps(self, n, callback=None):
        history = []
        for _ in range(n):
            breakdown = self.train_step()
            history.append(breakdown)
            if callback:
                callback(self, breakdown)
        return history

    # -- checkpointing ----------------------------------------------------

    def state_payload(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "fingerprint": self.cfg.fingerprint(),
            "config": asdict(self.cfg),
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "numpy_rng": json.dumps(self.rng.bit_generator.state),
            "torch_rng": torch.get_rng_state(),
            "order": list(self._order),
        }

    def save_checkpoint(self, path):
        """Atomic write: serialize to a temp file, then rename into place."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                torch.save(self.state_payload(), fh)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    def restore(self, path):
        payload = read_checkpoint(path)
        if payload["fingerprint"] != self.cfg.fingerprint():
            raise ConfigMismatch(
                f"checkpoint fingerprint {payload['fingerprint']} does not match "
                f"running config {self.cfg.fingerprint()}")
        try:
            self.model.load_state_dict(payload["model_state"], strict=True)
        except RuntimeError as exc:
            raise ConfigMismatch(f"checkpoint parameters incompatible: {exc}") from exc
        self.optimizer.load_state_dict(payload["optimizer_state"])
        self.step = payload["step"]
        self.epoch = payload["epoch"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = json.loads(payload["numpy_rng"])
        torch.set_rng_state(payload["torch_rng"])
        self._order = list(payload["order"])
        return self


def read_checkpoint(path):
    """Load and structurally validate a checkpoint payload."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {payload['format_version']}, "
            f"supported {CHECKPOINT_VERSION}")
    return payload


def load_model(path):
    """Rebuild the network (and its TrainConfig) from a checkpoint."""
    payload = read_checkpoint(path)
    cfg = TrainConfig(**payload["config"])
    model = SegmentationNetwork(cfg.model)
    try:
        model.load_state_dict(payload["model_state"], strict=True)
    except RuntimeError as exc:
        raise ConfigMismatch(f"checkpoint parameters incompatible: {exc}") from exc
    model.eval()
    return model, cfg, payload


# -- inference -------------------------------------------------------------

FLIP_COMBOS = [combo for r in range(4)
               for combo in itertools.combinations((2, 3, 4), r)]


def tta_infer(model, x, enabled=True):
    """Average the softmax fields over the 8 axis-flip combinations,
    un-flipping each output before averaging. With enabled=False, a single
    plain forward."""
    model.eval()
    with torch.no_grad():
        if not enabled:
            return model(x).seg_probs
        acc = None
        for axes in FLIP_COMBOS:
            xf = torch.flip(x, axes) if axes else x
            probs = model(xf).seg_probs
            if axes:
                probs = torch.flip(probs, axes)
            acc = probs if acc is None else acc + probs
        return acc / len(FLIP_COMBOS)


def _window_starts(full, win):
    if full == win:
        return [0]
    stride = max(1, win // 2)
    starts = list(range(0, full - win + 1, stride))
    if starts[-1] != full - win:
        starts.append(full - win)
    return starts


def sliding_window_infer(model, x, window, tta=False):
    """Tile volumes larger than the window (50% overlap), average the
    probabilities in overlaps, and renormalize. Volumes smaller than the
    window are zero-padded and cropped back."""
    window = tuple(window)
    spatial = tuple(x.shape[2:])
    pad = [max(0, w - s) for s, w in zip(spatial, window)]
    if any(pad):
        padding = []
        for p in reversed(pad):  # F.pad takes dims last-first
            padding.extend([p // 2, p - p // 2])
        x = torch.nn.functional.pad(x, padding)
    padded = tuple(x.shape[2:])
    acc = torch.zeros((x.shape[0], 4) + padded, dtype=x.dtype)
    count = torch.zeros(padded, dtype=x.dtype)
    for sh in _window_starts(padded[0], window[0]):
        for sw in _window_starts(padded[1], window[1]):
            for sd in _window_starts(padded[2], window[2]):
                sl = (slice(sh, sh + window[0]), slice(sw, sw + window[1]),
                      slice(sd, sd + window[2]))
                probs = tta_infer(model, x[(slice(None), slice(None)) + sl], tta)
                acc[(slice(None), slice(None)) + sl] += probs
                count[sl] += 1
    acc = acc / count
    acc = acc / acc.sum(dim=1, keepdim=True).clamp_min(1e-12)
    if any(pad):
        crop = tuple(slice(p // 2, p // 2 + s) for p, s in zip(pad, spatial))
        acc = acc[(slice(None), slice(None)) + crop]
    return acc


def predict_case(model, case, window, tta=False):
    """Normalized case -> (probabilities, internal label grid)."""
    x = torch.from_numpy(case.stacked()).unsqueeze(0)
    probs = sliding_window_infer(model, x, window, tta)
    labels = probs.argmax(dim=1).squeeze(0).numpy().astype(np.int64)
    return probs.squeeze(0).numpy(), labels


def foreground_dice(pred_labels, true_labels):
    """Per-class Dice for the three tumor classes (1, 2, 3)."""
    from .metrics import dice_score
    return {cls: dice_score(pred_labels == cls, true_labels == cls)
            for cls in (1, 2, 3)}
