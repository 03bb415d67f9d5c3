"""Training engine: Adam with step-decayed learning rate, epoch loop,
validation hooks, and checkpointing.

Weight decay is the coupled (gradient-added) form and touches only
tensors named "*.weight"; normalization scales/shifts and activation
slopes are exempt. A decoupled variant is available behind a flag.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import AutodiffError, ParameterStore, Tensor, backward
from .losses import LossConfig, hybrid_loss
from .metrics import evaluate
from .model import CSDN
from .phantom import AugmentConfig, Dataset, batches
from .serial import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr0: float = 1e-3
    lr_step: int = 100
    lr_factor: float = 0.5
    weight_decay: float = 1e-4
    decoupled_decay: bool = False
    seed: int = 0
    checkpoint_every: int = 1
    val_every: int = 5
    augment: str = "full"  # full | mild | none

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.lr_factor <= 1.0:
            raise ValueError("lr_factor must lie in (0, 1]")
        if self.augment not in ("full", "mild", "none"):
            raise ValueError(f"unknown augment mode {self.augment!r}")

    def augment_cfg(self) -> AugmentConfig | None:
        if self.augment == "full":
            return AugmentConfig()
        if self.augment == "mild":
            return AugmentConfig.mild()
        return None


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_factor ** (epoch // cfg.lr_step)


class Adam:
    """Bias-corrected Adam over a ParameterStore, with selective L2 decay."""

    def __init__(self, store: ParameterStore, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4, decoupled: bool = False):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    @staticmethod
    def decayed(name: str) -> bool:
        return name.endswith(".weight")

    def load_state(self, state: dict):
        self.step_count = int(state["step"])
        for n in self.m:
            if n not in state["m"]:
                raise ValueError(f"optimizer state missing moments for {n!r}")
            if state["m"][n].shape != self.m[n].shape:
                raise ValueError(f"optimizer moment shape mismatch for {n!r}")
            self.m[n] = state["m"][n].astype(self.m[n].dtype, copy=True)
            self.v[n] = state["v"][n].astype(self.v[n].dtype, copy=True)

    def step(self, grads: dict[str, Tensor], lr: float):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            if name not in grads:
                raise ValueError(f"no gradient supplied for {name!r}")
            g = grads[name].data
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter "
                                 f"{p.data.shape} for {name!r}")
            wd = self.weight_decay if self.decayed(name) else 0.0
            if wd and not self.decoupled:
                g = g + wd * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if wd and self.decoupled:
                update = update + wd * p.data
            p.data -= (lr * update).astype(p.data.dtype)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    val_dsc_lumen: float | None = None
    val_dsc_eem: float | None = None
    val_hd95_lumen: float | None = None
    val_hd95_eem: float | None = None

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return (f"{self.epoch},{self.loss:.6f},{self.lr:.8f},"
                f"{fmt(self.val_dsc_lumen)},{fmt(self.val_dsc_eem)},"
                f"{fmt(self.val_hd95_lumen)},{fmt(self.val_hd95_eem)}")


LOG_HEADER = ("epoch,loss,lr,val_dsc_lumen,val_dsc_eem,"
              "val_hd95_lumen,val_hd95_eem")


def _epoch_seed(master_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([master_seed, epoch])
               .generate_state(1)[0])


def train(net: CSDN, dataset: Dataset, cfg: TrainConfig,
          loss_cfg: LossConfig, out_dir: str | None = None,
          quiet: bool = False, start_epoch: int = 0,
          opt_state: dict | None = None, best_val_dsc: float = -1.0,
          global_step: int = 0, max_steps: int | None = None
          ) -> list[EpochLog]:
    """Run the epoch loop; returns the per-epoch log. When out_dir is set,
    writes log.csv, last.ckpt, and best.ckpt (best mean validation DSC)."""
    if not dataset.train:
        raise ValueError("training split is empty")
    store = net.parameter_store()
    opt = Adam(store, weight_decay=cfg.weight_decay,
               decoupled=cfg.decoupled_decay)
    if opt_state is not None:
        opt.load_state(opt_state)
    aug = cfg.augment_cfg()
    logs: list[EpochLog] = []
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "log.csv")
        if start_epoch == 0 or not os.path.exists(log_path):
            with open(log_path, "w") as fh:
                fh.write(LOG_HEADER + "\n")

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        net.train()
        losses = []
        t0 = time.time()
        seed = _epoch_seed(cfg.seed, epoch)
        for batch_id, (frames, labels) in enumerate(
                batches(dataset.train, cfg.batch_size, seed, aug)):
            x = Tensor(frames.astype(net.dtype))
            try:
                out = net(x)
                loss = hybrid_loss(out, labels, loss_cfg)
            except AutodiffError as e:
                raise AutodiffError(
                    f"non-finite loss at epoch {epoch} batch {batch_id}: {e}"
                ) from e
            store.zero_grad()
            grads = backward(loss, store)
            opt.step(grads, lr)
            losses.append(loss.item())
            global_step += 1
            if max_steps is not None and global_step >= max_steps:
                break
        entry = EpochLog(epoch=epoch, loss=float(np.mean(losses)), lr=lr)

        last_epoch = epoch == cfg.epochs - 1
        if dataset.val and (last_epoch or (epoch + 1) % cfg.val_every == 0):
            rep = evaluate(net, dataset.val)
            entry.val_dsc_lumen = rep.lumen_dsc
            entry.val_dsc_eem = rep.eem_dsc
            entry.val_hd95_lumen = rep.lumen_hd95_mm
            entry.val_hd95_eem = rep.eem_hd95_mm
            mean_dsc = 0.5 * (rep.lumen_dsc + rep.eem_dsc)
            if out_dir is not None and mean_dsc > best_val_dsc:
                best_val_dsc = mean_dsc
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), net, opt,
                                epoch=epoch, global_step=global_step,
                                master_seed=cfg.seed,
                                best_val_dsc=best_val_dsc)
        logs.append(entry)
        if not quiet:
            val = ""
            if entry.val_dsc_lumen is not None:
                val = (f" val_dsc l={entry.val_dsc_lumen:.4f} "
                       f"e={entry.val_dsc_eem:.4f}")
            print(f"epoch {epoch:3d} loss {entry.loss:.4f} lr {lr:.2e}"
                  f" ({time.time() - t0:.1f}s){val}", flush=True)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(entry.csv_row() + "\n")
            if (epoch + 1) % cfg.checkpoint_every == 0 or last_epoch:
                save_checkpoint(os.path.join(out_dir, "last.ckpt"), net, opt,
                                epoch=epoch, global_step=global_step,
                                master_seed=cfg.seed,
                                best_val_dsc=best_val_dsc)
        if max_steps is not None and global_step >= max_steps:
            break
    return logs


def resume(path: str, dataset: Dataset, cfg: TrainConfig,
           loss_cfg: LossConfig, out_dir: str | None = None,
           quiet: bool = False) -> list[EpochLog]:
    net, opt_state, trailer = load_checkpoint(path)
    if opt_state is None:
        print("warning: checkpoint has no optimizer state; "
              "training restarts with fresh moments", flush=True)
    return train(net, dataset, cfg, loss_cfg, out_dir, quiet=quiet,
                 start_epoch=trailer["epoch"] + 1, opt_state=opt_state,
                 best_val_dsc=trailer["best_val_dsc"],
                 global_step=trailer["global_step"])
