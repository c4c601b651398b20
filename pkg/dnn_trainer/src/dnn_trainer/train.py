"""Training loop and prediction export.

Optimizes the weighted three-term objective with Adam.  The depth-map weight
stays fixed across epochs while the parameter-distance and point-cloud
weights decay geometrically; the learning rate drops stepwise.  Given a seed,
two runs on the same machine produce identical checkpoints.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import load_dataset, stack_inputs
from .formats import FormatError, load_manifest, write_predictions
from .losses import sample_losses, weights_at_epoch
from .network import NetworkSpec, build_network


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 8
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    dropout: float = 0.5
    lambda_t: float = 4.0
    lambda_d: float = 1.0
    lambda_p: float = 40.0
    lambda_decay: float = 0.9
    alpha: float = 1.0
    seed: int = 0
    base_channels: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.base_channels < 1:
            raise ValueError("epochs, batch_size and base_channels must be >= 1")
        for name in ("lr", "lr_decay", "eps", "lambda_t", "lambda_d", "lambda_p",
                     "lambda_decay", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_json_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["betas"] = list(self.betas)
        return out


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _run_epoch(net, dataset, order, cfg, weights, opt):
    """One pass in the given sample order; returns sample-weighted loss means."""
    lt_w, ld_w, lp_w = weights
    sums = np.zeros(4)
    for start in range(0, len(order), cfg.batch_size):
        batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
        rgb, depth = stack_inputs(batch)
        r_pred, t_pred = net(rgb, depth)
        terms = [
            sample_losses(st, r_pred[j], t_pred[j], cfg.alpha)
            for j, st in enumerate(batch)
        ]
        lt = torch.stack([t[0] for t in terms]).mean()
        ld = torch.stack([t[1] for t in terms]).mean()
        lp = torch.stack([t[2] for t in terms]).mean()
        total = lt_w * lt + ld_w * ld + lp_w * lp
        opt.zero_grad()
        total.backward()
        opt.step()
        sums += len(batch) * np.array(
            [lt.item(), ld.item(), lp.item(), total.item()]
        )
    sums /= len(order)
    return {"loss_t": sums[0], "loss_d": sums[1], "loss_p": sums[2], "total": sums[3]}


def train(manifest_path, cfg: TrainConfig = TrainConfig(), out_dir=".",
          depth_dir=None, pretrained_rgb=None):
    """Fit the network to a manifest; writes checkpoint.pt and
    training_log.json under out_dir and returns (checkpoint_path, log)."""
    manifest = load_manifest(manifest_path)
    if not manifest.samples:
        raise FormatError(f"manifest has no samples: {manifest_path}")
    dataset = load_dataset(manifest, depth_dir)
    intr = dataset[0].intrinsics

    torch.manual_seed(cfg.seed)
    spec = NetworkSpec(
        height=intr["height"], width=intr["width"],
        base_channels=cfg.base_channels, dropout=cfg.dropout,
    )
    net = build_network(spec, pretrained_rgb)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    order_rng = np.random.default_rng(cfg.seed)

    log = {"config": cfg.to_json_dict(), "sample_count": len(dataset), "epochs": []}
    net.train()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        weights = weights_at_epoch(
            cfg.lambda_t, cfg.lambda_d, cfg.lambda_p, cfg.lambda_decay, epoch
        )
        order = order_rng.permutation(len(dataset))
        entry = _run_epoch(net, dataset, order, cfg, weights, opt)
        entry.update({
            "epoch": epoch, "lr": lr,
            "lambda_t": weights[0], "lambda_d": weights[1], "lambda_p": weights[2],
        })
        log["epochs"].append(entry)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.pt"
    torch.save({
        "spec": {
            "height": spec.height, "width": spec.width,
            "base_channels": spec.base_channels, "dropout": spec.dropout,
        },
        "state_dict": net.state_dict(),
        "config": cfg.to_json_dict(),
    }, checkpoint_path)
    (out_dir / "training_log.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n"
    )
    return checkpoint_path, log


def load_checkpoint(checkpoint_path):
    payload = torch.load(checkpoint_path, weights_only=True)
    spec = NetworkSpec(**payload["spec"])
    net = build_network(spec)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, spec


def predict(checkpoint_path, manifest_path, out_path, depth_dir=None):
    """Run the checkpointed network over a manifest and write the predictions
    JSON-lines the evaluator consumes.  Returns the output path."""
    net, spec = load_checkpoint(checkpoint_path)
    manifest = load_manifest(manifest_path)
    rows = []
    if manifest.samples:
        dataset = load_dataset(manifest, depth_dir)
        intr = dataset[0].intrinsics
        if (intr["height"], intr["width"]) != (spec.height, spec.width):
            raise ValueError(
                f"checkpoint expects {spec.height}x{spec.width} inputs, manifest "
                f"provides {intr['height']}x{intr['width']}"
            )
        with torch.no_grad():
            for start in range(0, len(dataset), 16):
                batch = dataset[start : start + 16]
                rgb, depth = stack_inputs(batch)
                r_pred, t_pred = net(rgb, depth)
                for j, st in enumerate(batch):
                    rows.append((st.sample_id, r_pred[j].tolist(), t_pred[j].tolist()))
    write_predictions(out_path, rows)
    return Path(out_path)
