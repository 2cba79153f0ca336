"""Training stages: supervised source training, adversarial adaptation, GRL baseline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .. import config as cfgmod
from ..data.io import GazeDataset, endless_batches
from ..errors import ConfigurationError, IngestionError, TrainingDivergedError
from ..nets import (FeatureSelection, GazeRegressor, ImportanceVector, assemble_feature_stack,
                    build_discriminator, init_target_from_source)
from ..objectives import (WGAN_CLIP, WGAN_N_CRITIC, angular_error_degrees, clip_critic_weights,
                          critic_loss_wgan, discriminator_loss_gan, grl_combined_step,
                          mapper_loss_gan, mapper_loss_wgan, regression_loss)
from .checkpoint import Checkpoint, module_tensors, save_checkpoint, tensor_digest

log = logging.getLogger(__name__)

STAGES = ("source", "adapt", "grl-baseline")
_STAGE_DEFAULTS = {
    "source": {"lr": 1e-3, "batch_size": 512},
    "adapt": {"lr": 1e-4, "batch_size": 64},
    "grl-baseline": {"lr": 1e-3, "batch_size": 512},
}
EVAL_CHUNK = 256


@dataclass(frozen=True)
class StageConfig:
    stage: str = "source"
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int | None = None
    max_iterations: int = 1000
    val_stop_threshold: float = 0.0
    val_every: int = 100
    val_limit: int = 0
    selection: str = "C3C5"
    adversarial_mode: str = "gan"
    n_critic: int = WGAN_N_CRITIC
    clip_value: float = WGAN_CLIP
    grl_lambda: float = 1.0
    grl_warmup_frac: float = 0.2
    divergence_patience: int = 200
    heldout_size: int = 256
    heldout_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        defaults = _STAGE_DEFAULTS[self.stage]
        if self.lr is None:
            object.__setattr__(self, "lr", defaults["lr"])
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", defaults["batch_size"])
        if self.adversarial_mode not in ("gan", "wgan"):
            raise ConfigurationError(f"unknown adversarial mode {self.adversarial_mode!r}")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_iterations >= 0")
        FeatureSelection.parse(self.selection)

    @property
    def feature_selection(self) -> FeatureSelection:
        return FeatureSelection.parse(self.selection)

    @classmethod
    def from_strings(cls, stage: str, values: dict[str, str]) -> "StageConfig":
        schema = {f.name: _FIELD_TYPES[f.name] for f in fields(cls) if f.name != "stage"}
        typed = cfgmod.coerce(values, schema, {})
        return cls(stage=stage, **typed)

    def snapshot(self) -> dict[str, str]:
        return {k: cfgmod._fmt(v) for k, v in asdict(self).items()}

    def hash(self) -> str:
        return cfgmod.config_hash(self.snapshot())


_FIELD_TYPES = {
    "lr": float, "beta1": float, "beta2": float, "batch_size": int, "max_iterations": int,
    "val_stop_threshold": float, "val_every": int, "val_limit": int, "selection": str,
    "adversarial_mode": str, "n_critic": int, "clip_value": float, "grl_lambda": float,
    "grl_warmup_frac": float, "divergence_patience": int, "heldout_size": int,
    "heldout_every": int, "seed": int,
}


def make_adam(params, cfg: StageConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), fused=True)


def write_csv(path, rows: list[dict], columns=None) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_val(r.get(k)) for k in columns})


def _csv_val(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def _to_tensor(a) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


@torch.no_grad()
def predict(regressor: GazeRegressor, images, chunk: int = EVAL_CHUNK) -> np.ndarray:
    was_training = regressor.training
    regressor.eval()
    out = [regressor(_to_tensor(images[i:i + chunk])).numpy() for i in range(0, len(images), chunk)]
    regressor.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 3), np.float32)


def mean_angular_error(regressor, data: GazeDataset, limit: int = 0) -> float:
    n = len(data) if limit <= 0 else min(limit, len(data))
    return float(angular_error_degrees(predict(regressor, data.images[:n]), data.gazes[:n]).mean())


def regressor_from_checkpoint(ckpt: Checkpoint, prefix: str | None = None, share: bool = False,
                              override: dict | None = None) -> GazeRegressor:
    """Rebuild a regressor from ``ckpt``.

    ``share=True`` aliases the checkpoint tensors instead of copying them; only
    safe for a network that is never updated. ``override`` replaces entries of
    the loaded state (used to splice layers from another checkpoint).
    """
    prefix = prefix or ("regressor" if ckpt.has("regressor") else "target")
    state = ckpt.group(prefix)
    if not state:
        raise ConfigurationError(f"checkpoint has no '{prefix}' tensors")
    state.update(override or {})
    if not share:
        state = {k: v.clone() for k, v in state.items()}
    padding = int(ckpt.meta.get("extra", {}).get("padding", 0))
    # built on the meta device: no init work, no RNG draws, no throwaway weights
    with torch.device("meta"):
        net = GazeRegressor(padding=padding)
    net.load_state_dict(state, assign=True)
    return net


def _rng_tensor() -> dict[str, torch.Tensor]:
    return {"rng.torch": torch.get_rng_state().clone()}


def _source_checkpoint(net, cfg: StageConfig, stage: str, extra: dict) -> Checkpoint:
    tensors = {**module_tensors("regressor", net), **_rng_tensor()}
    meta = {"stage": stage, "arch_fingerprint": net.fingerprint(), "config_hash": cfg.hash(),
            "config": cfg.snapshot(), "frozen": bool(net.frozen),
            "extra": {"padding": net.padding, **extra}}
    return Checkpoint(tensors, meta)


def _abort(net, cfg, stage, iteration, loss, run_dir, extra):
    ckpt = _source_checkpoint(net, cfg, f"{stage}-diverged",
                              {**extra, "diverged_at": iteration, "loss": repr(loss)})
    path = save_checkpoint(ckpt, Path(run_dir) / "diverged.safetensors") if run_dir else None
    raise TrainingDivergedError(f"non-finite loss {loss} at iteration {iteration}", ckpt, path)


# -- stage 1 ---------------------------------------------------------------------

@dataclass
class SourceResult:
    checkpoint: Checkpoint
    loss_trace: list[dict]
    val_curve: list[dict]
    stopped_early: bool
    seconds: float


def train_source(cfg: StageConfig, train: GazeDataset, val: GazeDataset | None = None,
                 run_dir=None) -> SourceResult:
    """Minimise the mean Euclidean distance between unit gaze vectors on labelled source data.

    Stops after ``max_iterations`` or as soon as a validation check reports a
    mean angular error at or below ``val_stop_threshold`` degrees.
    """
    if not train.labeled:
        raise IngestionError("source training data must be labelled")
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    net = GazeRegressor()
    opt = make_adam(net.parameters(), cfg)
    batches = endless_batches(train, cfg.batch_size, cfg.seed)
    losses, curve, stopped = [], [], False
    net.train()
    for it in range(1, cfg.max_iterations + 1):
        b = next(batches)
        opt.zero_grad(set_to_none=True)
        loss = regression_loss(net(_to_tensor(b.images)), _to_tensor(b.gazes))
        value = loss.item()
        if not math.isfinite(value):
            _abort(net, cfg, "source", it, value, run_dir, {"val_curve": curve})
        loss.value.backward()
        opt.step()
        losses.append({"iteration": it, "loss": value})
        if val is not None and cfg.val_every > 0 and (it % cfg.val_every == 0 or it == cfg.max_iterations):
            err = mean_angular_error(net, val, cfg.val_limit)
            curve.append({"iteration": it, "val_mean_error_deg": err})
            log.info("source it=%d loss=%.4f val=%.3f deg", it, value, err)
            if cfg.val_stop_threshold > 0 and err <= cfg.val_stop_threshold:
                stopped = True
                break
    ckpt = _source_checkpoint(net, cfg, "source", {"val_curve": curve, "iterations": len(losses)})
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(ckpt, run_dir / "source.safetensors")
        write_csv(run_dir / "source_trace.csv", losses, ["iteration", "loss"])
        write_csv(run_dir / "val_curve.csv", curve, ["iteration", "val_mean_error_deg"])
    return SourceResult(ckpt, losses, curve, stopped, time.perf_counter() - t0)


# -- stage 2 ---------------------------------------------------------------------

@dataclass
class AdaptResult:
    checkpoint: Checkpoint
    trace: list[dict]
    heldout_trace: list[dict]
    warnings: list[str] = field(default_factory=list)
    source_digest_before: str = ""
    source_digest_after: str = ""
    seconds: float = 0.0

    @property
    def importance(self) -> list[float]:
        return self.checkpoint.tensors["importance.values"].tolist()


def _stack(net, images, selection, importance=None, grad=True):
    x = _to_tensor(images)
    if grad:
        return assemble_feature_stack(net.features(x), selection, importance)
    with torch.no_grad():
        return assemble_feature_stack(net.features(x), selection, importance)


@torch.no_grad()
def heldout_domain_accuracy(disc, source_net, target_net, importance, selection,
                            src_images, tgt_images, chunk: int = 128) -> float:
    """Balanced accuracy of the discriminator (dropout off) on held-out samples.

    GAN scores are thresholded at 1/2; WGAN critic scores at the midpoint of
    the two class means.
    """
    was = disc.training
    disc.eval()
    s = torch.cat([disc(_stack(source_net, src_images[i:i + chunk], selection, grad=False))
                   for i in range(0, len(src_images), chunk)])
    t = torch.cat([disc(_stack(target_net, tgt_images[i:i + chunk], selection, importance, grad=False))
                   for i in range(0, len(tgt_images), chunk)])
    disc.train(was)
    thr = 0.5 if disc.mode == "gan" else float((s.mean() + t.mean()) / 2)
    return 0.5 * float((s > thr).float().mean() + (t <= thr).float().mean())


def _batch_accuracy(d_s, d_t, mode) -> float:
    thr = 0.5 if mode == "gan" else float((d_s.mean() + d_t.mean()) / 2)
    return 0.5 * float((d_s > thr).float().mean() + (d_t <= thr).float().mean())


def adapt_target(source_ckpt: Checkpoint, cfg: StageConfig, source: GazeDataset,
                 target: GazeDataset, run_dir=None, heldout_source: GazeDataset | None = None,
                 heldout_target: GazeDataset | None = None) -> AdaptResult:
    """Align target features with the frozen source network's features.

    Alternates a discriminator (critic) update with a mapper update of the
    target feature block and the importance vector. Target gaze labels, if
    any, are never read. Held-out accuracy is measured on samples excluded
    from the training batches.
    """
    t0 = time.perf_counter()
    sel = cfg.feature_selection
    src_net = regressor_from_checkpoint(source_ckpt, share=True)
    tgt_net = init_target_from_source(src_net)
    digest_before = tensor_digest(src_net.state_dict())

    source = source.unlabeled()
    target = target.unlabeled()
    if heldout_source is None and cfg.heldout_size > 0:
        h = min(cfg.heldout_size, len(source) // 4)
        heldout_source, source = source.subset(range(len(source) - h, len(source))), source.subset(range(len(source) - h))
    if heldout_target is None and cfg.heldout_size > 0:
        h = min(cfg.heldout_size, len(target) // 4)
        heldout_target, target = target.subset(range(len(target) - h, len(target))), target.subset(range(len(target) - h))

    torch.manual_seed(cfg.seed)
    disc = build_discriminator(sel, cfg.adversarial_mode)
    importance = ImportanceVector(sel.k)
    opt_d = make_adam(disc.parameters(), cfg)
    opt_f = make_adam(tgt_net.feature_parameters() + list(importance.parameters()), cfg)
    src_batches = endless_batches(source, cfg.batch_size, cfg.seed)
    tgt_batches = endless_batches(target, cfg.batch_size, cfg.seed + 1)
    wgan = cfg.adversarial_mode == "wgan"
    n_critic = cfg.n_critic if wgan else 1
    every = cfg.heldout_every or max(1, cfg.max_iterations // 50)

    trace, heldout, warns = [], [], []
    streak = 0
    tgt_net.train()
    disc.train()

    def measure(it):
        if heldout_source is None or heldout_target is None:
            return
        acc = heldout_domain_accuracy(disc, src_net, tgt_net, importance, sel,
                                      heldout_source.images, heldout_target.images)
        heldout.append({"iteration": it, "heldout_domain_acc": acc})
        log.info("adapt it=%d heldout_domain_acc=%.3f", it, acc)

    for it in range(1, cfg.max_iterations + 1):
        for _ in range(n_critic):
            xs, xt = next(src_batches).images, next(tgt_batches).images
            stack_s = _stack(src_net, xs, sel, grad=False)
            stack_t = _stack(tgt_net, xt, sel, importance)
            opt_d.zero_grad(set_to_none=True)
            d_s, d_t = disc(stack_s), disc(stack_t.data.detach())
            loss_d = (critic_loss_wgan if wgan else discriminator_loss_gan)(d_s, d_t)
            loss_d.value.backward()
            opt_d.step()
            if wgan:
                clip_critic_weights(disc, cfg.clip_value)
        if wgan:
            stack_t = _stack(tgt_net, next(tgt_batches).images, sel, importance)
        # mapper step sees the freshly updated discriminator
        opt_f.zero_grad(set_to_none=True)
        d_t2 = disc(stack_t)
        loss_f = (mapper_loss_wgan if wgan else mapper_loss_gan)(d_t2)
        ld, lf = loss_d.item(), loss_f.item()
        if not (math.isfinite(ld) and math.isfinite(lf)):
            _abort(tgt_net, cfg, "adapt", it, (ld, lf), run_dir, {})
        loss_f.value.backward()
        opt_f.step()

        acc = _batch_accuracy(d_s.detach(), d_t.detach(), disc.mode)
        streak = streak + 1 if acc >= 1.0 else 0
        if streak == cfg.divergence_patience:
            msg = (f"discriminator accuracy pinned at 1.0 for {streak} iterations "
                   f"(iteration {it}); adaptation may be diverging")
            warns.append(msg)
            log.warning(msg)
        row = {"iteration": it, "d_loss": ld, "f_loss": lf, "d_acc": acc}
        row.update({f"importance_{n}": float(v) for n, v in zip(sel.all_taps, importance.values.detach())})
        trace.append(row)
        if it % every == 0 or it == cfg.max_iterations:
            measure(it)

    digest_after = tensor_digest(src_net.state_dict())
    if digest_after != digest_before:
        raise RuntimeError("frozen source network changed during adaptation")

    tgt_net.eval()
    del opt_f, opt_d  # release optimiser moments before the checkpoint is assembled
    tensors = {**module_tensors("target", tgt_net, copy=False), **module_tensors("discriminator", disc),
               "importance.values": importance.values.detach().clone(), **_rng_tensor()}
    meta = {"stage": "adapt", "arch_fingerprint": tgt_net.fingerprint(), "config_hash": cfg.hash(),
            "config": cfg.snapshot(), "frozen": False,
            "extra": {"padding": tgt_net.padding, "selection": sel.name, "taps": list(sel.all_taps),
                      "adversarial_mode": cfg.adversarial_mode,
                      "source_fingerprint": source_ckpt.fingerprint,
                      "source_digest": digest_before, "iterations": cfg.max_iterations,
                      "importance": [float(v) for v in importance.values.detach()],
                      "warnings": warns}}
    ckpt = Checkpoint(tensors, meta)
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(ckpt, run_dir / "target.safetensors")
        write_csv(run_dir / "adapt_trace.csv", trace)
        write_csv(run_dir / "heldout_trace.csv", heldout, ["iteration", "heldout_domain_acc"])
    return AdaptResult(ckpt, trace, heldout, warns, digest_before, digest_after,
                       time.perf_counter() - t0)


# -- gradient-reversal baseline ---------------------------------------------------

@dataclass
class GRLResult:
    checkpoint: Checkpoint
    trace: list[dict]
    val_curve: list[dict]
    seconds: float


def train_grl(cfg: StageConfig, source: GazeDataset, target: GazeDataset,
              val: GazeDataset | None = None, run_dir=None) -> GRLResult:
    """Simultaneous source regression and domain confusion through gradient reversal.

    The reversal weight is 0 for the first ``grl_warmup_frac`` of iterations
    and ``grl_lambda`` afterwards. Batch order and initialisation match
    :func:`train_source` for the same seed.
    """
    if not source.labeled:
        raise IngestionError("source training data must be labelled")
    t0 = time.perf_counter()
    sel = cfg.feature_selection
    torch.manual_seed(cfg.seed)
    net = GazeRegressor()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        disc = build_discriminator(sel, cfg.adversarial_mode)
    reg_opt = make_adam(net.parameters(), cfg)
    disc_opt = make_adam(disc.parameters(), cfg)
    src_batches = endless_batches(source, cfg.batch_size, cfg.seed)
    tgt_batches = endless_batches(target.unlabeled(), cfg.batch_size, cfg.seed + 1)
    warmup = int(round(cfg.grl_warmup_frac * cfg.max_iterations))
    trace, curve = [], []
    net.train()
    disc.train()
    for it in range(1, cfg.max_iterations + 1):
        b, xt = next(src_batches), next(tgt_batches).images
        lam = 0.0 if it <= warmup else cfg.grl_lambda
        reg, dom = grl_combined_step(net, disc, reg_opt, disc_opt, sel,
                                     (_to_tensor(b.images), _to_tensor(b.gazes)), _to_tensor(xt), lam)
        r, d = reg.item(), dom.item()
        if not (math.isfinite(r) and math.isfinite(d)):
            _abort(net, cfg, "grl-baseline", it, (r, d), run_dir, {"val_curve": curve})
        trace.append({"iteration": it, "lambda": lam, "reg_loss": r, "domain_loss": d})
        if val is not None and cfg.val_every > 0 and (it % cfg.val_every == 0 or it == cfg.max_iterations):
            curve.append({"iteration": it, "val_mean_error_deg": mean_angular_error(net, val, cfg.val_limit)})
    net.eval()
    tensors = {**module_tensors("target", net, copy=False), **module_tensors("discriminator", disc),
               **_rng_tensor()}
    meta = {"stage": "grl-baseline", "arch_fingerprint": net.fingerprint(), "config_hash": cfg.hash(),
            "config": cfg.snapshot(), "frozen": False,
            "extra": {"padding": net.padding, "selection": sel.name, "warmup": warmup,
                      "val_curve": curve}}
    ckpt = Checkpoint(tensors, meta)
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(ckpt, run_dir / "grl.safetensors")
        write_csv(run_dir / "grl_trace.csv", trace, ["iteration", "lambda", "reg_loss", "domain_loss"])
    return GRLResult(ckpt, trace, curve, time.perf_counter() - t0)
