"""Training loop: view pairs, padded batch encoding, AdamW, checkpoints.

Each optimizer step samples a mini-batch of bags (seeded per-epoch shuffle,
last partial batch dropped), generates a view pair per bag, encodes both
views in one padded forward pass, applies the objective, and backpropagates
through the whole pipeline by hand.  Every random draw is derived from
(seed, purpose, epoch, position), never from mutable generator state, so a
resumed run replays the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ops
from .bagstore import Dataset
from .checkpoint import Checkpoint, save_checkpoint
from .encoder import Heads, SlideEncoder
from .errors import ConfigError, TrainingError
from .objectives import (ObjectiveConfig, byol_loss, nt_xent, supcon, vicreg)
from .optim import AdamWState, adamw_init, adamw_step, ema_update, lr_at
from .posembed import PositionalEmbedding
from .rng import RandomSource
from .transforms import TransformConfig, make_view_pair

__all__ = [
    "ModelConfig", "TrainConfig", "SlideModel", "fit",
    "grad_check", "GradCheckReport", "GRADCHECK_COMPONENTS", "pad_views",
]


@dataclass
class ModelConfig:
    """Architecture hyperparameters of encoder, positional embedding, heads."""

    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 4
    ffn_mult: int = 4
    d_proj: int = 64
    fourier_dim: int = 64
    pos_hidden: int | None = None  # None -> 2 * d_model
    freq_init_std: float = 2.0**-0.5

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.fourier_dim % 2 != 0:
            raise ConfigError("model.fourier_dim must be even")
        for key in ("d_model", "n_layers", "n_heads", "ffn_mult", "d_proj", "fourier_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key} must be positive")


@dataclass
class TrainConfig:
    """Everything a training run depends on, seeds included."""

    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    batch_size: int = 64
    epochs: int = 100
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only

    def validate(self) -> None:
        self.model.validate()
        self.objective.validate()
        self.transform.validate()
        if self.batch_size < 2:
            raise ConfigError("optim.batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("optim.epochs must be nonnegative")
        if not self.lr_max >= self.lr_min > 0:
            raise ConfigError("optim.lr_min must satisfy lr_max >= lr_min > 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("optim.warmup_frac must lie in [0, 1)")

    def snapshot(self) -> dict:
        blob = asdict(self)
        blob["transform"]["crop_area_range"] = list(self.transform.crop_area_range)
        blob["transform"]["crop_aspect_range"] = list(self.transform.crop_aspect_range)
        blob["transform"]["mask_ratio_range"] = list(self.transform.mask_ratio_range)
        return blob


class SlideModel:
    """Encoder + positional embedding + heads behind one flat parameter dict.

    Parameter names carry the component prefix ("enc.", "pos.", "head."), so
    one optimizer state covers the whole pipeline.
    """

    def __init__(self, d_in: int, model_cfg: ModelConfig, objective: str):
        model_cfg.validate()
        self.d_in = d_in
        self.cfg = model_cfg
        self.objective = objective
        self.encoder = SlideEncoder(d_in, model_cfg.d_model, model_cfg.n_layers,
                                    model_cfg.n_heads, model_cfg.ffn_mult)
        self.pos_embed = PositionalEmbedding(model_cfg.d_model, model_cfg.fourier_dim,
                                             model_cfg.pos_hidden, model_cfg.freq_init_std)
        self.heads = Heads(model_cfg.d_model, model_cfg.d_proj, objective)

    @classmethod
    def from_arch(cls, arch: dict) -> "SlideModel":
        cfg = ModelConfig(
            d_model=arch["d_model"], n_layers=arch["n_layers"], n_heads=arch["n_heads"],
            ffn_mult=arch["ffn_mult"], d_proj=arch["d_proj"], fourier_dim=arch["fourier_dim"],
            pos_hidden=arch.get("pos_hidden"), freq_init_std=arch.get("freq_init_std", 2.0**-0.5),
        )
        return cls(arch["d_in"], cfg, arch["objective"])

    def arch_dict(self) -> dict:
        return {
            "d_in": self.d_in, "objective": self.objective,
            **{k: getattr(self.cfg, k) for k in (
                "d_model", "n_layers", "n_heads", "ffn_mult", "d_proj",
                "fourier_dim", "pos_hidden", "freq_init_std")},
        }

    def init_params(self, rng: RandomSource) -> dict[str, np.ndarray]:
        params = {}
        params.update(_prefixed("enc.", self.encoder.init_params(rng)))
        params.update(_prefixed("pos.", self.pos_embed.init_params(rng)))
        params.update(_prefixed("head.", self.heads.init_params(rng)))
        return params

    def encode_batch(self, params: dict[str, np.ndarray], x: np.ndarray, coords: np.ndarray,
                     key_mask: np.ndarray | None, record_full: bool = False):
        """Full forward over a padded batch; returns (h, record, cache)."""
        pos_vec, pos_cache = self.pos_embed.forward(_sub("pos.", params), coords)
        h, record, enc_cache = self.encoder.forward(_sub("enc.", params), x, pos_vec,
                                                    key_mask, record_full)
        return h, record, (pos_cache, enc_cache)

    def encode_batch_bwd(self, params: dict[str, np.ndarray], cache, dh: np.ndarray):
        pos_cache, enc_cache = cache
        enc_grads, _, dpos = self.encoder.backward(_sub("enc.", params), enc_cache, dh)
        pos_grads = self.pos_embed.backward(_sub("pos.", params), pos_cache, dpos)
        return {**_prefixed("enc.", enc_grads), **_prefixed("pos.", pos_grads)}


def _sub(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _prefixed(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in params.items()}


def pad_views(views) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-length views into (x, coords, key_mask) padded arrays."""
    width = views[0].bag.d
    longest = max(len(v) for v in views)
    x = np.zeros((len(views), longest, width))
    coords = np.zeros((len(views), longest, 2), dtype=np.int64)
    key_mask = np.zeros((len(views), longest), dtype=bool)
    for i, view in enumerate(views):
        k = len(view)
        x[i, :k] = view.embeddings
        coords[i, :k] = view.coords
        key_mask[i, :k] = True
    return x, coords, key_mask


def _byol_target_keys(params: dict[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.startswith("head.pred.")]


def fit(train: Dataset, cfg: TrainConfig, out_dir=None, start: Checkpoint | None = None):
    """Train a slide encoder on a dataset; returns (Checkpoint, metrics).

    Deterministic for a fixed seed: two identical invocations produce
    bitwise-identical checkpoints, and resuming from a saved checkpoint
    replays the uninterrupted trajectory exactly.
    """
    cfg.validate()
    if len(train) == 0:
        raise ConfigError("training dataset is empty")
    objective = cfg.objective.name
    if objective == "supcon" and any(b.label is None for b in train.bags):
        raise ConfigError("objective.name=supcon requires labels on every training bag")

    model = SlideModel(train.d, cfg.model, objective)
    rng = RandomSource(cfg.seed)
    n_bags = len(train)
    steps_per_epoch = n_bags // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(
            f"optim.batch_size={cfg.batch_size} exceeds the {n_bags}-bag training set")
    total_steps = cfg.epochs * steps_per_epoch

    if start is not None:
        if start.arch != model.arch_dict():
            raise ConfigError("checkpoint architecture does not match the configured model")
        params = {k: v.copy() for k, v in start.params.items()}
        state = AdamWState(m={k: v.copy() for k, v in start.opt_m.items()},
                           v={k: v.copy() for k, v in start.opt_v.items()},
                           step=start.step)
        target = None
        if start.target_params is not None:
            target = {k: v.copy() for k, v in start.target_params.items()}
        first_step = start.step
    else:
        params = model.init_params(rng.child("init"))
        state = adamw_init(params)
        target = None
        if objective == "byol":
            target = {k: params[k].copy() for k in _byol_target_keys(params)}
        first_step = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if start is not None else "w"
        metrics_fh = open(out_dir / "metrics.ndjson", mode)

    def build_checkpoint(step: int) -> Checkpoint:
        return Checkpoint(
            step=step, objective=objective, arch=model.arch_dict(), config=cfg.snapshot(),
            params={k: v.copy() for k, v in params.items()},
            opt_m={k: v.copy() for k, v in state.m.items()},
            opt_v={k: v.copy() for k, v in state.v.items()},
            target_params=None if target is None else {k: v.copy() for k, v in target.items()},
        )

    metrics: list[dict] = []
    try:
        for step in range(first_step, total_steps):
            epoch, slot = divmod(step, steps_per_epoch)
            order = rng.child("shuffle", epoch).permutation(n_bags)
            batch_ids = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
            bags = [train.bags[i] for i in batch_ids]

            views = []
            for j, bag in enumerate(bags):
                v1, v2 = make_view_pair(bag, cfg.transform,
                                        rng.child("view", epoch, slot * cfg.batch_size + j))
                views.append((v1, v2))
            flat = [pair[0] for pair in views] + [pair[1] for pair in views]
            x, coords, key_mask = pad_views(flat)

            h, _, cache = model.encode_batch(params, x, coords, key_mask)
            z, p, head_cache = model.heads.forward(_sub("head.", params), h)
            b = len(bags)

            if objective == "simclr":
                loss, dz1, dz2 = nt_xent(z[:b], z[b:], cfg.objective.temperature)
                dz, dp = np.concatenate([dz1, dz2]), None
            elif objective == "vicreg":
                loss, dz1, dz2 = vicreg(
                    z[:b], z[b:], cfg.objective.vicreg_invariance, cfg.objective.vicreg_variance,
                    cfg.objective.vicreg_covariance, cfg.objective.vicreg_gamma,
                    cfg.objective.vicreg_eps)
                dz, dp = np.concatenate([dz1, dz2]), None
            elif objective == "supcon":
                labels = np.array([bag.label for bag in bags])
                loss, dz1, dz2 = supcon(z[:b], z[b:], labels, cfg.objective.temperature)
                dz, dp = np.concatenate([dz1, dz2]), None
            else:  # byol: regress each prediction onto the other view's target
                t_h, _, _ = model.encode_batch(target, x, coords, key_mask)
                t_z = model.heads.project(_sub("head.", target), t_h)
                loss1, dp1 = byol_loss(p[:b], t_z[b:])
                loss2, dp2 = byol_loss(p[b:], t_z[:b])
                loss = 0.5 * (loss1 + loss2)
                dz, dp = None, 0.5 * np.concatenate([dp1, dp2])

            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {step}", step=step)

            head_grads, dh = model.heads.backward(_sub("head.", params), head_cache, dz, dp)
            grads = model.encode_batch_bwd(params, cache, dh)
            grads.update(_prefixed("head.", head_grads))

            lr = lr_at(step, total_steps, cfg.warmup_frac, cfg.lr_max, cfg.lr_min)
            adamw_step(params, grads, state, lr, cfg.beta1, cfg.beta2,
                       cfg.adam_eps, cfg.weight_decay)
            if target is not None:
                ema_update(target, {k: params[k] for k in target}, cfg.objective.byol_momentum)

            entry = {"step": step + 1, "lr": lr, "loss": float(loss)}
            metrics.append(entry)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(entry) + "\n")

            done = step + 1
            if cfg.checkpoint_every > 0 and out_dir is not None and done % cfg.checkpoint_every == 0:
                save_checkpoint(build_checkpoint(done), out_dir / f"checkpoint-{done:06d}.ckpt")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = build_checkpoint(max(total_steps, first_step))
    if out_dir is not None:
        save_checkpoint(final, out_dir / "checkpoint.ckpt")
    return final, metrics


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

GRADCHECK_COMPONENTS = ("posembed", "encoder", "heads", "objectives")
GRADCHECK_THRESHOLD = 1e-4


@dataclass
class GradCheckReport:
    component: str
    entries: dict[str, float]
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def max_error(self) -> float:
        return max(self.entries.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    def lines(self) -> list[str]:
        out = [f"[{self.component}]"]
        for name in sorted(self.entries):
            out.append(f"  {name:34s} rel err {self.entries[name]:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"  max {self.max_error:.3e} (threshold {self.threshold:.0e}) {verdict}")
        return out


def grad_check(component: str, seed: int = 0) -> GradCheckReport:
    """Analytic gradients vs central finite differences for one component.

    Checks every parameter tensor (or every loss input for the objectives) of
    a small instance; reports per-tensor max relative error.
    """
    rng = RandomSource(seed).child("gradcheck", component)
    entries: dict[str, float] = {}

    if component == "posembed":
        pe = PositionalEmbedding(d_model=6, fourier_dim=8, hidden=10)
        params = pe.init_params(rng)
        coords = rng.child("coords").integers(0, 13, size=(5, 2))
        probe = rng.child("probe").normal((5, 6))

        def loss_fn(p):
            out, _ = pe.forward(p, coords)
            return float((out * probe).sum())

        out, cache = pe.forward(params, coords)
        analytic = pe.backward(params, cache, probe)
        entries = ops.max_relative_error(analytic, ops.fd_gradients(loss_fn, params))

    elif component == "encoder":
        enc = SlideEncoder(d_in=4, d_model=8, n_layers=2, n_heads=2, ffn_mult=2)
        params = enc.init_params(rng, std=0.1)
        x = rng.child("x").normal((1, 3, 4))
        pos = rng.child("pos").normal((1, 3, 8), std=0.1)
        probe = rng.child("probe").normal((1, 8))

        def loss_fn(p):
            h, _, _ = enc.forward(p, x, pos)
            return float((h * probe).sum())

        h, _, cache = enc.forward(params, x, pos)
        analytic, _, _ = enc.backward(params, cache, probe)
        entries = ops.max_relative_error(analytic, ops.fd_gradients(loss_fn, params))

    elif component == "heads":
        for kind in ("simclr", "byol"):
            heads = Heads(d_model=8, d_proj=5, objective=kind)
            params = heads.init_params(rng.child(kind), std=0.1)
            h = rng.child(kind, "h").normal((4, 8))
            probe_z = rng.child(kind, "pz").normal((4, 5))
            probe_p = rng.child(kind, "pp").normal((4, 5))

            def loss_fn(p):
                z, pr, _ = heads.forward(p, h)
                total = float((z * probe_z).sum())
                if pr is not None:
                    total += float((pr * probe_p).sum())
                return total

            z, pr, cache = heads.forward(params, h)
            analytic, _ = heads.backward(params, cache, probe_z,
                                         probe_p if pr is not None else None)
            errs = ops.max_relative_error(analytic, ops.fd_gradients(loss_fn, params))
            entries.update({f"{kind}.{k}": v for k, v in errs.items()})

    elif component == "objectives":
        z1 = rng.child("z1").normal((4, 8))
        z2 = rng.child("z2").normal((4, 8))
        labels = np.array([0, 1, 0, 2])

        cases = {
            "nt_xent": (lambda a: nt_xent(a["z1"], a["z2"], 0.5)[0],
                        lambda a: dict(zip(("z1", "z2"), nt_xent(a["z1"], a["z2"], 0.5)[1:]))),
            "vicreg": (lambda a: vicreg(a["z1"], a["z2"])[0],
                       lambda a: dict(zip(("z1", "z2"), vicreg(a["z1"], a["z2"])[1:]))),
            "supcon": (lambda a: supcon(a["z1"], a["z2"], labels, 0.5)[0],
                       lambda a: dict(zip(("z1", "z2"), supcon(a["z1"], a["z2"], labels, 0.5)[1:]))),
            "byol": (lambda a: byol_loss(a["p"], z2)[0],
                     lambda a: {"p": byol_loss(a["p"], z2)[1]}),
        }
        for name, (loss_fn, grad_fn) in cases.items():
            arrays = {"p": z1.copy()} if name == "byol" else {"z1": z1.copy(), "z2": z2.copy()}
            analytic = grad_fn(arrays)
            numeric = ops.fd_gradients(lambda a: float(loss_fn(a)), arrays)
            errs = ops.max_relative_error(analytic, numeric)
            entries.update({f"{name}.{k}": v for k, v in errs.items()})
    else:
        raise ConfigError(f"unknown gradcheck component {component!r}; "
                          f"choose from {GRADCHECK_COMPONENTS}")

    return GradCheckReport(component=component, entries=entries)
