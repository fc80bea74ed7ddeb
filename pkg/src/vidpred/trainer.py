"""Three-phase training.

1. generator only, reconstruction losses (MAE and, for *-VGG variants, perceptual);
2. discriminator only, generator frozen;
3. adversarial training, ``d_updates_per_g`` discriminator updates per generator update.

Non-adversarial variants (G-MAE, G-VGG) run phase 1 only. A run directory holds
``config.echo``, ``log.jsonl``, ``ckpt/<step>.bin`` and ``samples/<step>/*.png``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbones import make_backbone
from .config import TrainConfig
from .container import ContainerError, read_container, write_container
from .data import ClipSample, stack_clips
from .discriminator import Discriminator
from .generator import Generator
from .imaging import save_strip
from .losses import ObjectiveWeights, generator_objective, hinge_loss_d

logger = logging.getLogger(__name__)

CKPT_KIND = "vidpred-checkpoint"
CKPT_VERSION = 1

# reduction conventions behind the logged loss magnitudes
RUN_META = {
    "mae_reduction": "mean over elements",
    "perceptual_reduction": "channel sum of squared unit-vector differences, site mean, block sum",
    "adversarial_reduction": "mean over patch logits",
    "normalize_eps": 1e-10,
}


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ClipData:
    """In-memory clip tensors: inputs ``(N, 3, 8, H, W)``, targets ``(N, 3, n, H, W)``."""

    def __init__(self, inputs: torch.Tensor, targets: torch.Tensor, ids: Sequence[str] | None = None):
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs and targets disagree on sample count")
        if inputs.shape[0] == 0:
            raise ValueError("empty dataset")
        self.inputs = inputs
        self.targets = targets
        self.ids = list(ids) if ids is not None else [f"s{i:05d}" for i in range(len(inputs))]

    @classmethod
    def from_clips(cls, clips: Sequence[ClipSample]) -> "ClipData":
        x, y = stack_clips(clips)
        ids = [f"{c.input.source_id}:{c.input.start_index}" for c in clips]
        return cls(torch.from_numpy(x), torch.from_numpy(y), ids)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.inputs.shape[-2:])


@dataclass
class TrainState:
    cfg: TrainConfig
    G: Generator
    D: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    noise_rng: torch.Generator
    data_rng: np.random.Generator
    phase_steps: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})
    log: list[dict] = field(default_factory=list)
    backbone: torch.nn.Module | None = None
    run_dir: Path | None = None

    @property
    def global_step(self) -> int:
        return sum(self.phase_steps.values())


def init_state(cfg: TrainConfig, run_dir: str | Path | None = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    G = Generator(cfg.generator)
    D = Discriminator(cfg.discriminator)
    o = cfg.optimizer
    opt_g = torch.optim.Adam(G.parameters(), lr=o.lr_phase1_g, betas=(o.beta1, o.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=o.lr_phase2_d, betas=(o.beta1, o.beta2))
    noise_rng = torch.Generator().manual_seed(cfg.seed + 1)
    data_rng = np.random.default_rng(cfg.seed + 2)
    backbone = None
    if cfg.weights.perceptual > 0:
        backbone = make_backbone(cfg.backbone, cfg.backbone_weights, seed=cfg.seed if cfg.backbone != "stub" else 0)
    return TrainState(cfg, G, D, opt_g, opt_d, noise_rng, data_rng, backbone=backbone,
                      run_dir=Path(run_dir) if run_dir is not None else None)


def param_checksum(module: torch.nn.Module, buffers: bool = False) -> str:
    h = hashlib.sha256()
    items = module.state_dict().items() if buffers else module.named_parameters()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def next_batch(state: TrainState, data: ClipData) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample without replacement, then flip whole clips (input and target) with prob ``flip_p``."""
    o = state.cfg.optimizer
    n = len(data)
    idx = state.data_rng.choice(n, size=min(o.batch_size, n), replace=False)
    flip = state.data_rng.random(len(idx)) < o.flip_p
    x = data.inputs[idx].clone()
    y = data.targets[idx, :, :1].clone()
    if flip.any():
        f = torch.from_numpy(flip)
        x[f] = x[f].flip(-1)
        y[f] = y[f].flip(-1)
    return x, y[:, :, 0]


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _guard(state: TrainState, value: float, record: dict) -> None:
    if math.isfinite(value):
        return
    dump = {"record": record, "phase_steps": state.phase_steps, "recent_log": state.log[-20:]}
    if state.run_dir is not None:
        (state.run_dir / "divergence.json").write_text(json.dumps(dump, indent=1, default=str))
    raise DivergenceError(f"non-finite loss at phase steps {state.phase_steps}: {record}")


def _clip(params, max_norm):
    if max_norm:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _log(state: TrainState, rec: dict) -> None:
    state.log.append(rec)
    if state.run_dir is not None:
        with open(state.run_dir / "log.jsonl", "a") as fh:
            fh.write(json.dumps(rec) + "\n")


def generator_step(state: TrainState, data: ClipData, weights: ObjectiveWeights, phase: int) -> dict:
    G, D = state.G, state.D
    x, y = next_batch(state, data)
    G.train()
    pred = G(x, state.noise_rng)
    fake_logits = None
    if weights.adv > 0:
        D.train()
        D.requires_grad_(False)
        fake_logits = D(pred, x)
    lv = generator_objective(pred, y, fake_logits, weights, state.backbone)
    state.opt_g.zero_grad(set_to_none=True)
    lv.scalar.backward()
    D.requires_grad_(True)
    rec = {"phase": phase, "step": state.global_step + 1, "kind": "G", **lv.as_log(), "weights": lv.weights}
    _guard(state, rec["total"], rec)
    _clip(G.parameters(), state.cfg.optimizer.grad_clip)
    state.opt_g.step()
    return rec


def discriminator_step(state: TrainState, data: ClipData, phase: int, frozen_g: bool) -> dict:
    G, D = state.G, state.D
    x, y = next_batch(state, data)
    G.eval() if frozen_g else G.train()
    with torch.no_grad():
        fake = G(x, state.noise_rng)
    D.train()
    real_logits = D(y, x)
    fake_logits = D(fake, x)
    loss = hinge_loss_d(real_logits, fake_logits)
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    rec = {"phase": phase, "step": state.global_step + 1, "kind": "D", "hinge_d": float(loss.detach()),
           "total": float(loss.detach()), "real_mean": float(real_logits.detach().mean()),
           "fake_mean": float(fake_logits.detach().mean())}
    _guard(state, rec["total"], rec)
    _clip(D.parameters(), state.cfg.optimizer.grad_clip)
    state.opt_d.step()
    return rec


def train_phase1(state: TrainState, data: ClipData, n_steps: int | None = None) -> TrainState:
    """Generator-only reconstruction training (adversarial weight forced to 0)."""
    o = state.cfg.optimizer
    w = state.cfg.weights
    w = ObjectiveWeights(adv=0.0, mae=w.mae, perceptual=w.perceptual)
    target = state.cfg.schedule.phase1_steps if n_steps is None else state.phase_steps[1] + n_steps
    _set_lr(state.opt_g, o.lr_phase1_g)
    while state.phase_steps[1] < target:
        rec = generator_step(state, data, w, 1)
        state.phase_steps[1] += 1
        _log(state, rec)
        _maybe_snapshot(state, data)
    return state


def train_phase2(state: TrainState, data: ClipData, n_steps: int | None = None) -> TrainState:
    """Discriminator-only training against a frozen generator."""
    target = state.cfg.schedule.phase2_steps if n_steps is None else state.phase_steps[2] + n_steps
    _set_lr(state.opt_d, state.cfg.optimizer.lr_phase2_d)
    while state.phase_steps[2] < target:
        rec = discriminator_step(state, data, 2, frozen_g=True)
        state.phase_steps[2] += 1
        _log(state, rec)
        _maybe_snapshot(state, data)
    return state


def train_phase3(state: TrainState, data: ClipData, n_steps: int | None = None) -> TrainState:
    """Adversarial phase; ``n_steps`` counts generator updates.

    ``phase_steps[3]`` counts every update (D and G), so a G update happens
    whenever it reaches a multiple of ``d_updates_per_g + 1``.
    """
    o = state.cfg.optimizer
    cycle = o.d_updates_per_g + 1
    target = cycle * (state.cfg.schedule.phase3_steps if n_steps is None
                      else state.phase_steps[3] // cycle + n_steps)
    _set_lr(state.opt_g, o.lr_phase3_g)
    _set_lr(state.opt_d, o.lr_phase3_d)
    w = state.cfg.weights
    while state.phase_steps[3] < target:
        if state.phase_steps[3] % cycle < o.d_updates_per_g:
            rec = discriminator_step(state, data, 3, frozen_g=False)
        else:
            rec = generator_step(state, data, w, 3)
        state.phase_steps[3] += 1
        _log(state, rec)
        _maybe_snapshot(state, data)
    return state


PHASES = {1: train_phase1, 2: train_phase2, 3: train_phase3}


@torch.no_grad()
def recalibrate_bn(G: Generator, data: ClipData, batch_size: int = 8, max_batches: int = 64,
                   seed: int = 0) -> None:
    """Replace running BN statistics with exact averages over training batches.

    Running averages lag the weights when the learning rate is high; eval-mode
    predictions use these buffers, so they are re-estimated once training ends.
    """
    bns = [m for m in G.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = G.training
    G.train()
    rng = torch.Generator().manual_seed(seed)
    for a in range(0, min(len(data), batch_size * max_batches), batch_size):
        G(data.inputs[a:a + batch_size], rng)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    G.train(was_training)


def train(state: TrainState, data: ClipData) -> TrainState:
    """Run (or resume) every phase scheduled for the configured variant."""
    sched = state.cfg.schedule
    for p in sched.phases():
        logger.info("phase %d (%d steps scheduled, %d done)", p, sched.steps(p), state.phase_steps[p])
        if p == 2 and state.phase_steps[2] == 0:
            # the frozen generator runs in eval mode from here on
            recalibrate_bn(state.G, data, state.cfg.optimizer.batch_size, seed=state.cfg.seed)
        PHASES[p](state, data)
    recalibrate_bn(state.G, data, state.cfg.optimizer.batch_size, seed=state.cfg.seed)
    return state


def phase3_pattern(log: Sequence[dict]) -> str:
    return "".join(r["kind"] for r in log if r["phase"] == 3)


# ---------------------------------------------------------------------------
# Snapshots and checkpoints
# ---------------------------------------------------------------------------

def _maybe_snapshot(state: TrainState, data: ClipData) -> None:
    if state.run_dir is None:
        return
    step = state.global_step
    cfg = state.cfg
    if cfg.ckpt_every and step % cfg.ckpt_every == 0:
        checkpoint_save(state, state.run_dir / "ckpt" / f"{step}.bin")
    if cfg.sample_every and step % cfg.sample_every == 0:
        write_samples(state, data, state.run_dir / "samples" / str(step))


@torch.no_grad()
def write_samples(state: TrainState, data: ClipData, out_dir: Path, n: int = 4) -> None:
    G = state.G
    was_training = G.training
    G.eval()
    x = data.inputs[:n]
    pred = G(x, torch.Generator().manual_seed(state.cfg.seed))
    for i in range(x.shape[0]):
        save_strip(out_dir / f"{i}.png", [[x[i, :, -1], data.targets[i, :, 0], pred[i]]])
    G.train(was_training)


def _flatten_opt(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, {"param_groups": groups}


def _unflatten_opt(prefix: str, arrays: dict, meta: dict) -> dict:
    state: dict[int, dict] = {}
    for name, a in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, k = name.split("/", 2)
        state.setdefault(int(idx), {})[k] = torch.from_numpy(a.copy())
    groups = [dict(g, betas=tuple(g["betas"])) for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def checkpoint_save(state: TrainState, path: str | Path) -> Path:
    arrays = {}
    for sect, mod in (("generator", state.G), ("discriminator", state.D)):
        for k, v in mod.state_dict().items():
            arrays[f"{sect}/{k}"] = v.detach().cpu().numpy()
    og, og_meta = _flatten_opt("opt_g", state.opt_g)
    od, od_meta = _flatten_opt("opt_d", state.opt_d)
    arrays.update(og)
    arrays.update(od)
    arrays["rng/noise"] = state.noise_rng.get_state().numpy()
    meta = {
        "config": state.cfg.to_dict(),
        "phase_steps": {str(k): v for k, v in state.phase_steps.items()},
        "opt_g": og_meta,
        "opt_d": od_meta,
        "data_rng": state.data_rng.bit_generator.state,
        "log": state.log,
    }
    return write_container(path, arrays, kind=CKPT_KIND, version=CKPT_VERSION, meta=meta)


def _load_section(mod: torch.nn.Module, sect: str, arrays: dict) -> None:
    own = mod.state_dict()
    prefix = sect + "/"
    found = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    for name, t in own.items():
        if name not in found:
            raise CheckpointError(f"checkpoint lacks entry {prefix}{name}")
        if tuple(found[name].shape) != tuple(t.shape):
            raise CheckpointError(f"entry {prefix}{name}: checkpoint shape {tuple(found[name].shape)} "
                                  f"!= model shape {tuple(t.shape)}")
    extra = sorted(set(found) - set(own))
    if extra:
        raise CheckpointError(f"checkpoint entry {prefix}{extra[0]} has no counterpart in the model")
    mod.load_state_dict({k: torch.from_numpy(found[k].copy()) for k in own})


def checkpoint_load(path: str | Path, cfg: TrainConfig | None = None, run_dir: str | Path | None = None,
                    with_optim: bool = True) -> TrainState:
    """Rebuild a :class:`TrainState`; ``cfg`` (if given) must match the stored shapes."""
    try:
        arrays, meta = read_container(path, kind=CKPT_KIND, version=CKPT_VERSION)
    except ContainerError as exc:
        raise CheckpointError(str(exc)) from exc
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    state = init_state(cfg, run_dir)
    _load_section(state.G, "generator", arrays)
    _load_section(state.D, "discriminator", arrays)
    if with_optim:
        state.opt_g.load_state_dict(_unflatten_opt("opt_g", arrays, meta["opt_g"]))
        state.opt_d.load_state_dict(_unflatten_opt("opt_d", arrays, meta["opt_d"]))
    state.noise_rng.set_state(torch.from_numpy(arrays["rng/noise"].copy()))
    state.data_rng.bit_generator.state = meta["data_rng"]
    state.phase_steps = {int(k): v for k, v in meta["phase_steps"].items()}
    state.log = list(meta["log"])
    return state


def load_generator(path: str | Path) -> tuple[Generator, TrainConfig]:
    state = checkpoint_load(path, with_optim=False)
    state.G.eval()
    return state.G, state.cfg


def start_run(cfg: TrainConfig, run_dir: str | Path) -> TrainState:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(cfg.dumps())
    (run_dir / "log.jsonl").write_text("")
    (run_dir / "run_meta.json").write_text(json.dumps(RUN_META, indent=2, sort_keys=True))
    return init_state(cfg, run_dir)
