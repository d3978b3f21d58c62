"""Imitation objective, alignment losses, staged finetuning, checkpoints.

Training follows the finetune-from-a-trained-base recipe: a base agent is
first trained with a flat learning rate and no imaginations; imagination
conditions then finetune from that checkpoint under the three-stage schedule
(stage 1 trains only the imagination encoder and type embedding with the base
frozen, stage 2 unfreezes the base at a much lower rate, stage 3 trains
everything at a common low rate). Stage learning rates keep the published
ratios and are scaled by a global multiplier for desk-scale convergence.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import agent as ag
from . import evaluation as ev
from . import numcore as nc
from .errors import ConfigurationError, ContractError, FormatError, TrainingDiverged

CHECKPOINT_MAGIC = b"IMNAV"
CHECKPOINT_VERSION = 1

IMAGINATION_GROUPS = ("imagination_encoder", "type_embedding")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 8
    lam: float = 0.5                  # weight on the cosine alignment loss
    aux_loss: str = "cosine"          # cosine | infonce | none
    infonce_lam: float = 0.2
    tau: float = 0.1
    stage_fractions: tuple = (0.25, 0.25, 0.5)
    stage1_lr: float = 1e-4
    stage2_imag_lr: float = 5e-5
    stage2_base_lr: float = 1e-6
    stage3_lr: float = 1e-6
    lr_multiplier: float = 10.0
    schedule: str = "three_stage"     # three_stage | flat
    flat_lr: float = 1e-3
    aux_in_all_stages: bool = False
    use_imaginations: bool = True     # False for base-agent pretraining
    eval_interval: int = 0            # 0 disables mid-training evaluation
    eval_limit: int = 40
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.stage_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"stage fractions must sum to 1, got {self.stage_fractions}")
        if self.lam < 0.0:
            raise ConfigurationError("lambda must be >= 0")
        if self.aux_loss not in ("cosine", "infonce", "none"):
            raise ConfigurationError(f"unknown aux_loss {self.aux_loss!r}")
        if self.schedule not in ("three_stage", "flat"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    @property
    def aux_lam(self):
        return self.infonce_lam if self.aux_loss == "infonce" else self.lam


@dataclass(frozen=True)
class LossBreakdown:
    l_base: float
    l_aux: float
    total: float
    n_im: int


@dataclass
class Checkpoint:
    version: int
    agent_config: ag.AgentConfig
    values: dict              # name -> np.ndarray (float32)
    adam_m: dict
    adam_v: dict
    adam_steps: dict          # group -> int
    iteration: int
    rng_state: dict


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def imitation_loss(logits_list, teacher_actions):
    """Mean teacher-forced cross-entropy over the episode's steps."""
    if len(logits_list) != len(teacher_actions):
        raise ContractError(f"{len(logits_list)} logit vectors vs {len(teacher_actions)} teacher actions")
    if not logits_list:
        raise ContractError("empty trajectory")
    steps = [nc.reshape(nc.cross_entropy(l, a), (1,))
             for l, a in zip(logits_list, teacher_actions)]
    return nc.mean(nc.concat(steps, axis=0))


def cosine_alignment_loss(pairs):
    """Mean (1 - cos(h_i, sbar_i)) over pairs; (zero, flag) when empty."""
    if not pairs:
        return nc.constant(np.float32(0.0)), True
    terms = []
    for h, s in pairs:
        c = nc.cosine_similarity(h, s)
        terms.append(nc.reshape(nc.add(nc.scale(c, -1.0), nc.constant(np.float32(1.0))), (1,)))
    return nc.mean(nc.concat(terms, axis=0)), False


def infonce_loss(pairs, owners, tau):
    """Contrastive alignment: positives are own noun-phrase means, negatives
    the noun-phrase means of other instructions in the batch."""
    if tau <= 0.0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    if not pairs:
        return nc.constant(np.float32(0.0)), True
    if len(owners) != len(pairs):
        raise ContractError("owner list must align with pairs")
    losses = []
    for i, (h_i, s_i) in enumerate(pairs):
        sims = [nc.reshape(nc.scale(nc.cosine_similarity(h_i, s_i), 1.0 / tau), (1,))]
        for j, (_, s_j) in enumerate(pairs):
            if owners[j] != owners[i]:
                sims.append(nc.reshape(nc.scale(nc.cosine_similarity(h_i, s_j), 1.0 / tau), (1,)))
        logits = nc.concat(sims, axis=0)
        losses.append(nc.reshape(nc.cross_entropy(logits, 0), (1,)))
    return nc.mean(nc.concat(losses, axis=0)), False


def total_loss(l_base, l_aux, lam):
    if lam < 0.0:
        raise ConfigurationError("lambda must be >= 0")
    return nc.add(l_base, nc.scale(l_aux, lam))


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def three_stage_schedule(iteration, cfg):
    """Per-group (learning rate, trainable) for the staged finetune."""
    if not 0 <= iteration < cfg.iterations:
        raise ContractError(f"iteration {iteration} outside [0, {cfg.iterations})")
    if cfg.schedule == "flat":
        lr = cfg.flat_lr
        return {g: (lr, True) for g in ("base",) + IMAGINATION_GROUPS}
    f1, f2, _ = cfg.stage_fractions
    s1_end = math.floor(cfg.iterations * f1)
    s2_end = math.floor(cfg.iterations * (f1 + f2))
    m = cfg.lr_multiplier
    if iteration < s1_end:
        imag_lr, base_lr = cfg.stage1_lr * m, 0.0
    elif iteration < s2_end:
        imag_lr, base_lr = cfg.stage2_imag_lr * m, cfg.stage2_base_lr * m
    else:
        imag_lr = base_lr = cfg.stage3_lr * m
    out = {g: (imag_lr, imag_lr > 0.0) for g in IMAGINATION_GROUPS}
    out["base"] = (base_lr, base_lr > 0.0)
    return out


def stage_of(iteration, cfg):
    f1, f2, _ = cfg.stage_fractions
    if iteration < math.floor(cfg.iterations * f1):
        return 1
    if iteration < math.floor(cfg.iterations * (f1 + f2)):
        return 2
    return 3


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _diagnostic_dump(iteration, breakdown, params):
    lines = [f"iteration={iteration}",
             f"l_base={breakdown.l_base} l_aux={breakdown.l_aux} total={breakdown.total}"]
    for name, t in params.items():
        gn = 0.0 if t.grad is None else float(np.linalg.norm(t.grad))
        lines.append(f"{name}\t|theta|={float(np.linalg.norm(t.values)):.4e}\t|grad|={gn:.4e}")
    return "\n".join(lines)


def train(split, agent_config, cfg, init_values=None, val_items=None, resume=None):
    """Run the loop; returns (Checkpoint, curves).

    curves rows are (iteration, l_base, l_aux, val_sr) with val_sr = nan off
    the evaluation grid. `init_values` warm-starts parameters (base checkpoint
    for finetunes); `resume` continues a saved checkpoint bitwise.
    """
    if not split.items:
        raise ContractError("empty training split")
    params = ag.init_params(agent_config, cfg.seed)
    if init_values is not None:
        for name, arr in init_values.items():
            if name in params:
                params[name].values[...] = arr
    opt = nc.Adam(params)
    rng = np.random.default_rng(np.random.SeedSequence([0x7E41, cfg.seed]))
    start_iter = 0
    if resume is not None:
        for name, arr in resume.values.items():
            params[name].values[...] = arr
        for name in resume.adam_m:
            opt.m[name][...] = resume.adam_m[name]
            opt.v[name][...] = resume.adam_v[name]
        opt.steps.update(resume.adam_steps)
        rng.bit_generator.state = resume.rng_state
        start_iter = resume.iteration

    agent = ag.Agent(agent_config, params)
    items = split.items
    curves = []
    use_imag = cfg.use_imaginations

    for iteration in range(start_iter, cfg.iterations):
        lr_flags = three_stage_schedule(iteration, cfg)
        batch_idx = rng.integers(len(items), size=cfg.batch_size)
        params.zero_grads()

        base_terms = []
        pairs = []
        owners = []
        for b in batch_idx:
            item = items[int(b)]
            traj = ag.rollout(agent, item.episode, item.token_ids,
                              item.record.instruction.tokens,
                              item.imaginations if use_imag else [],
                              "teacher", obs_rng=rng, kept_subs=item.record.kept,
                              train=True, drop_rng=rng)
            base_terms.append(nc.reshape(imitation_loss(traj.logits, traj.teacher_actions), (1,)))
            for pair in traj.aux_pairs:
                pairs.append(pair)
                owners.append(int(b))
        l_base = nc.mean(nc.concat(base_terms, axis=0))

        aux_active = cfg.aux_loss != "none" and (
            cfg.aux_in_all_stages or cfg.schedule == "flat" or stage_of(iteration, cfg) > 1)
        if aux_active and cfg.aux_loss == "cosine":
            l_aux, _ = cosine_alignment_loss(pairs)
        elif aux_active and cfg.aux_loss == "infonce":
            l_aux, _ = infonce_loss(pairs, owners, cfg.tau)
        else:
            l_aux = nc.constant(np.float32(0.0))
        lam = cfg.aux_lam if cfg.aux_loss != "none" else 0.0
        total = total_loss(l_base, l_aux, lam)
        breakdown = LossBreakdown(l_base=float(l_base.values), l_aux=float(l_aux.values),
                                  total=float(total.values), n_im=len(pairs))
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(f"non-finite loss at iteration {iteration}",
                                   dump=_diagnostic_dump(iteration, breakdown, params))
        nc.backward(total)
        for t in (params[name] for name in params.names()):
            if t.grad is None:
                t.grad = np.zeros_like(t.values)  # leaf off the compute path
        opt.step({g: lr for g, (lr, _) in lr_flags.items()})

        val_sr = math.nan
        if cfg.eval_interval and val_items and (iteration + 1) % cfg.eval_interval == 0:
            rec = ev.evaluate(agent, val_items[:cfg.eval_limit], "correct", seed=cfg.seed)
            val_sr = rec.sr
        curves.append((iteration, breakdown.l_base, breakdown.l_aux, val_sr))

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        agent_config=agent_config,
        values={k: v.values.copy() for k, v in params.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_steps=dict(opt.steps),
        iteration=cfg.iterations,
        rng_state=rng.bit_generator.state,
    )
    return ckpt, curves


def agent_from_checkpoint(ckpt):
    params = ag.init_params(ckpt.agent_config, seed=0)
    for name, arr in ckpt.values.items():
        params[name].values[...] = arr
    return ag.Agent(ckpt.agent_config, params)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _write_text(fh, text):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _write_array(fh, name, arr):
    _write_text(fh, name)
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr32.ndim))
    for dim in arr32.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr32.tobytes())


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", ckpt.version))
        _write_text(fh, ckpt.agent_config.to_text())
        names = list(ckpt.values.keys())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_array(fh, name, ckpt.values[name])
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_array(fh, "adam_m." + name, ckpt.adam_m[name])
            _write_array(fh, "adam_v." + name, ckpt.adam_v[name])
        _write_text(fh, json.dumps(ckpt.adam_steps, sort_keys=True))
        fh.write(struct.pack("<I", ckpt.iteration))
        _write_text(fh, json.dumps(ckpt.rng_state, sort_keys=True))


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def take(self, n):
        raw = self.fh.read(n)
        if len(raw) != n:
            raise FormatError("truncated checkpoint file")
        return raw

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        return self.take(self.u32()).decode("utf-8")

    def array(self):
        name = self.text()
        rank = self.u32()
        if rank > 8:
            raise FormatError(f"implausible array rank {rank}")
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        r = _Reader(fh)
        version = struct.unpack("<B", r.take(1))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = ag.AgentConfig.from_text(r.text())
        values = {}
        for _ in range(r.u32()):
            name, arr = r.array()
            values[name] = arr
        adam_m, adam_v = {}, {}
        for _ in range(r.u32()):
            name, arr = r.array()
            adam_m[name.removeprefix("adam_m.")] = arr
            name, arr = r.array()
            adam_v[name.removeprefix("adam_v.")] = arr
        steps = json.loads(r.text())
        iteration = r.u32()
        rng_state = json.loads(r.text())
    return Checkpoint(version=version, agent_config=config, values=values,
                      adam_m=adam_m, adam_v=adam_v, adam_steps=steps,
                      iteration=iteration, rng_state=rng_state)
