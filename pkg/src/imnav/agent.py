"""The toy VLN agent.

Encoders: token embeddings + sinusoidal positions + one self-attention block
for text; a linear projection + type embedding + bias-free 3-layer MLP for
imaginations (or a small transformer block, as an ablation); per-view linear
projection + view-index embedding + a recurrent summary token for panoramas.

The cross-modal policy alternates two attention streams per layer: the
context stream ([text; imagination] tokens attending over context + visual
keys, which is what the attention probe inspects) and the visual stream
(visual tokens attending over context keys, per the integration scheme).
Action logits are per-navigable-view scores plus a stop score read off the
history token.

Masked imagination tokens are excluded from every key/query set, which is
exactly the zero-attention-weight (-inf pre-softmax) semantics and makes
null-imagination runs bit-identical to runs without imagination tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import world as wd
from .errors import ConfigurationError, ContractError, ShapeError, VocabularyError


@dataclass(frozen=True)
class AgentConfig:
    vocab_size: int
    d: int = 64
    heads: int = 4
    cross_layers: int = 2
    k_views: int = 12
    d_v: int = 16
    mlp_hidden: int = 0               # 0 -> ceil(2d/3)
    dropout_rate: float = 0.15
    text_dropout: float = 0.3         # train-time word-identity dropout
    fusion: str = "early"             # early | late
    imagination_encoder: str = "mlp"  # mlp | transformer
    concat_target: str = "text"       # text | visual
    imag_source: str = "imagination"  # imagination | text_mean
    imag_order_encoding: bool = False
    max_steps: int = 15

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigurationError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", math.ceil(2 * self.d / 3))
        for name, value, allowed in (
            ("fusion", self.fusion, ("early", "late")),
            ("imagination_encoder", self.imagination_encoder, ("mlp", "transformer")),
            ("concat_target", self.concat_target, ("text", "visual")),
            ("imag_source", self.imag_source, ("imagination", "text_mean")),
        ):
            if value not in allowed:
                raise ConfigurationError(f"{name}={value!r} not in {allowed}")

    def to_text(self):
        keys = ("vocab_size", "d", "heads", "cross_layers", "k_views", "d_v", "mlp_hidden",
                "dropout_rate", "text_dropout", "fusion", "imagination_encoder",
                "concat_target", "imag_source", "imag_order_encoding", "max_steps")
        return "\n".join(f"{k}={getattr(self, k)}" for k in keys)

    @classmethod
    def from_text(cls, text):
        kw = {}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            if k in ("vocab_size", "d", "heads", "cross_layers", "k_views", "d_v",
                     "mlp_hidden", "max_steps"):
                kw[k] = int(v)
            elif k in ("dropout_rate", "text_dropout"):
                kw[k] = float(v)
            elif k == "imag_order_encoding":
                kw[k] = v == "True"
            else:
                kw[k] = v
        return cls(**kw)


_SINUSOID_CACHE = {}


def sinusoid_table(n, d, scale=0.15):
    key = (n, d, scale)
    if key not in _SINUSOID_CACHE:
        pos = np.arange(n)[:, None]
        i = np.arange(d)[None, :]
        angles = pos / np.power(10000.0, (2 * (i // 2)) / d)
        table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
        _SINUSOID_CACHE[key] = (scale * table).astype(np.float32)
    return _SINUSOID_CACHE[key]


def init_params(config, seed):
    """Seeded ParamStore; group tags drive the staged finetuning schedule."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1217, seed]))
    store = nc.ParamStore()
    d, mh, dv = config.d, config.mlp_hidden, config.d_v

    def xavier(shape):
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return nc.Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32))

    def gauss(shape, std):
        return nc.Tensor((std * rng.standard_normal(shape)).astype(np.float32))

    base = lambda name, t: store.add(name, t, "base")
    imag = lambda name, t: store.add(name, t, "imagination_encoder")

    # small init keeps trained embeddings dominated by gradient-built structure
    base("tok_embed", gauss((config.vocab_size, d), 0.05))
    for p in ("t_wq", "t_wk", "t_wv", "t_wo"):
        base(p, xavier((d, d)))
    base("t_ff1", xavier((d, mh)))
    base("t_ff2", xavier((mh, d)))

    base("vis_proj", xavier((dv, d)))
    base("view_embed", gauss((config.k_views, d), 0.3))
    base("hist_init", gauss((1, d), 0.3))
    base("hist_wh", xavier((d, d)))
    base("hist_wp", xavier((d, d)))

    for layer in range(config.cross_layers):
        for stream in ("c", "v"):
            for p in ("wq", "wk", "wv", "wo"):
                base(f"{stream}{layer}_{p}", xavier((d, d)))
            base(f"{stream}{layer}_ff1", xavier((d, mh)))
            base(f"{stream}{layer}_ff2", xavier((mh, d)))

    base("act_w", xavier((d, 1)))
    base("stop_w", xavier((d, 1)))

    if config.imagination_encoder == "mlp":
        imag("im_m1", xavier((d, mh)))
        imag("im_m2", xavier((mh, mh)))
        imag("im_m3", xavier((mh, d)))
    else:
        for p in ("im_wq", "im_wk", "im_wv", "im_wo"):
            imag(p, xavier((d, d)))
        imag("im_ff1", xavier((d, mh)))
        imag("im_ff2", xavier((mh, d)))
    if config.fusion == "late":
        imag("gate_u", xavier((d, 1)))
        imag("gate_w", xavier((d, 1)))

    store.add("t_im", gauss((d,), 0.3), "type_embedding")
    return store


@dataclass
class EncodedContext:
    text: nc.Tensor                    # (L, d)
    imag: nc.Tensor | None             # (N_live, d) or None; masked tokens already dropped
    imag_mask: np.ndarray              # original mask over the imagination list
    live_indices: tuple = ()           # imagination-list indices of the kept rows
    sbar: list = field(default_factory=list)   # mean noun-phrase embeddings, aligned to kept subs

    def live_imag(self):
        """Unmasked imagination tokens (the -inf-masked ones carry exactly zero
        attention weight, i.e. they are absent from every key and query set)."""
        return self.imag


@dataclass
class AttentionRecord:
    layer: int
    stream: str          # context | visual
    weights: np.ndarray  # (heads, Tq, Tk)
    query_kinds: tuple
    key_kinds: tuple


@dataclass
class Trajectory:
    episode: object
    token_ids: tuple
    tokens: tuple
    visited: list
    actions: list
    action_spaces: list
    logits: list
    teacher_actions: list
    attention: list | None
    grounding_view: int | None
    aux_pairs: list
    imaginations: list
    truncated: bool = False


class Agent:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    # ------------------------------------------------------------------
    # encoders
    # ------------------------------------------------------------------

    def encode_text(self, token_ids, train=False, rng=None):
        if len(token_ids) == 0:
            raise ContractError("cannot encode an empty instruction")
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise VocabularyError(f"token id outside vocabulary of size {self.config.vocab_size}")
        p = self.params
        x = nc.take_rows(p["tok_embed"], ids)
        # word-identity dropout: whole token rows are zeroed (inverted scaling),
        # positions survive via the position encoding
        rate = self.config.text_dropout
        if train and rate > 0.0:
            keep = 1.0 - rate
            rows = (rng.random((len(token_ids), 1)) < keep).astype(np.float32) / np.float32(keep)
            x = nc.mul(x, nc.constant(np.repeat(rows, self.config.d, axis=1)))
        x = nc.add(x, nc.constant(sinusoid_table(len(token_ids), self.config.d)))
        x = nc.add(x, self._mha(x, x, "t_", record=None))
        x = nc.add(x, self._ffn(x, "t_"))
        return x

    def encode_imaginations(self, features, train=False, rng=None):
        """(N, d_v) features -> ((N, d) tokens, all-true mask)."""
        if features is None or len(features) == 0:
            return None, np.zeros(0, dtype=bool)
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_v:
            raise ShapeError(f"imagination features must be (N, {self.config.d_v}), got {feats.shape}")
        p = self.params
        # the d_v -> d projection is shared with the observation pathway: both
        # kinds of features come from the same (identity) vision encoder, so
        # one projection keeps them in a common space and matching transfers
        # to landmark classes never seen in training
        x = nc.matmul(nc.constant(feats), p["vis_proj"])
        x = nc.add(x, p["t_im"])
        x = nc.dropout(x, self.config.dropout_rate, rng, train)
        if self.config.imagination_encoder == "mlp":
            x = nc.relu(nc.matmul(x, p["im_m1"]))
            x = nc.relu(nc.matmul(x, p["im_m2"]))
            x = nc.matmul(x, p["im_m3"])
        else:
            x = nc.add(x, nc.constant(sinusoid_table(feats.shape[0], self.config.d)))
            x = nc.add(x, self._mha(x, x, "im_", record=None))
            x = nc.add(x, self._ffn(x, "im_"))
        if self.config.imag_order_encoding:
            x = nc.add(x, nc.constant(sinusoid_table(feats.shape[0], self.config.d)))
        return x, np.ones(feats.shape[0], dtype=bool)

    def mean_nounphrase_embedding(self, sub, text_tokens):
        if not sub.noun_token_indices:
            raise ContractError("sub-instruction has no noun-phrase token positions")
        rows = nc.take_rows(text_tokens, list(sub.noun_token_indices))
        return nc.reshape(nc.mean(rows, axis=0), (self.config.d,))

    def encode_observation(self, panorama, hist_state):
        """K views + history token; returns ((K+1, d) tokens, next history)."""
        pano = np.asarray(panorama, dtype=np.float32)
        if pano.shape != (self.config.k_views, self.config.d_v):
            raise ShapeError(f"panorama must be ({self.config.k_views}, {self.config.d_v}), got {pano.shape}")
        p = self.params
        views = nc.add(nc.matmul(nc.constant(pano), p["vis_proj"]), p["view_embed"])
        pooled = nc.reshape(nc.mean(views, axis=0), (1, self.config.d))
        new_hist = nc.tanh(nc.add(nc.matmul(hist_state, p["hist_wh"]),
                                  nc.matmul(pooled, p["hist_wp"])))
        tokens = nc.concat([hist_state, views], axis=0)
        return tokens, new_hist

    # ------------------------------------------------------------------
    # attention plumbing
    # ------------------------------------------------------------------

    def _mha(self, q_tokens, kv_tokens, prefix, record):
        p = self.params
        heads = self.config.heads
        d = self.config.d
        dh = d // heads
        tq = q_tokens.shape[0]
        tk = kv_tokens.shape[0]
        q = nc.transpose(nc.reshape(nc.matmul(q_tokens, p[prefix + "wq"]), (tq, heads, dh)), (1, 0, 2))
        k = nc.transpose(nc.reshape(nc.matmul(kv_tokens, p[prefix + "wk"]), (tk, heads, dh)), (1, 0, 2))
        v = nc.transpose(nc.reshape(nc.matmul(kv_tokens, p[prefix + "wv"]), (tk, heads, dh)), (1, 0, 2))
        scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        weights = nc.softmax(scores, axis=-1)
        if record is not None:
            record.append(weights.values.copy())
        out = nc.matmul(weights, v)
        out = nc.reshape(nc.transpose(out, (1, 0, 2)), (tq, d))
        return nc.matmul(out, p[prefix + "wo"])

    def _ffn(self, x, prefix):
        p = self.params
        return nc.matmul(nc.relu(nc.matmul(x, p[prefix + "ff1"])), p[prefix + "ff2"])

    # ------------------------------------------------------------------
    # cross-modal policy
    # ------------------------------------------------------------------

    def cross_modal_step(self, context, visual_tokens, nav, record_attention=False):
        """One decision: action logits over sorted navigable views plus stop.

        Returns (logits, view_scores, attention records).
        """
        cfg = self.config
        live = context.live_imag()
        ctx = context.text
        vis = visual_tokens
        n_text = context.text.shape[0]
        n_imag = 0 if live is None else live.shape[0]
        if live is not None and cfg.fusion == "early":
            if cfg.concat_target == "text":
                ctx = nc.concat([ctx, live], axis=0)
            else:
                vis = nc.concat([vis, live], axis=0)

        n_vis = vis.shape[0]
        if cfg.concat_target == "text":
            ctx_kinds = ("text",) * n_text + ("imagination",) * n_imag
            vis_kinds = ("visual",) * n_vis
        else:
            ctx_kinds = ("text",) * n_text
            vis_kinds = ("visual",) * (self.config.k_views + 1) + ("imagination",) * n_imag

        records = [] if record_attention else None
        for layer in range(cfg.cross_layers):
            raw = [] if record_attention else None
            keys = nc.concat([ctx, vis], axis=0)
            ctx = nc.add(ctx, self._mha(ctx, keys, f"c{layer}_", raw))
            ctx = nc.add(ctx, self._ffn(ctx, f"c{layer}_"))
            if record_attention:
                records.append(AttentionRecord(
                    layer=layer, stream="context", weights=raw[0],
                    query_kinds=ctx_kinds, key_kinds=ctx_kinds + vis_kinds))
            raw = [] if record_attention else None
            vis = nc.add(vis, self._mha(vis, ctx, f"v{layer}_", raw))
            vis = nc.add(vis, self._ffn(vis, f"v{layer}_"))
            if record_attention:
                records.append(AttentionRecord(
                    layer=layer, stream="visual", weights=raw[0],
                    query_kinds=vis_kinds, key_kinds=ctx_kinds))

        view_tokens = nc.take_rows(vis, list(range(1, cfg.k_views + 1)))
        hist_token = nc.take_rows(vis, [0])
        # state-conditioned matching score plus a per-view bias term
        match = nc.scale(nc.matmul(view_tokens, nc.transpose(hist_token, (1, 0))),
                         1.0 / math.sqrt(cfg.d))                            # (K, 1)
        view_scores = nc.add(match, nc.matmul(view_tokens, self.params["act_w"]))
        stop_score = nc.matmul(hist_token, self.params["stop_w"])           # (1, 1)
        if nav:
            nav_scores = nc.take_rows(view_scores, [v for v, _ in nav])
            logits = nc.concat([nav_scores, stop_score], axis=0)
        else:
            logits = stop_score
        logits = nc.reshape(logits, (len(nav) + 1,))

        if cfg.fusion == "late" and live is not None:
            pooled = nc.reshape(nc.mean(live, axis=0), (1, cfg.d))
            strength = nc.matmul(pooled, self.params["gate_w"])             # (1, 1)
            cand = nc.concat([nc.take_rows(vis, [v + 1 for v, _ in nav]), hist_token], axis=0)
            gates = nc.sigmoid(nc.matmul(cand, self.params["gate_u"]))      # (n+1, 1)
            bonus = nc.reshape(nc.mul(gates, nc.concat([strength] * (len(nav) + 1), axis=0)),
                               (len(nav) + 1,))
            logits = nc.add(logits, bonus)
        return logits, view_scores, records


def build_context(agent, token_ids, imaginations, kept_subs, imag_mask=None,
                  train=False, rng=None):
    """Encode text and imaginations once per episode.

    `imaginations` is the (possibly policy-transformed) list for the episode;
    kept_subs aligns mean noun-phrase embeddings for the auxiliary loss.
    """
    text = agent.encode_text(token_ids, train=train, rng=rng)
    sbar = [agent.mean_nounphrase_embedding(s, text) for s in kept_subs]
    n = len(imaginations)
    if imag_mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(imag_mask, dtype=bool)
        if mask.shape[0] != n:
            raise ShapeError("imagination mask length mismatch")
    live = tuple(int(i) for i in np.nonzero(mask)[0])

    if agent.config.imag_source == "text_mean":
        sub_by_index = {s.index: i for i, s in enumerate(kept_subs)}
        rows = []
        kept_live = []
        for i in live:
            im = imaginations[i]
            if im.sub_index in sub_by_index:
                rows.append(nc.reshape(sbar[sub_by_index[im.sub_index]], (1, agent.config.d)))
                kept_live.append(i)
        imag = nc.concat(rows, axis=0) if rows else None
        live = tuple(kept_live)
    else:
        feats = np.stack([imaginations[i].feature for i in live]) if live else None
        imag, _ = agent.encode_imaginations(feats, train=train, rng=rng)
    return EncodedContext(text=text, imag=imag, imag_mask=mask, live_indices=live, sbar=sbar)


def rollout(agent, episode, token_ids, tokens, imaginations, mode, obs_rng,
            kept_subs=(), imag_mask=None, train=False, drop_rng=None,
            max_steps=None, record_attention=False):
    """Run one episode.

    teacher mode walks the teacher path and records logits for supervision;
    argmax mode follows the greedy policy until stop or max_steps (ties break
    to the lowest action index). Deterministic given the rng streams.
    """
    cfg = agent.config
    world = episode.world
    max_steps = max_steps or cfg.max_steps
    if mode == "teacher" and max_steps < len(episode.teacher_path):
        raise ContractError("max_steps too small for the teacher path")

    context = build_context(agent, token_ids, imaginations, kept_subs,
                            imag_mask=imag_mask, train=train, rng=drop_rng)
    hist = agent.params["hist_init"]
    node = episode.start
    visited = [node]
    actions, spaces, logits_list, teacher_actions = [], [], [], []
    attn = [] if record_attention else None
    grounding_view = None
    truncated = False

    for t in range(max_steps):
        nav = wd.navigable(world, node)
        obs = wd.observation_at(world, node, obs_rng)
        vis_tokens, hist = agent.encode_observation(obs, hist)
        logits, view_scores, recs = agent.cross_modal_step(
            context, vis_tokens, nav, record_attention=record_attention)
        stop_index = len(nav)

        if mode == "teacher":
            if t < len(episode.teacher_path) - 1:
                nxt = episode.teacher_path[t + 1]
                action = next(i for i, (_, nb) in enumerate(nav) if nb == nxt)
            else:
                action = stop_index
            teacher_actions.append(action)
        elif mode == "argmax":
            action = int(np.argmax(logits.values))
        else:
            raise ContractError(f"unknown rollout mode {mode!r}")

        logits_list.append(logits)
        actions.append(action)
        spaces.append(nav)
        if record_attention:
            attn.append(recs)

        if action == stop_index:
            grounding_view = int(np.argmax(view_scores.values[:, 0]))
            break
        node = nav[action][1]
        visited.append(node)
    else:
        truncated = True
        grounding_view = int(np.argmax(view_scores.values[:, 0]))

    aux_pairs = []
    if train and context.imag is not None and agent.config.imag_source == "imagination":
        sub_by_index = {s.index: i for i, s in enumerate(kept_subs)}
        for row, orig in enumerate(context.live_indices):
            im = imaginations[orig]
            if im.sub_index in sub_by_index:
                h_i = nc.reshape(nc.take_rows(context.imag, [row]), (cfg.d,))
                aux_pairs.append((h_i, context.sbar[sub_by_index[im.sub_index]]))

    return Trajectory(episode=episode, token_ids=tuple(token_ids), tokens=tuple(tokens),
                      visited=visited, actions=actions, action_spaces=spaces,
                      logits=logits_list, teacher_actions=teacher_actions,
                      attention=attn, grounding_view=grounding_view,
                      aux_pairs=aux_pairs, imaginations=list(imaginations),
                      truncated=truncated)


def attention_probe(trajectory, layer, head, imag_index, k=3):
    """Top-k text tokens and views attended by an imagination query, at the
    first step where the imagination's referent is visible in the panorama."""
    if trajectory.attention is None:
        raise ContractError("trajectory has no attention records")
    if imag_index >= len(trajectory.imaginations):
        raise IndexError(f"imagination index {imag_index} out of range")
    target = trajectory.imaginations[imag_index].true_class
    world = trajectory.episode.world
    step = None
    for t, node in enumerate(trajectory.visited):
        if any(cid == target for cid, _ in world.placements.get(node, ())):
            step = t
            break
    if step is None or step >= len(trajectory.attention):
        raise ContractError(f"referent class {target} never visible along the trajectory")

    recs = [r for r in trajectory.attention[step] if r.stream == "context" and r.layer == layer]
    if not recs:
        raise IndexError(f"no context attention at layer {layer}")
    rec = recs[0]
    if head >= rec.weights.shape[0]:
        raise IndexError(f"head {head} out of range")
    query_positions = [i for i, kind in enumerate(rec.query_kinds) if kind == "imagination"]
    if imag_index >= len(query_positions):
        raise IndexError("imagination token was masked out of the context")
    row = rec.weights[head, query_positions[imag_index]]

    def topk(indices, labels):
        weightsv = row[indices]
        order = np.argsort(-weightsv, kind="stable")[:k]
        return [(labels[i], float(weightsv[i])) for i in order]

    text_keys = [i for i, kind in enumerate(rec.key_kinds) if kind == "text"]
    vis_keys = [i for i, kind in enumerate(rec.key_kinds) if kind == "visual"]
    top_tokens = topk(text_keys, [trajectory.tokens[j] for j in range(len(text_keys))])
    # visual keys: history token first, then the K views
    view_labels = ["history"] + [f"view{j}" for j in range(world.k_views)]
    top_views = topk(vis_keys, view_labels[:len(vis_keys)])
    return top_tokens, top_views
