"""Toy instrumented hosts: a small residual CNN and a small transformer
encoder, each carrying explainer blocks at configurable insertion points.

Routing of the gated features follows a non-invasive "side chain": block
l's gated output feeds block l+1's input (projected and resized as needed)
but never re-enters the backbone, so stripping every explainer parameter
leaves the host's final head bit-identical. The side chain is what lets
the supervision loss of block l+1 exert gradients on block l's gate mixer,
which the collaboration analysis measures.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import MhexParams, MhexOutput, run_block, mhex_loss
from .errors import (CheckpointFormatError, CheckpointShapeError,
                     CheckpointVersionError, ConfigurationError,
                     ContractError, DimensionError, TrainingDivergedError)

CHECKPOINT_MAGIC = b"MHEXCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configs


@dataclass
class ResNetConfig:
    stage_channels: tuple = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    in_channels: int = 1
    image_size: int = 32
    n_class: int = 4
    mhex_sites: object = "downsample"   # "downsample" | "all" | explicit indices
    ds_stop_grad: bool = False

    def validate(self):
        ch = tuple(self.stage_channels)
        if not ch or any(c < 1 for c in ch):
            raise ConfigurationError("stage_channels must be positive")
        if any(a > b for a, b in zip(ch, ch[1:])):
            raise ConfigurationError("stage_channels must be non-decreasing")
        if self.blocks_per_stage < 1:
            raise ConfigurationError("blocks_per_stage must be >= 1")
        if self.n_class < 2:
            raise ConfigurationError("n_class must be >= 2")
        if self.in_channels not in (1, 3):
            raise ConfigurationError("in_channels must be 1 or 3")
        n_blocks = len(ch) * self.blocks_per_stage
        for idx in self.site_indices():
            if not 0 <= idx < n_blocks:
                raise ConfigurationError(f"mhex site index {idx} out of range")

    def block_channels(self):
        """Output channels of every residual block, in order."""
        out = []
        for c in self.stage_channels:
            out.extend([c] * self.blocks_per_stage)
        return out

    def downsample_blocks(self):
        """Block indices whose residual connection downsamples (first block
        of every stage after the first)."""
        return [s * self.blocks_per_stage for s in range(1, len(self.stage_channels))]

    def site_indices(self):
        n_blocks = len(self.stage_channels) * self.blocks_per_stage
        if self.mhex_sites == "downsample":
            sites = self.downsample_blocks() + [n_blocks - 1]
            return sorted(set(sites))
        if self.mhex_sites == "all":
            return list(range(n_blocks))
        return sorted(set(int(i) for i in self.mhex_sites))

    def site_channels(self):
        ch = self.block_channels()
        return [ch[i] for i in self.site_indices()]


@dataclass
class TransformerConfig:
    vocab_size: int = 48
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 4
    max_seq: int = 16
    n_class: int = 4
    saliency_layers: int = 3
    ffn_mult: int = 2
    pad_id: int = 1
    ds_stop_grad: bool = False

    def validate(self):
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.d_model < 1 or self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be a positive multiple of n_heads")
        if self.n_class < 2:
            raise ConfigurationError("n_class must be >= 2")
        if not 1 <= self.saliency_layers <= self.n_layers:
            raise ConfigurationError("saliency_layers must be in [1, n_layers]")
        if self.vocab_size < self.n_class + 2:
            raise ConfigurationError("vocab_size too small")
        if self.max_seq < 1:
            raise ConfigurationError("max_seq must be >= 1")

    def site_channels(self):
        return [self.d_model] * self.n_layers


@dataclass
class ForwardRecord:
    """Everything one instrumented forward pass produces."""

    final_logits: Tensor
    site_outputs: list          # MhexOutput per site
    site_inputs: list           # block input (backbone activation + carry)
    raw_activations: list       # backbone activation at each site
    x_globals: list
    pad_mask: np.ndarray | None = None

    def head_logits(self):
        return [o.ds_logits for o in self.site_outputs] + [self.final_logits]


# ---------------------------------------------------------------------------
# parameter helpers


class _ParamStore:
    def __init__(self, seed):
        self.rng = np.random.Generator(np.random.Philox(key=int(seed)))
        self.params = {}

    def kaiming(self, name, shape, fan_in):
        t = Tensor(self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape),
                   requires_grad=True)
        self.params[name] = t
        return t

    def uniform(self, name, shape, scale=0.05):
        t = Tensor(self.rng.uniform(-scale, scale, size=shape), requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name, shape):
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name, shape):
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# residual CNN host


class ResNetModel:
    kind = "resnet"

    def __init__(self, cfg: ResNetConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        store = _ParamStore(seed)
        ch = cfg.block_channels()
        c0 = cfg.stage_channels[0]
        store.kaiming("stem.w", (c0, cfg.in_channels, 3, 3), cfg.in_channels * 9)
        store.zeros("stem.b", (c0,))
        cin = c0
        self._block_specs = []
        for b, cout in enumerate(ch):
            stride = 2 if b in cfg.downsample_blocks() else 1
            store.kaiming(f"block{b}.conv1", (cout, cin, 3, 3), cin * 9)
            store.zeros(f"block{b}.b1", (cout,))
            # zero-init the closing conv so each block starts as the identity;
            # keeps the un-normalized residual stack from blowing up in depth
            store.zeros(f"block{b}.conv2", (cout, cout, 3, 3))
            store.zeros(f"block{b}.b2", (cout,))
            has_proj = stride != 1 or cin != cout
            if has_proj:
                store.kaiming(f"block{b}.proj", (cout, cin, 1, 1), cin)
            self._block_specs.append((b, cin, cout, stride, has_proj))
            cin = cout
        c_last = ch[-1]
        store.kaiming("head.w", (cfg.n_class, c_last), c_last)
        store.zeros("head.b", (cfg.n_class,))
        sites = cfg.site_indices()
        prev_c = None
        for s, bidx in enumerate(sites):
            c = ch[bidx]
            store.uniform(f"mhex{s}.w1", (c, c))
            store.uniform(f"mhex{s}.w2", (cfg.n_class, c))
            store.kaiming(f"mhex{s}.proj_global", (c, c_last, 1, 1), c_last)
            if s > 0:
                store.kaiming(f"mhex{s}.proj_carry", (c, prev_c, 1, 1), prev_c)
            prev_c = c
        self.params = store.params
        self.sites = sites

    # -- parameter access ----------------------------------------------
    def mhex_params(self, s):
        p = self.params
        return MhexParams(
            w1=p[f"mhex{s}.w1"], w2=p[f"mhex{s}.w2"],
            proj_global=p[f"mhex{s}.proj_global"],
            proj_carry=p.get(f"mhex{s}.proj_carry"))

    def mhex_param_names(self):
        return [n for n in self.params if n.startswith("mhex")]

    def backbone_param_names(self):
        return [n for n in self.params if not n.startswith("mhex")]

    # -- forward --------------------------------------------------------
    def _backbone(self, x):
        p = self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + x.data.shape)
        if x.data.shape[1:] != (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size):
            raise DimensionError(
                f"input shape {x.data.shape} does not match configured "
                f"{self.cfg.in_channels}x{self.cfg.image_size}x{self.cfg.image_size}")
        h = ad.relu(ad.add(ad.conv2d(x, p["stem.w"], stride=1, pad=1),
                           ad.reshape(p["stem.b"], (1, -1, 1, 1))))
        acts = []
        for b, cin, cout, stride, has_proj in self._block_specs:
            y = ad.relu(ad.add(ad.conv2d(h, p[f"block{b}.conv1"], stride=stride, pad=1),
                               ad.reshape(p[f"block{b}.b1"], (1, -1, 1, 1))))
            y = ad.add(ad.conv2d(y, p[f"block{b}.conv2"], stride=1, pad=1),
                       ad.reshape(p[f"block{b}.b2"], (1, -1, 1, 1)))
            skip = ad.conv2d(h, p[f"block{b}.proj"], stride=stride, pad=0) if has_proj else h
            h = ad.relu(ad.add(skip, y))
            acts.append(h)
        pooled = ad.global_avg_pool(h)                      # (N, C_last)
        logits = ad.add(ad.matmul(pooled, ad.transpose(p["head.w"], (1, 0))),
                        ad.reshape(p["head.b"], (1, -1)))
        return acts, h, logits

    def forward_logits(self, x):
        """Backbone-only forward; what the host computes with every explainer
        block stripped."""
        return self._backbone(x)[2]

    def predict_proba(self, x):
        return _softmax(self.forward_logits(x).data)

    def forward_collect(self, x, site_mask=None):
        """Instrumented forward pass.

        ``site_mask`` is an optional ``(site_index, mask_hw)`` pair; the mask
        multiplies that site's input activations (values, hence gradients)
        for the block-wise collaboration analysis.
        """
        acts, final_feats, final_logits = self._backbone(x)
        outputs, inputs, raws, globals_ = [], [], [], []
        carry = None
        for s, bidx in enumerate(self.sites):
            params = self.mhex_params(s)
            x_l = acts[bidx]
            hw = x_l.data.shape[-2:]
            feats_src = final_feats.detach() if self.cfg.ds_stop_grad else final_feats
            xg = ad.nearest_resize(ad.conv2d(feats_src, params.proj_global, stride=1, pad=0), hw)
            u = x_l.detach() if self.cfg.ds_stop_grad else x_l
            if carry is not None:
                u = ad.add(u, ad.conv2d(ad.nearest_resize(carry, hw),
                                        params.proj_carry, stride=1, pad=0))
            if site_mask is not None and site_mask[0] == s:
                mask = np.asarray(site_mask[1], dtype=np.float64)
                if mask.shape != hw:
                    raise DimensionError(
                        f"site mask shape {mask.shape} does not match site resolution {hw}")
                # mask the block's whole effective input (activations plus
                # projected global features) so per-cell pooled contributions
                # sum exactly to the unmasked ones
                m = Tensor(mask[None, None, :, :])
                u = ad.mul(u, m)
                xg = ad.mul(xg, m)
            out = run_block(u, xg, params)
            carry = out.x_att
            outputs.append(out)
            inputs.append(u)
            raws.append(x_l)
            globals_.append(xg)
        return ForwardRecord(final_logits=final_logits, site_outputs=outputs,
                             site_inputs=inputs, raw_activations=raws,
                             x_globals=globals_)


# ---------------------------------------------------------------------------
# transformer encoder host


class TransformerModel:
    kind = "transformer"

    def __init__(self, cfg: TransformerConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        store = _ParamStore(seed)
        d, fd = cfg.d_model, cfg.d_model * cfg.ffn_mult
        store.uniform("embed", (cfg.vocab_size, d), scale=0.1)
        store.uniform("pos", (cfg.max_seq, d), scale=0.1)
        for l in range(cfg.n_layers):
            for nm in ("wq", "wk", "wv"):
                store.kaiming(f"layer{l}.{nm}", (d, d), d)
            # zero-init the attention output projection: each layer starts as
            # the identity on its residual stream, so cross-position mixing
            # only grows where the loss demands it and per-token identity
            # survives into the explainer sites
            store.zeros(f"layer{l}.wo", (d, d))
            store.ones(f"layer{l}.ln1_g", (d,))
            store.zeros(f"layer{l}.ln1_b", (d,))
            store.kaiming(f"layer{l}.ffn_w1", (d, fd), d)
            store.zeros(f"layer{l}.ffn_b1", (fd,))
            store.kaiming(f"layer{l}.ffn_w2", (fd, d), fd)
            store.zeros(f"layer{l}.ffn_b2", (d,))
            store.ones(f"layer{l}.ln2_g", (d,))
            store.zeros(f"layer{l}.ln2_b", (d,))
        store.ones("final_ln_g", (d,))
        store.zeros("final_ln_b", (d,))
        store.kaiming("head.w", (cfg.n_class, d), d)
        store.zeros("head.b", (cfg.n_class,))
        for s in range(cfg.n_layers):
            store.uniform(f"mhex{s}.w1", (d, d))
            store.uniform(f"mhex{s}.w2", (cfg.n_class, d))
            store.kaiming(f"mhex{s}.proj_global", (d, d), d)
        self.params = store.params
        self.sites = list(range(cfg.n_layers))

    def mhex_params(self, s):
        p = self.params
        return MhexParams(w1=p[f"mhex{s}.w1"], w2=p[f"mhex{s}.w2"],
                          proj_global=p[f"mhex{s}.proj_global"])

    def mhex_param_names(self):
        return [n for n in self.params if n.startswith("mhex")]

    def backbone_param_names(self):
        return [n for n in self.params if not n.startswith("mhex")]

    # -- forward --------------------------------------------------------
    def _attention(self, x, l, add_mask):
        p = self.params
        cfg = self.cfg
        b, s, d = x.data.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, s, nh, dh)), (0, 2, 1, 3))

        q = split(ad.matmul(x, p[f"layer{l}.wq"]))
        k = split(ad.matmul(x, p[f"layer{l}.wk"]))
        v = split(ad.matmul(x, p[f"layer{l}.wv"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.softmax_last(scores, additive_mask=add_mask)
        ctx = ad.matmul(att, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return ad.matmul(merged, p[f"layer{l}.wo"])

    def _backbone(self, ids):
        p = self.params
        cfg = self.cfg
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        if ids.shape[1] > cfg.max_seq:
            raise DimensionError(f"sequence length {ids.shape[1]} exceeds max_seq {cfg.max_seq}")
        b, s = ids.shape
        pad_mask = ids == cfg.pad_id
        if pad_mask.all(axis=1).any():
            raise ContractError("a sequence consists entirely of padding")
        add_mask = np.where(pad_mask, -1e9, 0.0)[:, None, None, :]
        keep = ~pad_mask
        x = ad.add(ad.embedding(p["embed"], ids),
                   ad.reshape(ad.embedding(p["pos"], np.arange(s)), (1, s, cfg.d_model)))
        acts = []
        for l in range(cfg.n_layers):
            a = self._attention(x, l, add_mask)
            x = ad.layer_norm(ad.add(x, a), p[f"layer{l}.ln1_g"], p[f"layer{l}.ln1_b"])
            acts.append(x)          # between attention and feed-forward
            h = ad.relu(ad.add(ad.matmul(x, p[f"layer{l}.ffn_w1"]),
                               ad.reshape(p[f"layer{l}.ffn_b1"], (1, 1, -1))))
            f = ad.add(ad.matmul(h, p[f"layer{l}.ffn_w2"]),
                       ad.reshape(p[f"layer{l}.ffn_b2"], (1, 1, -1)))
            x = ad.layer_norm(ad.add(x, f), p[f"layer{l}.ln2_g"], p[f"layer{l}.ln2_b"])
        x = ad.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
        pooled = ad.masked_seq_mean(x, keep)
        logits = ad.add(ad.matmul(pooled, ad.transpose(p["head.w"], (1, 0))),
                        ad.reshape(p["head.b"], (1, -1)))
        return acts, x, logits, pad_mask

    def forward_logits(self, ids):
        return self._backbone(ids)[2]

    def predict_proba(self, ids):
        return _softmax(self.forward_logits(ids).data)

    def forward_collect(self, ids, site_mask=None):
        acts, final_feats, final_logits, pad_mask = self._backbone(ids)
        keep = ~pad_mask
        outputs, inputs, raws, globals_ = [], [], [], []
        carry = None
        for s in self.sites:
            params = self.mhex_params(s)
            x_l = acts[s]
            feats_src = final_feats.detach() if self.cfg.ds_stop_grad else final_feats
            gvec = ad.matmul(ad.masked_seq_mean(feats_src, keep), params.proj_global)
            xg = ad.reshape(gvec, (gvec.data.shape[0], 1, gvec.data.shape[1]))
            u = x_l.detach() if self.cfg.ds_stop_grad else x_l
            if carry is not None:
                u = ad.add(u, carry)
            if site_mask is not None and site_mask[0] == s:
                mask = np.asarray(site_mask[1], dtype=np.float64)
                # mask the whole effective input; the broadcast global vector
                # becomes per-position so masked positions contribute nothing
                m = Tensor(mask[None, :, None])
                u = ad.mul(u, m)
                xg = ad.mul(xg, m)
            out = run_block(u, xg, params, pad_mask=pad_mask)
            # stabilize the side chain as the host stabilizes its stream
            carry = ad.layer_norm(out.x_att)
            outputs.append(out)
            inputs.append(u)
            raws.append(x_l)
            globals_.append(xg)
        return ForwardRecord(final_logits=final_logits, site_outputs=outputs,
                             site_inputs=inputs, raw_activations=raws,
                             x_globals=globals_, pad_mask=pad_mask)


# ---------------------------------------------------------------------------
# builders and parameter accounting


def build_resnet(cfg: ResNetConfig, seed=0):
    return ResNetModel(cfg, seed=seed)


def build_transformer(cfg: TransformerConfig, seed=0):
    return TransformerModel(cfg, seed=seed)


def count_mhex_params(cfg, include_projections=False):
    """Total explainer parameters: sum over sites of C^2 (channel mixer)
    plus n_class * C (class head); projections added only on request."""
    channels = cfg.site_channels()
    n_class = cfg.n_class
    core = sum(c * c + n_class * c for c in channels)
    if not include_projections:
        return core
    if isinstance(cfg, ResNetConfig):
        c_last = cfg.stage_channels[-1]
        proj = sum(c * c_last for c in channels)
        proj += sum(b * a for a, b in zip(channels, channels[1:]))
    else:
        proj = sum(c * c for c in channels)
    return core + proj


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    head_accuracy: list   # one entry per auxiliary head, final head last


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    @property
    def final_head_accuracy(self):
        return self.entries[-1].head_accuracy[-1] if self.entries else None


def _dataset_arrays(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, dataset.labels
    return dataset.ids, dataset.labels


def head_accuracies(model, dataset, batch_size=128):
    """Fraction correct per head (auxiliary heads in site order, final head
    last)."""
    xs, ys = _dataset_arrays(dataset)
    n = len(ys)
    correct = None
    for lo in range(0, n, batch_size):
        rec = model.forward_collect(xs[lo:lo + batch_size])
        preds = [h.data.argmax(axis=1) for h in rec.head_logits()]
        hits = np.array([(p == ys[lo:lo + batch_size]).sum() for p in preds], dtype=float)
        correct = hits if correct is None else correct + hits
    return (correct / n).tolist()


def train(model, dataset, mode="finetune", epochs=5, lr=3e-3, seed=0,
          batch_size=64, weight_decay=0.01, eval_accuracy=True):
    """Minimize the combined head loss with a constant-rate AdamW-style
    update. Deterministic for fixed (seed, config, dataset)."""
    if len(dataset) == 0:
        raise ContractError("train: dataset is empty")
    xs, ys = _dataset_arrays(dataset)
    n = len(ys)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    v = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    step = 0
    log = TrainLog()
    for epoch in range(epochs):
        perm = np.random.Generator(
            np.random.Philox(key=(int(seed) << 64) | epoch)).permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            rec = model.forward_collect(xs[idx])
            loss = mhex_loss(rec.head_logits(), ys[idx], mode)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch)
            for t in model.params.values():
                t.grad = None
            ad.backward(loss)
            step += 1
            for k, t in model.params.items():
                g = t.grad
                if g is None:
                    continue
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                mh = m[k] / (1 - beta1 ** step)
                vh = v[k] / (1 - beta2 ** step)
                t.data -= lr * (mh / (np.sqrt(vh) + eps) + weight_decay * t.data)
            losses.append(float(loss.data))
        accs = head_accuracies(model, dataset) if eval_accuracy else []
        log.entries.append(EpochLog(epoch=epoch, loss=float(np.mean(losses)),
                                    head_accuracy=accs))
    return log


# ---------------------------------------------------------------------------
# checkpointing


def _config_to_text(cfg):
    lines = [f"kind={'resnet' if isinstance(cfg, ResNetConfig) else 'transformer'}"]
    for key, val in vars(cfg).items():
        if isinstance(val, (tuple, list)):
            val = ",".join(str(x) for x in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def _config_from_text(text):
    kv = {}
    for line in text.strip().splitlines():
        key, _, val = line.partition("=")
        kv[key] = val
    kind = kv.pop("kind")
    cls = ResNetConfig if kind == "resnet" else TransformerConfig
    cfg = cls()
    for key, val in kv.items():
        if key == "mhex_sites":
            if val not in ("downsample", "all"):
                val = tuple(int(x) for x in val.split(","))
        else:
            cur = getattr(cfg, key)
            if isinstance(cur, bool):
                val = val == "True"
            elif isinstance(cur, int):
                val = int(val)
            elif isinstance(cur, (tuple, list)):
                val = tuple(int(x) for x in val.split(","))
        setattr(cfg, key, val)
    return kind, cfg


def save_checkpoint(model, path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = _config_to_text(model.cfg).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", int(model.seed) & 0xFFFFFFFF))
    items = list(model.params.items())
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
    for _, t in items:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic bytes in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        kind, cfg = _config_from_text(_read_exact(fh, cfg_len, "config").decode())
        (seed,) = struct.unpack("<I", _read_exact(fh, 4, "seed"))
        model = (build_resnet if kind == "resnet" else build_transformer)(cfg, seed=seed)
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        table = []
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                          for _ in range(ndim))
            table.append((name, shape))
        expected = [(n, t.data.shape) for n, t in model.params.items()]
        if table != expected:
            raise CheckpointShapeError(
                "checkpoint shape table does not match the model built from its config")
        for name, shape in table:
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 8, f"data for {name}")
            model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return model


def clone_model(model):
    """Independent copy sharing no buffers; used for per-worker evaluation."""
    builder = build_resnet if model.kind == "resnet" else build_transformer
    twin = builder(model.cfg, seed=model.seed)
    for name, t in model.params.items():
        twin.params[name].data = t.data.copy()
    return twin


def strip_mhex(model):
    """Copy of the model with every explainer parameter zeroed out; the
    backbone forward never reads them, so final logits are unchanged."""
    twin = clone_model(model)
    for name in twin.mhex_param_names():
        twin.params[name].data[:] = 0.0
    return twin
