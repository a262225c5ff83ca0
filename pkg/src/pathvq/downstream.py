"""Downstream WSI fine-tuning over compressed tile features.

A strided convolutional adapter collapses each tile's dequantized latent
grid into one vector, MIL heads (gated attention or the rotary
transformer) aggregate a slide's tiles, and cross-validated training
reports classification or survival metrics per fold.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from sklearn.metrics import f1_score, roc_auc_score
from sklearn.model_selection import StratifiedKFold

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .layers import Conv2d, Linear, Module
from .msvq import Tokenizer
from .optim import AdamW
from .pretrain import AbmilModel, WsiTransformer


# ---------------------------------------------------------------------------
# convolutional adapter
# ---------------------------------------------------------------------------


def default_adapter_channels(dim: int) -> tuple:
    return (max(dim // 8, 2), max(dim // 4, 2), max(dim // 2, 2), dim)


class ConvAdapter(Module):
    """Four stride-2 convolutions collapsing (p, p, d) latents to a vector."""

    def __init__(self, in_dim: int, channels: tuple, grid: int, seed: int = 0, dtype=np.float32):
        self.convs = []
        prev = in_dim
        for i, c in enumerate(channels):
            self.convs.append(
                Conv2d(prev, c, 3, rng_mod.generator(seed, "adapter", i), stride=2, pad=1, dtype=dtype)
            )
            prev = c
        self.channels = tuple(channels)
        self.grid = grid
        self.in_dim = in_dim
        self.out_dim = channels[-1]
        trace = self.spatial_trace(grid, len(channels))
        if trace[-1] != 1:
            raise ValueError(f"grid {grid} does not collapse to 1x1: {trace}")

    @staticmethod
    def spatial_trace(grid: int, layers: int = 4) -> list:
        sizes = [grid]
        for _ in range(layers):
            sizes.append((sizes[-1] + 2 - 3) // 2 + 1)
        return sizes

    def __call__(self, latents: Tensor) -> Tensor:
        if latents.ndim != 4 or latents.shape[1] != self.grid or latents.shape[2] != self.grid:
            raise ad.ShapeError(
                f"adapter expects (B, {self.grid}, {self.grid}, {self.in_dim}), got {latents.shape}"
            )
        x = latents
        for conv in self.convs[:-1]:
            x = ad.gelu(conv(x))
        x = self.convs[-1](x)
        return ad.reshape(x, (x.shape[0], self.out_dim))


@dataclass
class AlignConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    holdout: float = 0.1


def adapter_align_pretrain(adapter: ConvAdapter, tok: Tokenizer, grids: np.ndarray, cfg: AlignConfig, log=None) -> list:
    """Train the adapter to match the codec's tile-level decoded feature.

    The codec stays frozen: dequantized latents are the adapter inputs and
    the patch-mean of the frozen reconstruction is the target. Maximizes
    cosine similarity; returns per-epoch records with a held-out cosine.
    """
    maps = tok.encode_grids(np.asarray(grids, dtype=np.float32), update_usage=False)
    latents = tok.reconstruct_latent(maps)
    targets = tok.tile_feature(maps)
    if targets.shape[1] != adapter.out_dim:
        raise ValueError(
            f"adapter output dim {adapter.out_dim} must match tile feature dim {targets.shape[1]}"
        )
    n = len(latents)
    n_hold = max(1, int(n * cfg.holdout)) if n > 4 else 0
    order = rng_mod.generator(cfg.seed, "align-split").permutation(n)
    hold, train = order[:n_hold], order[n_hold:]
    opt = AdamW(adapter.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng_mod.generator(cfg.seed, "align-order", epoch).permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            sel = train[perm[start : start + cfg.batch_size]]
            out = adapter(Tensor(latents[sel]))
            cos = ad.reduce_mean(ad.cosine_similarity(out, Tensor(targets[sel])))
            loss = ad.neg(cos)
            opt.zero_grad()
            opt.step(ad.backward(loss, opt.params))
            losses.append(float(cos.data))
        row = {"epoch": epoch, "cosine": float(np.mean(losses))}
        if n_hold:
            with ad.no_grad():
                out = adapter(Tensor(latents[hold]))
                row["holdout_cosine"] = float(
                    ad.reduce_mean(ad.cosine_similarity(out, Tensor(targets[hold]))).data
                )
        history.append(row)
        if log:
            log(row)
    return history


def align_and_attach(tok: Tokenizer, grids: np.ndarray, cfg: AlignConfig, channels=None, log=None) -> list:
    """Build a default adapter, align it, and attach it to the tokenizer."""
    channels = tuple(channels) if channels else default_adapter_channels(tok.cfg.dim)
    adapter = ConvAdapter(tok.cfg.code_dim, channels, grid=tok.cfg.grid, seed=cfg.seed)
    history = adapter_align_pretrain(adapter, tok, grids, cfg, log=log)
    tok.adapter = adapter
    return history


# ---------------------------------------------------------------------------
# low-rank adaptation
# ---------------------------------------------------------------------------


class LoraLinear(Module):
    """A frozen linear layer plus a trainable low-rank update."""

    def __init__(self, base: Linear, rank: int, alpha: float, rng):
        base.weight.requires_grad = False
        if base.bias is not None:
            base.bias.requires_grad = False
        d_in, d_out = base.weight.shape
        dt = base.weight.dtype
        self.base = base
        self.lora_a = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)).astype(dt))
        self.lora_b = ad.parameter(np.zeros((rank, d_out), dtype=dt))
        self.scaling = alpha / rank

    def __call__(self, x: Tensor) -> Tensor:
        delta = ad.scale(ad.matmul(ad.matmul(x, self.lora_a), self.lora_b), self.scaling)
        return ad.add(self.base(x), delta)

    def added_params(self) -> int:
        return self.lora_a.size + self.lora_b.size

    def merge(self) -> Linear:
        update = self.scaling * (self.lora_a.data.astype(np.float64) @ self.lora_b.data.astype(np.float64))
        self.base.weight.data = (self.base.weight.data + update).astype(self.base.weight.dtype)
        self.base.weight.requires_grad = True
        if self.base.bias is not None:
            self.base.bias.requires_grad = True
        return self.base


def _replace_linears(module: Module, make, skip: tuple) -> int:
    count = 0
    for name, value in list(vars(module).items()):
        if isinstance(value, LoraLinear):
            continue
        if isinstance(value, Linear):
            if name in skip:
                continue
            setattr(module, name, make(value))
            count += 1
        elif isinstance(value, Module):
            count += _replace_linears(value, make, skip)
        elif isinstance(value, (list, tuple)):
            items = list(value)
            for i, item in enumerate(items):
                if isinstance(item, Linear):
                    items[i] = make(item)
                    count += 1
                elif isinstance(item, Module) and not isinstance(item, LoraLinear):
                    count += _replace_linears(item, make, skip)
            setattr(module, name, items if isinstance(value, list) else tuple(items))
    return count


def lora_wrap(model: Module, rank: int = 16, alpha: float = 16.0, seed: int = 0, skip: tuple = ()) -> int:
    """Wrap every linear layer (minus `skip` attribute names) with LoRA.

    At initialization the update path is exactly zero, so outputs equal
    the base model's bit for bit. Returns the number of wrapped layers.
    """
    counter = [0]

    def make(base: Linear) -> LoraLinear:
        wrapped = LoraLinear(base, rank, alpha, rng_mod.generator(seed, "lora", counter[0]))
        counter[0] += 1
        return wrapped

    return _replace_linears(model, make, tuple(skip))


def lora_merge(model: Module) -> int:
    count = 0
    for parent, name, value in _walk_attrs(model):
        if isinstance(value, LoraLinear):
            if isinstance(name, int):
                parent[name] = value.merge()
            else:
                setattr(parent, name, value.merge())
            count += 1
    return count


def _walk_attrs(module: Module):
    for name, value in list(vars(module).items()):
        if isinstance(value, Module):
            yield module, name, value
            yield from _walk_attrs(value)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield value, i, item
                    yield from _walk_attrs(item)


# ---------------------------------------------------------------------------
# survival machinery
# ---------------------------------------------------------------------------


def cindex(risks, times, events) -> float:
    """Concordance over comparable pairs; risk ties count one half.

    A pair is comparable when the earlier of the two times carries an
    event; equal times are never comparable.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n = int(comparable.sum())
    if n == 0:
        raise ValueError("no comparable pairs for the concordance index")
    concordant = int(((r[:, None] > r[None, :]) & comparable).sum())
    tied = int(((r[:, None] == r[None, :]) & comparable).sum())
    return (concordant + 0.5 * tied) / n


def assign_bins(times, events, n_bins: int = 4) -> np.ndarray:
    """Discrete time bins from quantiles of observed event times."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if not e.any():
        raise ValueError("no events to derive time bins from")
    qs = np.quantile(t[e], np.linspace(0, 1, n_bins + 1)[1:-1])
    edges = np.unique(qs)
    return np.digitize(t, edges).astype(np.int64)


def survival_nll(logits: Tensor, bins: np.ndarray, events: np.ndarray) -> Tensor:
    """Discrete-hazard negative log likelihood.

    For an event in bin b: -ln h_b - sum_{j<b} ln(1-h_j); for a case
    censored in bin b: -sum_{j<=b} ln(1-h_j). Hazards are sigmoids of the
    logits, expressed through softplus for stability.
    """
    b = np.asarray(bins, dtype=np.int64)
    e = np.asarray(events, dtype=np.float64)
    n, k = logits.shape
    idx = np.arange(k)
    onehot = (idx[None, :] == b[:, None]).astype(np.float64)
    before = (idx[None, :] < b[:, None]).astype(np.float64)
    upto = (idx[None, :] <= b[:, None]).astype(np.float64)
    dt = logits.dtype
    sp_pos = ad.softplus(logits)  # -ln(1 - h)
    sp_neg = ad.softplus(ad.neg(logits))  # -ln h
    event_term = ad.add(
        ad.reduce_sum(ad.mul(sp_neg, Tensor(onehot.astype(dt))), axis=-1),
        ad.reduce_sum(ad.mul(sp_pos, Tensor(before.astype(dt))), axis=-1),
    )
    censor_term = ad.reduce_sum(ad.mul(sp_pos, Tensor(upto.astype(dt))), axis=-1)
    ev = Tensor(e.astype(dt))
    inv = Tensor((1.0 - e).astype(dt))
    return ad.reduce_mean(ad.add(ad.mul(ev, event_term), ad.mul(inv, censor_term)))


def hazard_risk(logits: np.ndarray) -> np.ndarray:
    """Risk score from hazard logits: negative summed survival."""
    h = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    survival = np.cumprod(1.0 - h, axis=-1)
    return -survival.sum(axis=-1)


# ---------------------------------------------------------------------------
# cross-validated fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class SlideBag:
    latents: np.ndarray  # (N, p, p, d) adapter inputs
    coords: np.ndarray  # (N, 2)
    slide_id: str = ""
    label: Optional[int] = None
    time: Optional[float] = None
    event: Optional[int] = None

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float32)
        self.coords = np.asarray(self.coords)
        if len(self.latents) < 1:
            raise ValueError("a slide bag needs at least one tile")
        if len(self.coords) != len(self.latents):
            raise ValueError("coords must align with tile features")


def build_slide_bag(tok: Tokenizer, tiles, **labels) -> SlideBag:
    maps = tok.encode_tiles(tiles)
    latents = tok.reconstruct_latent(maps)
    coords = np.array([t.coords for t in tiles], dtype=np.int64)
    return SlideBag(latents=latents, coords=coords, **labels)


@dataclass
class FinetuneConfig:
    task: str = "classification"  # or "survival"
    head: str = "abmil"  # or "roformer"
    init: str = "scratch"  # or "pretrained"
    adapter_mode: str = "pt-ft"  # rd-fz | rd-ft | pt-fz | pt-ft
    folds: int = 5
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    n_bins: int = 4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    adapter_channels: tuple = ()
    code_dim: int = 16
    grid: int = 14
    attn_hidden: int = 128
    width: int = 512
    depth: int = 6
    heads: int = 8
    rope_base: float = 100.0

    def __post_init__(self):
        if self.task not in ("classification", "survival"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.head not in ("abmil", "roformer"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.init not in ("scratch", "pretrained"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.adapter_mode not in ("rd-fz", "rd-ft", "pt-fz", "pt-ft"):
            raise ValueError(f"unknown adapter mode {self.adapter_mode!r}")


@dataclass
class FinetuneResult:
    folds: list
    summary: dict


def _load_partial(model: Module, state: dict, skip_prefixes: tuple) -> None:
    own = dict(model.named_params())
    for name, p in own.items():
        if any(name.startswith(s) for s in skip_prefixes):
            continue
        if name not in state:
            raise KeyError(f"pretrained state is missing {name}")
        arr = np.asarray(state[name])
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: pretrained shape {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)


def _make_head(cfg: FinetuneConfig, in_dim: int, n_out: int, seed: int, pretrained: dict | None):
    if cfg.head == "abmil":
        model = AbmilModel(in_dim, n_out, attn_hidden=cfg.attn_hidden, seed=seed)
        if pretrained is not None:
            _load_partial(model, pretrained, skip_prefixes=("classifier.",))
        return model
    model = WsiTransformer(
        in_dim,
        n_out,
        width=cfg.width,
        heads=cfg.heads,
        depth=cfg.depth,
        seed=seed,
        rope_base=cfg.rope_base,
    )
    if pretrained is not None:
        _load_partial(model, pretrained, skip_prefixes=("head.",))
        lora_wrap(model, rank=cfg.lora_rank, alpha=cfg.lora_alpha, seed=seed, skip=("head",))
        for name, p in model.named_params():
            trainable = (
                "lora_a" in name or "lora_b" in name or name.startswith("head.") or name.startswith("cls_token")
            )
            p.requires_grad = trainable
    return model


def _head_logits(cfg, head, feats: Tensor, coords):
    if cfg.head == "abmil":
        logits, _ = head.logits(ad.reshape(ad.cast(feats, np.float64), (1,) + feats.shape))
    else:
        logits = head.bag_logits(ad.reshape(feats, (1,) + feats.shape), coords)
    return logits


def _run_fold(payload) -> dict:
    bags, cfg, fold_id, train_idx, val_idx, adapter_state, pretrained, n_out, bins = payload
    seed = int(rng_mod.derive_key(cfg.seed, "fold", fold_id)[0] % (2**31))
    if not cfg.adapter_channels:
        raise ValueError("adapter_channels must be set on the fine-tune config")
    adapter = ConvAdapter(cfg.code_dim, tuple(cfg.adapter_channels), grid=cfg.grid, seed=seed)
    if cfg.adapter_mode.startswith("pt"):
        if adapter_state is None:
            raise ValueError("pretrained adapter mode requires an aligned adapter state")
        adapter.load_state_dict(adapter_state)
    train_adapter = cfg.adapter_mode.endswith("ft")
    head = _make_head(cfg, adapter.out_dim, n_out, seed, pretrained)
    params = [p for _, p in head.named_params()]
    if train_adapter:
        params += adapter.params()
    opt = AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)

    frozen_feats = {}

    def bag_features(i: int) -> Tensor:
        if train_adapter:
            return adapter(Tensor(bags[i].latents))
        if i not in frozen_feats:
            with ad.no_grad():
                frozen_feats[i] = adapter(Tensor(bags[i].latents)).data
        return Tensor(frozen_feats[i])

    for epoch in range(cfg.epochs):
        order = rng_mod.generator(cfg.seed, "ft-order", fold_id, epoch).permutation(len(train_idx))
        for j in order:
            i = train_idx[j]
            logits = _head_logits(cfg, head, bag_features(i), bags[i].coords)
            if cfg.task == "classification":
                loss = ad.reduce_mean(
                    ad.cross_entropy_indices(logits, np.array([bags[i].label], dtype=np.int64))
                )
            else:
                loss = survival_nll(logits, np.array([bins[i]]), np.array([bags[i].event]))
            if not np.isfinite(loss.data):
                raise ad.NonFiniteError("fine-tuning loss is not finite")
            opt.zero_grad()
            opt.step(ad.backward(loss, opt.params))
    # last-epoch evaluation on the held-out split
    outputs = []
    for i in val_idx:
        with ad.no_grad():
            feats = Tensor(adapter(Tensor(bags[i].latents)).data)
            logits = _head_logits(cfg, head, feats, bags[i].coords)
        outputs.append(logits.data[0])
    outputs = np.asarray(outputs, dtype=np.float64)
    if cfg.task == "classification":
        probs = np.exp(outputs - outputs.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        y = np.array([bags[i].label for i in val_idx])
        pred = probs.argmax(axis=1)
        if n_out == 2:
            auc = roc_auc_score(y, probs[:, 1])
        else:
            auc = roc_auc_score(y, probs, multi_class="ovr", average="macro", labels=list(range(n_out)))
        return {
            "fold": fold_id,
            "macro_f1": float(f1_score(y, pred, average="macro")),
            "macro_auc": float(auc),
        }
    risks = hazard_risk(outputs)
    times = np.array([bags[i].time for i in val_idx])
    events = np.array([bags[i].event for i in val_idx])
    if not events.any():
        raise ValueError("validation fold is fully censored; c-index undefined")
    return {"fold": fold_id, "cindex": float(cindex(risks, times, events))}


def finetune_cv(
    bags,
    cfg: FinetuneConfig,
    adapter_state: dict | None = None,
    pretrained_state: dict | None = None,
    workers: int = 1,
) -> FinetuneResult:
    """K-fold fine-tuning; folds are independent and may run in processes."""
    bags = list(bags)
    if cfg.task == "classification":
        labels = np.array([b.label for b in bags])
        n_out = int(labels.max()) + 1
        strata = labels
        bins = None
    else:
        times = np.array([b.time for b in bags], dtype=np.float64)
        events = np.array([b.event for b in bags])
        bins = assign_bins(times, events, cfg.n_bins)
        n_out = cfg.n_bins
        strata = events.astype(int)
    splitter = StratifiedKFold(n_splits=cfg.folds, shuffle=True, random_state=cfg.seed)
    payloads = []
    for fold_id, (tr, va) in enumerate(splitter.split(np.zeros(len(bags)), strata)):
        if cfg.task == "classification" and len(np.unique(np.array([bags[i].label for i in tr]))) < 2:
            raise ValueError(f"fold {fold_id} has a single class in its training split")
        payloads.append(
            (bags, cfg, fold_id, tr, va, adapter_state, pretrained_state, n_out, bins)
        )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold, payloads))
    else:
        folds = [_run_fold(p) for p in payloads]
    metrics = [k for k in folds[0] if k != "fold"]
    summary = {
        m: (float(np.mean([f[m] for f in folds])), float(np.std([f[m] for f in folds])))
        for m in metrics
    }
    return FinetuneResult(folds=folds, summary=summary)


def classify_train(bags, cfg: FinetuneConfig, **kw) -> FinetuneResult:
    return finetune_cv(bags, replace(cfg, task="classification"), **kw)


def survival_train(bags, cfg: FinetuneConfig, **kw) -> FinetuneResult:
    return finetune_cv(bags, replace(cfg, task="survival"), **kw)
