"""Causal transformer policy over (state, return, action) token triples.

Each step contributes three tokens in the order ``s_t, R_t, a_t``. Heads are
read from two of them:

* the ``s_t`` token feeds the return-bin distribution, the maximal-return
  (expectile) estimate and the state projection ``s_p``;
* the ``R_t`` token feeds the action-feature projection ``a_p``, from which
  the reward estimator ``N_e(s_p, a_p)`` and the action generator
  ``N_g(r_hat, a_p)`` are computed.

The backbone (attention blocks plus final layer norm) can be initialised
from a language-model checkpoint and adapted with LoRA on Q, K and V.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ContextWindow, WindowBatch, collate

CHECKPOINT_VERSION = 1
EMBED_KINDS = ("mlp", "linear")
FREEZE_MODES = ("lora", "frozen", "full")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_s: int
    n_items: int
    n_bins: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    T_max: int = 20
    dropout: float = 0.1
    embed_kind: str = "mlp"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    freeze_mode: str = "lora"
    vocab_size: int = 0  # LM token count (0 = no LM projections)
    lm_ctx: int = 64
    return_scale: float = 1.0
    reward_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.T_max < 1:
            raise ValueError("T_max must be >= 1")
        if self.embed_kind not in EMBED_KINDS:
            raise ValueError(f"embed_kind must be one of {EMBED_KINDS}")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")
        if self.lora_rank < 0 or (self.lora_rank > 0 and self.lora_rank >= self.d_model):
            raise ValueError("lora_rank must satisfy 0 <= r < d_model")
        if self.return_scale <= 0 or self.reward_scale <= 0:
            raise ValueError("return_scale and reward_scale must be positive")

    def backbone_dims(self) -> dict:
        return {k: getattr(self, k) for k in ("n_layers", "n_heads", "d_model", "d_ff")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class LoRALinear(nn.Linear):
    """``W0 x + (alpha / r) B A x`` with ``B`` zero-initialised."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__(base.in_features, base.out_features, bias=base.bias is not None,
                         device=base.weight.device, dtype=base.weight.dtype)
        with torch.no_grad():
            self.weight.copy_(base.weight)
            if base.bias is not None:
                self.bias.copy_(base.bias)
        self.weight.requires_grad_(base.weight.requires_grad)
        if self.bias is not None:
            self.bias.requires_grad_(base.bias.requires_grad)
        self.r = r
        self.scaling = alpha / r
        bound = 1.0 / math.sqrt(self.in_features)
        self.lora_A = nn.Parameter(torch.empty(r, self.in_features, dtype=self.weight.dtype)
                                   .uniform_(-bound, bound, generator=generator))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, r, dtype=self.weight.dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.bias is not None,
                        device=self.weight.device, dtype=self.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.weight + self.scaling * self.lora_B @ self.lora_A)
            if self.bias is not None:
                out.bias.copy_(self.bias)
        return out


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.resid_drop = nn.Dropout(dropout)

    def forward(self, x, allowed):
        B, L, C = x.shape
        h = self.n_heads

        def split(t):
            return t.view(B, L, h, C // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        return self.resid_drop(self.o(y.transpose(1, 2).reshape(B, L, C)))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc = nn.Linear(d_model, d_ff)
        self.proj = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.drop(self.proj(F.gelu(self.fc(self.ln2(x)))))


def _embedder(kind: str, d_in: int, d_model: int) -> nn.Module:
    if kind == "linear":
        return nn.Linear(d_in, d_model)
    return nn.Sequential(nn.Linear(d_in, d_model), nn.GELU(), nn.Linear(d_model, d_model))


class PolicyModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        # embeddings
        self.state_embed = _embedder(cfg.embed_kind, cfg.d_s, d)
        self.return_embed = _embedder(cfg.embed_kind, 1, d)
        self.action_embed = _embedder(cfg.embed_kind, cfg.n_items, d)
        self.pos_embed = nn.Embedding(cfg.T_max, d)
        self.pad_embed = nn.Parameter(torch.zeros(d))
        self.embed_ln = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        # backbone
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        # heads
        self.state_head = nn.Linear(d, d)  # theta_s
        self.action_feat_head = nn.Linear(d, d)  # theta_a
        self.reward_net = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))  # N_e
        self.action_net = nn.Linear(d + 1, cfg.n_items)  # N_g
        self.return_head = nn.Linear(d, cfg.n_bins)
        self.expectile_head = nn.Linear(d, 1)
        # language-model projections
        if cfg.vocab_size > 0:
            self.lm_tok = nn.Embedding(cfg.vocab_size, d)
            self.lm_pos = nn.Embedding(cfg.lm_ctx, d)
            self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.n_window_evals = 0

    # -- RL path --------------------------------------------------------

    def embed(self, states, rtg, actions, mask):
        """Token embeddings ``(B, 3L, d)`` plus the per-token validity mask."""
        B, L = actions.shape
        if L > self.cfg.T_max:
            raise ValueError(f"window of {L} steps exceeds T_max={self.cfg.T_max}")
        pos = (torch.cumsum(mask.long(), dim=1) - 1).clamp(min=0)
        p = self.pos_embed(pos)
        dt = self.pad_embed.dtype
        s_tok = self.state_embed(states.to(dt)) + p
        r_tok = self.return_embed((rtg.to(dt) / self.cfg.return_scale).unsqueeze(-1)) + p
        a_tok = self.action_embed(F.one_hot(actions, self.cfg.n_items).to(dt)) + p
        tok = torch.stack([s_tok, r_tok, a_tok], dim=2)  # (B, L, 3, d)
        tok = torch.where(mask[:, :, None, None], tok, self.pad_embed.expand_as(tok))
        tok = self.embed_ln(tok.reshape(B, 3 * L, -1))
        return tok, mask.repeat_interleave(3, dim=1)

    def backbone(self, x, valid=None):
        n = x.shape[1]
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).tril()
        if valid is None:
            allowed = causal[None, None]
        else:
            eye = torch.eye(n, dtype=torch.bool, device=x.device)
            # pad queries attend to themselves so their rows stay finite
            allowed = (causal[None] & (valid[:, None, :] | eye[None]))[:, None]
        for blk in self.blocks:
            x = blk(x, allowed)
        return self.ln_f(x)

    def forward(self, states, rtg, actions, mask, detach_expectile: bool = False, detach_bins: bool = False):
        B, L = actions.shape
        tok, valid = self.embed(states, rtg, actions, mask)
        h = self.backbone(self.drop(tok), valid).view(B, L, 3, -1)
        h_s, h_r = h[:, :, 0], h[:, :, 1]
        s_p = self.state_head(h_s)
        a_p = self.action_feat_head(h_r)
        r_hat = self.reward_net(torch.cat([s_p, a_p], dim=-1)).squeeze(-1)
        logits = self.action_net(torch.cat([r_hat.unsqueeze(-1), a_p], dim=-1))
        exp_in = h_s.detach() if detach_expectile else h_s
        return {
            "action_logits": logits,
            "reward_pred": r_hat,  # in units of reward_scale
            "state_pred": s_p,
            "action_feat": a_p,
            "return_logits": self.return_head(h_s.detach() if detach_bins else h_s),
            "expectile": self.expectile_head(exp_in).squeeze(-1),  # in units of return_scale
        }

    def forward_batch(self, batch: WindowBatch, **kw):
        self.n_window_evals += len(batch)
        t = batch_to_tensors(batch)
        return self(t["states"], t["rtg"], t["actions"], t["mask"], **kw)

    # -- LM path --------------------------------------------------------

    @property
    def has_lm(self) -> bool:
        return self.cfg.vocab_size > 0

    def lm_forward(self, tokens):
        if not self.has_lm:
            raise RuntimeError("model has no language-model projections")
        L = tokens.shape[1]
        if L > self.cfg.lm_ctx:
            raise ValueError(f"token window {L} exceeds lm_ctx={self.cfg.lm_ctx}")
        x = self.lm_tok(tokens) + self.lm_pos(torch.arange(L, device=tokens.device))
        return self.lm_head(self.backbone(self.drop(x)))


def batch_to_tensors(batch: WindowBatch) -> dict:
    return {
        "states": torch.from_numpy(batch.states),
        "rtg": torch.from_numpy(batch.rtg),
        "actions": torch.from_numpy(batch.actions),
        "rewards": torch.from_numpy(batch.rewards),
        "mask": torch.from_numpy(batch.mask),
    }


def forward(model: PolicyModel, window: ContextWindow) -> dict:
    """Outputs for one window: per-step arrays plus the expectile read at the final state token."""
    if window.T > model.cfg.T_max:
        raise ValueError(f"window of {window.T} steps exceeds T_max={model.cfg.T_max}")
    with torch.no_grad():
        out = model.forward_batch(collate([window]))
    res = {k: v[0] for k, v in out.items()}
    res["expectile_value"] = float(res["expectile"][-1]) * model.cfg.return_scale
    return res


def embed_window(model: PolicyModel, window: ContextWindow) -> torch.Tensor:
    t = batch_to_tensors(collate([window]))
    with torch.no_grad():
        tok, _ = model.embed(t["states"], t["rtg"], t["actions"], t["mask"])
    return tok[0]


# -- parameter groups -------------------------------------------------------


def is_backbone(name: str) -> bool:
    return name.startswith(("blocks.", "ln_f.")) and "lora_" not in name


def is_lora(name: str) -> bool:
    return "lora_" in name


def is_lm(name: str) -> bool:
    return name.startswith("lm_")


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, 0.0, 0.02)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def init_model(cfg: ModelConfig, prior_checkpoint=None, seed: int = 0) -> PolicyModel:
    """Fresh model; backbone (and LM projections) copied from ``prior_checkpoint`` when given."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = PolicyModel(cfg)
        model.apply(_init_weights)
        with torch.no_grad():
            model.pad_embed.normal_(0.0, 0.02)
    if prior_checkpoint is not None:
        prior = load_model(prior_checkpoint) if isinstance(prior_checkpoint, (str, Path)) else prior_checkpoint
        copy_backbone(prior, model)
    return model


def copy_backbone(src: PolicyModel, dst: PolicyModel) -> None:
    s_params = dict(src.named_parameters())
    d_params = dict(dst.named_parameters())
    names = [n for n in s_params if is_backbone(n) or (is_lm(n) and dst.has_lm)]
    missing = [n for n in names if n not in d_params]
    bad = [n for n in names if n in d_params and s_params[n].shape != d_params[n].shape]
    wanted = [n for n in d_params if is_backbone(n) and n not in s_params]
    if missing or bad or wanted:
        raise CheckpointError(
            "backbone dimension mismatch: "
            + ", ".join(f"{n} {tuple(s_params[n].shape)} vs {tuple(d_params[n].shape) if n in d_params else 'absent'}"
                        for n in missing + bad)
            + (f"; absent from checkpoint: {', '.join(wanted)}" if wanted else "")
        )
    with torch.no_grad():
        for n in names:
            d_params[n].copy_(s_params[n])


# -- LoRA ----------------------------------------------------------------------


def lora_attach(model: PolicyModel, r: int, alpha_scale: float | None = None, seed: int = 0) -> PolicyModel:
    """Wrap every Q/K/V projection; ``A`` draws from its own generator seeded by ``seed``."""
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    alpha_scale = model.cfg.lora_alpha if alpha_scale is None else alpha_scale
    gen = torch.Generator().manual_seed(int(seed))
    for blk in model.blocks:
        for name in ("q", "k", "v"):
            lin = getattr(blk.attn, name)
            if isinstance(lin, LoRALinear):
                raise ValueError(f"LoRA already attached to attention {name!r}")
            if r >= min(lin.in_features, lin.out_features):
                raise ValueError(f"LoRA rank {r} too large for a {lin.out_features}x{lin.in_features} matrix")
            setattr(blk.attn, name, LoRALinear(lin, r, alpha_scale, gen))
    return model


def lora_merge(model: PolicyModel) -> PolicyModel:
    for blk in model.blocks:
        for name in ("q", "k", "v"):
            lin = getattr(blk.attn, name)
            if isinstance(lin, LoRALinear):
                setattr(blk.attn, name, lin.merged())
    return model


def has_lora(model: PolicyModel) -> bool:
    return any(isinstance(m, LoRALinear) for m in model.modules())


def configure_trainable(model: PolicyModel, mode: str | None = None, seed: int = 0) -> PolicyModel:
    """Set ``requires_grad`` per freeze mode.

    ``lora``: adapters, embeddings and heads train; backbone base weights and
    LM projections stay fixed. ``frozen``: as ``lora`` without adapters.
    ``full``: everything trains.
    """
    mode = mode or model.cfg.freeze_mode
    if mode not in FREEZE_MODES:
        raise ValueError(f"freeze mode must be one of {FREEZE_MODES}")
    if mode == "lora" and model.cfg.lora_rank > 0 and not has_lora(model):
        lora_attach(model, model.cfg.lora_rank, seed=seed)
    for name, p in model.named_parameters():
        if mode == "full":
            p.requires_grad_(True)
        else:
            p.requires_grad_(not (is_backbone(name) or is_lm(name)))
    return model


def parameter_report(model: PolicyModel) -> dict:
    total = trainable = bb_total = bb_train = 0
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        n = p.numel()
        total += n
        in_bb = is_backbone(name) or is_lora(name)
        bb_total += n if in_bb else 0
        if p.requires_grad:
            trainable += n
            bb_train += n if in_bb else 0
            g = "lora" if is_lora(name) else name.split(".")[0]
            groups[g] = groups.get(g, 0) + n
    return {
        "total": total,
        "trainable": trainable,
        "trainable_fraction": trainable / total,
        "backbone_total": bb_total,
        "backbone_trainable": bb_train,
        "backbone_trainable_fraction": bb_train / bb_total if bb_total else 0.0,
        "trainable_groups": groups,
    }


def checksum(model: PolicyModel, predicate=None) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if predicate is None or predicate(name):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoint I/O ------------------------------------------------------------


def save_model(model: PolicyModel, path, meta: dict | None = None) -> None:
    """JSON header line, then little-endian float32 tensors in table order."""
    table = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lora = None
    for m in model.modules():
        if isinstance(m, LoRALinear):
            lora = {"r": m.r, "alpha": m.scaling * m.r}
            break
    header = {
        "version": CHECKPOINT_VERSION,
        "cfg": asdict(model.cfg),
        "lora": lora,
        "tensors": table,
        "meta": meta or {},
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def read_header(path) -> tuple[dict, int]:
    with Path(path).open("rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint header") from exc
    if not isinstance(header, dict) or "version" not in header:
        raise CheckpointError(f"{path}: corrupted checkpoint header")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header['version']} is not supported (expected {CHECKPOINT_VERSION})"
        )
    for key in ("cfg", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: corrupted checkpoint header (no {key!r})")
    return header, len(line)


def load_model(path) -> PolicyModel:
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    cfg = ModelConfig.from_dict(header["cfg"])
    model = PolicyModel(cfg)
    if header.get("lora"):
        lora_attach(model, int(header["lora"]["r"]), float(header["lora"]["alpha"]))
    entries = {e["name"]: e for e in header["tensors"]}
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in entries]
    if missing:
        raise CheckpointError(f"{path}: missing tensor(s) {', '.join(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            e = entries[name]
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            end = e["offset"] + 4 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: tensor {name} truncated")
            arr = np.frombuffer(raw[e["offset"]:end], dtype="<f4").reshape(e["shape"])
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()))
    model.meta = header.get("meta", {})
    return model
