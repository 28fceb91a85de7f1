"""Character-level text pretraining for the shared backbone."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelConfig, PolicyModel, init_model, save_model

logger = logging.getLogger(__name__)

UNK_CHAR = "�"


@dataclass
class TextCorpus:
    """Token ids plus the character vocabulary they index.

    ``vocab_size`` counts characters seen in the corpus; unseen characters map
    to ``unk_id == vocab_size``, so a model needs ``n_tokens`` output rows.
    """

    ids: np.ndarray
    vocab: dict[str, int]
    source: str = ""

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return len(self.vocab)

    @property
    def n_tokens(self) -> int:
        return len(self.vocab) + 1

    def __len__(self) -> int:
        return len(self.ids)

    def encode(self, text: str) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.vocab.get(c, unk) for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        inv = {i: c for c, i in self.vocab.items()}
        return "".join(inv.get(int(i), UNK_CHAR) for i in ids)

    def split(self, held_out: float = 0.1) -> tuple["TextCorpus", "TextCorpus"]:
        cut = int(len(self.ids) * (1 - held_out))
        return replace(self, ids=self.ids[:cut]), replace(self, ids=self.ids[cut:])


def tokenize_corpus(text: str, level: str = "char", source: str = "") -> TextCorpus:
    if level != "char":
        raise ValueError(f"unsupported tokenisation level {level!r}")
    if not text:
        raise ValueError("empty text")
    vocab: dict[str, int] = {}
    for c in text:
        if c not in vocab:
            vocab[c] = len(vocab)
    return TextCorpus(np.array([vocab[c] for c in text], dtype=np.int64), vocab, source)


def detokenize(corpus: TextCorpus, ids=None) -> str:
    return corpus.decode(corpus.ids if ids is None else ids)


def bundled_text() -> str:
    return resources.files("misret").joinpath("data/corpus.txt").read_text(encoding="utf-8")


def load_corpus(path=None) -> TextCorpus:
    if path is None:
        return tokenize_corpus(bundled_text(), source="bundled:corpus.txt")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {p}")
    return tokenize_corpus(p.read_text(encoding="utf-8"), source=str(p))


def make_language_batch(corpus: TextCorpus, batch: int, length: int, seed=None,
                        rng: np.random.Generator | None = None) -> torch.Tensor:
    """``batch`` contiguous slices of ``length`` tokens at uniform random offsets."""
    if length > len(corpus):
        raise ValueError(f"window length {length} exceeds corpus of {len(corpus)} tokens")
    if batch <= 0 or length < 1:
        raise ValueError("batch and length must be positive")
    rng = rng if rng is not None else np.random.default_rng(seed)
    starts = rng.integers(0, len(corpus) - length + 1, size=batch)
    idx = starts[:, None] + np.arange(length)[None, :]
    return torch.from_numpy(corpus.ids[idx])


def language_loss(model: PolicyModel, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood through the LM projections."""
    if tokens.shape[1] < 2:
        raise ValueError("token window must hold at least two tokens")
    logits = model.lm_forward(tokens[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))


@torch.no_grad()
def held_out_nll(model: PolicyModel, corpus: TextCorpus, length: int | None = None) -> float:
    """Token-weighted NLL over consecutive non-overlapping windows of ``corpus``."""
    length = length or model.cfg.lm_ctx
    was = model.training
    model.eval()
    n = (len(corpus) - 1) // length
    if n == 0:
        raise ValueError("held-out slice shorter than one window")
    ids = torch.from_numpy(corpus.ids[: n * length + 1])
    x = torch.stack([ids[i * length: (i + 1) * length + 1] for i in range(n)])
    total = 0.0
    for chunk in x.split(64):
        total += float(language_loss(model, chunk)) * chunk.shape[0]
    model.train(was)
    return total / n


@dataclass
class PretrainReport:
    initial_nll: float
    final_nll: float
    losses: list

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_nll / self.initial_nll


def lm_config(cfg: ModelConfig, corpus: TextCorpus) -> ModelConfig:
    return replace(cfg, vocab_size=corpus.n_tokens, freeze_mode="full", lora_rank=cfg.lora_rank)


def pretrain_lm(cfg: ModelConfig, corpus: TextCorpus, steps: int, lr: float = 1e-3, seed: int = 0,
                batch: int = 32, held_out: float = 0.1, path=None, log_every: int = 200):
    """Train backbone and LM projections by next-token prediction.

    Returns ``(model, report)``; the model is saved to ``path`` when given.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = lm_config(cfg, corpus)
    train_c, test_c = corpus.split(held_out)
    model = init_model(cfg, seed=seed)
    model.train()
    initial = held_out_nll(model, test_c)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for step in range(steps):
            x = make_language_batch(train_c, batch, cfg.lm_ctx + 1, rng=rng)
            loss = language_loss(model, x)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"language loss diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            losses.append(loss.item())
            if log_every and step % log_every == 0:
                logger.info("lm step %d loss %.4f", step, losses[-1])
    final = held_out_nll(model, test_c)
    report = PretrainReport(initial, final, losses)
    if path is not None:
        save_model(model, path, meta={
            "kind": "lm_prior", "vocab": corpus.vocab, "corpus": corpus.source,
            "initial_nll": initial, "final_nll": final, "steps": steps, "seed": seed,
        })
    return model, report


def corpus_from_checkpoint_meta(meta: dict, corpus: TextCorpus) -> None:
    if meta.get("vocab") and meta["vocab"] != corpus.vocab:
        raise ValueError("corpus vocabulary does not match the prior checkpoint")
