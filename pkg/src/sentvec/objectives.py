"""Training losses: translation, (denoising) auto-encoding, embedding MSE,
their weighted sum, and the interpolation loss for decoder fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MASK, N_SPECIAL
from .model import BottleneckModel

AE = "AE"
DAE = "DAE"

# independent RNG streams keyed by purpose
STREAM_NOISE = 1
STREAM_INTERP = 2


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0  # MSE weight
    beta: float = 0.0  # AE / DAE weight
    ae_mode: str = DAE
    # Diagnostic only: 0 drops the translation term (MSE-only collapse runs).
    mt_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "mt_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ObjectiveError(f"loss weight {name} must be finite and >= 0, got {v}")
        if self.ae_mode not in (AE, DAE):
            raise ObjectiveError(f"ae_mode must be AE or DAE, got {self.ae_mode!r}")


@dataclass(frozen=True)
class NoiseConfig:
    p_delete: float = 0.1
    p_mask: float = 0.1
    shuffle_window: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("p_delete", "p_mask"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ObjectiveError(f"{name} must be in [0, 1], got {v}")
        if self.shuffle_window < 1:
            raise ObjectiveError("shuffle_window must be >= 1")

    @property
    def is_identity(self) -> bool:
        return self.p_delete == 0 and self.p_mask == 0 and self.shuffle_window == 1


def sample_rng(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    """Counter-based generator for one sample, independent of batch layout."""
    return np.random.default_rng([seed, stream, step, index])


def apply_noise(tokens: Sequence[int], cfg: NoiseConfig, rng: np.random.Generator,
                reserved: int = N_SPECIAL) -> list[int]:
    """Delete, mask, then locally shuffle the content tokens of a sentence.

    Ids below ``reserved`` are special (BOS, EOS, PAD, MASK and, when the
    caller passes the first content id, language tokens). Special tokens at
    either edge pass through untouched. At least one content token always
    survives.
    """
    toks = list(tokens)
    lo, hi = 0, len(toks)
    while lo < hi and toks[lo] < reserved:
        lo += 1
    while hi > lo and toks[hi - 1] < reserved:
        hi -= 1
    head, content, tail = toks[:lo], toks[lo:hi], toks[hi:]
    if not content or cfg.is_identity:
        return toks
    n = len(content)
    u_del = rng.random(n)
    u_mask = rng.random(n)
    kept = [
        MASK if u_mask[i] < cfg.p_mask else t
        for i, t in enumerate(content)
        if not u_del[i] < cfg.p_delete
    ]
    if not kept:
        kept = [content[int(rng.integers(n))]]
    if cfg.shuffle_window > 1 and len(kept) > 1:
        # each token moves by less than the window: sort by index + U(0, w)
        keys = np.arange(len(kept)) + rng.uniform(0.0, cfg.shuffle_window, size=len(kept))
        kept = [kept[i] for i in np.argsort(keys, kind="stable")]
    return head + kept + tail


@dataclass
class Batch:
    """Aligned translation pairs; language fields are language indices."""

    src: list[tuple[int, ...]]
    tgt: list[tuple[int, ...]]
    src_langs: np.ndarray
    tgt_langs: np.ndarray
    tgt_lang_tokens: np.ndarray
    row_ids: np.ndarray
    step: int = 0

    def __len__(self) -> int:
        return len(self.src)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)


def loss_translation(model: BottleneckModel, batch: Batch, memory: Tensor | None = None) -> Tensor:
    same = np.flatnonzero(np.asarray(batch.src_langs) == np.asarray(batch.tgt_langs))
    if same.size:
        raise ObjectiveError(f"pair {int(same[0])} is same-language; route it to the auto-encoding loss")
    if memory is None:
        memory = model.encode(batch.src)
    return model.teacher_forced_loss(memory, batch.tgt, batch.tgt_lang_tokens)


def noised_targets(batch: Batch, cfg: NoiseConfig) -> list[list[int]]:
    return [
        apply_noise(t, cfg, sample_rng(cfg.seed, STREAM_NOISE, batch.step, i))
        for i, t in enumerate(batch.tgt)
    ]


def loss_denoise(model: BottleneckModel, batch: Batch, cfg: NoiseConfig, ae_mode: str = DAE) -> Tensor:
    """Reconstruct each clean target from its (optionally noised) self."""
    inputs = noised_targets(batch, cfg) if ae_mode == DAE else batch.tgt
    return model.teacher_forced_loss(model.encode(inputs), batch.tgt, batch.tgt_lang_tokens)


def mse_between(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ObjectiveError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    d = ad.sub(a, b)
    return ad.mean(ad.mul(d, d))


def loss_mse_align(model: BottleneckModel, batch: Batch, src_emb: Tensor | None = None,
                   tgt_emb: Tensor | None = None) -> Tensor:
    """Mean over pairs of the per-coordinate mean squared embedding gap."""
    if src_emb is None:
        src_emb = model.encode(batch.src)
    if tgt_emb is None:
        tgt_emb = model.encode(batch.tgt)
    return mse_between(src_emb, tgt_emb)


def combine(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """mt_weight*MT + alpha*MSE + beta*AE, skipping zero-weight terms."""
    terms = []
    for key, w in (("mt", weights.mt_weight), ("mse", weights.alpha), ("ae", weights.beta)):
        if w != 0 and key in components:
            t = components[key]
            terms.append(t if w == 1.0 else ad.scale(t, w))
    if not terms:
        raise ObjectiveError("every loss weight is zero")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def combined_loss(model: BottleneckModel, batch: Batch, weights: LossWeights, cfg: NoiseConfig,
                  report_all: bool = False) -> LossBreakdown:
    """Weighted objective and its components.

    Components with zero weight are only computed when ``report_all`` is set,
    and then outside any tape so they add nothing to the backward pass.
    """
    parts: dict[str, Tensor] = {}
    src_emb = model.encode(batch.src)
    if weights.mt_weight != 0:
        parts["mt"] = loss_translation(model, batch, src_emb)
    if weights.alpha != 0:
        parts["mse"] = loss_mse_align(model, batch, src_emb, model.encode(batch.tgt))
    if weights.beta != 0:
        parts["ae"] = loss_denoise(model, batch, cfg, weights.ae_mode)
    total = combine(parts, weights)
    comps = {k: float(v.data) for k, v in parts.items()}
    if report_all:
        with ad.no_record():
            if "mt" not in parts:
                comps["mt"] = float(loss_translation(model, batch, Tensor(src_emb.data)).data)
            if "mse" not in parts:
                comps["mse"] = float(loss_mse_align(model, batch, Tensor(src_emb.data)).data)
            if "ae" not in parts:
                comps["ae"] = float(loss_denoise(model, batch, cfg, weights.ae_mode).data)
    comps["total"] = float(total.data)
    return LossBreakdown(total, comps)


def interpolation_weights(seed: int, step: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, STREAM_INTERP, step]).uniform(0.0, 1.0, size=n)


def interpolation_finetune_loss(model: BottleneckModel, src: Sequence[Sequence[int]],
                                tgt: Sequence[Sequence[int]], tgt_lang_tokens, u) -> Tensor:
    """Decode ``u*emb(src) + (1-u)*emb(tgt)`` into ``tgt``.

    The encoder must be frozen; embeddings enter the graph as constants.
    """
    if any(t.requires_grad for t in model.encoder_params().values()):
        raise ObjectiveError("interpolation fine-tuning requires a frozen encoder")
    u = np.asarray(u, dtype=np.float32).reshape(-1, 1)
    ex = model.embed(src)
    ey = model.embed(tgt)
    z = u * ex + (np.float32(1.0) - u) * ey
    return model.teacher_forced_loss(Tensor(z.astype(np.float32)), tgt, tgt_lang_tokens)
