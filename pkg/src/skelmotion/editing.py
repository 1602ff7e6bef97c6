"""Zero-shot editing by cross-attention modulation.

A source and a target trajectory start from the same noise. At every DDIM
step the source pass records its cross-attention maps, an edit function
combines them with the target's own maps, and the target step is re-run
with the combined maps injected in place of its softmax output (values still
come from the target prompt).

Maps are indexed ``(..., joint, frame, token)``.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import torch
from torch import Tensor

from .denoiser import AttentionRecord, Denoiser, decode, denoise_step, initial_noise, step_pairs
from .motion_io import MotionSequence
from .schedule import GuidanceConfig
from .text import TextEmbedding
from .vae import SkeletonVAE

KINDS = ("word_swap", "prompt_refine", "reweight", "mirror")


class EditSpecError(ValueError):
    """Invalid edit specification; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# -- modulation functions -------------------------------------------------------

def edit_word_swap(m_src: Tensor, m_tgt: Tensor, t: int, tau: float) -> Tensor:
    """Target maps once ``t < tau``, source maps before that."""
    if m_src.shape != m_tgt.shape:
        raise EditSpecError("tau", f"word swap needs equal map shapes, got {tuple(m_src.shape)} and {tuple(m_tgt.shape)}")
    return m_tgt if t < tau else m_src


def edit_prompt_refine(m_src: Tensor, m_tgt: Tensor, alignment: Sequence[int]) -> Tensor:
    """Token ``k`` of the target takes source column ``alignment[k]``, or keeps
    its own attention when the alignment is -1."""
    k_src, k_tgt = m_src.shape[-1], m_tgt.shape[-1]
    a = torch.as_tensor(list(alignment), dtype=torch.long)
    if a.numel() != k_tgt:
        raise EditSpecError("alignment", f"has {a.numel()} entries for {k_tgt} target tokens")
    if a.numel() and (a.min() < -1 or a.max() >= k_src):
        raise EditSpecError("alignment", f"entries must lie in [-1, {k_src - 1}]")
    if m_src.shape[:-1] != m_tgt.shape[:-1]:
        raise EditSpecError("alignment", "source and target maps differ outside the token axis")
    gathered = m_src[..., a.clamp(min=0)]
    return torch.where(a >= 0, gathered, m_tgt)


def edit_reweight(m: Tensor, k_star: int, s: float) -> Tensor:
    """Scale token column ``k_star`` by ``s``; no renormalization."""
    if not 0 <= k_star < m.shape[-1]:
        raise EditSpecError("k_star", f"token index {k_star} outside [0, {m.shape[-1] - 1}]")
    out = m.clone()
    out[..., k_star] = s * m[..., k_star]
    return out


def edit_mirror(m: Tensor, counterpart: Sequence[int]) -> Tensor:
    """Row ``j`` takes the attention of joint ``counterpart[j]``."""
    if len(counterpart) != m.shape[-3]:
        raise EditSpecError("counterpart", f"map over {len(counterpart)} joints, attention has {m.shape[-3]}")
    return m[..., list(counterpart), :, :]


# -- edit specification -----------------------------------------------------------

@dataclass
class EditSpec:
    kind: str
    tau: float | None = None
    alignment: list[int] | None = None
    k_star: int | None = None
    word: str | None = None
    s: float = 1.0
    counterpart: tuple[int, ...] | None = None

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], T: int = 1000) -> "EditSpec":
        """Parse a stanza such as ``{kind: reweight, k_star: 2, s: 1.5}``.

        ``tau`` defaults to ``0.8 * T``; ``tau_fraction`` gives it as a fraction of T.
        """
        if not isinstance(doc, Mapping):
            raise EditSpecError("<root>", "edit spec must be a mapping")
        kind = doc.get("kind")
        if kind not in KINDS:
            raise EditSpecError("kind", f"must be one of {KINDS}, got {kind!r}")
        known = {"kind", "tau", "tau_fraction", "alignment", "k_star", "word", "s", "counterpart"}
        extra = set(doc) - known
        if extra:
            raise EditSpecError(sorted(extra)[0], "unknown field")
        spec = cls(kind=kind)
        if kind == "word_swap":
            if "tau" in doc and "tau_fraction" in doc:
                raise EditSpecError("tau", "give either tau or tau_fraction, not both")
            if "tau_fraction" in doc:
                spec.tau = _number(doc, "tau_fraction") * T
            else:
                spec.tau = _number(doc, "tau") if "tau" in doc else 0.8 * T
            if not 0 <= spec.tau <= T:
                raise EditSpecError("tau", f"must lie in [0, {T}]")
        elif kind == "prompt_refine":
            if "alignment" in doc and doc["alignment"] is not None:
                a = doc["alignment"]
                if not isinstance(a, list) or not all(isinstance(v, int) for v in a):
                    raise EditSpecError("alignment", "must be a list of integers")
                spec.alignment = list(a)
        elif kind == "reweight":
            if "k_star" in doc:
                if not isinstance(doc["k_star"], int):
                    raise EditSpecError("k_star", "must be an integer token index")
                spec.k_star = doc["k_star"]
            elif "word" in doc:
                spec.word = str(doc["word"]).lower()
            else:
                raise EditSpecError("k_star", "reweight needs k_star or word")
            spec.s = _number(doc, "s") if "s" in doc else 1.0
        elif kind == "mirror" and doc.get("counterpart") is not None:
            spec.counterpart = tuple(int(v) for v in doc["counterpart"])
        return spec

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        for key in ("tau", "alignment", "k_star", "word", "counterpart"):
            val = getattr(self, key)
            if val is not None:
                out[key] = list(val) if isinstance(val, tuple) else val
        if self.kind == "reweight":
            out["s"] = self.s
        return out


def _number(doc: Mapping[str, Any], key: str) -> float:
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or val != val or abs(val) == float("inf"):
        raise EditSpecError(key, f"must be a finite number, got {val!r}")
    return float(val)


def token_alignment(source: Sequence[str], target: Sequence[str]) -> list[int]:
    """Map each target token to a matching source token index, -1 if new."""
    out = [-1] * len(target)
    matcher = difflib.SequenceMatcher(a=list(source), b=list(target), autojunk=False)
    for block in matcher.get_matching_blocks():
        for i in range(block.size):
            out[block.b + i] = block.a + i
    return out


def resolve(spec: EditSpec, src: TextEmbedding, tgt: TextEmbedding, counterpart: Sequence[int]) -> EditSpec:
    """Fill defaults and check the spec against the prompt pair."""
    if spec.kind == "word_swap":
        if src.n_tokens != tgt.n_tokens:
            raise EditSpecError(
                "target_text", f"word swap needs equal token spans, got {src.n_tokens} and {tgt.n_tokens}"
            )
        return spec
    if spec.kind == "prompt_refine":
        alignment = spec.alignment if spec.alignment is not None else token_alignment(src.tokens, tgt.tokens)
        if len(alignment) != tgt.n_tokens:
            raise EditSpecError("alignment", f"has {len(alignment)} entries for {tgt.n_tokens} target tokens")
        if any(a < -1 or a >= src.n_tokens for a in alignment):
            raise EditSpecError("alignment", f"entries must lie in [-1, {src.n_tokens - 1}]")
        return EditSpec(kind=spec.kind, alignment=list(alignment))
    if src.tokens != tgt.tokens:
        raise EditSpecError("target_text", f"{spec.kind} keeps the prompt; target must equal source")
    if spec.kind == "reweight":
        k = spec.k_star
        if k is None:
            if spec.word not in src.tokens:
                raise EditSpecError("word", f"{spec.word!r} is not a token of the prompt")
            k = src.tokens.index(spec.word)
        if not 0 <= k < src.n_tokens:
            raise EditSpecError("k_star", f"token index {k} outside [0, {src.n_tokens - 1}]")
        return EditSpec(kind=spec.kind, k_star=k, s=spec.s)
    cp = tuple(spec.counterpart) if spec.counterpart is not None else tuple(counterpart)
    if sorted(cp) != list(range(len(cp))) or any(cp[cp[j]] != j for j in range(len(cp))):
        raise EditSpecError("counterpart", "must be an involutive permutation of joint indices")
    return EditSpec(kind=spec.kind, counterpart=cp)


def make_edit(spec: EditSpec) -> Callable[[Tensor, Tensor, int], Tensor]:
    """``Edit(M_src, M_tgt, t)`` for a resolved spec."""
    if spec.kind == "word_swap":
        return lambda ms, mt, t: edit_word_swap(ms, mt, t, spec.tau)
    if spec.kind == "prompt_refine":
        return lambda ms, mt, t: edit_prompt_refine(ms, mt, spec.alignment)
    if spec.kind == "reweight":
        return lambda ms, mt, t: edit_reweight(ms, spec.k_star, spec.s)
    if spec.kind == "mirror":
        return lambda ms, mt, t: edit_mirror(ms, spec.counterpart)
    raise EditSpecError("kind", f"unknown edit kind {spec.kind!r}")


# -- dual-trajectory controller -----------------------------------------------------

@dataclass
class EditTrace:
    source: AttentionRecord
    modulated: AttentionRecord
    spec: EditSpec
    divergence: list[dict[str, float]] = field(default_factory=list)


def edit_generate(
    model: Denoiser,
    vae: SkeletonVAE,
    source_text: str,
    target_text: str | None,
    spec: EditSpec,
    seed: int = 0,
    guidance: GuidanceConfig | None = None,
    n_frames: int = 64,
    n_steps: int = 50,
    counterpart: Sequence[int] | None = None,
) -> tuple[MotionSequence, MotionSequence, EditTrace]:
    """Run source and edited trajectories from shared noise.

    ``target_text=None`` reuses the source prompt (reweight / mirror).
    ``counterpart`` defaults to the left/right map of the VAE's atomic joints.
    """
    from .skeleton import counterpart_map

    guidance = guidance or GuidanceConfig()
    enc = model.text_encoder
    src = enc.encode(source_text)
    tgt = enc.encode(source_text if target_text is None else target_text)
    null = enc.encode(guidance.null_text)
    if counterpart is None:
        counterpart = counterpart_map(vae.plan.stages[-1].topology)
    spec = resolve(spec, src, tgt, counterpart)
    edit = make_edit(spec)
    needs_target_maps = spec.kind in ("word_swap", "prompt_refine")

    z = initial_noise(model, vae, n_frames, seed)
    z_star = z.clone()
    trace = EditTrace(AttentionRecord(src.tokens), AttentionRecord(tgt.tokens), spec)
    for t, t_prev in step_pairs(model, n_steps):
        z_next, m_src = denoise_step(model, z, t, t_prev, src, null, guidance.w)
        if needs_target_maps:
            with torch.no_grad():
                _, m_tgt = model(z_star, t, tgt.vectors[None])
        else:
            m_tgt = m_src
        m_hat = [edit(ms, mt, t) for ms, mt in zip(m_src, m_tgt)]
        z_star, applied = denoise_step(
            model, z_star, t, t_prev, tgt, null, guidance.w, hook=lambda l, _m: m_hat[l]
        )
        z = z_next
        trace.source.append(t, m_src)
        trace.modulated.append(t, applied)
        same = m_hat[0].shape == m_src[0].shape
        trace.divergence.append({
            "t": t,
            "map_abs_diff": float(torch.stack([(a - b).abs().mean() for a, b in zip(m_hat, m_src)]).mean())
            if same else float("nan"),
            "latent_dist": float((z_star - z).norm()),
        })
    return decode(model, vae, z), decode(model, vae, z_star), trace
