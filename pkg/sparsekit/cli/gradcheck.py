"""
Finite-difference checks of every hand-derived gradient:
the SparseK JVP, the attention backward and the full toy model.
Points whose perturbation changes the discrete selection structure are skipped.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal

import numpy as np
import torch
import torch.nn.functional as F

from sparsekit.attention.config import AttnConfig, AttnParams, LinearAttnParams, new_attn_params, \
    new_linear_params
from sparsekit.attention.sparse import AttnTape, sparsek_attention, sparsek_attention_backward
from sparsekit.exceptions import ArgumentException
from sparsekit.numerics import finite_diff_jvp, make_rng, randn, relative_error, seed_everything
from sparsekit.ops.sparsek import SparseKSolution, sparsek, sparsek_jvp
from sparsekit.selection.scoring import ScoringConfig, ScoringParams, new_scoring_params
from sparsekit.trainer.config import ToyModelConfig
from sparsekit.trainer.model import ToyDecoder

logger = logging.getLogger("sparsekit")

Preset = Literal["op", "attn", "model"]
PRESETS = ("op", "attn", "model")

TOLERANCE: Dict[str, float] = {"op": 1e-4, "attn": 1e-4, "model": 1e-3}

JvpFn = Callable[[SparseKSolution, np.ndarray], np.ndarray]


@dataclass
class GradcheckReport:
    preset: str
    tolerance: float
    checked: int = 0
    skipped: int = 0
    max_rel_err: float = 0.0
    worst: str = ""
    errors: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err < self.tolerance

    def record(self, err: float, label: str) -> None:
        self.checked += 1
        self.errors.append(err)
        if err > self.max_rel_err or not np.isfinite(err):
            self.max_rel_err = err if np.isfinite(err) else float("inf")
            self.worst = label

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "passed": self.passed,
            "checked": self.checked,
            "skipped": self.skipped,
            "max_rel_err": self.max_rel_err,
            "tolerance": self.tolerance,
            "worst": self.worst,
        }


@contextlib.contextmanager
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


# ---- op ---- #

def near_breakpoint(z: np.ndarray, sol: SparseKSolution, margin: float) -> bool:
    if sol.degenerate or not sol.feasible:
        return True
    gaps = np.minimum(np.abs(z - sol.tau), np.abs(z - sol.tau - 1.0))
    return bool(np.min(gaps) < margin)


def check_op(seed: int = 0, points: int = 500, m_max: int = 16, h: float = 1e-6, margin: float = 1e-4,
             jvp: JvpFn = sparsek_jvp) -> GradcheckReport:
    """
    JVP against central differences at random (z, k, v) away from breakpoints.
    """
    rng = make_rng(seed)
    report = GradcheckReport("op", TOLERANCE["op"])
    attempts = 0
    while report.checked < points:
        attempts += 1
        if attempts > 20 * points:
            break
        m = int(rng.integers(2, m_max + 1))
        z = rng.standard_normal(m) * 2.0
        k = float(rng.uniform(0.5, m))
        sol = sparsek(z, k)
        if near_breakpoint(z, sol, margin):
            report.skipped += 1
            continue
        v = rng.standard_normal(m)
        analytic = jvp(sol, v)
        numeric = finite_diff_jvp(lambda t: sparsek(t, k).p, z, v, h)
        report.record(relative_error(analytic, numeric), f"m={m} k={k:.3f}")
    return report


# ---- attention ---- #

ATTN_CASES: List[dict] = [
    dict(k=3, window=2, key_mode="hard", selection_mode="soft"),
    dict(k=2.5, window=3, key_mode="soft", selection_mode="soft"),
    dict(k=3, window=0, key_mode="hard", selection_mode="soft"),
    dict(k=3, window=2, key_mode="hard", selection_mode="soft", linear_mix=True),
]


def _attn_inputs(x, params: AttnParams, scoring: ScoringParams, lin: LinearAttnParams | None) -> Dict[str, torch.Tensor]:
    named = {"x": x, **params.tensors(), "w_score": scoring.w_score}
    if lin is not None:
        named["w_phi"] = lin.w_phi
    return named


def _attn_eval(named: Dict[str, torch.Tensor], scoring_cfg: ScoringConfig, cfg: AttnConfig) -> tuple:
    params = AttnParams(wq=named["wq"], wk=named["wk"], wv=named["wv"], wo=named["wo"])
    scoring = ScoringParams(w_score=named["w_score"], cfg=scoring_cfg)
    lin = LinearAttnParams(named["w_phi"]) if "w_phi" in named else None
    return sparsek_attention(named["x"], params, scoring, cfg, lin)


def check_attention(seed: int = 0, trials: int = 4, n: int = 12, h: float = 1e-6) -> GradcheckReport:
    report = GradcheckReport("attn", TOLERANCE["attn"])
    rng = make_rng(seed)
    scoring_cfg = ScoringConfig()
    with float64():
        for trial in range(trials):
            for case in ATTN_CASES:
                cfg = AttnConfig(heads=2, head_dim=4, **case)
                x = randn(rng, n, cfg.dim)
                params = new_attn_params(cfg, rng)
                scoring = new_scoring_params(cfg.dim, scoring_cfg, rng)
                lin = new_linear_params(cfg, rng, noise=0.1) if cfg.linear_mix else None
                named = {k: t.clone().requires_grad_(True) for k, t in _attn_inputs(x, params, scoring, lin).items()}
                out, tape = _attn_eval(named, scoring_cfg, cfg)
                g = randn(rng, *out.shape)
                grads = sparsek_attention_backward(tape, g)
                base_key = tape.structure_key()
                for name, t in named.items():
                    v = randn(rng, *t.shape)
                    analytic = float((grads[name] * v).sum())
                    sides = []
                    for sign in (1.0, -1.0):
                        moved = {k: s.detach() for k, s in named.items()}
                        moved[name] = moved[name] + sign * h * v
                        with torch.no_grad():
                            o, tp = _attn_eval(moved, scoring_cfg, cfg)
                        sides.append((float((o * g).sum()), tp.structure_key()))
                    if sides[0][1] != base_key or sides[1][1] != base_key:
                        report.skipped += 1
                        continue
                    numeric = (sides[0][0] - sides[1][0]) / (2.0 * h)
                    report.record(relative_error([analytic], [numeric], floor=1e-6), f"trial={trial} {case} {name}")
    return report


# ---- model ---- #

def gradcheck_model_config(seed: int = 0) -> ToyModelConfig:
    return ToyModelConfig(
        vocab=32, dim=16, layers=2, heads=2, context=32, kind="sparsek_sw",
        attn=AttnConfig(k=4, window=4, heads=2, head_dim=8), seed=seed,
    )


def _model_loss(model: ToyDecoder, idx: torch.Tensor, targets: torch.Tensor, tapes: List[AttnTape] | None = None):
    logits = model(idx, tapes=tapes)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def _structure(tapes: List[AttnTape]) -> str:
    return "#".join(t.structure_key() for t in tapes)


def check_model(seed: int = 0, h: float = 1e-6, cfg: ToyModelConfig | None = None) -> GradcheckReport:
    """
    every parameter's gradient along a random direction vs. central differences (64-bit).
    """
    report = GradcheckReport("model", TOLERANCE["model"])
    with float64():
        seed_everything(seed)
        cfg = cfg or gradcheck_model_config(seed)
        model = ToyDecoder(cfg)
        rng = make_rng(seed)
        idx = torch.as_tensor(rng.integers(0, cfg.vocab, size=(1, cfg.context)), dtype=torch.long)
        targets = torch.as_tensor(rng.integers(0, cfg.vocab, size=(1, cfg.context)), dtype=torch.long)
        tapes: List[AttnTape] = []
        loss = _model_loss(model, idx, targets, tapes)
        model.zero_grad(set_to_none=True)
        loss.backward()
        base_key = _structure(tapes)
        for name, p in model.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            v = randn(rng, *p.shape)
            analytic = float((p.grad * v).sum())
            original = p.detach().clone()
            sides = []
            with torch.no_grad():
                for sign in (1.0, -1.0):
                    p.copy_(original + sign * h * v)
                    side_tapes: List[AttnTape] = []
                    value = float(_model_loss(model, idx, targets, side_tapes))
                    sides.append((value, _structure(side_tapes)))
                p.copy_(original)
            if sides[0][1] != base_key or sides[1][1] != base_key:
                report.skipped += 1
                logger.debug("gradcheck skips %s: selection structure changed", name)
                continue
            numeric = (sides[0][0] - sides[1][0]) / (2.0 * h)
            report.record(relative_error([analytic], [numeric], floor=1e-6), name)
    return report


def run_gradcheck(preset: str, seed: int = 0, jvp: JvpFn | None = None) -> GradcheckReport:
    if preset == "op":
        return check_op(seed, jvp=jvp or sparsek_jvp)
    if preset == "attn":
        return check_attention(seed)
    if preset == "model":
        return check_model(seed)
    raise ArgumentException(f"unknown gradcheck preset {preset}, expect one of {PRESETS}")
