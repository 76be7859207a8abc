"""Evaluation harnesses: sample scoring, parameter/latency report, ablation sweeps."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .datagen import Corpus
from .metrics import SSIM_C1, SSIM_C2, SSIM_WINDOW, mse, psnr, ssim
from .training import sample_image, train
from .weavenet import build_model, closed_form_params, count_params

log = logging.getLogger(__name__)

EVAL_FIELDS = ["index", "type", "ssim", "psnr", "mse"]
SUMMARY_FIELDS = ["type", "n", "ssim", "psnr", "mse"]

# published parameter counts (billions) at 3 and 12 condition types
PAPER_PARAMS_B = {("unigen", 3): 4.1, ("unigen", 12): 4.69,
                  ("controlnet", 3): 6.03, ("controlnet", 12): 17.38}
UNIGEN_MAX_RATIO = 1.10
CONTROLNET_MIN_RATIO = 2.0


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# ---------------------------------------------------------------------------
# zero-init identity


def zero_init_error(model, n_inputs: int = 100, seed: int = 0, batch: int = 4) -> float:
    """Max absolute gap between the full model and its base-only stack over
    random inputs. A freshly built model gives exactly 0."""
    cfg = model.cfg
    rng = np.random.default_rng([seed, 0x21])
    s, ch = cfg.image_size, cfg.channels
    worst = 0.0
    with T.no_grad():
        for start in range(0, n_inputs, batch):
            b = min(batch, n_inputs - start)
            noisy = rng.standard_normal((b, s, s, ch))
            cond = rng.random((b, s, s, ch))
            sigma = rng.random(b)
            types = rng.integers(0, cfg.n_types, b)
            prompts = [list(rng.integers(1, cfg.vocab, rng.integers(1, 6))) for _ in range(b)]
            full = model(noisy, sigma, cond, types, prompts).data
            base = model.base_only(noisy, sigma, cond, types, prompts).data
            worst = max(worst, float(np.max(np.abs(full - base))))
    return worst


# ---------------------------------------------------------------------------
# metric report


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (index, type, ssim, psnr, mse)
    config_hash: str = ""
    seconds_per_image: float = 0.0
    metadata: dict = field(default_factory=lambda: {
        "ssim_window": SSIM_WINDOW, "ssim_c1": SSIM_C1, "ssim_c2": SSIM_C2})

    @property
    def n(self) -> int:
        return len(self.rows)

    def per_type(self) -> dict:
        """``type -> (count, mean ssim, mean psnr, mean mse)``."""
        out = {}
        for t in sorted({r[1] for r in self.rows}):
            sel = [r for r in self.rows if r[1] == t]
            out[t] = (len(sel),) + tuple(float(np.mean([r[k] for r in sel])) for k in (2, 3, 4))
        return out

    def mean_ssim(self, type_id: int | None = None) -> float:
        sel = [r[2] for r in self.rows if type_id is None or r[1] == type_id]
        return float(np.mean(sel)) if sel else math.nan

    def write(self, path) -> None:
        write_rows(path, EVAL_FIELDS, self.rows)

    def write_summary(self, path) -> None:
        write_rows(path, SUMMARY_FIELDS, [(t,) + v for t, v in self.per_type().items()])


def eval_indices(data: Corpus, n: int, types=None) -> list:
    """First ``n`` samples of each condition type, in dataset order."""
    if n < 0:
        raise ValueError("n must be >= 0")
    types = sorted(set(int(t) for t in data.type_ids)) if types is None else list(types)
    idx = []
    for t in types:
        hits = np.flatnonzero(data.type_ids == t)
        if len(hits) < n:
            raise ValueError(f"type {t} has {len(hits)} samples, {n} requested")
        idx.extend(int(i) for i in hits[:n])
    return sorted(idx)


def evaluate(model, data: Corpus, n: int, seed: int = 1872, steps: int | None = None,
             guidance: float | None = None, types=None, zero_condition: bool = False) -> MetricReport:
    """Generate ``n`` images per condition type and score them against targets.

    Sample ``i`` of the dataset uses noise seed ``seed + i``, so a row does not
    depend on which other rows were requested.
    """
    cfg = model.cfg
    steps = cfg.sample_steps if steps is None else steps
    guidance = cfg.guidance if guidance is None else guidance
    if data.targets.shape[1] != cfg.image_size:
        raise ValueError(f"dataset images are {data.targets.shape[1]}px, model expects {cfg.image_size}px")
    report = MetricReport(config_hash=cfg.arch_hash())
    idx = eval_indices(data, n, types)
    t0 = time.perf_counter()
    for i in idx:
        cond = np.zeros_like(data.conds[i]) if zero_condition else data.conds[i]
        tid = int(data.type_ids[i])
        img = sample_image(model, cond, tid, data.prompts[i], steps, guidance, seed + i)
        tgt = data.targets[i]
        report.rows.append((i, tid, ssim(img, tgt), psnr(img, tgt), mse(img, tgt)))
    if idx:
        report.seconds_per_image = (time.perf_counter() - t0) / len(idx)
    return report


# ---------------------------------------------------------------------------
# complexity report

COMPLEXITY_FIELDS = ["arch", "n_types", "params", "closed_form", "ratio", "paper_params_b",
                     "seconds_mean", "seconds_std", "runs"]


@dataclass
class ComplexityReport:
    rows: list = field(default_factory=list)

    def params(self, arch: str, n_types: int) -> int:
        for r in self.rows:
            if r[0] == arch and r[1] == n_types:
                return r[2]
        raise KeyError((arch, n_types))

    def ratio(self, arch: str, lo: int = 3, hi: int = 12) -> float:
        return self.params(arch, hi) / self.params(arch, lo)

    def check(self) -> list:
        """Scaling-trend failures; empty when both bounds hold."""
        problems = []
        archs = {r[0] for r in self.rows}
        if "unigen" in archs and self.ratio("unigen") > UNIGEN_MAX_RATIO:
            problems.append(f"unigen 12/3 ratio {self.ratio('unigen'):.4f} > {UNIGEN_MAX_RATIO}")
        if "controlnet" in archs and self.ratio("controlnet") < CONTROLNET_MIN_RATIO:
            problems.append(f"controlnet 12/3 ratio {self.ratio('controlnet'):.4f} < {CONTROLNET_MIN_RATIO}")
        for r in self.rows:
            if r[2] != r[3]:
                problems.append(f"{r[0]} at {r[1]} types: counted {r[2]} != closed form {r[3]}")
        return problems

    def write(self, path) -> None:
        write_rows(path, COMPLEXITY_FIELDS, self.rows)


def complexity(base: RunConfig | None = None, archs=("unigen", "controlnet"), type_counts=(3, 12),
               runs: int = 20, warmup: int = 3, steps: int | None = None) -> ComplexityReport:
    """Parameter counts and per-image generation time for each architecture
    and condition-type count. Control depth equals base depth."""
    base = base or RunConfig()
    steps = base.sample_steps if steps is None else steps
    report = ComplexityReport()
    rng = np.random.default_rng(base.seed)
    s, ch = base.image_size, base.channels
    cond = rng.random((s, s, ch))
    for arch in archs:
        for k in type_counts:
            cfg = base.replace(arch=arch, n_types=k, ctrl_layers=base.base_layers)
            model = build_model(cfg)
            times = []
            for r in range(warmup + runs):
                t0 = time.perf_counter()
                sample_image(model, cond, k - 1, [1, 2], steps, cfg.guidance, cfg.seed)
                if r >= warmup:
                    times.append(time.perf_counter() - t0)
            mean = float(np.mean(times)) if times else math.nan
            std = float(np.std(times)) if times else math.nan
            report.rows.append((arch, k, count_params(model), closed_form_params(cfg), None,
                                PAPER_PARAMS_B.get((arch, k), ""), mean, std, runs))
    lo = min(type_counts)
    report.rows = [r[:4] + (r[2] / report.params(r[0], lo),) + r[5:] for r in report.rows]
    return report


# ---------------------------------------------------------------------------
# ablation sweeps

ABLATE_FIELDS = ["kind", "value", "status", "zero_init_err", "params", "final_loss", "ssim"]
ABLATE_KINDS = ("experts", "layers")


def ablation_config(kind: str, value: int, values, base: RunConfig) -> RunConfig:
    """Variant for one sweep point. The layers sweep fixes the base depth at
    the largest swept value so every control depth fits beside it."""
    if kind == "experts":
        return base.replace(experts=value)
    if kind == "layers":
        return base.replace(base_layers=max(max(values), base.base_layers), ctrl_layers=value)
    raise ValueError(f"ablation kind must be one of {ABLATE_KINDS}, got {kind!r}")


def ablate(kind: str, values, base: RunConfig, data: Corpus, eval_data: Corpus | None = None,
           eval_n: int = 1, eval_types=None, zero_init_inputs: int = 100, tol: float = 1e-12,
           on_row=None) -> list:
    """Train and score one variant per value with identical seed and budget.

    Each variant must first pass the zero-init identity check. A failing
    variant gets a row marked with the reason and the sweep continues.
    """
    values = [int(v) for v in values]
    if not values:
        raise ValueError("ablation needs at least one value")
    if kind not in ABLATE_KINDS:
        raise ValueError(f"ablation kind must be one of {ABLATE_KINDS}, got {kind!r}")
    rows = []
    for v in values:
        err = params = loss = score = ""
        try:
            cfg = ablation_config(kind, v, values, base)
            model = build_model(cfg)
            params = count_params(model)
            err = zero_init_error(model, zero_init_inputs, seed=cfg.seed)
            if err > tol:
                status = "failed:zero_init"
            else:
                result = train(model, data, cfg)
                loss = result.history[-1][1]
                if eval_data is not None and eval_n > 0:
                    score = evaluate(model, eval_data, eval_n, cfg.seed, types=eval_types).mean_ssim()
                status = "ok"
        except Exception as exc:  # a broken variant must not end the sweep
            log.warning("%s=%s failed: %s", kind, v, exc)
            status = f"failed:{type(exc).__name__}"
        row = (kind, v, status, err, params, loss, score)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def write_ablation(rows, path) -> None:
    write_rows(path, ABLATE_FIELDS, rows)
