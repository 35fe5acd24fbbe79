"""Self-contained oracle suite: operator equivalences, gradient checks,
cost-model instrumentation, and sampling determinism.

Every routine returns :class:`CheckResult` rows so the same checks back
both the ``verify`` CLI subcommand and the acceptance tests.  Tolerances
are arguments with the suite's standard values as defaults.

Finite-difference checks guard against points where the difference
quotient itself is invalid (an activation kink inside the probe interval):
a coordinate is only scored when halving the step reproduces the same
quotient.  Skipped coordinates are counted and bounded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional

import numpy as np

from . import costs
from . import sampling
from . import temporal as top
from . import tensor as tt
from .blocks import Network, NetworkSpec, make_stages, tfc_variant_of
from .temporal import (DepthwiseTemporalKernel, FullTemporalFcKernel,
                       TemporalConvKernel, TfcKernel, count_muls)
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (
            f"  ({self.detail})" if self.detail else "")


def rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative difference between two arrays."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------------------------
# operator equivalences
# ---------------------------------------------------------------------------

def operator_equivalence_sweep(n_shapes: int = 100, seed: int = 0,
                               tol_tied: float = 1e-6, tol_reorder: float = 1e-5,
                               tol_norm: float = 1e-6,
                               tol_f64: float = 1e-12) -> List[CheckResult]:
    """Random-shape sweep of the algebraic identities tying the family together."""
    rng = np.random.default_rng(seed)
    start = time.time()
    worst = {"tied": 0.0, "reorder": 0.0, "norm": 0.0, "f64": 0.0}
    for _ in range(n_shapes):
        b = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 17))
        c_out = int(rng.integers(1, 9))
        t = int(rng.choice([1, 2, 4, 8, 16]))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        v32 = Tensor(rng.uniform(-1, 1, size=(b, c_in, t, h, w)).astype(np.float32))
        k32 = TfcKernel(rng.uniform(-1, 1, size=(c_out, t, t)).astype(np.float32))

        shared = top.tfc_shared(v32, k32).data
        tied = top.full_temporal_fc(v32, k32.tiled(c_in)).data
        reordered = top.tfc_reordered(v32, k32).data
        normalized = top.tfc(v32, k32).data
        worst["tied"] = max(worst["tied"], rel_diff(shared, tied))
        worst["reorder"] = max(worst["reorder"], rel_diff(shared, reordered))
        worst["norm"] = max(worst["norm"], rel_diff(normalized, reordered / c_in))

        v64 = Tensor(v32.data, dtype=np.float64)
        k64 = TfcKernel(Tensor(k32.weights.data, dtype=np.float64))
        worst["f64"] = max(worst["f64"], rel_diff(top.tfc_shared(v64, k64).data,
                                                  top.tfc_reordered(v64, k64).data))
    elapsed = time.time() - start
    return [
        CheckResult("tfc_shared == full_temporal_fc with tied kernels",
                    worst["tied"] < tol_tied, f"max {worst['tied']:.2e} < {tol_tied:g}"),
        CheckResult("tfc_shared == tfc_reordered (float32)",
                    worst["reorder"] < tol_reorder,
                    f"max {worst['reorder']:.2e} < {tol_reorder:g}"),
        CheckResult("tfc == tfc_reordered / C_in",
                    worst["norm"] < tol_norm, f"max {worst['norm']:.2e} < {tol_norm:g}"),
        CheckResult("tfc_shared == tfc_reordered (float64 mode)",
                    worst["f64"] < tol_f64, f"max {worst['f64']:.2e} < {tol_f64:g}"),
        CheckResult("equivalence sweep runtime",
                    elapsed < 60, f"{n_shapes} shapes in {elapsed:.1f}s"),
    ]


# ---------------------------------------------------------------------------
# finite-difference gradient checks
# ---------------------------------------------------------------------------

def _fd_coordinate(f: Callable[[], float], flat: np.ndarray, idx: int,
                   eps: float) -> Optional[float]:
    """Central difference at one coordinate, or None when the quotient is
    not self-consistent under step halving (a kink sits inside the probe)."""
    orig = flat[idx]
    quotients = []
    for e in (eps, eps / 2):
        flat[idx] = orig + e
        hi = f()
        flat[idx] = orig - e
        lo = f()
        flat[idx] = orig
        quotients.append((hi - lo) / (2 * e))
    a, b = quotients
    if abs(a - b) > 1e-4 * max(1.0, abs(a), abs(b)):
        return None
    return b


def check_gradients_sampled(f: Callable[[], float], arrays: List[np.ndarray],
                            grads: List[np.ndarray], eps: float = 1e-3,
                            tol: float = 1e-3, per_array: int = 6,
                            seed: int = 0) -> CheckResult:
    """Compare analytic gradients to central differences on sampled coords."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        count = min(per_array, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            fd = _fd_coordinate(f, flat, int(idx), eps)
            if fd is None:
                skipped += 1
                continue
            denom = max(abs(fd), abs(gflat[idx]), 1e-4)
            worst = max(worst, abs(fd - gflat[idx]) / denom)
            checked += 1
    ok = worst < tol and checked > 0 and skipped <= checked
    return CheckResult("finite-difference agreement", ok,
                       f"max rel {worst:.2e} over {checked} coords"
                       + (f", {skipped} kink-skipped" if skipped else ""))


def operator_gradient_suite(eps: float = 1e-3, tol: float = 1e-3,
                            seed: int = 0) -> List[CheckResult]:
    """Gradient checks for all six temporal operators, float32 values with
    float64 verification arithmetic."""
    rng = np.random.default_rng(seed)
    results = []
    b, c_in, c_out, t, h, w = 2, 3, 2, 4, 2, 2
    cases = {
        "temporal_conv": (top.temporal_conv,
                          lambda wa: TemporalConvKernel(Tensor(wa, True, np.float64)),
                          (c_out, c_in, 3)),
        "full_temporal_fc": (top.full_temporal_fc,
                             lambda wa: FullTemporalFcKernel(Tensor(wa, True, np.float64)),
                             (c_out, c_in, t, t)),
        "tfc_shared": (top.tfc_shared,
                       lambda wa: TfcKernel(Tensor(wa, True, np.float64)),
                       (c_out, t, t)),
        "tfc_reordered": (top.tfc_reordered,
                          lambda wa: TfcKernel(Tensor(wa, True, np.float64)),
                          (c_out, t, t)),
        "tfc": (top.tfc,
                lambda wa: TfcKernel(Tensor(wa, True, np.float64)),
                (c_out, t, t)),
        "rdw": (top.rdw,
                lambda wa: DepthwiseTemporalKernel(Tensor(wa, True, np.float64)),
                (c_in, 3)),
    }
    for name, (op, make_kernel, wshape) in cases.items():
        # values representable in float32, arithmetic carried in float64
        v_arr = rng.uniform(-0.1, 0.1, size=(b, c_in, t, h, w)).astype(np.float32)
        v_arr = v_arr.astype(np.float64)
        w_arr = rng.uniform(-0.1, 0.1, size=wshape).astype(np.float32).astype(np.float64)

        v = Tensor(v_arr, requires_grad=True, dtype=np.float64)
        kern = make_kernel(w_arr.copy())
        out = op(v, kern)
        tt.sum_all(tt.mul(out, out)).backward()

        w_live = kern.weights.data

        def f():
            o = op(Tensor(v_arr, dtype=np.float64), make_kernel(w_live.copy()))
            return float(tt.sum_all(tt.mul(o, o)).data)

        res = check_gradients_sampled(f, [v_arr, w_live], [v.grad, kern.weights.grad],
                                      eps=eps, tol=tol, per_array=8, seed=seed)
        results.append(CheckResult(f"gradient {name}", res.passed, res.detail))
    return results


def tiny_network_spec(t: int = 4) -> NetworkSpec:
    """Two stages, one block each, with a global-temporal branch on stage 0."""
    stages = make_stages(["bottleneck2d", "bottleneck3d_temporal"],
                         widths=(8, 16), repeats=(1, 1), stem_width=8, strides=(1, 2))
    stages = (tuple([tfc_variant_of(stages[0][0])]), stages[1])
    return NetworkSpec(stem_width=8, stages=stages, temporal_length=t,
                       num_classes=4, head="pool3d")


def network_gradient_check(eps: float = 1e-3, tol: float = 1e-3,
                           seed: int = 0, per_array: int = 3) -> CheckResult:
    """End-to-end check through a small two-stage network."""
    spec = tiny_network_spec()
    net = Network(spec, np.random.default_rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    batch = rng.uniform(-0.5, 0.5, size=(2, 3, 4, 8, 8)).astype(np.float64)
    labels = np.array([1, 3])

    def loss():
        return tt.softmax_cross_entropy(
            net.forward(Tensor(batch, dtype=np.float64), training=True), labels)

    out = loss()
    net.zero_grads()
    out.backward()
    params = [p for _, p in net.named_params()]
    res = check_gradients_sampled(lambda: float(loss().data),
                                  [p.data for p in params],
                                  [p.grad for p in params],
                                  eps=eps, tol=tol, per_array=per_array, seed=seed)
    return CheckResult("gradient 2-stage network", res.passed, res.detail)


def gradient_suite(eps: float = 1e-3, tol: float = 1e-3,
                   seed: int = 0) -> List[CheckResult]:
    start = time.time()
    results = operator_gradient_suite(eps=eps, tol=tol, seed=seed)
    results.append(network_gradient_check(eps=eps, tol=tol, seed=seed))
    elapsed = time.time() - start
    results.append(CheckResult("gradient suite runtime", elapsed < 120,
                               f"{elapsed:.1f}s"))
    return results


# ---------------------------------------------------------------------------
# cost-model instrumentation and ratio identities
# ---------------------------------------------------------------------------

def cost_instrumentation_sweep(n_tuples: int = 20, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    mismatches = []
    for _ in range(n_tuples):
        b = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 17))
        c_out = int(rng.integers(1, 9))
        t = int(rng.choice([1, 2, 4, 8, 16]))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        k = 3 if t >= 3 else 1
        v = Tensor(rng.uniform(-1, 1, size=(b, c_in, t, h, w)).astype(np.float32))
        tk = TfcKernel.init(c_out, t, rng)
        runs = [
            ("temporal_conv",
             lambda: top.temporal_conv(v, TemporalConvKernel.init(c_out, c_in, k, rng)),
             costs.cost_temporal_conv(b, c_in, c_out, t, h, w, k).flops),
            ("full_temporal_fc",
             lambda: top.full_temporal_fc(v, FullTemporalFcKernel.init(c_out, c_in, t, rng)),
             costs.cost_full_fc(b, c_in, c_out, t, h, w).flops),
            ("tfc_shared", lambda: top.tfc_shared(v, tk),
             costs.cost_full_fc(b, c_in, c_out, t, h, w).flops),
            ("tfc_reordered", lambda: top.tfc_reordered(v, tk),
             costs.cost_tfc(b, c_in, c_out, t, h, w).flops),
            ("tfc", lambda: top.tfc(v, tk),
             costs.cost_tfc(b, c_in, c_out, t, h, w).flops),
        ]
        for name, run, expected in runs:
            with count_muls() as counter:
                run()
            if counter.total != expected:
                mismatches.append((name, (b, c_in, c_out, t, h, w, k),
                                   counter.total, expected))
    return [CheckResult("instrumented multiplies equal cost-model flops",
                        not mismatches,
                        f"{n_tuples} random dim tuples"
                        + (f"; first mismatch {mismatches[0]}" if mismatches else ""))]


def ratio_checks() -> List[CheckResult]:
    results = []
    t, k = 32, 3
    full = costs.cost_full_fc(1, 16, 8, t, 4, 4)
    conv = costs.cost_temporal_conv(1, 16, 8, t, 4, 4, k)
    results.append(CheckResult(
        "full-fc / temporal-conv params == T^2/K",
        Fraction(full.params, conv.params) == Fraction(t * t, k),
        f"{Fraction(full.params, conv.params)} vs {Fraction(t * t, k)}"))
    c_in = 256
    tfc_cost = costs.cost_tfc(1, c_in, 8, t, 4, 4)
    conv2 = costs.cost_temporal_conv(1, c_in, 8, t, 4, 4, k)
    results.append(CheckResult(
        "tfc / temporal-conv flops == T/(C_in*K)",
        Fraction(tfc_cost.flops, conv2.flops) == Fraction(t, c_in * k) == Fraction(1, 24),
        f"{Fraction(tfc_cost.flops, conv2.flops)} == 1/24"))
    return results


# ---------------------------------------------------------------------------
# sampling determinism
# ---------------------------------------------------------------------------

def sampling_checks() -> List[CheckResult]:
    results = []
    expected = {
        (32, 32): tuple(range(32)),
        (300, 4): (37, 112, 187, 262),
    }
    ok = True
    for (length, t), want in expected.items():
        got = sampling.video_level_plan(length, t, "test").indices
        ok = ok and got == want
    centers = []
    for i in range(32):
        start, end = i * 300 // 32, (i + 1) * 300 // 32
        centers.append(start + (end - start - 1) // 2)
    ok = ok and sampling.video_level_plan(300, 32, "test").indices == tuple(centers)
    results.append(CheckResult("test-mode plans match hand enumeration", ok))

    a = sampling.video_level_plan(300, 32, "train", np.random.default_rng(17)).indices
    b = sampling.video_level_plan(300, 32, "train", np.random.default_rng(17)).indices
    in_segments = all((i * 300) // 32 <= x < ((i + 1) * 300) // 32
                      for i, x in enumerate(a))
    results.append(CheckResult("seeded train plans reproduce bitwise",
                               a == b and in_segments))
    return results


# ---------------------------------------------------------------------------
# whole suite
# ---------------------------------------------------------------------------

def run_all(fast: bool = False) -> List[CheckResult]:
    n_shapes = 30 if fast else 100
    results = []
    results += operator_equivalence_sweep(n_shapes=n_shapes)
    results += gradient_suite()
    results += cost_instrumentation_sweep(n_tuples=10 if fast else 20)
    results += ratio_checks()
    results += sampling_checks()
    return results
