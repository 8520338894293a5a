"""Built-in verification suites (``lidia selftest``)."""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, oracles
from .network import ArchDescriptor, build_geometry, count_params, init_params
from .patches import PatchConfig, aggregate, build_pyramid, extract_patches, interleave_phases, knn_all, lowpass, phase_planes

REFERENCE_COUNTS = {"LIDIA": 61_600, "LIDIA-S": 40_200}
SHRUNKEN = ArchDescriptor(patch_side=3, k=3, feature_dim=8, window=5)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class SelfTestReport:
    suites: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)


def _layer_checks(tol=1e-6):
    rng = np.random.default_rng(7)
    out = {}

    p = {"Z": rng.normal(size=(5, 4)), "W1": rng.normal(size=(3, 5)), "W2": rng.normal(size=(4, 6)), "B": rng.normal(size=(3, 6))}
    U = rng.normal(size=(3, 6))

    def sl_loss():
        return float(np.sum(U * nn.sl_forward(p["Z"], nn.SLParams(p["W1"], p["W2"], p["B"]))))

    def sl_grad():
        dZ, dW1, dW2, dB = nn.sl_backward(U, p["Z"], nn.SLParams(p["W1"], p["W2"], p["B"]))
        return {"Z": dZ, "W1": dW1, "W2": dW2, "B": dB}

    out["separable linear"] = nn.grad_check(sl_loss, sl_grad, p, tol, max_coords=None)

    q = {"x": rng.normal(size=(6, 5)), "W": rng.normal(size=(4, 5)), "b": rng.normal(size=4)}
    V = rng.normal(size=(6, 4))

    def fc_loss():
        return float(np.sum(V * nn.fc_forward(q["x"], q["W"], q["b"])))

    def fc_grad():
        dx, dW, db = nn.fc_backward(V, q["x"], q["W"])
        return {"x": dx, "W": dW, "b": db}

    out["fully connected"] = nn.grad_check(fc_loss, fc_grad, q, tol, max_coords=None)

    r = {"x": rng.choice([-1.0, 1.0], size=(4, 7)) * rng.uniform(0.1, 1.0, size=(4, 7))}
    Ur = rng.normal(size=(4, 7))
    out["relu"] = nn.grad_check(
        lambda: float(np.sum(Ur * nn.relu(r["x"]))), lambda: {"x": nn.relu_backward(Ur, r["x"])}, r, tol, max_coords=None
    )

    for training in (True, False):
        b = {"x": rng.normal(size=(1, 4, 6)), "gamma": rng.normal(size=4), "beta": rng.normal(size=4)}
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        Ub = rng.normal(size=(1, 4, 6))

        def state():
            return nn.BatchNormState(b["gamma"], b["beta"], rm.copy(), rv.copy())

        def bn_loss():
            return float(np.sum(Ub * nn.batchnorm_forward(b["x"], state(), training)[0]))

        def bn_grad():
            st = state()
            _, cache = nn.batchnorm_forward(b["x"], st, training)
            dx, dg, db = nn.batchnorm_backward(Ub, cache, st)
            return {"x": dx, "gamma": dg, "beta": db}

        out[f"batch norm ({'train' if training else 'eval'})"] = nn.grad_check(bn_loss, bn_grad, b, tol, max_coords=None)
    return out


def network_grad_check(desc=SHRUNKEN, *, training=True, tol=1e-4, seed=1, max_coords=30):
    """End-to-end finite-difference check through the full pipeline on an 8x8 image."""
    rng = np.random.default_rng(seed)
    model = init_params(desc, seed, dtype=np.float64, scheme="random")
    img = rng.random((8, 8, desc.channels))
    clean = rng.random(img.size)
    geom = build_geometry([img], desc)

    def loss():
        out = model.forward(geom, training=training, update_stats=False)
        return float(np.mean((out - clean) ** 2))

    def grad():
        model.zero_grad()
        out = model.forward(geom, training=training, update_stats=False)
        model.backward(2 * (out - clean) / out.size)
        return model.grads()

    return nn.grad_check(
        loss, grad, model.param_arrays(), tol, max_coords=max_coords, seed=seed, signature_fn=model.activation_signature
    )


def suite_gradients():
    reports = _layer_checks()
    reports["network (train mode)"] = network_grad_check(training=True)
    reports["network (eval mode)"] = network_grad_check(training=False)
    failed = [f"{k}: {', '.join(r.failures)}" for k, r in reports.items() if not r.passed]
    worst = max(r.max_error for r in reports.values())
    detail = f"{len(reports)} checks, worst rel err {worst:.2e}"
    return not failed, detail + ("; FAILED " + "; ".join(failed) if failed else "")


def suite_kronecker(trials=100, seed=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ri, ro, ci, co = rng.integers(1, 8, size=4)
        Z, W1, W2, B = rng.normal(size=(ri, ci)), rng.normal(size=(ro, ri)), rng.normal(size=(ci, co)), rng.normal(size=(ro, co))
        got = nn.sl_forward(Z, nn.SLParams(W1, W2, B))
        worst = max(worst, float(np.abs(got - oracles.kron_sl(Z, W1, W2, B)).max()))
    return worst <= 1e-12, f"{trials} shapes, max abs diff {worst:.1e}"


def suite_aggregation(seed=5):
    rng = np.random.default_rng(seed)
    cfg = PatchConfig(patch_side=3, k=2, window=3)
    worst = 0.0
    for stride in (1, 2):
        patches = rng.normal(size=(100, cfg.n))
        w = rng.uniform(0.1, 2.0, size=100)
        got = aggregate(patches, w, (10, 10, 1), cfg, stride=stride)
        ref = oracles.dense_aggregate(patches, w, 10, 10, 1, 3, stride=stride)
        worst = max(worst, float(np.abs(got - ref).max()))
    img = rng.random((10, 10, 1))
    inv = float(np.abs(aggregate(extract_patches(img, cfg), 1.0, img.shape, cfg) - img).max())
    ok = worst <= 1e-9 and inv <= 1e-12
    return ok, f"dense oracle diff {worst:.1e}, left-inverse diff {inv:.1e}"


def suite_knn(images=10, seed=11):
    rng = np.random.default_rng(seed)
    cfg = PatchConfig(patch_side=3, k=5, window=9)
    mismatches = 0
    for _ in range(images):
        img = rng.random((16, 16, 1))
        nbr, dist = knn_all(img, cfg)
        for l in range(256):
            coords, d = oracles.brute_knn(img, divmod(l, 16), 3, 5, 9)
            if list(nbr[l, 1:]) != [y * 16 + x for y, x in coords] or not np.allclose(dist[l, 1:], d, rtol=1e-12, atol=1e-15):
                mismatches += 1
    return mismatches == 0, f"{images} random 16x16 images, {mismatches} mismatching groups"


def suite_param_counts():
    parts = []
    ok = True
    for variant, target in REFERENCE_COUNTS.items():
        c = count_params(ArchDescriptor(variant=variant))
        dev = abs(c - target) / target
        ok &= dev <= 0.02
        parts.append(f"{variant} {c} ({100 * dev:+.2f}%)")
    return ok, ", ".join(parts)


def suite_pyramid(seed=13):
    rng = np.random.default_rng(seed)
    imp = np.zeros((9, 9, 1))
    imp[4, 4] = 1.0
    resp = lowpass(imp)[3:6, 3:6, 0]
    kernel_ok = np.array_equal(resp * 16, np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], float))
    img = rng.random((15, 14, 1))
    f = lowpass(img)
    inter_ok = np.array_equal(interleave_phases(phase_planes(f), 15, 14), f)
    cfg = PatchConfig(patch_side=3, k=2, window=3)
    pyr = build_pyramid(img, cfg)
    corr = 0.0
    for y in range(15):
        for x in range(14):
            name = "eo"[y % 2] + "eo"[x % 2]
            centre = pyr.phases[name][y // 2 + 1, x // 2 + 1, 0]
            corr = max(corr, abs(centre - oracles.lowpass_at(img, y, x)[0]))
    ok = kernel_ok and inter_ok and corr <= 1e-12
    return ok, f"impulse {'exact' if kernel_ok else 'WRONG'}, re-interleave {'exact' if inter_ok else 'WRONG'}, centre diff {corr:.1e}"


SUITES = {
    "gradient checks": suite_gradients,
    "kronecker oracle": suite_kronecker,
    "aggregation oracle": suite_aggregation,
    "knn brute-force oracle": suite_knn,
    "parameter counts": suite_param_counts,
    "pyramid": suite_pyramid,
}


def run_selftest(stream=None) -> SelfTestReport:
    stream = stream or sys.stdout
    report = SelfTestReport()
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing suite is a failing suite
            ok, detail = False, f"raised {type(err).__name__}: {err}"
        res = SuiteResult(name, bool(ok), detail, time.perf_counter() - t0)
        report.suites.append(res)
        print(f"[{'PASS' if res.passed else 'FAIL'}] {name}: {detail} ({res.seconds:.1f}s)", file=stream, flush=True)
    print(f"{sum(s.passed for s in report.suites)}/{len(report.suites)} suites passed", file=stream)
    return report
