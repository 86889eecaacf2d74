"""Self-contained check suites shared by the ``selftest`` command and the test suite.

Each suite returns a :class:`CheckResult`; none of them touches the
filesystem and all are deterministic for a given seed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import oracles
from . import tensor as T
from .curation import krippendorff_alpha
from .dataset import ImageStore, TripletSample
from .metrics import pairwise_accuracy, plcc, r2, srcc
from .model import IcaModel, ModelConfig
from .objective import PreferencePair, batch_loss, binary_entropy, pref_prob, soft_cross_entropy


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} value={self.value:.3e} tol={self.tolerance:.1e} time={self.seconds:.2f}s"


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------------ gradients

GRADIENT_CONFIG = ModelConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8, num_heads=2,
                              depth=2, mlp_ratio=2)


def gradient_fixture(seed: int = 0, config: ModelConfig = GRADIENT_CONFIG):
    """A model, an image store and a two-pair batch sharing one anchor."""
    rng = T.make_rng(seed)
    model = IcaModel.init(config, seed=seed)
    # move the head away from its symmetric init so every parameter is exercised
    model.params["head.alpha_raw"].data[...] = 0.3
    model.params["head.a"].data[...] = 1.7
    model.params["head.b"].data[...] = 0.1
    h, w = config.image_height, config.image_width
    images = ImageStore(images={ref: rng.uniform(0, 1, (h, w, 3)) for ref in ("g", "p", "v0", "v1", "v2")})
    samples = [TripletSample(f"t{k}", "g0", "p0", "g", "p", f"v{k}", normalized_score=s)
               for k, s in enumerate((0.5, -0.2, 0.1))]
    items = [PreferencePair(samples[0].anchor, samples[0], samples[1]),
             PreferencePair(samples[0].anchor, samples[2], samples[1])]
    return model, images, items


def check_gradients(seed: int = 0, step: float = 1e-5, tol: float = 1e-3, tau: float = 0.5) -> CheckResult:
    """Every parameter's tape gradient against central differences over all coordinates.

    The error of a parameter is ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)``.
    """
    def run() -> CheckResult:
        model, images, items = gradient_fixture(seed)

        def loss() -> T.Tensor:
            return batch_loss(items, model, images, tau)

        with T.Tape() as tape:
            out = loss()
            T.backward(out, tape)
        errors = {}
        for name, p in model.params.items():
            analytic = p.grad.copy()
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss().data)
                flat[i] = orig - step
                down = float(loss().data)
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            errors[name] = float(np.linalg.norm(analytic - numeric) / scale) if scale > 0 else 0.0
        worst = max(errors.values())
        zero = [n for n, p in model.params.items() if not np.any(p.grad)]
        return CheckResult("gradients", worst < tol and not zero, worst, tol,
                           {"per_parameter": errors, "zero_gradient": zero})
    return _timed(run)


# ------------------------------------------------------------------ topology

TOPOLOGY_CONFIG = ModelConfig(image_height=16, image_width=16, patch_size=8, embed_dim=16, num_heads=2,
                              depth=2, mlp_ratio=2)


def check_topology(seeds: int = 20, tol: float = 1e-12, config: ModelConfig = TOPOLOGY_CONFIG) -> CheckResult:
    """Information-flow contract of the interleaved blocks.

    Per seed: perturbing the person leaves the garment token bit-identical
    and vice versa, perturbing any input moves the try-on token, and with
    zeroed cross-attention outputs the forward matches a plain model.
    """
    def run() -> CheckResult:
        failures: list[str] = []
        worst = 0.0
        h, w = config.image_height, config.image_width
        plain_cfg = ModelConfig(**{**config.to_dict(), "use_ica": False})
        for seed in range(seeds):
            rng = T.make_rng(1000 + seed)
            model = IcaModel.init(config, seed=seed)
            g, p, v = (rng.uniform(0, 1, (2, h, w, 3)) for _ in range(3))
            base = model.forward(g, p, v)
            bump = lambda x: np.clip(x + rng.normal(0, 0.3, x.shape), 0, 1)
            out_p = model.forward(g, bump(p), v)
            out_g = model.forward(bump(g), p, v)
            out_v = model.forward(g, p, bump(v))
            if not np.array_equal(base.c_g.data, out_p.c_g.data):
                failures.append(f"seed {seed}: garment token moved under person perturbation")
            if not np.array_equal(base.c_p.data, out_g.c_p.data):
                failures.append(f"seed {seed}: person token moved under garment perturbation")
            for label, out in (("garment", out_g), ("person", out_p), ("try-on", out_v)):
                if np.array_equal(base.c_v.data, out.c_v.data):
                    failures.append(f"seed {seed}: try-on token ignored the {label} input")

            zeroed = model.copy()
            for name, t in zeroed.params.items():
                if ".cross." in name and name.endswith((".o.weight", ".o.bias")):
                    t.data[...] = 0.0
            plain = IcaModel(plain_cfg, {n: T.Tensor(a.copy(), name=n) for n, a in zeroed.state().items()
                                         if ".cross." not in n})
            a, b = zeroed.forward(g, p, v), plain.forward(g, p, v)
            diff = max(float(np.max(np.abs(x.data - y.data))) for x, y in zip(a, b))
            worst = max(worst, diff)
            if diff > tol:
                failures.append(f"seed {seed}: zeroed cross-attention differs from plain model by {diff:.3e}")
        return CheckResult("topology", not failures, worst, tol, {"failures": failures})
    return _timed(run)


# ------------------------------------------------------------------ loss algebra

def check_loss_algebra(points: int = 1000, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Antisymmetry of the preference probability and the cross-entropy bounds."""
    def run() -> CheckResult:
        rng = T.make_rng(seed)
        worst: dict[str, float] = {"antisymmetry": 0.0, "hard_target": 0.0, "gibbs": 0.0, "equality": 0.0}
        for _ in range(points):
            tau = float(rng.uniform(0.05, 2.0))
            si, sj = rng.uniform(-1, 1, 2)
            p, p_rev = pref_prob(si, sj, tau), pref_prob(sj, si, tau)
            worst["antisymmetry"] = max(worst["antisymmetry"], abs(p + p_rev - 1.0))
            for q in (0.0, 1.0):
                hard = -np.log(p) if q == 1.0 else -np.log(1.0 - p)
                worst["hard_target"] = max(worst["hard_target"], abs(soft_cross_entropy(p, q) - hard))
            q = float(rng.uniform(0.0, 1.0))
            shortfall = binary_entropy(q) - soft_cross_entropy(p, q)
            worst["gibbs"] = max(worst["gibbs"], shortfall)
            worst["equality"] = max(worst["equality"], abs(soft_cross_entropy(q, q) - binary_entropy(q)))
        value = max(worst["antisymmetry"], worst["hard_target"], worst["gibbs"], worst["equality"])
        passed = (worst["antisymmetry"] <= 1e-12 and worst["hard_target"] <= tol and worst["gibbs"] <= tol
                  and worst["equality"] <= tol)
        return CheckResult("loss_algebra", passed, value, tol, worst)
    return _timed(run)


# ------------------------------------------------------------------ agreement

def random_units(rng, max_annotators: int = 6, max_items: int = 12, levels: int = 3) -> list[list[int]]:
    """Items rated by a random subset of annotators; guaranteed to have a pairable unit."""
    while True:
        k = int(rng.integers(2, max_annotators + 1))
        n = int(rng.integers(2, max_items + 1))
        grid = rng.integers(1, levels + 1, size=(n, k))
        present = rng.random((n, k)) < 0.8
        units = [[int(v) for v, m in zip(row, mask) if m] for row, mask in zip(grid, present)]
        if sum(len(u) for u in units if len(u) >= 2) >= 2:
            return units


def check_alpha(instances: int = 50, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    def run() -> CheckResult:
        rng = T.make_rng(seed)
        worst, degenerate = 0.0, 0
        for _ in range(instances):
            units = random_units(rng)
            fast = krippendorff_alpha(units, "ordinal")
            slow = oracles.alpha_bruteforce(units, "ordinal")
            degenerate += fast.degenerate
            worst = max(worst, abs(fast.alpha - slow))
        return CheckResult("krippendorff_alpha", worst <= tol, worst, tol, {"degenerate": degenerate})
    return _timed(run)


# ------------------------------------------------------------------ metrics

def random_metric_instance(rng, max_n: int = 30):
    """Scores with deliberate ties and a handful of anchors."""
    n = int(rng.integers(4, max_n + 1))
    human = rng.integers(0, 7, size=n) / 3.0 - 1.0
    pred = np.round(0.6 * human + rng.normal(0, 0.5, n), int(rng.integers(1, 4)))
    anchors = [f"a{int(x)}" for x in rng.integers(0, max(1, n // 4), size=n)]
    return pred, human, anchors


def check_metrics(instances: int = 100, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    def run() -> CheckResult:
        rng = T.make_rng(seed)
        worst = {"plcc": 0.0, "srcc": 0.0, "r2": 0.0, "macro_acc": 0.0, "micro_acc": 0.0}
        checked = 0
        while checked < instances:
            pred, human, anchors = random_metric_instance(rng)
            if np.ptp(pred) == 0 or np.ptp(human) == 0:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                macro, micro = pairwise_accuracy(pred, human, anchors)
            if np.isnan(micro):
                continue
            p, h = pred.tolist(), human.tolist()
            o_macro, o_micro = oracles.pairwise_bruteforce(p, h, anchors)
            worst["plcc"] = max(worst["plcc"], abs(plcc(pred, human) - oracles.pearson_two_pass(p, h)))
            worst["srcc"] = max(worst["srcc"], abs(srcc(pred, human) - oracles.spearman_bruteforce(p, h)))
            worst["r2"] = max(worst["r2"], abs(r2(pred, human) - oracles.r2_direct(p, h)))
            worst["macro_acc"] = max(worst["macro_acc"], abs(macro - o_macro))
            worst["micro_acc"] = max(worst["micro_acc"], abs(micro - o_micro))
            checked += 1
        fixture_macro, fixture_micro = pairwise_accuracy(*macro_micro_fixture())
        fixture_ok = abs(fixture_macro - 0.75) <= tol and abs(fixture_micro - 0.6) <= tol
        value = max(worst.values())
        return CheckResult("metrics", value <= tol and fixture_ok, value, tol,
                           {**worst, "fixture_macro": fixture_macro, "fixture_micro": fixture_micro})
    return _timed(run)


def macro_micro_fixture():
    """Two anchors where averaging per anchor and pooling pairs disagree.

    Anchor A has four untied pairs with two ordered correctly; anchor B has
    one correct pair. Macro accuracy is (0.5 + 1) / 2 = 0.75, micro is 3 / 5.
    """
    human = [1.0, 1.0, 0.0, 0.0, 0.5, -0.5]
    pred = [0.9, 0.1, 0.5, 0.5, 0.2, -0.2]
    anchors = ["A", "A", "A", "A", "B", "B"]
    return pred, human, anchors


SUITES = {
    "gradients": check_gradients,
    "topology": check_topology,
    "loss_algebra": check_loss_algebra,
    "krippendorff_alpha": check_alpha,
    "metrics": check_metrics,
}


def run_all(names=None) -> list[CheckResult]:
    return [SUITES[n]() for n in (names or SUITES)]
