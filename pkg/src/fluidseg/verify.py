"""Built-in verification suites behind `fluidseg verify`.

Each suite returns CheckResult entries; a suite passes when every entry does.
The heavy training checks live in the test suite, not here; these cover the
algebraic contracts: gradients, pyramid pooling, EMA, perturbation algebra
and the IoU accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import supervision as sup
from .autodiff import Tensor
from .distill import (PerturbationSpec, TeacherState, apply_perturbation,
                      consistency_mse, ema_update, invert_geometric,
                      sample_perturbation)
from .errors import ConfigError
from .evalmetrics import ConfusionAccumulator
from .synthdata import SceneConfig, generate_scene

SUITES = ("gradcheck", "pyramid", "ema", "perturb", "metric")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _reduce(t):
    return ad.tmean(ad.mul(t, t))


def _distinct(rng, shape):
    """Values pairwise separated by >= 1/(n-1), safe for max-pool FD checks."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(0.0, 1.0, n)).reshape(shape)


def _t(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _gradcheck_cases():
    """name -> builder(rng) returning (fn, inputs, exclude)."""

    def add_case(rng):
        a, b = _t(rng, (2, 3, 4)), _t(rng, (3, 1))
        return lambda a, b: _reduce(ad.add(a, b)), [a, b], None

    def mul_case(rng):
        a, b = _t(rng, (2, 3, 4)), _t(rng, (1, 4))
        return lambda a, b: _reduce(ad.mul(a, b)), [a, b], None

    def neg_case(rng):
        a = _t(rng, (3, 5))
        return lambda a: _reduce(ad.neg(a)), [a], None

    def scale_case(rng):
        a = _t(rng, (3, 5))
        return lambda a: _reduce(ad.scale(a, -1.7)), [a], None

    def sum_case(rng):
        a = _t(rng, (2, 3, 3))
        return lambda a: ad.tsum(ad.mul(a, a)), [a], None

    def mean_case(rng):
        a = _t(rng, (4, 6))
        return lambda a: ad.tmean(ad.mul(a, a)), [a], None

    def relu_case(rng):
        a = _t(rng, (2, 3, 4))
        return lambda a: _reduce(ad.relu(a)), [a], [np.abs(a.data) < 0.05]

    def sigmoid_case(rng):
        a = _t(rng, (2, 3, 4))
        return lambda a: ad.tmean(ad.sigmoid(a)), [a], None

    def softmax_case(rng):
        a = _t(rng, (2, 4, 3, 3))
        return lambda a: _reduce(ad.softmax_channels(a)), [a], None

    def log_softmax_case(rng):
        a = _t(rng, (2, 4, 3, 3))
        return lambda a: _reduce(ad.log_softmax_channels(a)), [a], None

    def avgpool_case(rng):
        a = _t(rng, (2, 3, 4, 4))
        return lambda a: _reduce(ad.avgpool_spatial(a)), [a], None

    def concat_case(rng):
        a, b = _t(rng, (2, 2, 3, 3)), _t(rng, (2, 3, 3, 3))
        return lambda a, b: _reduce(ad.concat_channels([a, b])), [a, b], None

    def index_select_case(rng):
        a = _t(rng, (5, 2, 3))
        idx = rng.integers(0, 5, size=6)  # duplicates exercise accumulation
        return lambda a: _reduce(ad.index_select0(a, idx)), [a], None

    def conv_case(rng):
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = _t(rng, (2, 2, 5, 5))
        w = _t(rng, (3, 2, 3, 3), 0.5)
        b = _t(rng, (3,))
        return (lambda x, w, b: _reduce(ad.conv2d(x, w, b, stride, padding)),
                [x, w, b], None)

    def maxpool_case(rng):
        a = Tensor(_distinct(rng, (2, 2, 4, 4)), requires_grad=True)
        return lambda a: _reduce(ad.maxpool2d(a, 2, 2)), [a], None

    def bilinear_case(rng):
        a = _t(rng, (2, 2, 3, 3))
        return lambda a: _reduce(ad.bilinear_upsample(a, 5, 7)), [a], None

    def bn_train_case(rng):
        x = _t(rng, (3, 2, 3, 3))
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = _t(rng, (2,))

        def fn(x, g, b):
            state = ad.BatchNormState.fresh(2)
            return _reduce(ad.batchnorm2d(x, g, b, state, "train"))

        return fn, [x, g, b], None

    def bn_eval_case(rng):
        x = _t(rng, (3, 2, 3, 3))
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = _t(rng, (2,))
        state = ad.BatchNormState(rng.normal(0, 0.3, 2), rng.uniform(0.5, 2.0, 2))
        return (lambda x, g, b: _reduce(ad.batchnorm2d(x, g, b, state, "eval")),
                [x, g, b], None)

    def bce_case(rng):
        o = _t(rng, (2, 3, 4))
        t = rng.uniform(0, 1, (2, 3, 4))
        return lambda o: ad.tmean(ad.bce_with_logits(o, t)), [o], None

    def loss_ce_case(rng):
        logits = _t(rng, (2, 4, 3, 3))
        target = np.zeros((2, 4, 3, 3))
        picks = rng.integers(0, 4, (2, 3, 3))
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    target[n, picks[n, i, j], i, j] = 1.0
        return lambda l: sup.loss_ce(l, target), [logits], None

    def loss_bce_case(rng):
        logits = _t(rng, (2, 4, 3, 3))
        target = (rng.random((2, 4, 3, 3)) < 0.4).astype(np.float64)
        return lambda l: sup.loss_bce(l, target), [logits], None

    def loss_mlds_case(rng):
        l0, l1 = _t(rng, (2, 3, 2, 2)), _t(rng, (2, 3, 4, 4))
        t0 = (rng.random((2, 3, 2, 2)) < 0.5).astype(np.float64)
        t1 = (rng.random((2, 3, 4, 4)) < 0.5).astype(np.float64)
        return lambda a, b: sup.loss_mlds([a, b], [t0, t1]), [l0, l1], None

    def loss_mil_case(rng):
        feat = _t(rng, (2, 3, 4, 4))
        w = _t(rng, (4, 3, 1, 1), 0.5)
        b = _t(rng, (4,))
        g = (rng.random((2, 4)) < 0.5).astype(np.float64)
        return (lambda f, w, b: sup.loss_mil(f, lambda t: ad.conv2d(t, w, b), g),
                [feat, w, b], None)

    def mse_case(rng):
        logits = _t(rng, (2, 4, 3, 3))
        tgt = rng.dirichlet(np.ones(4), (2, 3, 3)).transpose(0, 3, 1, 2)
        return (lambda l: consistency_mse(ad.softmax_channels(l), tgt), [logits], None)

    return {
        "add": add_case, "mul": mul_case, "neg": neg_case, "scale": scale_case,
        "sum": sum_case, "mean": mean_case, "relu": relu_case,
        "sigmoid": sigmoid_case, "softmax_channels": softmax_case,
        "log_softmax_channels": log_softmax_case, "avgpool_spatial": avgpool_case,
        "concat_channels": concat_case, "index_select0": index_select_case,
        "conv2d": conv_case, "maxpool2d": maxpool_case, "bilinear_upsample": bilinear_case,
        "batchnorm2d_train": bn_train_case, "batchnorm2d_eval": bn_eval_case,
        "bce_with_logits": bce_case, "loss_ce": loss_ce_case, "loss_bce": loss_bce_case,
        "loss_mlds": loss_mlds_case, "loss_mil": loss_mil_case,
        "consistency_mse": mse_case,
    }


def check_gradcheck(instances: int = 20, tol: float = 1e-4, seed: int = 0) -> list:
    results = []
    for name, builder in _gradcheck_cases().items():
        rng = np.random.default_rng([seed, hash(name) % (2**31)])
        worst = 0.0
        for _ in range(instances):
            fn, inputs, exclude = builder(rng)
            worst = max(worst, ad.grad_check(fn, inputs, exclude=exclude))
        results.append(CheckResult(f"gradcheck/{name}", worst < tol,
                                   f"max rel err {worst:.3e} over {instances} instances"))
    return results


def _pool_oracle(mask, oh, ow):
    c, h, w = mask.shape
    fy, fx = h // oh, w // ow
    out = np.zeros((c, oh, ow), dtype=np.uint8)
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = mask[ch, i * fy : (i + 1) * fy,
                                     j * fx : (j + 1) * fx].any()
    return out


def _shift_grid(grid, dy, dx, bg):
    h, w = grid.shape
    out = np.full_like(grid, bg)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    out[ys, xs] = grid[slice(max(-dy, 0), h + min(-dy, 0)),
                       slice(max(-dx, 0), w + min(-dx, 0))]
    return out


def _pyramid_iou(clean, corrupt, sizes):
    """Mean per-channel bitwise IoU at each level, finest first."""
    pc = [sup.downscale_mask(clean, *s) for s in sizes]
    pd = [sup.downscale_mask(corrupt, *s) for s in sizes]
    out = []
    for a, b in zip(pc, pd):
        vals = []
        for ch in range(a.shape[0]):
            union = np.logical_or(a[ch], b[ch]).sum()
            if union:
                vals.append(np.logical_and(a[ch], b[ch]).sum() / union)
        out.append(np.mean(vals) if vals else 1.0)
    return out  # ordered finest -> coarsest by caller's `sizes`


def check_pyramid(n_masks: int = 200, n_trials: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []

    ok = True
    for _ in range(n_masks):
        c = int(rng.integers(1, 5))
        h = int(rng.choice([8, 12, 16, 32]))
        w = int(rng.choice([8, 12, 16, 32]))
        mask = (rng.random((c, h, w)) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        for oh, ow in {(h // 2, w // 2), (h // 4, w // 4), (1, 1), (h, w)}:
            if h % oh or w % ow:
                continue
            got = sup.downscale_mask(mask, oh, ow)
            if not np.array_equal(got, _pool_oracle(mask, oh, ow)):
                ok = False
    results.append(CheckResult("pyramid/or_oracle", ok,
                               f"{n_masks} random masks vs loop oracle"))

    ok = True
    for _ in range(50):
        mask = (rng.random((3, 16, 16)) < 0.3).astype(np.uint8)
        levels = [sup.downscale_mask(mask, s, s) for s in (4, 8, 16)]
        for coarse, fine, f in ((levels[0], levels[1], 2), (levels[1], levels[2], 2)):
            up = np.repeat(np.repeat(coarse, f, axis=1), f, axis=2)
            if np.any(fine > up):
                ok = False
    results.append(CheckResult("pyramid/containment", ok,
                               "foreground never vanishes toward coarse levels"))

    cfg = SceneConfig(blob_count_range=(1, 2))
    sizes = [(64, 64), (32, 32), (16, 16)]  # finest -> coarsest
    shift_means = np.zeros(3)
    drop_means = np.zeros(3)
    for _ in range(n_trials):
        _, grid = generate_scene(cfg, rng)
        clean = sup.encode_mask(grid, cfg.num_classes)
        dy, dx = 0, 0
        while dy == 0 and dx == 0:
            dy, dx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
        shifted = sup.encode_mask(_shift_grid(grid, dy, dx, cfg.num_fg_classes),
                                  cfg.num_classes)
        shift_means += _pyramid_iou(clean, shifted, sizes)
        dropped = grid.copy()
        fg = dropped != cfg.num_fg_classes
        drop = fg & (rng.random(grid.shape) < 0.1)
        dropped[drop] = cfg.num_fg_classes
        drop_means += _pyramid_iou(clean, sup.encode_mask(dropped, cfg.num_classes), sizes)
    shift_means /= n_trials
    drop_means /= n_trials
    for label, means in (("shift", shift_means), ("dropout", drop_means)):
        mono = bool(np.all(np.diff(means) >= -1e-12))
        results.append(CheckResult(
            f"pyramid/smoothing_{label}", mono,
            "mean IoU fine->coarse: " + ", ".join(f"{v:.4f}" for v in means)))
    return results


def check_ema(n_seq: int = 50, length: int = 100, dim: int = 32,
              tol: float = 1e-6, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []
    worst = 0.0
    for _ in range(n_seq):
        alpha = float(rng.uniform(0.0, 1.0))
        theta0 = rng.normal(0, 1, dim)
        students = [rng.normal(0, 1, dim) for _ in range(length)]
        teacher = TeacherState.from_student(theta0, alpha)
        for s in students:
            ema_update(teacher, s)
        ref = theta0 * alpha**length
        for t, s in enumerate(students, start=1):
            ref = ref + (1.0 - alpha) * alpha ** (length - t) * s
        denom = np.maximum(1.0, np.abs(ref))
        worst = max(worst, float(np.max(np.abs(teacher.params - ref) / denom)))
    results.append(CheckResult("ema/unrolled_identity", worst < tol,
                               f"max rel err {worst:.3e} over {n_seq} sequences"))

    theta0 = rng.normal(0, 1, dim)
    s1, s2 = rng.normal(0, 1, dim), rng.normal(0, 1, dim)
    t0 = TeacherState.from_student(theta0, 0.0)
    ema_update(t0, s1)
    ema_update(t0, s2)
    copies_student = np.array_equal(t0.params, s2)
    t1 = TeacherState.from_student(theta0, 1.0)
    ema_update(t1, s1)
    ema_update(t1, s2)
    frozen = np.array_equal(t1.params, theta0)
    results.append(CheckResult("ema/alpha_bounds", copies_student and frozen,
                               "alpha=0 copies student, alpha=1 freezes teacher"))
    return results


def check_perturb(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []
    img = rng.uniform(0, 1, (3, 16, 20))

    spec0 = sample_perturbation(0.0, rng, flip_prob=0.0)
    ident = (spec0 == PerturbationSpec.identity()
             and np.array_equal(apply_perturbation(img, spec0), img))
    results.append(CheckResult("perturb/strength0_identity", bool(ident),
                               "strength 0 with flip_prob 0 is bit-exact"))

    ok = True
    for _ in range(20):
        spec = sample_perturbation(0.4, rng, flip_prob=1.0)
        photometric = PerturbationSpec(flip=False, brightness=spec.brightness,
                                       contrast=spec.contrast,
                                       saturation=spec.saturation, hue=spec.hue)
        lhs = invert_geometric(apply_perturbation(img, spec), spec)
        rhs = apply_perturbation(img, photometric)
        if not np.array_equal(lhs, rhs):
            ok = False
    results.append(CheckResult("perturb/invert_geometric", ok,
                               "unflip(apply(spec)) == apply(photometric part)"))

    flip_only = PerturbationSpec(flip=True)
    rt = np.array_equal(invert_geometric(apply_perturbation(img, flip_only), flip_only),
                        img)
    results.append(CheckResult("perturb/flip_roundtrip", bool(rt),
                               "flip-only spec round-trips bit-exactly"))

    ok = True
    for _ in range(20):
        spec = sample_perturbation(0.4, rng)
        out = apply_perturbation(img, spec)
        if out.min() < 0.0 or out.max() > 1.0:
            ok = False
    results.append(CheckResult("perturb/range", ok, "outputs stay in [0, 1]"))
    return results


def check_metric(n_cases: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []
    ok = True
    worst = 0.0
    for _ in range(n_cases):
        c = int(rng.integers(2, 5))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        n_img = int(rng.integers(1, 4))
        acc = ConfusionAccumulator(c)
        inter = np.zeros(c - 1, dtype=np.int64)
        union = np.zeros(c - 1, dtype=np.int64)
        shard = ConfusionAccumulator(c)
        merged = ConfusionAccumulator(c)
        for k in range(n_img):
            pt = rng.integers(0, c, (h, w))
            tt = rng.integers(0, c, (h, w))
            pred = sup.encode_mask(pt, c)
            true = sup.encode_mask(tt, c)
            acc.add(pred, true)
            (shard if k % 2 else merged).add(pred, true)
            for cls in range(c - 1):
                for i in range(h):
                    for j in range(w):
                        p, t = pred[cls, i, j], true[cls, i, j]
                        inter[cls] += int(p and t)
                        union[cls] += int(p or t)
        if not (np.array_equal(acc.inter, inter) and np.array_equal(acc.union, union)):
            ok = False
        present = union > 0
        if present.any():
            ref = float(np.mean(inter[present] / union[present]))
            got = acc.miou()
            worst = max(worst, abs(got - ref))
        merged.merge(shard)
        if not (np.array_equal(merged.inter, acc.inter)
                and np.array_equal(merged.union, acc.union)):
            ok = False
    results.append(CheckResult("metric/brute_force_oracle", ok and worst < 1e-12,
                               f"{n_cases} cases; max miou diff {worst:.1e}"))

    acc = ConfusionAccumulator(2)
    pred = np.zeros((2, 4, 4), dtype=np.uint8)
    true = np.zeros((2, 4, 4), dtype=np.uint8)
    pred[0, 0:2, 0:4] = 1  # 8 predicted pixels
    true[0, 1, 0:3] = 1  # 7 true pixels, 5 inside the prediction
    true[0, 0, 0:2] = 1
    true[0, 2, 0:2] = 1
    pred[1] = 1 - pred[0]
    true[1] = 1 - true[0]
    acc.add(pred, true)
    exact = (int(acc.inter[0]), int(acc.union[0])) == (5, 10) and acc.miou() == 0.5
    results.append(CheckResult("metric/frozen_5_10", bool(exact),
                               f"I={int(acc.inter[0])}, U={int(acc.union[0])}, "
                               f"mIoU={acc.miou()}"))
    return results


def run_suite(name: str) -> list:
    if name == "gradcheck":
        return check_gradcheck()
    if name == "pyramid":
        return check_pyramid()
    if name == "ema":
        return check_ema()
    if name == "perturb":
        return check_perturb()
    if name == "metric":
        return check_metric()
    if name == "all":
        out = []
        for s in SUITES:
            out.extend(run_suite(s))
        return out
    raise ConfigError(f"unknown verify suite {name!r}; choose from {SUITES + ('all',)}")
