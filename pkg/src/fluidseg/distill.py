"""Teacher-student machinery: EMA weights, input perturbations, pseudo-labels.

The teacher is a flat parameter vector (weights plus BN running stats) moved
toward the student by exponential moving average after every optimizer step.
Perturbations combine photometric jitter with an optional horizontal flip;
only the flip is geometric, so aligning a teacher prediction back to the
student frame just unflips it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError
from .supervision import encode_mask


@dataclass
class TeacherState:
    """EMA parameter vector with its decay and an update counter."""

    params: np.ndarray
    alpha: float
    step: int = 0

    @staticmethod
    def from_student(student_vec: np.ndarray, alpha: float) -> "TeacherState":
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"EMA alpha must be in [0, 1], got {alpha}")
        return TeacherState(params=np.array(student_vec, dtype=np.float64), alpha=alpha)


def ema_update(teacher: TeacherState, student_vec: np.ndarray) -> TeacherState:
    """theta <- alpha * theta + (1 - alpha) * theta_student, elementwise.

    alpha = 0 copies the student exactly; alpha = 1 freezes the teacher.
    """
    if student_vec.shape != teacher.params.shape:
        raise ContractError("student vector length does not match teacher")
    teacher.params = teacher.alpha * teacher.params + (1.0 - teacher.alpha) * student_vec
    teacher.step += 1
    return teacher


@dataclass(frozen=True)
class PerturbationSpec:
    """Sampled perturbation parameters; factor 1 / shift 0 / flip False = skip."""

    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0

    @staticmethod
    def identity() -> "PerturbationSpec":
        return PerturbationSpec()


def sample_perturbation(strength: float, rng: np.random.Generator,
                        flip_prob: float = 0.5) -> PerturbationSpec:
    """Draw flip plus photometric factors; strength 0 yields exact identity.

    Factors are uniform on [1-s, 1+s], the hue shift uniform on [-s, s].
    The draw order (flip, brightness, contrast, saturation, hue) is fixed and
    every field is always drawn, so stream consumption is strength-independent.
    """
    if not 0.0 <= strength <= 1.0:
        raise ContractError(f"perturbation strength must be in [0, 1], got {strength}")
    flip = bool(rng.random() < flip_prob)
    brightness = float(rng.uniform(1.0 - strength, 1.0 + strength))
    contrast = float(rng.uniform(1.0 - strength, 1.0 + strength))
    saturation = float(rng.uniform(1.0 - strength, 1.0 + strength))
    hue = float(rng.uniform(-strength, strength))
    return PerturbationSpec(flip=flip, brightness=brightness, contrast=contrast,
                            saturation=saturation, hue=hue)


def _rgb_to_hsv(x):
    r, g, b = x[0], x[1], x[2]
    maxc = np.max(x, axis=0)
    minc = np.min(x, axis=0)
    v = maxc
    d = maxc - minc
    safe_max = np.where(maxc == 0.0, 1.0, maxc)
    s = np.where(maxc == 0.0, 0.0, d / safe_max)
    safe_d = np.where(d == 0.0, 1.0, d)
    hr = np.mod((g - b) / safe_d, 6.0)
    hg = (b - r) / safe_d + 2.0
    hb = (r - g) / safe_d + 4.0
    h = np.where(maxc == r, hr, np.where(maxc == g, hg, hb))
    h = np.where(d == 0.0, 0.0, h) / 6.0
    return np.stack([h, s, v])


def _hsv_to_rgb(x):
    h, s, v = x[0], x[1], x[2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def apply_perturbation(image: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Photometric jitter then optional flip on a (C,H,W) float image.

    Identity parameters skip their op entirely, so an all-identity spec
    returns a bit-exact copy.  Saturation and hue require 3 channels.
    """
    x = np.array(image, dtype=np.float64)
    if spec.brightness != 1.0:
        x = np.clip(x * spec.brightness, 0.0, 1.0)
    if spec.contrast != 1.0:
        m = x.mean()
        x = np.clip((x - m) * spec.contrast + m, 0.0, 1.0)
    if spec.saturation != 1.0:
        if x.shape[0] != 3:
            raise DataError("saturation jitter needs a 3-channel image")
        gray = x.mean(axis=0, keepdims=True)
        x = np.clip(gray + (x - gray) * spec.saturation, 0.0, 1.0)
    if spec.hue != 0.0:
        if x.shape[0] != 3:
            raise DataError("hue jitter needs a 3-channel image")
        hsv = _rgb_to_hsv(x)
        hsv[0] = np.mod(hsv[0] + spec.hue, 1.0)
        x = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    if spec.flip:
        x = x[:, :, ::-1].copy()
    return x


def invert_geometric(pred: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Undo the geometric part of a perturbation on a prediction map.

    Only the flip is geometric; photometric ops do not move pixels.  Works on
    (C,H,W) or (N,C,H,W) since width is the last axis either way.
    """
    if spec.flip:
        return pred[..., ::-1].copy()
    return pred.copy()


def make_pseudo_label(probs: np.ndarray, global_label=None, boxmask=None) -> np.ndarray:
    """Refine class probabilities with weak labels and harden to one-hot.

    Channels whose presence bit is 0 are zeroed; a box mask additionally zeroes
    each foreground class outside its own box region.  Pixels left with no
    support fall to background; otherwise argmax decides (first max wins ties).
    """
    p = np.array(probs, dtype=np.float64)
    if p.ndim != 3:
        raise DataError("make_pseudo_label expects (C,H,W) probabilities")
    c = p.shape[0]
    if global_label is not None:
        g = np.asarray(global_label)
        if g.shape != (c,):
            raise DataError(f"global label must have {c} entries")
        p *= (g > 0).reshape(c, 1, 1)
    if boxmask is not None:
        if boxmask.shape != p.shape:
            raise DataError("box mask shape does not match probabilities")
        p[: c - 1] *= boxmask[: c - 1]
    grid = p.argmax(axis=0)
    grid[p.sum(axis=0) == 0.0] = c - 1  # nothing allowed: background
    return encode_mask(grid, c)


def consistency_mse(student_probs: Tensor, teacher_probs: np.ndarray) -> Tensor:
    """Mean squared difference between softmax maps; grads only reach the student."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != student_probs.shape:
        raise ContractError("consistency targets must match student probabilities")
    diff = ad.add(student_probs, ad.neg(Tensor(t)))
    return ad.tmean(ad.mul(diff, diff))
