"""Student/teacher wiring: latent targets, pad merge, projector, EMA.

The teacher is a frozen-in-step copy of the student architecture. Its
targets are layer-averaged hidden states, detached from every gradient
path. After each optimizer step the teacher tracks the student through an
exponential moving average whose decay anneals linearly and then holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ResolutionSpec, TokenSequence, multires_forward
from .masking import PatchMask
from .tensor import DimensionError, ParamSet, Tensor, no_grad
from .transformer import encoder_forward


@dataclass
class EmaSchedule:
    """Teacher decay: tau anneals tau_start -> tau_end over anneal_steps,
    then holds. Decay convention: teacher <- tau * teacher + (1 - tau) * student,
    i.e. larger tau means a slower teacher.

    `literal_update` swaps the roles (teacher <- tau * student + (1 - tau) *
    teacher), the reading in which an increasing coefficient makes the
    teacher track the student faster; kept as an option because published
    descriptions of this update are ambiguous.
    """

    tau_start: float = 0.998
    tau_end: float = 0.9999
    anneal_steps: int = 1000
    step: int = 0
    literal_update: bool = False

    def __post_init__(self):
        # tau == 1 is allowed (frozen teacher, a useful fixed point in tests)
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValueError(f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")
        if self.anneal_steps < 0:
            raise ValueError("anneal_steps must be non-negative")

    def tau_at(self, step: int) -> float:
        if self.anneal_steps == 0 or step >= self.anneal_steps:
            return self.tau_end
        frac = step / self.anneal_steps
        return self.tau_start + (self.tau_end - self.tau_start) * frac


def init_projector_params(hidden: int, proj_hidden: int, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Five shape-preserving 5x5 convs (hidden -> proj_hidden -> ... ) and a
    final linear map back to the encoder width."""
    ps = ParamSet()

    def conv(name, cout, cin):
        std = 1.0 / np.sqrt(cin * 25)
        ps.add(f"{name}.w", Tensor(rng.normal(0.0, std, size=(cout, cin, 5, 5)), requires_grad=True, dtype=dtype))
        ps.add(f"{name}.b", Tensor(np.zeros(cout), requires_grad=True, dtype=dtype))

    conv("c1", proj_hidden, hidden)
    for i in range(2, 6):
        conv(f"c{i}", proj_hidden, proj_hidden)
    std = 1.0 / np.sqrt(proj_hidden)
    ps.add("fc.w", Tensor(rng.normal(0.0, std, size=(proj_hidden, hidden)), requires_grad=True, dtype=dtype))
    ps.add("fc.b", Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype))
    return ps


def init_pad_embedding(hidden: int, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    return ParamSet({"vec": Tensor(rng.normal(0.0, 0.02, size=hidden), requires_grad=True, dtype=dtype)})


# ----------------------------------------------------------------------
# teacher targets


def _feature_standardize(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def teacher_targets(
    teacher: ParamSet,
    res: ResolutionSpec,
    n_layers: int,
    heads: int,
    spec: Tensor,
    normalize_targets: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Layer-averaged patch targets Y [P, D] and CLS target [D] from the
    unmasked teacher pass. Both are plain arrays: nothing downstream can
    backpropagate into teacher parameters.
    """
    mr = teacher.subset("mr.")
    tf = teacher.subset("tf.")
    with no_grad():
        seq = multires_forward(mr, res, spec, mask=None)
        states = encoder_forward(tf, n_layers, heads, seq)
    patch_layers = []
    cls_layers = []
    for state in states:
        h = state.data
        if normalize_targets:
            h = _feature_standardize(h)
        cls_layers.append(h[0])
        patch_layers.append(h[1:])
    y = np.mean(patch_layers, axis=0)
    c_bar = np.mean(cls_layers, axis=0)
    return y, c_bar


# ----------------------------------------------------------------------
# pad merge and projector


def merge_with_pad(
    student_out: Tensor,
    kept_positions: np.ndarray,
    pad: Tensor,
    pos_embedding: Tensor,
    n_patches: int,
) -> Tensor:
    """Rebuild the full-length patch sequence: student outputs at kept
    positions, pad vector plus positional term everywhere else. The CLS row
    of `student_out` is dropped here."""
    kept = np.asarray(kept_positions, dtype=np.intp)
    if kept.size != len(set(kept.tolist())):
        raise ValueError("duplicate kept positions")
    if kept.size and (kept.min() < 0 or kept.max() >= n_patches):
        raise ValueError(f"kept positions out of range [0, {n_patches})")
    if student_out.shape[0] != kept.size + 1:
        raise DimensionError(f"student sequence {student_out.shape[0]} != CLS + {kept.size} kept tokens")

    masked = np.setdiff1d(np.arange(n_patches, dtype=np.intp), kept)
    patches = T.take(student_out, np.arange(1, kept.size + 1))
    if masked.size == 0:
        return patches
    dim = student_out.shape[1]
    ones = Tensor(np.ones((masked.size, 1), dtype=student_out.dtype))
    pad_rows = T.reshape(pad, (1, dim)) * ones + T.take(pos_embedding, masked)
    stacked = T.concat([patches, pad_rows], axis=0)
    inverse = np.argsort(np.concatenate([kept, masked]))
    return T.take(stacked, inverse)


def projector_forward(proj: ParamSet, z: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Map the merged sequence [P, D] through the conv stack on its grid and
    back: prediction of the teacher's layer-averaged patch targets."""
    n_patches, dim = z.shape
    if n_patches != grid_h * grid_w:
        raise DimensionError(f"{n_patches} tokens cannot reshape to {grid_h}x{grid_w}")
    x = T.reshape(T.transpose(z, (1, 0)), (dim, grid_h, grid_w))
    for i in range(1, 6):
        x = T.gelu(T.conv2d(x, proj[f"c{i}.w"], proj[f"c{i}.b"], stride=1, padding=2))
    proj_hidden = x.shape[0]
    flat = T.transpose(T.reshape(x, (proj_hidden, n_patches)), (1, 0))
    return flat @ proj["fc.w"] + proj["fc.b"]


# ----------------------------------------------------------------------
# EMA


def ema_update(teacher: ParamSet, student: ParamSet, schedule: EmaSchedule) -> float:
    """One EMA step (in place on teacher); returns the tau that was applied."""
    if teacher.names() != student.names():
        raise ValueError("teacher and student parameter names differ")
    tau = schedule.tau_at(schedule.step)
    # weight on the student's contribution under either convention
    blend = tau if schedule.literal_update else 1.0 - tau
    for (name, t), (_, s) in zip(teacher.items(), student.items()):
        if t.shape != s.shape:
            raise DimensionError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if blend == 0.0:
            continue
        if blend == 1.0:
            t.data = s.data.copy()
        else:
            # delta form: bitwise no-op when student == teacher
            t.data = t.data + blend * (s.data - t.data)
    schedule.step += 1
    return tau


def student_forward(
    student: ParamSet,
    res: ResolutionSpec,
    n_layers: int,
    heads: int,
    spec: Tensor,
    mask: PatchMask | None,
) -> tuple[TokenSequence, list[Tensor]]:
    """Masked (or unmasked) student pass; returns the token sequence and the
    per-layer hidden states."""
    seq = multires_forward(student.subset("mr."), res, spec, mask)
    states = encoder_forward(student.subset("tf."), n_layers, heads, seq)
    return seq, states
