"""Training objectives on toy models: next-token prediction, flow matching, and their sum.

Everything is float64 numpy. Models keep their parameters in one flat vector
``params`` so gradient checks and optimizers can treat them uniformly; each
objective provides an analytic gradient with respect to that vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol, Sequence

import numpy as np

DEFAULT_NTP_WEIGHT = 0.1


class ObjectiveError(ValueError):
    pass


class InfiniteLossError(ObjectiveError):
    def __init__(self, sequence: int, position: int, token: int):
        super().__init__(f"zero probability for token {token} at sequence {sequence}, position {position}")
        self.sequence = sequence
        self.position = position
        self.token = token


class NonFiniteGradientError(ObjectiveError):
    def __init__(self, index: int):
        super().__init__(f"non-finite gradient at parameter index {index}")
        self.index = index


# --- token side -------------------------------------------------------------


@dataclass(frozen=True)
class TokenBatch:
    sequences: tuple[tuple[int, ...], ...]
    vocab_size: int

    def __post_init__(self):
        seqs = tuple(tuple(int(t) for t in s) for s in self.sequences)
        if self.vocab_size < 2:
            raise ObjectiveError("vocab_size must be > 1")
        if not seqs:
            raise ObjectiveError("batch must be non-empty")
        for i, s in enumerate(seqs):
            if not s:
                raise ObjectiveError(f"sequence {i} is empty")
            bad = [t for t in s if not 0 <= t < self.vocab_size]
            if bad:
                raise ObjectiveError(f"sequence {i} has ids outside [0, {self.vocab_size}): {bad[:3]}")
        object.__setattr__(self, "sequences", seqs)

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, length: int, vocab_size: int) -> "TokenBatch":
        return cls(tuple(map(tuple, rng.integers(0, vocab_size, size=(n, length)).tolist())), vocab_size)


class TokenModel(Protocol):
    vocab_size: int
    params: np.ndarray

    def predict(self, prefix: Sequence[int]) -> np.ndarray: ...


class UniformTokenModel:
    """Every token equally likely; no parameters."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.params = np.zeros(0)

    def predict(self, prefix: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)

    def ntp_grad(self, batch: TokenBatch) -> np.ndarray:
        return np.zeros(0)


class FunctionTokenModel:
    """Wraps a fixed ``prefix -> distribution`` function; no parameters."""

    def __init__(self, vocab_size: int, fn: Callable[[Sequence[int]], np.ndarray]):
        self.vocab_size = vocab_size
        self.fn = fn
        self.params = np.zeros(0)

    def predict(self, prefix: Sequence[int]) -> np.ndarray:
        return np.asarray(self.fn(tuple(prefix)), dtype=np.float64)

    def ntp_grad(self, batch: TokenBatch) -> np.ndarray:
        return np.zeros(0)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class SoftmaxTokenModel:
    """Softmax over a learned logit table indexed by the previous token.

    Row ``V`` of the ``(V + 1, V)`` table is used at the first position.
    """

    def __init__(self, vocab_size: int, params: np.ndarray | None = None):
        self.vocab_size = vocab_size
        size = (vocab_size + 1) * vocab_size
        self.params = np.zeros(size) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (size,):
            raise ObjectiveError(f"expected {size} parameters, got {self.params.shape}")

    @classmethod
    def random(cls, vocab_size: int, rng: np.random.Generator, scale: float = 1.0) -> "SoftmaxTokenModel":
        return cls(vocab_size, rng.normal(0.0, scale, (vocab_size + 1) * vocab_size))

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.vocab_size + 1, self.vocab_size)

    def _row(self, prefix: Sequence[int]) -> int:
        return prefix[-1] if prefix else self.vocab_size

    def predict(self, prefix: Sequence[int]) -> np.ndarray:
        return _softmax(self.table[self._row(prefix)])

    def ntp_grad(self, batch: TokenBatch) -> np.ndarray:
        # d(-log softmax(z)_y)/dz = p - onehot(y), averaged over sequences
        grad = np.zeros_like(self.table)
        for seq in batch.sequences:
            for k, tok in enumerate(seq):
                row = self._row(seq[:k])
                p = _softmax(self.table[row])
                p[tok] -= 1.0
                grad[row] += p
        return grad.ravel() / len(batch.sequences)


def ntp_loss(batch: TokenBatch, model: TokenModel) -> float:
    """Mean over sequences of the summed negative log-likelihood."""
    if model.vocab_size != batch.vocab_size:
        raise ObjectiveError(f"model vocab {model.vocab_size} != batch vocab {batch.vocab_size}")
    total = 0.0
    for i, seq in enumerate(batch.sequences):
        for k, tok in enumerate(seq):
            p = float(model.predict(seq[:k])[tok])
            if p <= 0.0:
                raise InfiniteLossError(i, k, tok)
            total -= math.log(p)
    return total / len(batch.sequences)


# --- flow side --------------------------------------------------------------


def _as2d(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ObjectiveError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    c: np.ndarray = field(default=None)

    def __post_init__(self):
        x0, x1 = _as2d(self.x0, "x0"), _as2d(self.x1, "x1")
        t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        n = x0.shape[0]
        c = np.zeros((n, 0)) if self.c is None else _as2d(self.c, "c")
        if x0.shape != x1.shape:
            raise ObjectiveError(f"x0 {x0.shape} and x1 {x1.shape} differ")
        if n == 0:
            raise ObjectiveError("batch must be non-empty")
        if t.shape != (n,) or c.shape[0] != n:
            raise ObjectiveError(f"t {t.shape} / c {c.shape} inconsistent with {n} samples")
        if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
            raise ObjectiveError("t must lie in [0, 1]")
        for name, arr in (("x0", x0), ("x1", x1), ("t", t), ("c", c)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @classmethod
    def sample(
        cls, data: np.ndarray, rng: np.random.Generator, n: int, cond: np.ndarray | None = None
    ) -> "FlowBatch":
        """Draw x0 from the rows of ``data``, x1 ~ N(0, I) and t ~ U[0, 1]."""
        data = _as2d(data, "data")
        idx = rng.integers(0, data.shape[0], size=n)
        x1 = rng.standard_normal((n, data.shape[1]))
        t = rng.random(n)
        c = None if cond is None else _as2d(cond, "cond")[idx]
        return cls(data[idx], x1, t, c)


def flow_sample(x0, x1, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolant and its velocity: ``((1-t) x0 + t x1, x1 - x0)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ObjectiveError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
        raise ObjectiveError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1, x1 - x0


class VectorFieldModel(Protocol):
    params: np.ndarray

    def evaluate(self, x_t: np.ndarray, t: np.ndarray, c: np.ndarray) -> np.ndarray: ...


class ClosureVectorField:
    """A fixed function of ``(x_t, t, c)``; no parameters."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]):
        self.fn = fn
        self.params = np.zeros(0)

    def evaluate(self, x_t, t, c) -> np.ndarray:
        return np.asarray(self.fn(x_t, t, c), dtype=np.float64)

    def fm_grad(self, batch: FlowBatch) -> np.ndarray:
        return np.zeros(0)


class AffineVectorField:
    """``u(x, t, c) = A [x; t; c; 1]`` with optional feature groups.

    ``params`` is ``A`` flattened row-major, shape ``(dim, n_features)``.
    """

    def __init__(
        self,
        dim: int,
        cond_dim: int = 0,
        *,
        time: bool = True,
        bias: bool = True,
        params: np.ndarray | None = None,
    ):
        self.dim = dim
        self.cond_dim = cond_dim
        self.time = time
        self.bias = bias
        self.n_features = dim + int(time) + cond_dim + int(bias)
        size = dim * self.n_features
        self.params = np.zeros(size) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (size,):
            raise ObjectiveError(f"expected {size} parameters, got {self.params.shape}")

    @classmethod
    def random(cls, dim: int, cond_dim: int, rng: np.random.Generator, scale: float = 0.5, **kw):
        model = cls(dim, cond_dim, **kw)
        model.params = rng.normal(0.0, scale, model.params.size)
        return model

    @property
    def matrix(self) -> np.ndarray:
        return self.params.reshape(self.dim, self.n_features)

    def features(self, x_t, t, c) -> np.ndarray:
        x_t = _as2d(x_t, "x_t")
        n = x_t.shape[0]
        if x_t.shape[1] != self.dim:
            raise ObjectiveError(f"x_t has dimension {x_t.shape[1]}, model expects {self.dim}")
        cols = [x_t]
        if self.time:
            cols.append(np.asarray(t, dtype=np.float64).reshape(n, 1))
        if self.cond_dim:
            c = _as2d(c, "c")
            if c.shape != (n, self.cond_dim):
                raise ObjectiveError(f"c has shape {c.shape}, model expects ({n}, {self.cond_dim})")
            cols.append(c)
        if self.bias:
            cols.append(np.ones((n, 1)))
        return np.hstack(cols)

    def evaluate(self, x_t, t, c) -> np.ndarray:
        return self.features(x_t, t, c) @ self.matrix.T

    def fm_grad(self, batch: FlowBatch) -> np.ndarray:
        x_t, v = flow_sample(batch.x0, batch.x1, batch.t)
        phi = self.features(x_t, batch.t, batch.c)
        residual = phi @ self.matrix.T - v
        return (2.0 / len(batch)) * (residual.T @ phi).ravel()


def linear_vector_field(dim: int, params: np.ndarray | None = None) -> AffineVectorField:
    """``u(x, t) = W x``."""
    return AffineVectorField(dim, 0, time=False, bias=False, params=params)


def flow_matching_loss(batch: FlowBatch, model: VectorFieldModel) -> float:
    """Mean squared norm of ``u(x_t, t, c) - (x1 - x0)``."""
    x_t, v = flow_sample(batch.x0, batch.x1, batch.t)
    u = np.asarray(model.evaluate(x_t, batch.t, batch.c), dtype=np.float64)
    if u.shape != v.shape:
        raise ObjectiveError(f"model output {u.shape} does not match target {v.shape}")
    return float(np.mean(np.sum((u - v) ** 2, axis=1)))


# --- joint ------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveWeights:
    ntp_weight: float = DEFAULT_NTP_WEIGHT

    def __post_init__(self):
        if not math.isfinite(self.ntp_weight) or self.ntp_weight < 0:
            raise ObjectiveError("ntp_weight must be finite and >= 0")


def joint_loss(fm: float, ntp: float, weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    if not (math.isfinite(fm) and math.isfinite(ntp)):
        raise ObjectiveError("joint_loss needs finite components")
    return fm + weights.ntp_weight * ntp


# --- objectives as (model -> loss, model -> grad) pairs ---------------------


class Objective(Protocol):
    def loss(self, model) -> float: ...
    def grad(self, model) -> np.ndarray: ...


@dataclass(frozen=True)
class NTPObjective:
    batch: TokenBatch

    def loss(self, model) -> float:
        return ntp_loss(self.batch, model)

    def grad(self, model) -> np.ndarray:
        return model.ntp_grad(self.batch)


@dataclass(frozen=True)
class FMObjective:
    batch: FlowBatch

    def loss(self, model) -> float:
        return flow_matching_loss(self.batch, model)

    def grad(self, model) -> np.ndarray:
        return model.fm_grad(self.batch)


class UnifiedModel:
    """A token model and a vector field sharing one parameter vector view.

    ``params`` is the concatenation ``[token.params, field.params]``; assigning
    it writes both halves back.
    """

    def __init__(self, token, field):
        self.token = token
        self.field = field

    @property
    def split(self) -> int:
        return self.token.params.size

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.token.params, self.field.params])

    @params.setter
    def params(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        self.token.params = value[: self.split].copy()
        self.field.params = value[self.split :].copy()


@dataclass(frozen=True)
class JointObjective:
    ntp: NTPObjective
    fm: FMObjective
    weights: ObjectiveWeights = ObjectiveWeights()

    def loss(self, model: UnifiedModel) -> float:
        return joint_loss(self.fm.loss(model.field), self.ntp.loss(model.token), self.weights)

    def grad(self, model: UnifiedModel) -> np.ndarray:
        return np.concatenate([self.weights.ntp_weight * self.ntp.grad(model.token), self.fm.grad(model.field)])


def grad_check(model, objective: Objective, epsilon: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Parameters are
    restored bit-for-bit afterwards.
    """
    analytic = np.asarray(objective.grad(model), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(analytic))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    original = np.array(model.params, dtype=np.float64)
    if analytic.shape != original.shape:
        raise ObjectiveError(f"gradient shape {analytic.shape} != parameter shape {original.shape}")
    worst = 0.0
    try:
        for i in range(original.size):
            bumped = original.copy()
            bumped[i] += epsilon
            model.params = bumped
            up = objective.loss(model)
            bumped[i] = original[i] - epsilon
            model.params = bumped
            down = objective.loss(model)
            numeric = (up - down) / (2.0 * epsilon)
            if not math.isfinite(numeric):
                raise NonFiniteGradientError(i)
            denom = max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    finally:
        model.params = original
    return worst


def fit_gradient_descent(
    model, objective: Objective, lr: float, max_steps: int = 200_000, tol: float = 1e-12
) -> int:
    """Plain gradient descent until the gradient norm drops below ``tol``.

    Returns the number of steps taken.
    """
    for step in range(max_steps):
        g = objective.grad(model)
        if float(np.linalg.norm(g)) < tol:
            return step
        model.params = model.params - lr * g
    return max_steps


# --- stage training ---------------------------------------------------------


class Stage(str, Enum):
    REASONING = "reasoning"  # NTP only; the vector field is frozen
    EDIT = "edit"  # flow matching only; the token model is frozen
    UNIFIED = "unified"  # joint loss; both train


def train_stage(
    stage: Stage,
    token,
    field,
    ntp_batch: TokenBatch,
    fm_batch: FlowBatch,
    *,
    steps: int = 100,
    lr: float = 0.05,
    weights: ObjectiveWeights = ObjectiveWeights(),
) -> list[float]:
    """Run ``steps`` gradient steps of one stage; returns the loss trajectory.

    Frozen components are never assigned to, so their parameter arrays stay
    bit-identical.
    """
    stage = Stage(stage)
    ntp, fm = NTPObjective(ntp_batch), FMObjective(fm_batch)
    history = []
    for _ in range(steps):
        if stage is Stage.REASONING:
            history.append(ntp.loss(token))
            token.params = token.params - lr * ntp.grad(token)
        elif stage is Stage.EDIT:
            history.append(fm.loss(field))
            field.params = field.params - lr * fm.grad(field)
        else:
            history.append(joint_loss(fm.loss(field), ntp.loss(token), weights))
            g_tok = weights.ntp_weight * ntp.grad(token)
            g_fld = fm.grad(field)
            token.params = token.params - lr * g_tok
            field.params = field.params - lr * g_fld
    return history


# --- verification suite -----------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def least_squares_oracle(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Solve the normal equations ``W (X^T X) = V^T X`` for ``u = W x``."""
    return np.linalg.solve(x.T @ x, x.T @ v).T


def _check(name: str, value: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value <= tolerance), float(value), tolerance, detail)


def verify_objectives(seed: int = 0) -> list[CheckResult]:
    """Run the closed-form and finite-difference checks on the toy models."""
    rng = np.random.default_rng(seed)
    results = []

    V, L = 4, 3
    batch = TokenBatch.random(rng, 5, L, V)
    value = ntp_loss(batch, UniformTokenModel(V))
    results.append(_check("ntp_loss uniform = L ln V", abs(value - L * math.log(V)), 1e-12, f"{value!r}"))

    x0, x1 = rng.normal(size=3), rng.normal(size=3)
    xt0, _ = flow_sample(x0, x1, 0.0)
    xt1, v = flow_sample(x0, x1, 1.0)
    exact = np.array_equal(xt0, x0) and np.array_equal(xt1, x1) and np.array_equal(v, x1 - x0)
    results.append(CheckResult("flow_sample endpoints exact", exact, 0.0 if exact else 1.0, 0.0))

    fb = FlowBatch.sample(rng.normal(size=(8, 3)), rng, 16)
    oracle = ClosureVectorField(lambda xt, t, c: fb.x1 - fb.x0)
    results.append(_check("flow_matching_loss oracle field = 0", flow_matching_loss(fb, oracle), 0.0))

    data = np.array([[1.0, 0.5], [-0.5, 2.0]])
    lin_batch = FlowBatch(np.repeat(data, 3, axis=0), rng.standard_normal((6, 2)), rng.uniform(0.1, 0.9, 6))
    lin = linear_vector_field(2)
    x_t, v = flow_sample(lin_batch.x0, lin_batch.x1, lin_batch.t)
    hessian_top = 2.0 * np.linalg.eigvalsh(x_t.T @ x_t / len(lin_batch)).max()
    fit_gradient_descent(lin, FMObjective(lin_batch), lr=1.0 / hessian_top)
    err = float(np.abs(lin.matrix - least_squares_oracle(x_t, v)).max())
    results.append(_check("linear field minimizer = least squares", err, 1e-6))

    tok = SoftmaxTokenModel.random(5, rng)
    tok_batch = TokenBatch.random(rng, 4, 6, 5)
    results.append(_check("grad_check softmax token model", grad_check(tok, NTPObjective(tok_batch)), 1e-4))
    fld = AffineVectorField.random(3, 2, rng)
    fld_batch = FlowBatch.sample(rng.normal(size=(8, 3)), rng, 12, cond=rng.normal(size=(8, 2)))
    results.append(_check("grad_check affine vector field", grad_check(fld, FMObjective(fld_batch)), 1e-4))

    joint = JointObjective(NTPObjective(tok_batch), FMObjective(fld_batch), ObjectiveWeights(0.1))
    unified = UnifiedModel(tok, fld)
    fm_val, ntp_val = flow_matching_loss(fld_batch, fld), ntp_loss(tok_batch, tok)
    lin_err = abs(joint.loss(unified) - (fm_val + 0.1 * ntp_val))
    expected = np.concatenate([0.1 * tok.ntp_grad(tok_batch), fld.fm_grad(fld_batch)])
    lin_err = max(lin_err, float(np.abs(joint.grad(unified) - expected).max()))
    results.append(_check("joint_loss linearity (w=0.1)", lin_err, 1e-10))
    results.append(_check("grad_check joint objective", grad_check(unified, joint), 1e-4))

    frozen = 0.0
    for stage in Stage:
        t_model = SoftmaxTokenModel.random(5, rng)
        f_model = AffineVectorField.random(3, 2, rng)
        before_t, before_f = t_model.params.copy(), f_model.params.copy()
        train_stage(stage, t_model, f_model, tok_batch, fld_batch, steps=100)
        t_same = np.array_equal(t_model.params, before_t)
        f_same = np.array_equal(f_model.params, before_f)
        expect = {Stage.REASONING: (False, True), Stage.EDIT: (True, False), Stage.UNIFIED: (False, False)}[stage]
        if (t_same, f_same) != expect:
            frozen += 1
    results.append(_check("stage freezing contract", frozen, 0.0, "violations across 3 stages"))
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  value         tolerance"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.value:<12.3e}  {r.tolerance:.0e}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed} passed, {failed} failed")
    return "\n".join(lines)

