"""Central finite-difference checks of the analytic gradients from :func:`backward`.

A case is a chain of stages. Each stage maps the previous activation to the
next one and declares which parameters it reads, so a perturbed parameter only
forces recomputation from its own stage onward. The activations before that
stage are unchanged bit-for-bit, which keeps the check exact while making a
full-network sweep over every weight affordable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad, topological_order

STEP = 1e-5
REL_TOL = 1e-4
REL_FLOOR = 1e-8


@dataclass
class Stage:
    fn: Callable[[Any], Any]
    params: Sequence[Parameter] = ()


@dataclass
class GradcheckCase:
    """Stages whose composition (starting from ``None``) yields a scalar loss Tensor."""

    stages: list[Stage]

    @classmethod
    def single(cls, loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> "GradcheckCase":
        return cls([Stage(lambda _: loss_fn(), list(params))])

    @property
    def params(self) -> list[Parameter]:
        out, seen = [], set()
        for st in self.stages:
            for p in st.params:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def run(self, start: int = 0, act: Any = None) -> Any:
        for st in self.stages[start:]:
            act = st.fn(act)
        return act


@dataclass
class GradcheckRow:
    case: str
    seed: int
    param: str
    shape: tuple[int, ...]
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradcheckReport:
    rel_tol: float
    rows: list[GradcheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def failures(self) -> list[GradcheckRow]:
        return [r for r in self.rows if not r.passed]

    def format_table(self) -> str:
        head = f"{'case':<20} {'seed':>5} {'parameter':<24} {'elements':>9} {'max rel err':>12}  result"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.case:<20} {r.seed:>5} {r.param:<24} {r.checked:>9} {r.max_rel_error:>12.3e}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), REL_FLOOR)


def _scalar(t: Tensor) -> float:
    return float(t.data.reshape(-1)[0])


def numeric_gradient(case: GradcheckCase, param: Parameter, h: float = STEP,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for the chosen flat indices of ``param``."""
    start = next(i for i, st in enumerate(case.stages) if any(p is param for p in st.params))
    with no_grad():
        act = None
        for st in case.stages[:start]:
            act = st.fn(act)
        flat = param.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices
        out = np.zeros(flat.size, dtype=np.float64)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(case.run(start, act))
            flat[i] = orig - h
            fm = _scalar(case.run(start, act))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def check_case(case: GradcheckCase, name: str, seed: int, rel_tol: float = REL_TOL,
               h: float = STEP) -> list[GradcheckRow]:
    params = case.params
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"gradient checks run in 64-bit precision; {p.id} is {p.dtype}")
        p.zero_grad()
    loss = case.run()
    backward(loss)
    rows = []
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_gradient(case, p, h)
        err = float(relative_error(analytic, numeric).max()) if p.size else 0.0
        if not np.isfinite(err):
            err = float("inf")
        rows.append(GradcheckRow(name, seed, p.id, p.shape, err, p.size, err <= rel_tol))
    return rows


def gradcheck(builder: Callable[[np.random.Generator], GradcheckCase], seeds: Sequence[int],
              rel_tol: float = REL_TOL, name: str | None = None, h: float = STEP) -> GradcheckReport:
    """Check every parameter of the case built for each seed. Failures are reported, never raised."""
    report = GradcheckReport(rel_tol)
    label = name or getattr(builder, "__name__", "case")
    for seed in seeds:
        case = builder(np.random.default_rng(seed))
        report.rows.extend(check_case(case, label, seed, rel_tol, h))
    return report


def kink_margin(root: Tensor) -> float:
    """Distance of the recorded forward pass from the nearest non-differentiable point.

    The minimum over every ReLU pre-activation magnitude and every max-pool
    window's gap between its largest and second-largest entry.
    """
    margin = np.inf
    for node in topological_order(root):
        rec = node.record
        if rec is None:
            continue
        if rec.kind == "relu":
            margin = min(margin, float(np.abs(rec.inputs[0].data).min()))
        elif rec.kind == "maxpool2d":
            x = rec.inputs[0].data
            k = rec.attrs["window"]
            if k == 1:
                continue
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(-1, k * k)
            top2 = np.sort(win, axis=1)[:, -2:]
            gaps = top2[:, 1] - top2[:, 0]
            src = rec.inputs[0].record
            if src is not None and src.kind == "relu":
                # all-zero windows of clamped units are locally constant, not ties that can flip
                gaps = gaps[top2[:, 1] > 0]
            if gaps.size:
                margin = min(margin, float(gaps.min()))
    return margin
