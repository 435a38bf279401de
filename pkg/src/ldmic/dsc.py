"""Exact rate-region quantities for two correlated discrete sources.

Slepian-Wolf corner entropies and admissibility, and the Berger-Tung
inner-bound rate constraints for user-supplied auxiliary test channels, all
by direct enumeration of the joint distribution. Logs are base 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_ALPHABET = 64
SUM_TOL = 1e-12
SLACK = 1e-9


class PMFError(ValueError):
    pass


def entropy(p) -> float:
    """Shannon entropy in bits of any array of probabilities (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


@dataclass(frozen=True)
class JointPMF:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2:
            raise PMFError(f"joint pmf must be 2-D, got shape {p.shape}")
        if max(p.shape) > MAX_ALPHABET:
            raise PMFError(f"alphabets larger than {MAX_ALPHABET} are not enumerated")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise PMFError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise PMFError(f"probabilities sum to {p.sum():.15g}, not 1")
        object.__setattr__(self, "p", p)

    @classmethod
    def dsbs(cls, crossover: float) -> "JointPMF":
        """Doubly symmetric binary source: uniform X1, X2 = X1 xor Bernoulli(crossover)."""
        q = crossover
        return cls(np.array([[(1 - q) / 2, q / 2], [q / 2, (1 - q) / 2]]))

    @classmethod
    def load(cls, path) -> "JointPMF":
        """Read ``{"shape": [m, n], "p": [row-major...]}`` or ``{"p": [[...], ...]}``."""
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, list):
            doc = {"p": doc}
        p = np.asarray(doc["p"], dtype=np.float64)
        if "shape" in doc:
            p = p.reshape(doc["shape"])
        return cls(p)


def binary_entropy(q: float) -> float:
    return entropy([q, 1 - q])


def sw_corner(pmf: JointPMF) -> tuple[float, float, float]:
    """(H(X1|X2), H(X2|X1), H(X1,X2)) in bits."""
    h12 = entropy(pmf.p)
    h1 = entropy(pmf.p.sum(axis=1))
    h2 = entropy(pmf.p.sum(axis=0))
    return h12 - h2, h12 - h1, h12


def marginal_entropies(pmf: JointPMF) -> tuple[float, float]:
    return entropy(pmf.p.sum(axis=1)), entropy(pmf.p.sum(axis=0))


def sw_admissible(r1: float, r2: float, pmf: JointPMF, slack: float = SLACK) -> bool:
    """Whether (r1, r2) lies in the Slepian-Wolf region of ``pmf``."""
    if r1 < 0 or r2 < 0:
        raise ValueError("rates must be non-negative")
    c1, c2, joint = sw_corner(pmf)
    return r1 >= c1 - slack and r2 >= c2 - slack and r1 + r2 >= joint - slack


@dataclass
class AuxChannels:
    """Test channels p(u1|x1), p(u2|x2) plus reconstruction maps and distortions.

    ``f1[u1, u2]`` / ``f2[u1, u2]`` give reconstruction symbols; ``d1[x1, xhat]``
    and ``d2[x2, xhat]`` are distortion matrices (Hamming when omitted).
    """

    w1: np.ndarray
    w2: np.ndarray
    f1: np.ndarray | None = None
    f2: np.ndarray | None = None
    d1: np.ndarray | None = None
    d2: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w1", "w2"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.ndim != 2 or np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > SUM_TOL):
                raise PMFError(f"{name} is not a row-stochastic matrix")
            setattr(self, name, w)

    @classmethod
    def identity(cls, n1: int, n2: int) -> "AuxChannels":
        f1 = np.repeat(np.arange(n1)[:, None], n2, axis=1)
        f2 = np.repeat(np.arange(n2)[None, :], n1, axis=0)
        return cls(np.eye(n1), np.eye(n2), f1, f2)

    @classmethod
    def constant(cls, n1: int, n2: int) -> "AuxChannels":
        return cls(np.ones((n1, 1)), np.ones((n2, 1)),
                   np.zeros((1, 1), dtype=int), np.zeros((1, 1), dtype=int))

    @classmethod
    def binary_symmetric(cls, e1: float, e2: float) -> "AuxChannels":
        def bsc(e):
            return np.array([[1 - e, e], [e, 1 - e]])
        f1 = np.array([[0, 0], [1, 1]])
        f2 = np.array([[0, 1], [0, 1]])
        return cls(bsc(e1), bsc(e2), f1, f2)


def four_way_joint(pmf: JointPMF, aux: AuxChannels) -> np.ndarray:
    """p(x1, x2, u1, u2) = p(x1, x2) p(u1|x1) p(u2|x2)."""
    if aux.w1.shape[0] != pmf.p.shape[0] or aux.w2.shape[0] != pmf.p.shape[1]:
        raise PMFError("channel input alphabets do not match the source alphabets")
    return np.einsum("ab,ac,bd->abcd", pmf.p, aux.w1, aux.w2)


def _h(joint: np.ndarray, keep: tuple[int, ...]) -> float:
    drop = tuple(i for i in range(joint.ndim) if i not in keep)
    return entropy(joint.sum(axis=drop) if drop else joint)


def _cmi_x_given(joint: np.ndarray, target: tuple[int, ...], given: tuple[int, ...]) -> float:
    """I(X1,X2 ; target | given) on a (x1, x2, u1, u2) joint."""
    x = (0, 1)
    return (_h(joint, x + given) + _h(joint, target + given)
            - _h(joint, x + target + given) - (_h(joint, given) if given else 0.0))


@dataclass
class BTInner:
    r1: float  # I(X1,X2; U1 | U2)
    r2: float  # I(X1,X2; U2 | U1)
    sum_rate: float  # I(X1,X2; U1, U2)
    d1: float | None = None
    d2: float | None = None

    def admits(self, r1: float, r2: float, slack: float = SLACK) -> bool:
        return r1 >= self.r1 - slack and r2 >= self.r2 - slack and r1 + r2 >= self.sum_rate - slack


def bt_inner(pmf: JointPMF, aux: AuxChannels) -> BTInner:
    """Berger-Tung inner-bound rate constraints and expected distortions."""
    joint = four_way_joint(pmf, aux)
    out = BTInner(
        r1=_cmi_x_given(joint, (2,), (3,)),
        r2=_cmi_x_given(joint, (3,), (2,)),
        sum_rate=_cmi_x_given(joint, (2, 3), ()),
    )
    if aux.f1 is not None and aux.f2 is not None:
        n1, n2 = pmf.p.shape
        d1 = aux.d1 if aux.d1 is not None else 1.0 - np.eye(n1, max(n1, int(aux.f1.max()) + 1))
        d2 = aux.d2 if aux.d2 is not None else 1.0 - np.eye(n2, max(n2, int(aux.f2.max()) + 1))
        # E d(X_j, f_j(U1, U2)) summed over the full joint
        x1 = np.arange(n1)[:, None, None, None]
        x2 = np.arange(n2)[None, :, None, None]
        xhat1 = np.asarray(aux.f1)[None, None]
        xhat2 = np.asarray(aux.f2)[None, None]
        out.d1 = float(np.sum(joint * d1[x1, xhat1]))
        out.d2 = float(np.sum(joint * d2[x2, xhat2]))
    return out


def mutual_information(joint: np.ndarray, a: tuple[int, ...], b: tuple[int, ...], given: tuple[int, ...] = ()) -> float:
    """I(A; B | C) for index groups of an arbitrary joint array."""
    return (_h(joint, a + given) + _h(joint, b + given) - _h(joint, a + b + given)
            - (_h(joint, given) if given else 0.0))


def is_markov_chain(joint: np.ndarray, a: tuple[int, ...], b: tuple[int, ...], c: tuple[int, ...],
                    tol: float = 1e-9) -> bool:
    """Whether A - B - C holds, i.e. I(A; C | B) == 0."""
    return mutual_information(joint, a, c, b) <= tol


def outer_bound_conditions(joint: np.ndarray, tol: float = 1e-9) -> bool:
    """U1 - X1 - X2 and X1 - X2 - U2 on a (x1, x2, u1, u2) joint."""
    return (is_markov_chain(joint, (2,), (0,), (1,), tol)
            and is_markov_chain(joint, (0,), (1,), (3,), tol))


def inner_bound_condition(joint: np.ndarray, tol: float = 1e-9) -> bool:
    """U1 - X1 - X2 - U2 on a (x1, x2, u1, u2) joint."""
    return (is_markov_chain(joint, (2,), (0,), (1, 3), tol)
            and is_markov_chain(joint, (0, 2), (1,), (3,), tol))
