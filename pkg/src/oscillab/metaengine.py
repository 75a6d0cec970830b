"""Metaplectic operators on sampled wavefunctions.

Conventions
-----------
Position grid: x_j = -L + j*dx, j = 0..N-1, with dx**2 = 2*pi/N so that the
unitary DFT maps the grid onto itself (xi_k uses the same points).

Fourier transform: (F u)(xi) = (2 pi)^{-1/2} int exp(-i x xi) u(x) dx.

Operators are normalized so that M(A)^{-1} (X, D)^T M(A) = A (X, D)^T, with
D = -i d/dx.  Then M(exp(tL)) = exp(-it H_L) where H_L is the quadratic
Hamiltonian of L (see :func:`oscillab.sl2core.traceless`).  Primitive lifts:

    shear(k)        u -> exp(i k x^2 / 2) u
    dilation(l>0)   u -> l^{-1/2} u(x / l)
    dilation(l<0)   u -> -i |l|^{-1/2} u(x / l)
    J               u -> exp(-i pi/4) F u
    -J              u -> exp(+i pi/4) F^{-1} u

These lifts are consistent, so products agree with the direct integral
kernels below up to the sign ambiguity of the double cover.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.signal import czt

from . import kernels, sl2core
from .errors import GridError, NormCapExceeded, TailEscape

Path_ = Literal["reference", "fast"]

DEFAULT_N = 4096
TAIL_TOL = 1e-10
MAGIC = b"OSCL"
_HEADER = struct.Struct("<4sId")


def self_dual_half_width(N: int) -> float:
    return math.sqrt(2 * math.pi * N) / 2


@dataclass(frozen=True)
class Grid:
    N: int

    def __post_init__(self):
        N = self.N
        if N < 8 or N & (N - 1):
            raise GridError(f"N={N} must be a power of two >= 8", N=N)

    @property
    def L(self) -> float:
        return self_dual_half_width(self.N)

    @property
    def dx(self) -> float:
        return math.sqrt(2 * math.pi / self.N)

    @property
    def x(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.N)

    @property
    def edge(self) -> int:
        """Points per side in the outer 1% band."""
        return max(1, math.ceil(0.005 * self.N))


def _tail_ratio(samples: np.ndarray, edge: int) -> float:
    total = float(np.vdot(samples, samples).real)
    if total == 0:
        return 0.0
    e = np.concatenate([samples[:edge], samples[-edge:]])
    return math.sqrt(float(np.vdot(e, e).real) / total)


@dataclass(frozen=True, eq=False)
class GridState:
    """Complex samples on the self-dual grid of size N.

    Construction checks that the outermost 1% of points carry at most
    1e-10 of the L2 norm; pass ``check=False`` for intermediate results.
    """

    samples: np.ndarray
    L: float = field(default=None)  # type: ignore[assignment]
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        s = np.array(self.samples, dtype=complex)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        grid = Grid(len(s))
        if self.L is None:
            object.__setattr__(self, "L", grid.L)
        elif abs(self.L - grid.L) > 1e-9 * grid.L:
            raise GridError(f"L={self.L} is not self-dual for N={grid.N} (expected {grid.L})")
        if self.check:
            r = _tail_ratio(s, grid.edge)
            if r > TAIL_TOL:
                raise TailEscape(f"boundary mass ratio {r:.3e}", side="position", ratio=r)

    @property
    def grid(self) -> Grid:
        return Grid(len(self.samples))

    @property
    def N(self) -> int:
        return len(self.samples)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def dx(self) -> float:
        return self.grid.dx

    def norm(self) -> float:
        return math.sqrt(self.dx) * float(np.linalg.norm(self.samples))

    def inner(self, other: "GridState") -> complex:
        """<self, other>, antilinear in self."""
        return complex(np.vdot(self.samples, other.samples)) * self.dx

    def with_samples(self, samples: np.ndarray, check: bool = True) -> "GridState":
        return GridState(samples, self.L, check)

    def __add__(self, other: "GridState") -> "GridState":
        return self.with_samples(self.samples + other.samples, check=False)

    def scaled(self, a: complex) -> "GridState":
        return self.with_samples(a * self.samples, check=False)

    def checked(self) -> "GridState":
        return GridState(self.samples, self.L, True)

    def fourier_tail_ratio(self) -> float:
        return _tail_ratio(_fft_unitary(self.samples), self.grid.edge)

    # persistence ------------------------------------------------------------
    def to_bytes(self) -> bytes:
        body = np.empty(2 * self.N, dtype="<f8")
        body[0::2] = self.samples.real
        body[1::2] = self.samples.imag
        return _HEADER.pack(MAGIC, self.N, self.L) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, check: bool = True) -> "GridState":
        if len(data) < _HEADER.size:
            raise GridError("state file shorter than its header")
        magic, N, L = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise GridError(f"bad magic {magic!r}")
        body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
        if len(body) != 2 * N:
            raise GridError(f"expected {2 * N} floats, found {len(body)}")
        return cls(body[0::2] + 1j * body[1::2], L, check)

    def save(self, path: str | Path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "GridState":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# state factories


def gaussian(zeta: complex = 1.0, N: int = DEFAULT_N) -> GridState:
    """Normalized exp(-zeta x^2 / 2) with Re zeta > 0; zeta = 1 gives h_0."""
    zeta = complex(zeta)
    if zeta.real <= 0:
        raise ValueError("gaussian needs Re(zeta) > 0")
    g = Grid(N)
    x = g.x
    return GridState((zeta.real / math.pi) ** 0.25 * np.exp(-0.5 * zeta * x * x), g.L)


def hermite(n: int, N: int = DEFAULT_N) -> GridState:
    """Hermite function h_n sampled on the grid."""
    if n < 0:
        raise ValueError("n must be non-negative")
    g = Grid(N)
    return GridState(kernels.hermite_table(g.x, n)[n], g.L)


def hermite_combination(coeffs, N: int = DEFAULT_N) -> GridState:
    """sum_n coeffs[n] h_n on the grid."""
    coeffs = np.asarray(coeffs, dtype=complex)
    g = Grid(N)
    table = kernels.hermite_table(g.x, len(coeffs) - 1)
    return GridState(coeffs @ table, g.L)


def state_from_spec(spec: str, N: int = DEFAULT_N) -> GridState:
    """Parse ``gaussian:<zeta>``, ``hermite:<n>`` or ``file:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "gaussian":
        return gaussian(complex(arg.replace(" ", "")) if arg else 1.0, N)
    if kind == "hermite":
        return hermite(int(arg), N)
    if kind == "file":
        return GridState.load(arg)
    raise ValueError(f"unknown state spec {spec!r}")


# ---------------------------------------------------------------------------
# primitive operators


def _alt(N: int) -> np.ndarray:
    return np.where(np.arange(N) % 2 == 0, 1.0, -1.0)


def _fft_unitary(u: np.ndarray) -> np.ndarray:
    s = _alt(len(u))
    return s * np.fft.fft(s * u) / math.sqrt(len(u))


def _ifft_unitary(v: np.ndarray) -> np.ndarray:
    s = _alt(len(v))
    return s * np.fft.ifft(s * v) * math.sqrt(len(v))


def apply_chirp(kappa: float, psi: GridState) -> GridState:
    """u -> exp(i kappa x^2 / 2) u."""
    if kappa == 0:
        return psi
    x = psi.x
    return psi.with_samples(np.exp(0.5j * kappa * x * x) * psi.samples, check=False)


def apply_fourier(psi: GridState, direction: int = 1) -> GridState:
    """Unitary grid Fourier transform; direction -1 gives the inverse."""
    if direction == 1:
        out = _fft_unitary(psi.samples)
    elif direction == -1:
        out = _ifft_unitary(psi.samples)
    else:
        raise ValueError("direction must be +1 or -1")
    return psi.with_samples(out, check=False)


def apply_parity(psi: GridState) -> GridState:
    """u(x) -> u(-x); the grid point -x_j is x_{(N-j) mod N}."""
    s = psi.samples
    return psi.with_samples(np.roll(s[::-1], 1), check=False)


def _dilate_fast(lam: float, u: np.ndarray) -> np.ndarray:
    N = len(u)
    g = Grid(N)
    L = g.L
    uh = _fft_unitary(u)
    k = np.arange(N)
    pre = uh * np.exp(-1j * math.pi * k / lam)
    w = np.exp(2j * math.pi / (N * lam))
    body = czt(pre, N, w, 1.0)
    out = body * np.exp(1j * (L * L - math.pi * k) / lam) / math.sqrt(N * lam)
    out[np.abs(g.x / lam) >= L] = 0.0
    return out


def _dilate_reference(lam: float, u: np.ndarray) -> np.ndarray:
    g = Grid(len(u))
    y = g.x / lam
    out = kernels.sinc_resample(-g.L, g.dx, u, y) / math.sqrt(lam)
    out[np.abs(y) >= g.L] = 0.0
    return out


def apply_dilation(lam: float, psi: GridState, path: Path_ = "fast", check: bool = True) -> GridState:
    """u -> lam^{-1/2} u(x / lam); negative lam adds parity and a factor -i."""
    if lam == 0:
        sl2core.dilation(lam)  # raises ZeroDilation
    if lam == 1:
        return psi
    a = abs(lam)
    u = psi.samples
    out = _dilate_fast(a, u) if path == "fast" else _dilate_reference(a, u)
    res = psi.with_samples(out, check=False)
    if lam < 0:
        res = apply_parity(res).scaled(-1j)
    if check:
        _check_tails(res)
    return res


def _check_tails(psi: GridState) -> None:
    edge = psi.grid.edge
    r = _tail_ratio(psi.samples, edge)
    if r > TAIL_TOL:
        raise TailEscape(f"position tail ratio {r:.3e}", side="position", ratio=r)
    r = _tail_ratio(_fft_unitary(psi.samples), edge)
    if r > TAIL_TOL:
        raise TailEscape(f"frequency tail ratio {r:.3e}", side="frequency", ratio=r)


def apply_factor(f: sl2core.Factor, psi: GridState, path: Path_ = "fast") -> GridState:
    if f.kind == "shear":
        return apply_chirp(f.param, psi)
    if f.kind == "dilation":
        return apply_dilation(f.param, psi, path, check=False)
    if f.param > 0:
        return apply_fourier(psi, 1).scaled(np.exp(-0.25j * math.pi))
    return apply_fourier(psi, -1).scaled(np.exp(0.25j * math.pi))


# ---------------------------------------------------------------------------
# full metaplectic operator


@dataclass(frozen=True)
class MetaPlan:
    source: np.ndarray
    chain: tuple
    path: Path_
    pre_rotate: bool = False


def default_norm_cap(N: int) -> float:
    return self_dual_half_width(N)


def _lift_sign(lam: float) -> complex:
    return 1.0 if lam > 0 else -1j


EIGHTH = math.pi / 4


def plan(A: np.ndarray, path: Path_ = "fast") -> MetaPlan:
    """Factor chain for A.  The fast path prefers the dilation-free shear
    factorization of A or of A R(pi/4) when either is well conditioned.  When both |a| and |b| are below 1/sqrt(2) the
    chain starts with -J and factors J A instead (rows swap, so the new first
    row is large)."""
    a, b = float(A[0, 0]), float(A[0, 1])
    if path == "fast":
        shears = sl2core.decompose_shears(A)
        if shears is not None:
            return MetaPlan(np.array(A, dtype=float), shears, path, False)
        # small |b|: A = (A R) R^{-1} with R = R(pi/4), both shear-factorable.
        # This keeps near-identity steps off the dilation, which is not exactly
        # unitary on the grid and amplifies roundoff when repeated
        R = sl2core.rotation(EIGHTH)
        head = sl2core.decompose_shears(A @ R)
        tail = sl2core.decompose_shears(sl2core.rotation(-EIGHTH))
        if head is not None and tail is not None:
            return MetaPlan(np.array(A, dtype=float), head + tail, path, False)
    if max(abs(a), abs(b)) < 1 / math.sqrt(2):
        JA = sl2core.J @ A
        chain = (sl2core.Factor("rotation", -sl2core.QUARTER),) + sl2core.decompose(JA)
        return MetaPlan(np.array(A, dtype=float), chain, path, True)
    return MetaPlan(np.array(A, dtype=float), sl2core.decompose(A), path, False)


def _apply_reference_core(A: np.ndarray, psi: GridState) -> GridState:
    """Direct quadrature of the integral kernel; requires max(|a|,|b|) large."""
    a, b, c, d = (float(v) for v in A.ravel())
    x = psi.x
    dx = psi.dx
    if abs(a) >= abs(b):
        # u -> (2 pi a)^{-1/2} int exp(i(c x^2/2a + x xi/a - b xi^2/2a)) u^(xi) dxi
        uh = _fft_unitary(psi.samples)
        pref = _lift_sign(a) / math.sqrt(2 * math.pi * abs(a))
        out = kernels.quadratic_phase_sum(x, x, uh * dx, c / (2 * a), 1 / a, -b / (2 * a))
    else:
        # u -> (2 pi i b)^{-1/2} int exp(i(d x^2/2b - x y/b + a y^2/2b)) u(y) dy
        pref = np.exp(-0.25j * math.pi) * _lift_sign(b) / math.sqrt(2 * math.pi * abs(b))
        out = kernels.quadratic_phase_sum(x, x, psi.samples * dx, d / (2 * b), -1 / b, a / (2 * b))
    return psi.with_samples(pref * out, check=False)


def apply_meta(
    A: np.ndarray,
    psi: GridState,
    path: Path_ = "fast",
    norm_cap: float | None = None,
    check: bool = True,
) -> GridState:
    """M(A) psi by direct O(N^2) quadrature (``reference``) or by the factor
    chain (``fast``).  Both carry the same global sign convention."""
    A = np.asarray(A, dtype=float)
    cap = default_norm_cap(psi.N) if norm_cap is None else norm_cap
    nrm = sl2core.mat_norm(A)
    if nrm > cap:
        raise NormCapExceeded(f"||A|| = {nrm:.4g} exceeds cap {cap:.4g}", norm=nrm, cap=cap)
    p = plan(A, path)
    if path == "reference":
        if p.pre_rotate:
            inner = _apply_reference_core(sl2core.J @ A, psi)
            out = apply_factor(p.chain[0], inner)
        else:
            out = _apply_reference_core(A, psi)
    elif path == "fast":
        out = psi
        for f in reversed(p.chain):
            out = apply_factor(f, out, "fast")
    else:
        raise ValueError(f"unknown path {path!r}")
    if check:
        _check_tails(out)
    return out


def propagate_const(L: np.ndarray, t: float, psi: GridState, path: Path_ = "fast", **kw) -> GridState:
    """exp(-i t H_L) psi = M(exp(tL)) psi."""
    if t == 0:
        return psi
    return apply_meta(sl2core.expm(L, t), psi, path, **kw)


# ---------------------------------------------------------------------------
# comparisons


def phase_aligned_distance(a: GridState, b: GridState) -> tuple[float, complex]:
    """min over |c| = 1 of ||a - c b||, and the minimizing c."""
    ov = b.inner(a)
    c = ov / abs(ov) if abs(ov) > 0 else 1.0
    diff = a.samples - c * b.samples
    return math.sqrt(a.dx) * float(np.linalg.norm(diff)), c


def sign_aligned_distance(a: GridState, b: GridState) -> tuple[float, int]:
    """min over sigma in {+1, -1} of ||a - sigma b||."""
    dp = math.sqrt(a.dx) * float(np.linalg.norm(a.samples - b.samples))
    dm = math.sqrt(a.dx) * float(np.linalg.norm(a.samples + b.samples))
    return (dp, 1) if dp <= dm else (dm, -1)
