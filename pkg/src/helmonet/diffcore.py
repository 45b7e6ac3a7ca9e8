"""Differentiation engine for fully connected networks.

Spatial derivatives are obtained by forward propagation of jets
(value, first derivatives, second derivatives w.r.t. k designated inputs)
through the layers; parameter gradients come from a hand-derived reverse
pass over the recorded jet computation.  With k = 2 spatial inputs the jets
are cheap and everything reduces to batched GEMMs, so a general-purpose
autodiff graph is not needed.

Layout conventions
------------------
Jets are stored packed as arrays of shape (S, n, w): slot 0 is the value,
slots 1..k the first derivatives, and the remaining slots the second-order
entries (slot-major so per-slot arrays stay contiguous).  Second-order
tracking has two modes:

* ``"full"``  -- the symmetric Hessian packed as (xx, xy, yy), 3 slots;
* ``"lap"``   -- the Laplacian only, 1 slot (enough for Helmholtz residuals
  and 1/3 cheaper, since grad+Laplacian propagation is closed under
  composition).

Parameters of an MLP live in one flat float array: per layer, the weight
matrix (out, in) in row-major order followed by the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:  # optional: fuses the elementwise jet stages into single-pass kernels
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    HAVE_NUMBA = False


class DiffcoreError(ValueError):
    pass


class DimensionMismatchError(DiffcoreError):
    pass


class UnsupportedPrimitiveError(DiffcoreError):
    """A loss composition used an operation outside the supported closed set."""


# ---------------------------------------------------------------------------
# activations: value and derivatives up to third order
# ---------------------------------------------------------------------------


def _tanh_derivs(z, upto):
    t = np.tanh(z)
    out = [t]
    if upto >= 1:
        s1 = 1.0 - t * t
        out.append(s1)
    if upto >= 2:
        out.append(-2.0 * t * s1)
    if upto >= 3:
        out.append(s1 * (6.0 * t * t - 2.0))
    return out


def _identity_derivs(z, upto):
    out = [z]
    if upto >= 1:
        out.append(np.ones_like(z))
    if upto >= 2:
        out.append(np.zeros_like(z))
    if upto >= 3:
        out.append(np.zeros_like(z))
    return out


def _quadratic_derivs(z, upto):
    # z + z^2/2: polynomial of degree 2, so order-2 jets are exact to machine
    # precision; used by the jet-exactness tests.
    out = [z + 0.5 * z * z]
    if upto >= 1:
        out.append(1.0 + z)
    if upto >= 2:
        out.append(np.ones_like(z))
    if upto >= 3:
        out.append(np.zeros_like(z))
    return out


ACTIVATIONS = {
    "tanh": _tanh_derivs,
    "identity": _identity_derivs,
    "quadratic": _quadratic_derivs,
}


# Fused tanh jet kernels: one pass over memory instead of one per slot op.
# t = tanh(v) is computed outside with numpy's SIMD tanh and passed in; the
# kernels only evaluate the polynomial derivative structure
# s1 = 1 - t^2, s2 = -2 t s1, s3 = s1 (6 t^2 - 2).  All arrays are viewed as
# (S, n*w).  Kernels run single-threaded: they are memory-bound, and a
# second thread pool only fights the BLAS workers for the cores.
if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _nb_fwd_first(z, t, out):
        for i in range(z.shape[1]):
            s1 = 1.0 - t[i] * t[i]
            out[0, i] = t[i]
            out[1, i] = s1 * z[1, i]
            out[2, i] = s1 * z[2, i]

    @numba.njit(cache=True)
    def _nb_fwd_lap(z, t, out):
        for i in range(z.shape[1]):
            ti = t[i]
            s1 = 1.0 - ti * ti
            s2 = -2.0 * ti * s1
            z1 = z[1, i]
            z2 = z[2, i]
            out[0, i] = ti
            out[1, i] = s1 * z1
            out[2, i] = s1 * z2
            out[3, i] = s2 * (z1 * z1 + z2 * z2) + s1 * z[3, i]

    @numba.njit(cache=True)
    def _nb_fwd_full(z, t, out):
        for i in range(z.shape[1]):
            ti = t[i]
            s1 = 1.0 - ti * ti
            s2 = -2.0 * ti * s1
            z1 = z[1, i]
            z2 = z[2, i]
            out[0, i] = ti
            out[1, i] = s1 * z1
            out[2, i] = s1 * z2
            out[3, i] = s2 * (z1 * z1) + s1 * z[3, i]
            out[4, i] = s2 * (z1 * z2) + s1 * z[4, i]
            out[5, i] = s2 * (z2 * z2) + s1 * z[5, i]

    @numba.njit(cache=True)
    def _nb_rev_first(z, t, g, gz):
        for i in range(z.shape[1]):
            ti = t[i]
            s1 = 1.0 - ti * ti
            s2 = -2.0 * ti * s1
            gz[0, i] = g[0, i] * s1 + (g[1, i] * z[1, i] + g[2, i] * z[2, i]) * s2
            gz[1, i] = g[1, i] * s1
            gz[2, i] = g[2, i] * s1

    @numba.njit(cache=True)
    def _nb_rev_lap(z, t, g, gz):
        for i in range(z.shape[1]):
            ti = t[i]
            s1 = 1.0 - ti * ti
            s2 = -2.0 * ti * s1
            s3 = s1 * (6.0 * ti * ti - 2.0)
            z1 = z[1, i]
            z2 = z[2, i]
            g3 = g[3, i]
            q = z1 * z1 + z2 * z2
            gz[0, i] = (
                g[0, i] * s1
                + (g[1, i] * z1 + g[2, i] * z2) * s2
                + g3 * (s3 * q + s2 * z[3, i])
            )
            gz[1, i] = g[1, i] * s1 + 2.0 * s2 * g3 * z1
            gz[2, i] = g[2, i] * s1 + 2.0 * s2 * g3 * z2
            gz[3, i] = s1 * g3

    @numba.njit(cache=True)
    def _nb_rev_full(z, t, g, gz):
        for i in range(z.shape[1]):
            ti = t[i]
            s1 = 1.0 - ti * ti
            s2 = -2.0 * ti * s1
            s3 = s1 * (6.0 * ti * ti - 2.0)
            z1 = z[1, i]
            z2 = z[2, i]
            g3 = g[3, i]
            g4 = g[4, i]
            g5 = g[5, i]
            gz[0, i] = (
                g[0, i] * s1
                + (g[1, i] * z1 + g[2, i] * z2) * s2
                + s3 * (g3 * z1 * z1 + g4 * z1 * z2 + g5 * z2 * z2)
                + s2 * (g3 * z[3, i] + g4 * z[4, i] + g5 * z[5, i])
            )
            gz[1, i] = g[1, i] * s1 + s2 * (2.0 * g3 * z1 + g4 * z2)
            gz[2, i] = g[2, i] * s1 + s2 * (g4 * z1 + 2.0 * g5 * z2)
            gz[3, i] = s1 * g3
            gz[4, i] = s1 * g4
            gz[5, i] = s1 * g5

    _NB_FWD = {None: _nb_fwd_first, "lap": _nb_fwd_lap, "full": _nb_fwd_full}
    _NB_REV = {None: _nb_rev_first, "lap": _nb_rev_lap, "full": _nb_rev_full}


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: affine + activation per hidden layer, affine output.

    final_activation=True also activates the last layer (used when a network
    is split into a hidden stack plus an externally fused output stage).
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    final_activation: bool = False

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise DiffcoreError("an MLP needs at least an input and an output layer")
        if any(w < 1 for w in self.layer_widths):
            raise DiffcoreError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise DiffcoreError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        return sum(
            w_in * w_out + w_out
            for w_in, w_out in zip(self.layer_widths[:-1], self.layer_widths[1:])
        )

    def hidden_stack(self) -> "MlpSpec":
        """The network without its output layer, keeping the last activation."""
        return MlpSpec(self.layer_widths[:-1], self.activation, final_activation=True)

    def last_layer_offsets(self):
        """(weight slice, bias slice) of the output layer in the flat layout."""
        w_in, w_out = self.layer_widths[-2], self.layer_widths[-1]
        end = self.n_params
        return slice(end - w_in * w_out - w_out, end - w_out), slice(end - w_out, end)


def split_params(spec: MlpSpec, params: np.ndarray):
    """Views (W, b) per layer into the flat parameter vector."""
    params = np.asarray(params)
    if params.ndim != 1 or params.size != spec.n_params:
        raise DimensionMismatchError(
            f"expected flat parameter vector of length {spec.n_params}, got shape {params.shape}"
        )
    out = []
    off = 0
    for w_in, w_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        W = params[off : off + w_in * w_out].reshape(w_out, w_in)
        off += w_in * w_out
        b = params[off : off + w_out]
        off += w_out
        out.append((W, b))
    return out


def pack_params(spec: MlpSpec, layers) -> np.ndarray:
    flat = [np.concatenate([W.ravel(), b.ravel()]) for W, b in layers]
    params = np.concatenate(flat)
    if params.size != spec.n_params:
        raise DimensionMismatchError("packed layers do not match the spec layout")
    return params


# ---------------------------------------------------------------------------
# jet containers
# ---------------------------------------------------------------------------

_SECOND_SLOTS = {None: 0, "full": 3, "lap": 1}


@dataclass
class Jet2:
    """Single-point jet: value, first partials, symmetric second partials."""

    value: float
    d: np.ndarray
    d2: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.d2 = np.asarray(self.d2, dtype=float)
        k = self.d.shape[0]
        if self.d2.shape != (k, k):
            raise DimensionMismatchError(f"d2 must be ({k}, {k}), got {self.d2.shape}")
        if not np.allclose(self.d2, self.d2.T, rtol=0.0, atol=0.0):
            raise DiffcoreError("d2 must be exactly symmetric")


def identity_jets(x) -> list[Jet2]:
    """Seed jets for differentiating w.r.t. every component of x."""
    x = np.asarray(x, dtype=float)
    k = x.size
    return [Jet2(x[i], np.eye(k)[i], np.zeros((k, k))) for i in range(k)]


def _pack_seeds(input_jets, k: int, second: str | None):
    n_in = len(input_jets)
    m = _SECOND_SLOTS[second]
    pack = np.zeros((1 + k + m, 1, n_in))
    for i, j in enumerate(input_jets):
        if j.d.shape[0] != k:
            raise DimensionMismatchError("all input jets must share the same k")
        pack[0, 0, i] = j.value
        pack[1 : 1 + k, 0, i] = j.d
        if second == "full":
            pack[1 + k, 0, i] = j.d2[0, 0]
            pack[2 + k, 0, i] = j.d2[0, 1]
            pack[3 + k, 0, i] = j.d2[1, 1]
        elif second == "lap":
            pack[1 + k, 0, i] = np.trace(j.d2)
    return pack


# ---------------------------------------------------------------------------
# core engine: packed forward / reverse
# ---------------------------------------------------------------------------


class JetTrace:
    """Forward pass record: everything the reverse pass needs."""

    def __init__(self, spec, k, second, packs_in, zs, out):
        self.spec = spec
        self.k = k
        self.second = second
        self.packs_in = packs_in  # input pack of every layer (post-activation of previous)
        self.zs = zs  # pre-activation pack of every activated layer
        self.out = out  # output pack (S, n, w_out)


def jet_forward(spec: MlpSpec, params: np.ndarray, pack: np.ndarray, second: str | None,
                keep_trace: bool = False):
    """Propagate packed jets through the network.

    pack has shape (S, n, w_in) with S = 1 + k + second-order slots; returns
    the output pack (and a JetTrace when keep_trace).
    """
    params = np.asarray(params)
    pack = np.ascontiguousarray(pack, dtype=params.dtype)
    S, n, w_in = pack.shape
    if w_in != spec.layer_widths[0]:
        raise DimensionMismatchError(
            f"input width {w_in} != spec input width {spec.layer_widths[0]}"
        )
    m = _SECOND_SLOTS[second]
    k = S - 1 - m
    if k < 0 or (second is not None and k == 0):
        raise DimensionMismatchError(f"pack slot count {S} inconsistent with second={second!r}")
    act = ACTIVATIONS[spec.activation]
    layers = split_params(spec, params)
    packs_in = [pack] if keep_trace else None
    zs = [] if keep_trace else None

    fused = HAVE_NUMBA and spec.activation == "tanh" and k == 2
    a = pack
    last = spec.n_layers - 1
    for li, (W, b) in enumerate(layers):
        z = (a.reshape(S * n, -1) @ W.T).reshape(S, n, W.shape[0])
        z[0] += b
        if li == last and not spec.final_activation:
            a = z
            break
        if keep_trace:
            zs.append(z)
        v = z[0]
        out = np.empty_like(z)
        if fused:
            wid = z.shape[2]
            _NB_FWD[second](z.reshape(S, n * wid), np.tanh(v).ravel(), out.reshape(S, n * wid))
            a = out
            if keep_trace:
                packs_in.append(a)
            continue
        if second is not None:
            t, s1, s2 = act(v, 2)
        elif k > 0:
            t, s1 = act(v, 1)
        else:
            (t,) = act(v, 0)
        out[0] = t
        if k > 0:
            dz = z[1 : 1 + k]
            np.multiply(s1[None], dz, out=out[1 : 1 + k])
        if second == "full":
            qz = z[1 + k :]
            out[1 + k] = s2 * (dz[0] * dz[0]) + s1 * qz[0]
            out[2 + k] = s2 * (dz[0] * dz[1]) + s1 * qz[1]
            out[3 + k] = s2 * (dz[1] * dz[1]) + s1 * qz[2]
        elif second == "lap":
            out[1 + k] = s2 * (dz[0] * dz[0] + dz[1] * dz[1]) + s1 * z[1 + k]
        a = out
        if keep_trace:
            packs_in.append(a)
    if keep_trace:
        return a, JetTrace(spec, k, second, packs_in, zs, a)
    return a


def jet_vjp(trace: JetTrace, params: np.ndarray, g_out: np.ndarray,
            param_grad: np.ndarray | None = None, want_input_grad: bool = False):
    """Reverse pass: adjoints of the output pack -> gradient w.r.t. params.

    Accumulates into param_grad when given.  The adjoint of the input pack is
    only materialized on request (seeds are usually constants).
    """
    spec, k, second = trace.spec, trace.k, trace.second
    act = ACTIVATIONS[spec.activation]
    layers = split_params(spec, params)
    if param_grad is None:
        param_grad = np.zeros_like(params)
    g_layers = split_params(spec, param_grad)
    S, n, _ = g_out.shape

    fused = HAVE_NUMBA and spec.activation == "tanh" and k == 2
    g = np.ascontiguousarray(g_out, dtype=params.dtype)
    for li in range(spec.n_layers - 1, -1, -1):
        W, _b = layers[li]
        gW, gb = g_layers[li]
        if li < spec.n_layers - 1 or spec.final_activation:
            # undo the activation stage first: g currently refers to the
            # post-activation pack of layer li
            z = trace.zs[li]
            v = z[0]
            if fused:
                # post-activation values (slot 0 of the next layer's input)
                # carry tanh(v) already; avoids re-evaluating tanh
                t_arr = trace.packs_in[li + 1][0]
                gz = np.empty_like(g)
                S_, n_, wid = z.shape
                _NB_REV[second](
                    z.reshape(S_, n_ * wid), t_arr.ravel(),
                    np.ascontiguousarray(g).reshape(S_, n_ * wid),
                    gz.reshape(S_, n_ * wid),
                )
                g = gz
                a_in = trace.packs_in[li]
                g2 = g.reshape(S * n, -1)
                gW += g2.T @ a_in.reshape(S * n, -1)
                gb += g[0].sum(axis=0)
                if li > 0 or want_input_grad:
                    g = (g2 @ W).reshape(S, n, a_in.shape[2])
                continue
            if second is not None:
                t, s1, s2, s3 = act(v, 3)
            elif k > 0:
                t, s1, s2 = act(v, 2)
            else:
                t, s1 = act(v, 1)
            gz = np.empty_like(g)
            gv = g[0] * s1
            if k > 0:
                dz = z[1 : 1 + k]
                gd = g[1 : 1 + k]
                gv += (gd[0] * dz[0] + gd[1] * dz[1]) * s2 if k == 2 else (gd * dz).sum(axis=0) * s2
                gdz = s1[None] * gd
            if second == "full":
                qz = z[1 + k :]
                gq = g[1 + k :]
                gv += s3 * (gq[0] * (dz[0] * dz[0]) + gq[1] * (dz[0] * dz[1]) + gq[2] * (dz[1] * dz[1]))
                gv += s2 * (gq[0] * qz[0] + gq[1] * qz[1] + gq[2] * qz[2])
                gdz[0] += s2 * (2.0 * gq[0] * dz[0] + gq[1] * dz[1])
                gdz[1] += s2 * (gq[1] * dz[0] + 2.0 * gq[2] * dz[1])
                np.multiply(s1[None], gq, out=gz[1 + k :])
            elif second == "lap":
                qz = z[1 + k]
                gq = g[1 + k]
                gv += gq * (s3 * (dz[0] * dz[0] + dz[1] * dz[1]) + s2 * qz)
                sgq = 2.0 * s2 * gq
                gdz[0] += sgq * dz[0]
                gdz[1] += sgq * dz[1]
                gz[1 + k] = s1 * gq
            gz[0] = gv
            if k > 0:
                gz[1 : 1 + k] = gdz
            g = gz
        # affine stage: z = a @ W.T (+ b on slot 0)
        a_in = trace.packs_in[li]
        g2 = g.reshape(S * n, -1)
        gW += g2.T @ a_in.reshape(S * n, -1)
        gb += g[0].sum(axis=0)
        if li > 0 or want_input_grad:
            g = (g2 @ W).reshape(S, n, a_in.shape[2])
    return (param_grad, g) if want_input_grad else param_grad


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Plain forward evaluation; x is (w_in,) or (n, w_in)."""
    params = np.asarray(params)
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    pack = np.atleast_2d(x)[None, :, :]
    out = jet_forward(spec, params, pack, second=None)[0]
    return out[0] if single else out


def mlp_forward_jet(spec: MlpSpec, params: np.ndarray, input_jets) -> list[Jet2]:
    """Propagate seeded input jets; returns one Jet2 per network output.

    The designated differentiation inputs are whatever the seeds encode: for
    plain spatial derivatives use identity_jets(x).
    """
    input_jets = list(input_jets)
    if len(input_jets) != spec.layer_widths[0]:
        raise DimensionMismatchError(
            f"got {len(input_jets)} input jets for input width {spec.layer_widths[0]}"
        )
    k = input_jets[0].d.shape[0]
    if k != 2:
        raise DiffcoreError("jet propagation is specialized to k = 2 designated inputs")
    pack = _pack_seeds(input_jets, k, "full")
    params = np.asarray(params, dtype=float)
    out = jet_forward(spec, params, pack, second="full")[:, 0, :]
    jets = []
    for o in range(out.shape[-1]):
        d2 = np.array([[out[3, o], out[4, o]], [out[4, o], out[5, o]]])
        jets.append(Jet2(float(out[0, o]), out[1:3, o].copy(), d2))
    return jets


# ---------------------------------------------------------------------------
# scalar-loss tape over a closed set of primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """Array node in the loss tape.

    Supports the closed primitive set +, -, *, integer powers, slicing,
    matrix-vector products, sum and mean; anything else raises
    UnsupportedPrimitiveError so unsound losses fail loudly.
    """

    __slots__ = ("data", "parents", "vjp", "grad")
    # keep numpy from absorbing Vars into object arrays; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    # -- helpers ----------------------------------------------------------
    @staticmethod
    def _lift(other):
        if isinstance(other, Var):
            return other
        if isinstance(other, (int, float, np.floating, np.integer, np.ndarray)):
            return None  # treated as constant
        raise UnsupportedPrimitiveError(f"cannot combine Var with {type(other).__name__}")

    def _add_grad(self, g):
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=self.data.dtype)
        self.grad += g

    # -- primitives --------------------------------------------------------
    def __add__(self, other):
        o = self._lift(other)
        if o is None:
            return Var(self.data + other, (self,), lambda g, s=self: s._add_grad(g))

        def back(g, a=self, b=o):
            a._add_grad(g)
            b._add_grad(g)

        return Var(self.data + o.data, (self, o), back)

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.data, (self,), lambda g, s=self: s._add_grad(-g))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._lift(other)
        if o is None:
            c = np.asarray(other)
            return Var(self.data * c, (self,), lambda g, s=self: s._add_grad(g * c))

        def back(g, a=self, b=o):
            a._add_grad(g * b.data)
            b._add_grad(g * a.data)

        return Var(self.data * o.data, (self, o), back)

    __rmul__ = __mul__

    def __pow__(self, n):
        if not isinstance(n, int) or n < 1:
            raise UnsupportedPrimitiveError("only integer powers >= 1 are supported")
        d = self.data

        def back(g, s=self):
            s._add_grad(g * n * d ** (n - 1))

        return Var(d**n, (self,), back)

    def __getitem__(self, idx):
        def back(g, s=self, idx=idx):
            buf = np.zeros_like(s.data)
            buf[idx] = g
            s._add_grad(buf)

        return Var(self.data[idx], (self,), back)

    def reshape(self, shape) -> "Var":
        old = self.data.shape

        def back(g, s=self, old=old):
            s._add_grad(np.asarray(g).reshape(old))

        return Var(self.data.reshape(shape), (self,), back)

    def matvec(self, v: "Var | np.ndarray") -> "Var":
        """(n, m) @ (m,) -> (n,); the DeepONet latent merge."""
        if isinstance(v, Var):

            def back(g, M=self, v=v):
                M._add_grad(np.outer(g, v.data))
                v._add_grad(M.data.T @ g)

            return Var(self.data @ v.data, (self, v), back)
        c = np.asarray(v)
        return Var(self.data @ c, (self,), lambda g, M=self: M._add_grad(np.outer(g, c)))

    def sum(self) -> "Var":
        def back(g, s=self):
            s._add_grad(np.full_like(s.data, float(g)))

        return Var(self.data.sum(dtype=np.float64), (self,), back)

    def mean(self) -> "Var":
        n = self.data.size

        def back(g, s=self):
            s._add_grad(np.full_like(s.data, float(g) / n))

        return Var(self.data.mean(dtype=np.float64), (self,), back)

    # explicit rejections: keeps failure modes obvious
    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnsupportedPrimitiveError("division by a Var is outside the primitive set")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        raise UnsupportedPrimitiveError("division by a Var is outside the primitive set")

    def __matmul__(self, other):
        raise UnsupportedPrimitiveError("use Var.matvec for latent contractions")


def contract_merge(hidden: Var, w_last: Var, b_last: Var, branch: Var, p: int,
                   segments) -> Var:
    """Fused output layer + dot-product merge over geometry segments.

    hidden is a packed jet Var (S, N, h) from the shared hidden stack;
    w_last (2p, h) and b_last (2p,) are the output-layer parameters; branch
    is (G, 2p), one latent row per geometry; segments is a list of
    (geometry index, lo, hi) row ranges covering the point batch.  Returns
    (S, N, 2): per slot the real (channel 0) and imaginary (channel 1)
    merged field jets, output-layer bias included on the value slot.
    Contracting the branch vector into the output weights first keeps every
    big array at hidden width.
    """
    H, WL, BL, B = hidden.data, w_last.data, b_last.data, branch.data
    S, N, h = H.shape
    out = np.empty((S, N, 2), dtype=H.dtype)
    weff = np.empty((len(segments), 2, h), dtype=H.dtype)
    for si, (gidx, lo, hi) in enumerate(segments):
        weff[si, 0] = B[gidx, :p] @ WL[:p, :]
        weff[si, 1] = B[gidx, p:] @ WL[p:, :]
        out[:, lo:hi, 0] = H[:, lo:hi, :] @ weff[si, 0]
        out[:, lo:hi, 1] = H[:, lo:hi, :] @ weff[si, 1]
        out[0, lo:hi, 0] += B[gidx, :p] @ BL[:p]
        out[0, lo:hi, 1] += B[gidx, p:] @ BL[p:]

    def back(g, hidden=hidden, w_last=w_last, b_last=b_last, branch=branch, p=p,
             segments=segments, weff=weff):
        H, WL, BL, B = hidden.data, w_last.data, b_last.data, branch.data
        S, N, h = H.shape
        g = np.asarray(g)
        gH = np.empty_like(H)
        gWL = np.zeros_like(WL)
        gBL = np.zeros_like(BL)
        gB = np.zeros_like(B)
        for si, (gidx, lo, hi) in enumerate(segments):
            gseg = g[:, lo:hi, :]
            np.multiply(gseg[:, :, 0:1], weff[si, 0], out=gH[:, lo:hi, :])
            gH[:, lo:hi, :] += gseg[:, :, 1:2] * weff[si, 1]
            hseg = np.ascontiguousarray(H[:, lo:hi, :]).reshape(-1, h)
            gw_re = hseg.T @ np.ascontiguousarray(gseg[:, :, 0]).ravel()
            gw_im = hseg.T @ np.ascontiguousarray(gseg[:, :, 1]).ravel()
            gWL[:p, :] += np.outer(B[gidx, :p], gw_re)
            gWL[p:, :] += np.outer(B[gidx, p:], gw_im)
            s_re = gseg[0, :, 0].sum()
            s_im = gseg[0, :, 1].sum()
            gB[gidx, :p] += WL[:p, :] @ gw_re + s_re * BL[:p]
            gB[gidx, p:] += WL[p:, :] @ gw_im + s_im * BL[p:]
            gBL[:p] += s_re * B[gidx, :p]
            gBL[p:] += s_im * B[gidx, p:]
        hidden._add_grad(gH)
        w_last._add_grad(gWL)
        b_last._add_grad(gBL)
        branch._add_grad(gB)

    return Var(out, (hidden, w_last, b_last, branch), back)


def backward(root: Var) -> None:
    """Reverse sweep from a scalar root; fills .grad on every reachable Var."""
    if root.data.size != 1:
        raise DiffcoreError("backward expects a scalar loss")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            topo.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data, dtype=float)
    for v in reversed(topo):
        if v.vjp is not None and v.grad is not None:
            v.vjp(v.grad)


class TapedMlp:
    """Tape-aware handle over one network's parameters.

    forward/forward_jet record enough to push loss adjoints back into the
    flat parameter gradient during backward().
    """

    def __init__(self, spec: MlpSpec, params_var: Var):
        self.spec = spec
        self.params_var = params_var

    def forward(self, x) -> Var:
        """Values only; x is (n, w_in).  Returns Var of shape (n, w_out)."""
        pack = np.asarray(x, dtype=self.params_var.data.dtype)[None, :, :]
        out, trace = jet_forward(self.spec, self.params_var.data, pack, None, keep_trace=True)

        def back(g, self=self, trace=trace):
            self.params_var._add_grad(
                jet_vjp(trace, self.params_var.data, np.asarray(g)[None, :, :])
            )

        return Var(out[0], (self.params_var,), back)

    def forward_jet(self, seed_pack: np.ndarray, second: str | None) -> Var:
        """Packed jets (S, n, w_out) as one Var; slot layout as in jet_forward."""
        out, trace = jet_forward(self.spec, self.params_var.data, seed_pack, second,
                                 keep_trace=True)

        def back(g, self=self, trace=trace):
            self.params_var._add_grad(jet_vjp(trace, self.params_var.data, np.asarray(g)))

        return Var(out, (self.params_var,), back)


def param_gradient(spec: MlpSpec, params: np.ndarray, loss_builder) -> np.ndarray:
    """Exact gradient of a scalar loss w.r.t. all parameters.

    loss_builder receives a TapedMlp and must return a scalar Var built from
    the supported primitives; paths through first and second derivative slots
    are included.
    """
    params = np.asarray(params, dtype=float)
    pvar = Var(params)
    loss = loss_builder(TapedMlp(spec, pvar))
    if not isinstance(loss, Var):
        raise UnsupportedPrimitiveError("loss_builder must return a Var scalar")
    backward(loss)
    return np.zeros_like(params) if pvar.grad is None else pvar.grad
