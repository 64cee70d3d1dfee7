"""The conditioner network: dense layers, GeLU and 1d spectral convolution.

Inputs are channel stacks of shape ``(B, C, N)`` over the coefficient index
(N = number of basis functions).  Channel 0 is the PDE-loss gradient when
``input_spec["grad"]`` is set; the remaining channels are the context
features assembled by :mod:`physopt.solver`.

Layer descriptors (``net.layers``), applied in order:

``{"type": "pointwise", "in": c, "out": o}``  channel-mixing dense map (lift/project)
``{"type": "fourier", "width": w, "modes": m}``  spectral conv + pointwise skip
``{"type": "gelu"}``
``{"type": "flatten"}``                        (B, C, N) -> (B, C*N)
``{"type": "dense", "in": d, "out": o}``      dense map on flat vectors
``{"type": "squeeze"}``                        (B, 1, N) -> (B, N)

All weights live in one flat float64 vector ``net.params`` with per-layer
offsets, which is what the outer optimizer updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DivergenceError, InvalidSpecError, ShapeMismatchError
from .tape import Tape, Var

CHECKPOINT_MAGIC = b"PHYSOPT-CKPT v1\n"

DEFAULT_INPUT_SPEC = {"grad": True, "gamma": True, "g": True, "f": True, "coords": True}


# ----------------------------------------------------------------- DFT


def _naive_dft(x, sign):
    n = len(x)
    k = np.arange(n)
    out = np.empty(n, dtype=complex)
    for j in range(n):
        out[j] = np.sum(x * np.exp(sign * 2j * np.pi * j * k / n))
    return out


def _radix2(x, sign):
    n = len(x)
    if n == 1:
        return x.astype(complex)
    even = _radix2(x[0::2], sign)
    odd = _radix2(x[1::2], sign)
    tw = np.exp(sign * 2j * np.pi * np.arange(n // 2) / n) * odd
    return np.concatenate([even + tw, even - tw])


def _transform(x, sign, method):
    x = np.asarray(x, dtype=complex).ravel()
    n = len(x)
    if n < 1:
        raise ShapeMismatchError("transform needs at least one sample")
    pow2 = n & (n - 1) == 0
    if method == "radix2" or (method == "auto" and pow2 and n > 1):
        if not pow2:
            raise InvalidSpecError("radix-2 path needs a power-of-two length")
        return _radix2(x, sign) / np.sqrt(n)
    return _naive_dft(x, sign) / np.sqrt(n)


def dft_1d(x, method="auto"):
    """Unitary DFT: X_k = N^{-1/2} sum_n x_n exp(-2 pi i k n / N)."""
    return _transform(x, -1, method)


def idft_1d(spectrum, method="auto"):
    """Inverse of :func:`dft_1d`."""
    return _transform(spectrum, +1, method)


def spectral_matrices(n, modes):
    """Real matrices for the truncated unitary real-input DFT and its inverse.

    Forward: ``xr = x @ fwd_re``, ``xi = x @ fwd_im`` give modes ``0..modes-1``.
    Inverse: ``y = yr @ inv_re + yi @ inv_im`` rebuilds a real signal with the
    Hermitian-symmetric completion (irfft convention: imaginary parts of the
    DC and Nyquist modes are dropped).
    """
    if not 1 <= modes <= n // 2 + 1:
        raise InvalidSpecError(f"modes must be in [1, {n // 2 + 1}] for N={n}, got {modes}")
    k = np.arange(modes)
    t = np.arange(n)
    ang = 2 * np.pi * np.outer(t, k) / n
    root = np.sqrt(n)
    fwd_re = np.cos(ang) / root
    fwd_im = -np.sin(ang) / root
    weight = np.where((k == 0) | (2 * k == n), 1.0, 2.0)
    inv_re = weight[:, None] * np.cos(ang.T) / root
    inv_im = -weight[:, None] * np.sin(ang.T) / root
    return fwd_re, fwd_im, inv_re, inv_im


def spectral_conv(tape: Tape, x, w_re, w_im, mats):
    """Mode-wise complex channel mixing; weights are ``(modes, c_in, c_out)``.

    The complex product is done as one real block matmul per mode:
    ``[xr, xi] @ [[wr, wi], [-wi, wr]]``.
    """
    fr, fi, ir, ii = mats
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    wr = w_re.value if isinstance(w_re, Var) else np.asarray(w_re)
    wi = w_im.value if isinstance(w_im, Var) else np.asarray(w_im)
    c = wr.shape[1]
    spec = np.concatenate([xv @ fr, xv @ fi], axis=1)  # (B, 2C, M)
    xs = np.ascontiguousarray(np.transpose(spec, (2, 0, 1)))  # (M, B, 2C)
    big = np.block([[wr, wi], [-wi, wr]])  # (M, 2C, 2O)
    ys = xs @ big
    o = wr.shape[2]
    yt = np.transpose(ys, (1, 2, 0))  # (B, 2O, M)
    out = yt[:, :o] @ ir + yt[:, o:] @ ii

    cache = {}

    def grad_modes(g):
        if "gs" not in cache:
            gt = np.concatenate([g @ ir.T, g @ ii.T], axis=1)  # (B, 2O, M)
            cache["gs"] = np.ascontiguousarray(np.transpose(gt, (2, 0, 1)))
        return cache["gs"]

    def grad_big(g):
        if "gw" not in cache:
            cache["gw"] = np.swapaxes(xs, 1, 2) @ grad_modes(g)
        return cache["gw"]

    def vjp_x(g):
        gx = grad_modes(g) @ np.swapaxes(big, 1, 2)  # (M, B, 2C)
        gx = np.transpose(gx, (1, 2, 0))
        return gx[:, :c] @ fr.T + gx[:, c:] @ fi.T

    def vjp_wr(g):
        gw = grad_big(g)
        return gw[:, :c, :o] + gw[:, c:, o:]

    def vjp_wi(g):
        gw = grad_big(g)
        return gw[:, :c, o:] - gw[:, c:, :o]

    return tape.custom(out, [x, w_re, w_im], [vjp_x, vjp_wr, vjp_wi])


# ------------------------------------------------------------- network


def _layer_param_shapes(layer):
    t = layer["type"]
    if t == "pointwise":
        return [(layer["out"], layer["in"]), (layer["out"], 1)]
    if t == "fourier":
        w, m = layer["width"], layer["modes"]
        return [(m, w, w), (m, w, w), (w, w), (w, 1)]
    if t == "dense":
        return [(layer["in"], layer["out"]), (layer["out"],)]
    if t in ("gelu", "flatten", "squeeze"):
        return []
    raise InvalidSpecError(f"unknown layer type {t!r}")


@dataclass
class ConditionerNet:
    layers: list
    input_spec: dict
    n_basis: int
    params: np.ndarray = None
    meta: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.offsets = []
        pos = 0
        for layer in self.layers:
            entry = []
            for shape in _layer_param_shapes(layer):
                entry.append((pos, shape))
                pos += int(np.prod(shape))
            self.offsets.append(entry)
        self.n_params = pos
        if self.params is None:
            self.params = np.zeros(pos)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (pos,):
            raise ShapeMismatchError(f"expected {pos} parameters, got {self.params.shape}")
        self._mats = {}

    @property
    def n_channels(self):
        return int(self.meta.get("n_channels", 0))

    def copy(self):
        return ConditionerNet(
            layers=[dict(l) for l in self.layers],
            input_spec=dict(self.input_spec),
            n_basis=self.n_basis,
            params=self.params.copy(),
            meta=json.loads(json.dumps(self.meta)),
            seed=self.seed,
        )

    def layer_params(self, i):
        return [self.params[o:o + int(np.prod(s))].reshape(s) for o, s in self.offsets[i]]

    def set_layer_params(self, i, arrays):
        for (o, s), a in zip(self.offsets[i], arrays):
            self.params[o:o + int(np.prod(s))] = np.asarray(a, dtype=float).reshape(s).ravel()

    def _spectral(self, n, modes):
        key = (n, modes)
        if key not in self._mats:
            self._mats[key] = spectral_matrices(n, modes)
        return self._mats[key]

    def apply(self, tape: Tape, weights, x):
        """Run the layer stack on ``x`` (B, C, N) inside ``tape``."""
        h = x
        for i, layer in enumerate(self.layers):
            t = layer["type"]
            ps = [tape.slice_flat(weights, o, s) for o, s in self.offsets[i]]
            if t == "pointwise":
                h = tape.add(tape.matmul(ps[0], h), ps[1])
            elif t == "fourier":
                n = h.shape[-1]
                spec = spectral_conv(tape, h, ps[0], ps[1], self._spectral(n, layer["modes"]))
                skip = tape.add(tape.matmul(ps[2], h), ps[3])
                h = tape.add(spec, skip)
            elif t == "gelu":
                h = tape.gelu(h)
            elif t == "flatten":
                h = tape.reshape(h, (h.shape[0], -1))
            elif t == "dense":
                h = tape.add(tape.matmul(h, ps[0]), ps[1])
            elif t == "squeeze":
                h = tape.reshape(h, (h.shape[0], h.shape[-1]))
        return h


def build_fno(n_basis, n_channels, width=64, modes=16, depth=3, fc_dim=64,
              input_spec=None, seed=0, zero_last=False, meta=None) -> ConditionerNet:
    """Lift -> ``depth`` Fourier blocks -> project, GeLU between blocks."""
    modes = min(modes, n_basis // 2 + 1)
    layers = [{"type": "pointwise", "in": n_channels, "out": width}]
    for k in range(depth):
        layers.append({"type": "fourier", "width": width, "modes": modes})
        if k < depth - 1:
            layers.append({"type": "gelu"})
    layers += [
        {"type": "pointwise", "in": width, "out": fc_dim},
        {"type": "gelu"},
        {"type": "pointwise", "in": fc_dim, "out": 1},
        {"type": "squeeze"},
    ]
    return _init_net(layers, n_basis, n_channels, input_spec, seed, zero_last, meta)


def build_mlp(n_basis, n_channels, hidden=256, depth=3, input_spec=None, seed=0,
              zero_last=False, meta=None) -> ConditionerNet:
    dims = [n_channels * n_basis] + [hidden] * (depth - 1) + [n_basis]
    layers = [{"type": "flatten"}]
    for k in range(len(dims) - 1):
        layers.append({"type": "dense", "in": dims[k], "out": dims[k + 1]})
        if k < len(dims) - 2:
            layers.append({"type": "gelu"})
    return _init_net(layers, n_basis, n_channels, input_spec, seed, zero_last, meta)


def build_identity(n_basis) -> ConditionerNet:
    """Single dense layer set to the identity: F(grad) = grad."""
    spec = {k: False for k in DEFAULT_INPUT_SPEC}
    spec["grad"] = True
    net = ConditionerNet(
        layers=[{"type": "flatten"}, {"type": "dense", "in": n_basis, "out": n_basis}],
        input_spec=spec, n_basis=n_basis, meta={"n_channels": 1, "grad_scale": 1.0, "out_scale": 1.0},
    )
    net.set_layer_params(1, [np.eye(n_basis), np.zeros(n_basis)])
    return net


def _init_net(layers, n_basis, n_channels, input_spec, seed, zero_last, meta):
    spec = dict(DEFAULT_INPUT_SPEC if input_spec is None else input_spec)
    m = {"n_channels": n_channels, "grad_scale": 1.0, "out_scale": 1.0}
    m.update(meta or {})
    net = ConditionerNet(layers=layers, input_spec=spec, n_basis=n_basis, meta=m, seed=seed)
    rng = np.random.default_rng(seed)
    last = max(i for i, l in enumerate(layers) if _layer_param_shapes(l))
    for i, layer in enumerate(layers):
        t = layer["type"]
        if t == "pointwise":
            bound = np.sqrt(6.0 / (layer["in"] + layer["out"]))
            arrays = [rng.uniform(-bound, bound, (layer["out"], layer["in"])), np.zeros((layer["out"], 1))]
        elif t == "fourier":
            w, md = layer["width"], layer["modes"]
            scale = 1.0 / (w * w)
            bound = np.sqrt(6.0 / (2 * w))
            arrays = [scale * rng.uniform(0, 1, (md, w, w)), scale * rng.uniform(0, 1, (md, w, w)),
                      rng.uniform(-bound, bound, (w, w)), np.zeros((w, 1))]
        elif t == "dense":
            bound = np.sqrt(6.0 / (layer["in"] + layer["out"]))
            arrays = [rng.uniform(-bound, bound, (layer["in"], layer["out"])), np.zeros(layer["out"])]
        else:
            continue
        if zero_last and i == last:
            arrays = [np.zeros_like(a) for a in arrays]
        net.set_layer_params(i, arrays)
    return net


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} fed to the conditioner")


LOG_NORM_SCALE = 8.0
GRAD_CHANNELS = {"linear": 1, "asinh": 1, "normalize": 2}


def normalized_gradient(tape: Tape, g):
    """Two channels: ``g / rms(g)`` and ``log(rms(g)) / LOG_NORM_SCALE`` broadcast."""
    gv = _val_of(g)
    n = gv.shape[-1]
    rms = np.sqrt(np.mean(gv * gv, axis=-1, keepdims=True) + 1e-300)
    y = gv / rms
    out = np.stack([y, np.broadcast_to(np.log(rms) / LOG_NORM_SCALE, gv.shape)], axis=1)

    def vjp(up):
        g0, g1 = up[:, 0], up[:, 1]
        d_dir = (g0 - y * np.mean(g0 * y, axis=-1, keepdims=True)) / rms
        d_log = np.sum(g1, axis=-1, keepdims=True) / LOG_NORM_SCALE * y / (n * rms)
        return d_dir + d_log

    return tape.custom(out, [g], [vjp])


def _val_of(x):
    return x.value if hasattr(x, "value") else np.asarray(x)


def assemble_input(tape: Tape, net: ConditionerNet, grad, context):
    """Stack the scaled gradient channel with the context channels."""
    parts = []
    if net.input_spec.get("grad", True):
        g = tape.scale(grad, net.meta.get("grad_scale", 1.0))
        mode = net.meta.get("grad_transform", "linear")
        if mode == "normalize":
            parts.append(normalized_gradient(tape, g))
        else:
            if mode == "asinh":
                # compresses the 1e6-1e8 spread between early and late gradients
                g = tape.asinh(g)
            parts.append(tape.reshape(g, (g.shape[0], 1, g.shape[-1])))
    if context is not None and np.shape(context)[1] > 0:
        parts.append(context)
    if not parts:
        raise ShapeMismatchError("conditioner has no input channels")
    return parts[0] if len(parts) == 1 else tape.concat(parts, axis=1)


def apply_conditioner(tape: Tape, net: ConditionerNet, weights, grad, context, inst_scale=None):
    """Conditioner output for (grad, context) in coefficient units; records on ``tape``.

    ``inst_scale`` (B, 1), when given, divides the gradient on the way in and
    multiplies the output, which makes the map 1-homogeneous in that scale.
    """
    if inst_scale is not None:
        grad = tape.mul(grad, 1.0 / inst_scale)
    x = assemble_input(tape, net, grad, context)
    if x.shape[1] != net.n_channels:
        raise ShapeMismatchError(f"net expects {net.n_channels} channels, got {x.shape[1]}")
    out = tape.scale(net.apply(tape, weights, x), net.meta.get("out_scale", 1.0))
    return out if inst_scale is None else tape.mul(out, inst_scale)


def forward(net: ConditionerNet, grad_in, context=None, inst_scale=None):
    """Evaluate the conditioner without keeping the tape; accepts one instance or a batch."""
    grad_in = np.asarray(grad_in, dtype=float)
    single = grad_in.ndim == 1
    g = grad_in[None] if single else grad_in
    _check_finite(g, "gradient")
    ctx = None
    if context is not None:
        ctx = np.asarray(context, dtype=float)
        ctx = ctx[None] if single else ctx
        _check_finite(ctx, "context")
    if g.shape[-1] != net.n_basis:
        raise ShapeMismatchError(f"gradient length {g.shape[-1]} != n_basis {net.n_basis}")
    if inst_scale is not None:
        inst_scale = np.asarray(inst_scale, dtype=float).reshape(-1, 1)
    tape = Tape()
    weights = tape.leaf(net.params, "weights")
    out = apply_conditioner(tape, net, weights, g, ctx, inst_scale).value
    return out[0] if single else out


def backward(tape: Tape, upstream=1.0, output=None):
    """Adjoints of the recorded scalar w.r.t. ``weights`` and ``theta0``."""
    output = output if output is not None else tape.leaves.get("__output__")
    if output is None:
        raise ShapeMismatchError("tape has no recorded output")
    if np.shape(output.value) != np.shape(upstream) and np.ndim(upstream) != 0:
        raise ShapeMismatchError("upstream shape does not match recorded output")
    tape.backward(output, upstream)
    d_weights = tape.grad_of("weights") if "weights" in tape.leaves else None
    d_theta0 = tape.grad_of("theta0") if "theta0" in tape.leaves else None
    return d_weights, d_theta0


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, net: ConditionerNet):
    header = {
        "version": 1,
        "layers": net.layers,
        "input_spec": net.input_spec,
        "n_basis": net.n_basis,
        "n_params": net.n_params,
        "seed": net.seed,
        "meta": net.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob + b"\n")
        fh.write(np.asarray(net.params, dtype="<f8").tobytes())


def load_checkpoint(path) -> ConditionerNet:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a physopt checkpoint (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    raw = rest[nl + 1:]
    if len(raw) != 8 * header["n_params"]:
        raise CheckpointError(f"{path}: expected {header['n_params']} weights, found {len(raw) // 8}")
    params = np.frombuffer(raw, dtype="<f8").astype(float)
    return ConditionerNet(layers=header["layers"], input_spec=header["input_spec"],
                          n_basis=header["n_basis"], params=params, meta=header["meta"],
                          seed=header["seed"])
