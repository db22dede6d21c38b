"""Spectral filtering operator: lift P, T spectral-transform layers, project Q.

Each layer convolves the latent field with ``sum_l Theta_l phi_l`` where the
``phi_l`` are fixed basis filters read at periodic offsets.  The convolution is
evaluated in the frequency domain with the quadrature weight ``dx^M``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import fft as _fft
from .basis import BasisKind, IndexScheme, ModeSet, build_basis, extend_modes

__all__ = [
    "SFOConfig",
    "SFOModel",
    "count_params",
    "stu_apply",
    "stu_apply_modewise",
    "materialize_kernel",
    "rebuild_for_resolution",
    "coefficient_norms",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SFO1"
MAX_MATERIALIZE_N = 128


@dataclass(frozen=True)
class SFOConfig:
    L: int = 16
    d: int = 32
    T: int = 4
    variant: str = "mlp"          # mlp | glu
    scheme: str = "tied"          # tied | multi
    basis: str = "usb"
    grid: tuple = (64,)           # spatial sizes, all equal
    in_channels: int = 2
    out_channels: int = 16
    seed: int = 0
    basis_seed: int = 0           # only read by the random orthogonal basis

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "variant", str(self.variant).lower())
        object.__setattr__(self, "scheme", IndexScheme(str(self.scheme).lower()).value)
        object.__setattr__(self, "basis", BasisKind.parse(self.basis).value)
        if self.variant not in ("mlp", "glu"):
            raise ValueError(f"variant must be mlp or glu, got {self.variant!r}")
        if not 1 <= len(self.grid) <= 3:
            raise ValueError("between 1 and 3 spatial axes are supported")
        if len(set(self.grid)) != 1:
            raise ValueError(f"all spatial sizes must be equal, got {self.grid}")
        if not _fft.is_power_of_two(self.grid[0]):
            raise ValueError(f"grid size must be a power of two, got {self.grid[0]}")
        if self.T < 1 or self.d < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("T, d and channel counts must be >= 1")
        if not 1 <= self.L <= self.n:
            raise ValueError(f"need 1 <= L <= {self.n}, got L={self.L}")

    @property
    def M(self) -> int:
        return len(self.grid)

    @property
    def n(self) -> int:
        return self.grid[0]

    @property
    def K(self) -> int:
        return self.L if self.scheme == "tied" or self.M == 1 else self.L ** self.M

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SFOConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def count_params(cfg: SFOConfig) -> int:
    d = cfg.d
    lift = cfg.in_channels * d + d
    layer = cfg.K * d * d + 2 * d * d + 2 * d
    proj = d * cfg.out_channels + cfg.out_channels
    return lift + cfg.T * layer + proj


def _layer_names(t: int, variant: str) -> list[str]:
    p = f"layers.{t}."
    if variant == "mlp":
        return [p + "theta", p + "norm.gain", p + "norm.bias", p + "w1", p + "w2"]
    return [p + "theta", p + "wg", p + "wv", p + "bg", p + "bv"]


def _init_params(cfg: SFOConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    d, K = cfg.d, cfg.K
    params = {
        "P.weight": rng.standard_normal((d, cfg.in_channels)) / np.sqrt(cfg.in_channels),
        "P.bias": np.zeros(d),
    }
    for t in range(cfg.T):
        names = _layer_names(t, cfg.variant)
        params[names[0]] = rng.standard_normal((K, d, d)) / np.sqrt(K * d)
        if cfg.variant == "mlp":
            params[names[1]] = np.ones(d)
            params[names[2]] = np.zeros(d)
            params[names[3]] = rng.standard_normal((d, d)) / np.sqrt(d)
            params[names[4]] = rng.standard_normal((d, d)) / np.sqrt(d)
        else:
            params[names[1]] = rng.standard_normal((d, d)) / np.sqrt(d)
            params[names[2]] = rng.standard_normal((d, d)) / np.sqrt(d)
            params[names[3]] = np.zeros(d)
            params[names[4]] = np.zeros(d)
    params["Q.weight"] = rng.standard_normal((cfg.out_channels, d)) / np.sqrt(d)
    params["Q.bias"] = np.zeros(cfg.out_channels)
    return params


def _modes_for(cfg: SFOConfig) -> ModeSet:
    basis = build_basis(cfg.basis, cfg.n, cfg.L,
                        seed=cfg.basis_seed if cfg.basis == "random" else None)
    return extend_modes(basis, cfg.M, cfg.scheme)


class SFOModel:
    """Parameters live in ``self.params`` (name -> leaf Tensor) in declaration order."""

    def __init__(self, cfg: SFOConfig, params: dict | None = None):
        self.config = cfg
        self.modes = _modes_for(cfg)
        init = _init_params(cfg) if params is None else params
        expected = _init_params_shapes(cfg)
        if list(init) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        self.params = {}
        for name, value in init.items():
            value = np.array(value, dtype=np.float64)
            if value.shape != expected[name]:
                raise ValueError(f"{name}: expected shape {expected[name]}, got {value.shape}")
            self.params[name] = ad.parameter(value, name=name)

    @property
    def weight(self) -> float:
        """Quadrature weight ``dx^M``."""
        return float(self.config.n) ** (-self.config.M)

    def param_arrays(self) -> dict:
        return {k: v.value for k, v in self.params.items()}

    def num_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def layer_params(self, t: int) -> dict:
        names = _layer_names(t, self.config.variant)
        return {n.split(".", 2)[2]: self.params[n] for n in names}

    def lift(self, a):
        a = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
        self._check_input(a.value)
        return ad.channel_mix(self.params["P.weight"], a, self.params["P.bias"])

    def layer_forward(self, v, t: int):
        p = self.layer_params(t)
        w = self.weight
        spec = self.modes.spectra
        if self.config.variant == "mlp":
            h = ad.layer_norm(v, p["norm.gain"], p["norm.bias"])
            kv = ad.spectral_conv(h, p["theta"], spec, w)
            z = ad.gelu(ad.channel_mix(p["w1"], kv))
            return ad.add(v, ad.channel_mix(p["w2"], z))
        kv = ad.spectral_conv(v, p["theta"], spec, w)
        gate = ad.sigmoid(ad.channel_mix(p["wg"], kv, p["bg"]))
        val = ad.channel_mix(p["wv"], kv, p["bv"])
        return ad.add(v, ad.mul(gate, val))

    def project(self, v):
        return ad.channel_mix(self.params["Q.weight"], v, self.params["Q.bias"])

    def forward(self, a):
        v = self.lift(a)
        for t in range(self.config.T):
            v = self.layer_forward(v, t)
        return self.project(v)

    __call__ = forward

    def predict(self, a, batch: int = 64) -> np.ndarray:
        """Forward pass on plain arrays without recording, in fixed-size chunks."""
        a = np.asarray(a, dtype=np.float64)
        outs = [self.forward(ad.Tensor(a[i:i + batch])).value for i in range(0, len(a), batch)]
        return np.concatenate(outs, axis=0)

    def zero_mixers(self) -> None:
        """Zero the post-operator weights so every layer is the identity."""
        key = "w2" if self.config.variant == "mlp" else "wv"
        bias = None if self.config.variant == "mlp" else "bv"
        for t in range(self.config.T):
            p = self.layer_params(t)
            p[key].value = np.zeros_like(p[key].value)
            if bias:
                p[bias].value = np.zeros_like(p[bias].value)

    def _check_input(self, a: np.ndarray) -> None:
        cfg = self.config
        if a.ndim != cfg.M + 2:
            raise ValueError(f"expected input of shape (B, {cfg.in_channels}, *{cfg.grid}), got {a.shape}")
        if a.shape[1] != cfg.in_channels:
            raise ValueError(f"lift: expected {cfg.in_channels} input channels, got {a.shape[1]}")
        if a.shape[2:] != cfg.grid:
            raise ValueError(f"input grid {a.shape[2:]} does not match model grid {cfg.grid}")


def _init_params_shapes(cfg: SFOConfig) -> dict:
    d, K = cfg.d, cfg.K
    shapes = {"P.weight": (d, cfg.in_channels), "P.bias": (d,)}
    for t in range(cfg.T):
        names = _layer_names(t, cfg.variant)
        shapes[names[0]] = (K, d, d)
        if cfg.variant == "mlp":
            shapes.update({names[1]: (d,), names[2]: (d,), names[3]: (d, d), names[4]: (d, d)})
        else:
            shapes.update({names[1]: (d, d), names[2]: (d, d), names[3]: (d,), names[4]: (d,)})
    shapes["Q.weight"] = (cfg.out_channels, d)
    shapes["Q.bias"] = (cfg.out_channels,)
    return shapes


def _spectra_of(modes) -> np.ndarray:
    return modes.spectra if isinstance(modes, ModeSet) else np.asarray(modes)


def stu_apply(v, theta, modes, weight: float | None = None) -> np.ndarray:
    """``K_theta v`` on plain arrays; ``v`` is (B, d, *grid) or (d, *grid)."""
    v = np.asarray(v, dtype=np.float64)
    spectra = _spectra_of(modes)
    single = v.ndim == spectra.ndim
    if single:
        v = v[None]
    if v.shape[2:] != spectra.shape[1:]:
        raise ValueError(f"stu_apply: field grid {v.shape[2:]} does not match modes {spectra.shape[1:]}")
    if weight is None:
        weight = float(v.shape[-1]) ** (-(spectra.ndim - 1))
    out = ad.spectral_conv(ad.Tensor(v), ad.Tensor(theta), spectra, weight).value
    return out[0] if single else out


def stu_apply_modewise(v, theta, modes, weight: float | None = None) -> np.ndarray:
    """Reference path: one inverse transform per mode, then channel mixing."""
    v = np.asarray(v, dtype=np.float64)
    spectra = _spectra_of(modes)
    M = spectra.ndim - 1
    axes = tuple(range(v.ndim - M, v.ndim))
    if weight is None:
        weight = float(v.shape[-1]) ** (-M)
    vhat = _fft.fft_nd(v, axes)
    out = np.zeros(v.shape[:-M - 1] + (theta.shape[1],) + v.shape[-M:])
    for l in range(theta.shape[0]):
        filtered = np.real(_fft.ifft_nd(vhat * spectra[l], axes))
        out += np.einsum("oc,...c" + "xyz"[:M] + "->...o" + "xyz"[:M], theta[l], filtered)
    return weight * out


def materialize_kernel(theta, basis, weight: float | None = None) -> np.ndarray:
    """Dense ``(d*n) x (d*n)`` matrix of one 1-D layer operator.

    Rows and columns are indexed channel-major: ``c * n + i``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = basis.n
    if n > MAX_MATERIALIZE_N:
        raise ValueError(f"materialize_kernel is limited to n <= {MAX_MATERIALIZE_N}")
    K, dout, din = theta.shape
    if K > basis.L:
        raise ValueError("more mixing matrices than basis modes")
    if weight is None:
        weight = 1.0 / n
    i = np.arange(n)
    offs = (i[:, None] - i[None, :]) % n
    g = basis.filters[offs][:, :, :K]                    # (n, n, K)
    dense = np.einsum("ijl,lab->aibj", g, theta) * weight
    return dense.reshape(dout * n, din * n)


def rebuild_for_resolution(model: SFOModel, n_new: int) -> SFOModel:
    """Same learned parameters on a new grid, capping the mode count at ``n_new``."""
    cfg = model.config
    n_new = int(n_new)
    if not _fft.is_power_of_two(n_new):
        raise ValueError(f"grid size must be a power of two, got {n_new}")
    L_new = min(cfg.L, n_new)
    new_cfg = replace(cfg, grid=(n_new,) * cfg.M, L=L_new)
    if L_new == cfg.L:
        keep = slice(None)
    else:
        keep = [k for k, idx in enumerate(model.modes.indices) if max(idx) < L_new]
    params = {}
    for name, p in model.params.items():
        val = p.value
        if name.endswith(".theta"):
            val = val[keep]
        params[name] = val.copy()
    return SFOModel(new_cfg, params)


def coefficient_norms(model: SFOModel) -> np.ndarray:
    """Frobenius norm of each mode's mixing matrix, averaged over layers."""
    T = model.config.T
    total = 0.0
    for t in range(T):
        theta = model.params[f"layers.{t}.theta"].value
        total = total + np.sqrt((theta * theta).sum(axis=(1, 2)))
    return np.asarray(total / T)


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(model: SFOModel) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for p in model.params.values():
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model: SFOModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ValueError(f"{self.what}: truncated at byte offset {self.pos} "
                             f"(need {count} bytes, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + count]
        self.pos += count
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> SFOModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), "checkpoint")
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint: bad magic {magic!r} at byte offset 0")
    cfg = SFOConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    count = r.u32()
    names = list(_init_params_shapes(cfg))
    if count != len(names):
        raise ValueError(f"checkpoint: expected {len(names)} tensors, found {count}")
    params = {}
    for name in names:
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise ValueError(f"checkpoint: {len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    return SFOModel(cfg, params)
