"""MLPs for the velocity field v(x, t, z) and the posterior over the latent
code z that summarizes a source/target pair.

Both nets are deliberately small: plain silu MLPs sized for 2D point data.
The latent code passes through a two-layer projector and is concatenated with
(x, time embedding); final layers are zero-initialized so the velocity starts
at 0 and the posterior starts at the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Graph,
    ParamStore,
    ShapeError,
    Tensor,
    add,
    clip,
    concat,
    matmul,
    mul,
    silu,
    tcos,
    texp,
    tsin,
)

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 2.0


@dataclass(frozen=True)
class LatentSpec:
    """Latent dimensionality; the prior is a fixed standard normal."""

    latent_dim: int

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim))


@dataclass
class PosteriorOutput:
    """One reparameterized posterior draw: z = mu + exp(log_sigma) * eps."""

    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray
    eps: np.ndarray


def _wrap(g: Graph | None, value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return g.constant(value) if g is not None else Tensor(value)


def embedding_frequencies(dim: int) -> np.ndarray:
    """Geometric angular frequencies from 2*pi up to 2*pi*1e4."""
    if dim <= 0 or dim % 2 != 0:
        raise ValueError(f"time embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    if half == 1:
        return np.array([2.0 * np.pi])
    j = np.arange(half)
    return 2.0 * np.pi * 10.0 ** (4.0 * j / (half - 1))


def time_embed(t, dim: int, graph: Graph | None = None):
    """Sinusoidal features [sin(w_j t) | cos(w_j t)] per row of t.

    Accepts a scalar (returns a (dim,) array) or an (n, 1) tensor/array
    (returns an (n, dim) tensor on the same graph, differentiable in t).
    """
    omega = embedding_frequencies(dim)
    if isinstance(t, (int, float)):
        arg = float(t) * omega
        return np.concatenate([np.sin(arg), np.cos(arg)])
    tt = _wrap(graph, t)
    if tt.data.ndim != 2 or tt.data.shape[1] != 1:
        raise ShapeError(f"time_embed: expected (n, 1) times, got {tt.data.shape}")
    g = tt.graph
    om = _wrap(g, omega[None, :])
    arg = matmul(tt, om)
    return concat([tsin(arg), tcos(arg)], axis=1)


def _he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def _mlp_init(
    store: ParamStore,
    prefix: str,
    sizes: list[tuple[int, int]],
    rng: np.random.Generator,
    zero_last: bool,
) -> None:
    for i, (fi, fo) in enumerate(sizes):
        last = i == len(sizes) - 1
        w = np.zeros((fi, fo)) if (zero_last and last) else _he_normal(rng, fi, fo)
        store.add(f"{prefix}.l{i}.w", w)
        store.add(f"{prefix}.l{i}.b", np.zeros(fo))


def _mlp_forward(store: ParamStore, prefix: str, g: Graph | None, h: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        w = store.leaf(g, f"{prefix}.l{i}.w") if g is not None else Tensor(store.value(f"{prefix}.l{i}.w"))
        b = store.leaf(g, f"{prefix}.l{i}.b") if g is not None else Tensor(store.value(f"{prefix}.l{i}.b"))
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = silu(h)
    return h


class VelocityField:
    """Velocity net: MLP over concat(x, time_embed(t), project(z)).

    With latent_dim == 0 the z path disappears and this is a plain
    flow-matching field v(x, t).
    """

    def __init__(
        self,
        input_dim: int,
        latent_dim: int = 8,
        time_embed_dim: int = 16,
        hidden: tuple[int, ...] = (256, 256, 256, 256),
        latent_embed_dim: int = 32,
        seed_rng: np.random.Generator | None = None,
    ):
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        self.time_embed_dim = time_embed_dim
        self.hidden = tuple(hidden)
        self.latent_embed_dim = latent_embed_dim if latent_dim > 0 else 0
        self.params = ParamStore()
        rng = seed_rng if seed_rng is not None else np.random.default_rng(0)
        if latent_dim > 0:
            _mlp_init(
                self.params,
                "v.zproj",
                [(latent_dim, latent_embed_dim), (latent_embed_dim, latent_embed_dim)],
                rng,
                zero_last=False,
            )
        widths = [input_dim + time_embed_dim + self.latent_embed_dim, *self.hidden, input_dim]
        sizes = list(zip(widths[:-1], widths[1:]))
        _mlp_init(self.params, "v.net", sizes, rng, zero_last=True)
        self._n_net_layers = len(sizes)

    def project_latent(self, g: Graph | None, z: Tensor) -> Tensor:
        h = silu(_mlp_forward(self.params, "v.zproj", g, z, 1))
        # second projector layer has no trailing activation
        w = self.params.leaf(g, "v.zproj.l1.w") if g is not None else Tensor(self.params.value("v.zproj.l1.w"))
        b = self.params.leaf(g, "v.zproj.l1.b") if g is not None else Tensor(self.params.value("v.zproj.l1.b"))
        return add(matmul(h, w), b)

    def forward_embedded(self, g: Graph | None, x: Tensor, temb: Tensor, z: Tensor | None) -> Tensor:
        parts = [x, temb]
        if self.latent_dim > 0:
            if z is None:
                raise ShapeError("velocity: latent input required but missing")
            if z.data.shape[1] != self.latent_dim:
                raise ShapeError(
                    f"velocity: latent dim {z.data.shape[1]} != {self.latent_dim}"
                )
            parts.append(self.project_latent(g, z))
        h = concat(parts, axis=1)
        return _mlp_forward(self.params, "v.net", g, h, self._n_net_layers)

    def forward_with_time(self, g: Graph | None, x: Tensor, t: Tensor, z: Tensor | None) -> Tensor:
        temb = time_embed(t, self.time_embed_dim, graph=g)
        return self.forward_embedded(g, x, temb, z)

    def forward(self, g: Graph | None, x, t, z=None) -> Tensor:
        xt = _wrap(g, x)
        if xt.data.ndim != 2 or xt.data.shape[1] != self.input_dim:
            raise ShapeError(f"velocity: expected (n, {self.input_dim}) points, got {xt.data.shape}")
        tt = _wrap(g, t)
        zz = _wrap(g, z) if z is not None else None
        return self.forward_with_time(g, xt, tt, zz)

    def velocity(self, x: np.ndarray, t, z: np.ndarray | None = None) -> np.ndarray:
        """Plain numpy evaluation (no tape); `t` a scalar or (n, 1) array."""
        x = np.asarray(x, dtype=np.float64)
        tcol = np.full((x.shape[0], 1), float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        return self.forward(None, x, tcol, z).data


class PosteriorEncoder:
    """Posterior net over (x0, x1, xt, t) with mu and log-sigma heads.

    log-sigma is clamped to [-7, 2]; both heads are zero-initialized so the
    posterior coincides with the prior before training.
    """

    def __init__(
        self,
        input_dim: int,
        latent_dim: int = 8,
        time_embed_dim: int = 16,
        hidden: tuple[int, ...] = (256, 256, 256),
        seed_rng: np.random.Generator | None = None,
    ):
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        self.time_embed_dim = time_embed_dim
        self.hidden = tuple(hidden)
        self.params = ParamStore()
        rng = seed_rng if seed_rng is not None else np.random.default_rng(0)
        widths = [3 * input_dim + time_embed_dim, *self.hidden]
        sizes = list(zip(widths[:-1], widths[1:]))
        _mlp_init(self.params, "q.trunk", sizes, rng, zero_last=False)
        self._n_trunk_layers = len(sizes)
        self.params.add("q.mu.w", np.zeros((self.hidden[-1], latent_dim)))
        self.params.add("q.mu.b", np.zeros(latent_dim))
        self.params.add("q.ls.w", np.zeros((self.hidden[-1], latent_dim)))
        self.params.add("q.ls.b", np.zeros(latent_dim))

    def forward_embedded(
        self, g: Graph | None, x0: Tensor, x1: Tensor, xt: Tensor, temb: Tensor
    ) -> tuple[Tensor, Tensor]:
        h = concat([x0, x1, xt, temb], axis=1)
        for i in range(self._n_trunk_layers):
            w = self.params.leaf(g, f"q.trunk.l{i}.w") if g is not None else Tensor(self.params.value(f"q.trunk.l{i}.w"))
            b = self.params.leaf(g, f"q.trunk.l{i}.b") if g is not None else Tensor(self.params.value(f"q.trunk.l{i}.b"))
            h = silu(add(matmul(h, w), b))
        def head(name):
            w = self.params.leaf(g, f"q.{name}.w") if g is not None else Tensor(self.params.value(f"q.{name}.w"))
            b = self.params.leaf(g, f"q.{name}.b") if g is not None else Tensor(self.params.value(f"q.{name}.b"))
            return add(matmul(h, w), b)
        mu = head("mu")
        log_sigma = clip(head("ls"), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def forward(self, g: Graph | None, x0, x1, xt, t) -> tuple[Tensor, Tensor]:
        x0t, x1t, xtt = (_wrap(g, v) for v in (x0, x1, xt))
        for name, v in (("x0", x0t), ("x1", x1t), ("xt", xtt)):
            if v.data.ndim != 2 or v.data.shape[1] != self.input_dim:
                raise ShapeError(f"posterior: {name} has shape {v.data.shape}, expected (n, {self.input_dim})")
        temb = time_embed(_wrap(g, t), self.time_embed_dim, graph=g)
        return self.forward_embedded(g, x0t, x1t, xtt, temb)


def velocity_forward(field: VelocityField, x, t, z=None, graph: Graph | None = None) -> Tensor:
    return field.forward(graph, x, t, z)


def posterior_forward(enc: PosteriorEncoder, x0, x1, xt, t, graph: Graph | None = None):
    return enc.forward(graph, x0, x1, xt, t)


def reparameterize(mu, log_sigma, eps):
    """z = mu + exp(log_sigma) * eps, differentiable in mu and log_sigma."""
    mu_t = mu if isinstance(mu, Tensor) else Tensor(mu)
    ls_t = log_sigma if isinstance(log_sigma, Tensor) else Tensor(log_sigma)
    g = mu_t.graph or ls_t.graph
    eps_t = _wrap(g, eps)
    if mu_t.data.shape != ls_t.data.shape or mu_t.data.shape != eps_t.data.shape:
        raise ShapeError(
            f"reparameterize: shapes differ mu={mu_t.data.shape} "
            f"log_sigma={ls_t.data.shape} eps={eps_t.data.shape}"
        )
    return add(mu_t, mul(texp(ls_t), eps_t))
