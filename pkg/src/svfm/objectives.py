"""Training losses: conditional flow matching, the variational variant with
its KL term, and the straightness penalty on the velocity's time derivative
along interpolants.

The straightness residual is the tangent of one JVP through the joint map
(x_t, t) -> v(x_t, t, z(x0, x1, x_t, t)) seeded with (delta, 1): the latent's
dependence on x_t and t is differentiated through, endpoints and the
reparameterization noise carry zero tangent.  The tangent stays attached to
the tape, so the penalty is differentiable in both networks' parameters.

Reduction convention everywhere: mean over the batch, sum over coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import PosteriorEncoder, PosteriorOutput, VelocityField, reparameterize, time_embed
from .tensor import (
    Graph,
    ShapeError,
    Tensor,
    add,
    affine,
    jvp,
    mul,
    sub,
    sumsq,
    texp,
    tsum,
)


@dataclass(frozen=True)
class LossWeights:
    """alpha scales the straightness penalty, beta the KL term."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class StraightnessTerms:
    """Per-sample decomposition of the velocity's total time derivative."""

    dv_dx_dot_delta: np.ndarray
    dv_dt: np.ndarray
    dv_dz_dot_dzdt: np.ndarray
    residual: np.ndarray
    value: float


@dataclass
class TotalLoss:
    total: Tensor
    fm: float
    kl: float
    straight: float
    posterior: PosteriorOutput | None
    terms: StraightnessTerms | None

    @property
    def graph(self) -> Graph:
        return self.total.graph


def _batch_mean_sqnorm(t: Tensor, n: int) -> Tensor:
    return affine(sumsq(t), 1.0 / n)


def fm_loss(v_pred, delta) -> Tensor:
    """Mean over the batch of the squared L2 distance to the target velocity."""
    v = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    d = delta if isinstance(delta, Tensor) else (v.graph.constant(delta) if v.graph else Tensor(delta))
    if v.data.shape != d.data.shape:
        raise ShapeError(f"fm_loss: shape mismatch {v.data.shape} vs {d.data.shape}")
    n = v.data.shape[0] if v.data.ndim else 1
    return _batch_mean_sqnorm(sub(v, d), n)


def kl_loss(mu, log_sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) averaged over the batch.

    Closed form per coordinate: (mu^2 + sigma^2 - 1 - 2 log sigma) / 2.
    """
    m = mu if isinstance(mu, Tensor) else Tensor(mu)
    ls = log_sigma if isinstance(log_sigma, Tensor) else Tensor(log_sigma)
    if m.data.shape != ls.data.shape:
        raise ShapeError(f"kl_loss: shape mismatch {m.data.shape} vs {ls.data.shape}")
    n = m.data.shape[0] if m.data.ndim else 1
    inner = add(add(mul(m, m), texp(affine(ls, 2.0))), affine(ls, -2.0, -1.0))
    return affine(tsum(inner), 0.5 / n)


def _t_column(batch) -> np.ndarray:
    return np.asarray(batch.t, dtype=np.float64).reshape(-1, 1)


class _JointMap:
    """The composite velocity-with-latent map traced on one graph."""

    def __init__(self, graph: Graph, field: VelocityField, enc: PosteriorEncoder | None, batch, eps):
        self.g = graph
        self.field = field
        self.enc = enc
        if enc is not None:
            self.x0 = graph.constant(batch.x0)
            self.x1 = graph.constant(batch.x1)
            if eps is None:
                raise ValueError("posterior requires an explicit eps draw")
            eps = np.asarray(eps, dtype=np.float64)
            if eps.shape != (batch.x0.shape[0], enc.latent_dim):
                raise ShapeError(
                    f"eps shape {eps.shape} != ({batch.x0.shape[0]}, {enc.latent_dim})"
                )
            self.eps = graph.constant(eps)
        self.mu: Tensor | None = None
        self.log_sigma: Tensor | None = None
        self.z: Tensor | None = None

    def latent(self, xt_T: Tensor, t_T: Tensor) -> Tensor:
        temb = time_embed(t_T, self.enc.time_embed_dim, graph=self.g)
        mu, log_sigma = self.enc.forward_embedded(self.g, self.x0, self.x1, xt_T, temb)
        z = reparameterize(mu, log_sigma, self.eps)
        self.mu, self.log_sigma, self.z = mu, log_sigma, z
        return z

    def __call__(self, xt_T: Tensor, t_T: Tensor) -> Tensor:
        z = self.latent(xt_T, t_T) if self.enc is not None else None
        temb = time_embed(t_T, self.field.time_embed_dim, graph=self.g)
        return self.field.forward_embedded(self.g, xt_T, temb, z)

    def posterior_output(self) -> PosteriorOutput | None:
        if self.enc is None:
            return None
        return PosteriorOutput(
            mu=self.mu.data.copy(),
            log_sigma=self.log_sigma.data.copy(),
            z=self.z.data.copy(),
            eps=self.eps.data.copy(),
        )


def _decompose_terms(
    g: Graph,
    field: VelocityField,
    enc: PosteriorEncoder | None,
    joint: _JointMap,
    batch,
    tcol: np.ndarray,
    joint_residual: np.ndarray,
    value: float,
) -> StraightnessTerms:
    """Value-level split of the residual into its three chain-rule terms.

    Each term comes from a JVP with the tangent isolated on one input of the
    velocity net; their sum reproduces the joint residual up to rounding.
    """
    ones = np.ones_like(tcol)
    xt_c = g.constant(batch.xt)
    t_c = g.constant(tcol)
    temb_v = time_embed(t_c, field.time_embed_dim, graph=g)
    z_c = g.constant(joint.z.data) if enc is not None else None

    _, term_x = jvp(
        lambda xx: field.forward_embedded(g, xx, temb_v, z_c), [xt_c], [batch.delta]
    )
    _, term_t = jvp(
        lambda tt: field.forward_embedded(
            g, xt_c, time_embed(tt, field.time_embed_dim, graph=g), z_c
        ),
        [t_c],
        [ones],
    )
    if enc is not None:
        _, dzdt = jvp(joint.latent, [xt_c, t_c], [batch.delta, ones])
        _, term_z = jvp(
            lambda zz: field.forward_embedded(g, xt_c, temb_v, zz), [z_c], [dzdt.data]
        )
        term_z_data = term_z.data
    else:
        term_z_data = np.zeros_like(term_x.data)
    return StraightnessTerms(
        dv_dx_dot_delta=term_x.data,
        dv_dt=term_t.data,
        dv_dz_dot_dzdt=term_z_data,
        residual=term_x.data + term_t.data + term_z_data,
        value=value,
    )


def total_loss(
    field: VelocityField,
    enc: PosteriorEncoder | None,
    batch,
    eps: np.ndarray | None,
    weights: LossWeights,
    want_terms: bool = False,
) -> TotalLoss:
    """Flow-matching (+ KL) loss plus alpha times the straightness penalty.

    One posterior draw (one eps) is shared by every term.  With alpha == 0
    the JVP pass is skipped entirely and the result equals the variational
    loss alone.
    """
    g = Graph()
    n = batch.x0.shape[0]
    tcol = _t_column(batch)
    joint = _JointMap(g, field, enc, batch, eps)
    xt_p = g.constant(batch.xt)
    t_p = g.constant(tcol)

    terms = None
    if weights.alpha > 0 or want_terms:
        v, residual = jvp(joint, [xt_p, t_p], [batch.delta, np.ones_like(tcol)])
        straight_T = _batch_mean_sqnorm(residual, n)
        straight_val = straight_T.item()
        if want_terms:
            terms = _decompose_terms(
                g, field, enc, joint, batch, tcol, residual.data, straight_val
            )
    else:
        v = joint(xt_p, t_p)
        straight_T = None
        straight_val = 0.0

    fm_T = fm_loss(v, g.constant(batch.delta))
    total = fm_T
    kl_val = 0.0
    if enc is not None:
        kl_T = kl_loss(joint.mu, joint.log_sigma)
        kl_val = kl_T.item()
        if weights.beta != 0.0:
            total = add(total, affine(kl_T, weights.beta))
    if weights.alpha > 0:
        total = add(total, affine(straight_T, weights.alpha))

    return TotalLoss(
        total=total,
        fm=fm_T.item(),
        kl=kl_val,
        straight=straight_val,
        posterior=joint.posterior_output(),
        terms=terms,
    )


def vfm_loss(
    field: VelocityField,
    enc: PosteriorEncoder,
    batch,
    eps: np.ndarray,
    weights: LossWeights,
) -> tuple[Tensor, PosteriorOutput]:
    """Velocity regression against delta plus beta times the KL term."""
    out = total_loss(field, enc, batch, eps, LossWeights(alpha=0.0, beta=weights.beta))
    return out.total, out.posterior


def straightness_loss(
    field: VelocityField,
    enc: PosteriorEncoder | None,
    batch,
    eps: np.ndarray | None,
    want_terms: bool = True,
) -> tuple[Tensor, StraightnessTerms | None]:
    """Mean squared norm of the velocity's time derivative along interpolants."""
    g = Graph()
    n = batch.x0.shape[0]
    tcol = _t_column(batch)
    joint = _JointMap(g, field, enc, batch, eps)
    xt_p = g.constant(batch.xt)
    t_p = g.constant(tcol)
    _, residual = jvp(joint, [xt_p, t_p], [batch.delta, np.ones_like(tcol)])
    loss = _batch_mean_sqnorm(residual, n)
    terms = None
    if want_terms:
        terms = _decompose_terms(g, field, enc, joint, batch, tcol, residual.data, loss.item())
    return loss, terms
