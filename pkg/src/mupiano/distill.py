"""Latent distillation of a tracking policy into a beta-VAE.

The encoder compresses (proprioception, pose embedding) into a Gaussian
posterior over a slow latent code, refreshed once per 60 Hz frame; the
decoder maps (instantaneous proprioception, latent) to the
high-frequency action the tracking teacher would have produced. The
rollout is hybrid on-policy: the simulation advances with the teacher's
action with a fixed probability and the decoder's action otherwise, so
the decoder learns to recover from its own execution errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .learner import DESK_HIDDEN, GaussianPolicy, init_orthogonal, mlp

LATENT_DIM_DEFAULT = 32
LATENT_INTERVAL = 8          # simulation ticks per latent refresh
BETA_DEFAULT = 0.005
TEACHER_PROB_DEFAULT = 0.2
LOG_SIGMA_RANGE = (-6.0, 2.0)


def kl_gaussian(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis."""
    mu = torch.as_tensor(mu, dtype=torch.float64) if not torch.is_tensor(mu) else mu
    sigma = torch.as_tensor(sigma, dtype=mu.dtype) if not torch.is_tensor(sigma) else sigma
    return 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma)).sum(-1)


class LatentVAE(nn.Module):
    """Encoder/decoder pair with per-entry action clip bounds."""

    def __init__(self, proprio_dim: int, embed_dim: int, action_dim: int,
                 latent_dim: int = LATENT_DIM_DEFAULT,
                 hidden: tuple[int, ...] = DESK_HIDDEN,
                 action_lo=None, action_hi=None):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = mlp(proprio_dim + embed_dim, hidden, 2 * latent_dim)
        self.decoder = mlp(proprio_dim + latent_dim, hidden, action_dim)
        init_orthogonal(self.encoder, final_gain=0.01)
        init_orthogonal(self.decoder, final_gain=0.01)
        lo = np.zeros(action_dim) if action_lo is None else np.asarray(action_lo)
        hi = np.ones(action_dim) if action_hi is None else np.asarray(action_hi)
        self.register_buffer("action_lo", torch.as_tensor(lo, dtype=torch.float32))
        self.register_buffer("action_hi", torch.as_tensor(hi, dtype=torch.float32))

    def posterior(self, proprio: torch.Tensor, embed: torch.Tensor):
        out = self.encoder(torch.cat([proprio, embed], dim=-1))
        mu, log_sigma = out.chunk(2, dim=-1)
        return mu, log_sigma.clamp(*LOG_SIGMA_RANGE).exp()

    def sample_latent(self, proprio, embed, eps: torch.Tensor | None = None):
        mu, sigma = self.posterior(proprio, embed)
        if eps is None:
            eps = torch.randn_like(mu)
        return mu + sigma * eps, mu, sigma

    def decode_raw(self, proprio: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(torch.cat([proprio, z], dim=-1))

    def clip_action(self, action: torch.Tensor) -> torch.Tensor:
        return torch.clamp(action, self.action_lo, self.action_hi)


def decode(vae: LatentVAE, proprio, z) -> np.ndarray:
    """Deterministic actuation-ready action: decoder output, clipped."""
    with torch.no_grad():
        s = torch.as_tensor(np.atleast_2d(proprio), dtype=torch.float32)
        zt = torch.as_tensor(np.atleast_2d(z), dtype=torch.float32)
        return vae.clip_action(vae.decode_raw(s, zt)).numpy()


def vae_loss(decoder_actions: torch.Tensor, teacher_actions: torch.Tensor,
             mu: torch.Tensor, sigma: torch.Tensor,
             beta: float = BETA_DEFAULT):
    """Reconstruction plus beta-weighted KL.

    decoder/teacher actions have shape (..., n_substeps, A); the squared
    error is averaged over action entries and summed over sub-steps.
    Returns (total, reconstruction, kl), each averaged over the batch.
    """
    err = ((decoder_actions - teacher_actions) ** 2).mean(dim=-1).sum(dim=-1)
    recon = err.mean()
    kl = kl_gaussian(mu, sigma).mean()
    return recon + beta * kl, recon, kl


@dataclass
class DistillBatch:
    """Per-interval training data from a hybrid rollout."""

    proprio0: np.ndarray        # (N, P) state at the latent refresh tick
    targets: np.ndarray         # (N, G) flattened target window
    eps: np.ndarray             # (N, Z) latent noise used during the rollout
    sub_proprio: np.ndarray     # (N, n, P)
    sub_teacher: np.ndarray     # (N, n, A) clipped teacher actions
    dropped: int = 0            # intervals discarded (reset or divergence)
    teacher_steps: int = 0
    decoder_steps: int = 0
    refresh_ticks: list[int] = field(default_factory=list)


def hybrid_rollout(env, teacher: GaussianPolicy, vae: LatentVAE,
                   n_intervals: int, rng: np.random.Generator,
                   teacher_prob: float = TEACHER_PROB_DEFAULT,
                   error_cap: float | None = None,
                   sample_teacher: bool = True) -> DistillBatch:
    """Unroll the simulation, mixing teacher and decoder actions.

    One latent is sampled per interval of LATENT_INTERVAL ticks from the
    encoder posterior at the interval's first state. Each sub-step
    records the state and the teacher's clipped action; the plant then
    advances with the teacher action with probability teacher_prob and
    the decoder action otherwise (drawn independently per environment
    and sub-step). Intervals interrupted by a reset or divergence are
    dropped (counted in the returned batch).

    The env must expose batch, proprio(), target_window(), set_error_cap()
    and step_tick(actions) -> (done, diverged) boolean masks.
    """
    if error_cap is not None:
        env.set_error_cap(error_cap)
    B = env.batch
    p0, tg, ep, subs, subt = [], [], [], [], []
    dropped = teacher_steps = decoder_steps = 0
    refresh_ticks = []

    with torch.no_grad():
        for _ in range(n_intervals):
            s0 = env.proprio()
            tgt = env.target_window()
            refresh_ticks.append(int(env.tick()))
            s0_t = torch.as_tensor(s0, dtype=torch.float32)
            tgt_t = torch.as_tensor(tgt, dtype=torch.float32)
            h = teacher.target_encoder(tgt_t)
            eps = rng.standard_normal((B, vae.latent_dim))
            z, _, _ = vae.sample_latent(s0_t, h, torch.as_tensor(
                eps, dtype=torch.float32))

            interval_s = np.zeros((LATENT_INTERVAL, B, s0.shape[1]))
            interval_a = np.zeros((LATENT_INTERVAL, B, vae.action_lo.shape[0]))
            interrupted = np.zeros(B, dtype=bool)
            for delta in range(LATENT_INTERVAL):
                s = env.proprio()
                s_t = torch.as_tensor(s, dtype=torch.float32)
                dist = teacher.distribution(s_t, tgt_t)
                a = dist.sample() if sample_teacher else dist.mean
                a_bar = vae.clip_action(a).numpy()
                a_hat = vae.clip_action(vae.decode_raw(s_t, z)).numpy()
                interval_s[delta] = s
                interval_a[delta] = a_bar

                use_teacher = rng.random(B) < teacher_prob
                teacher_steps += int(use_teacher.sum())
                decoder_steps += int(B - use_teacher.sum())
                actions = np.where(use_teacher[:, None], a_bar, a_hat)
                done, diverged = env.step_tick(actions)
                interrupted |= done | diverged

            keep = ~interrupted
            dropped += int(interrupted.sum())
            if keep.any():
                p0.append(s0[keep])
                tg.append(tgt[keep])
                ep.append(eps[keep])
                subs.append(interval_s[:, keep].transpose(1, 0, 2))
                subt.append(interval_a[:, keep].transpose(1, 0, 2))

    cat = lambda xs, width: (np.concatenate(xs, axis=0) if xs
                             else np.zeros((0,) + width))
    P = env.proprio().shape[1]
    A = int(vae.action_lo.shape[0])
    G = env.target_window().shape[1]
    return DistillBatch(
        proprio0=cat(p0, (P,)), targets=cat(tg, (G,)), eps=cat(ep, (vae.latent_dim,)),
        sub_proprio=cat(subs, (LATENT_INTERVAL, P)),
        sub_teacher=cat(subt, (LATENT_INTERVAL, A)),
        dropped=dropped, teacher_steps=teacher_steps, decoder_steps=decoder_steps,
        refresh_ticks=refresh_ticks)


def distill_update(vae: LatentVAE, teacher: GaussianPolicy,
                   opt: torch.optim.Optimizer, batch: DistillBatch,
                   beta: float = BETA_DEFAULT) -> dict:
    """One gradient step of the distillation loss on a rollout batch."""
    if batch.proprio0.shape[0] == 0:
        return {"total": float("nan"), "recon": float("nan"), "kl": float("nan")}
    s0 = torch.as_tensor(batch.proprio0, dtype=torch.float32)
    tgt = torch.as_tensor(batch.targets, dtype=torch.float32)
    eps = torch.as_tensor(batch.eps, dtype=torch.float32)
    sub_s = torch.as_tensor(batch.sub_proprio, dtype=torch.float32)
    sub_a = torch.as_tensor(batch.sub_teacher, dtype=torch.float32)

    with torch.no_grad():
        h = teacher.target_encoder(tgt)
    z, mu, sigma = vae.sample_latent(s0, h, eps)
    n = sub_s.shape[1]
    z_rep = z[:, None, :].expand(-1, n, -1)
    dec = vae.decode_raw(sub_s, z_rep)
    total, recon, kl = vae_loss(dec, sub_a, mu, sigma, beta)
    opt.zero_grad()
    total.backward()
    opt.step()
    return {"total": float(total.item()), "recon": float(recon.item()),
            "kl": float(kl.item()), "dropped": batch.dropped}


def reconstruction_mse(vae: LatentVAE, teacher: GaussianPolicy,
                       batch: DistillBatch) -> float:
    """Held-out metric: decoder vs the teacher's deterministic clipped action."""
    if batch.proprio0.shape[0] == 0:
        return float("nan")
    with torch.no_grad():
        s0 = torch.as_tensor(batch.proprio0, dtype=torch.float32)
        tgt = torch.as_tensor(batch.targets, dtype=torch.float32)
        h = teacher.target_encoder(tgt)
        mu, _ = vae.posterior(s0, h)
        sub_s = torch.as_tensor(batch.sub_proprio, dtype=torch.float32)
        n = sub_s.shape[1]
        z_rep = mu[:, None, :].expand(-1, n, -1)
        dec = vae.clip_action(vae.decode_raw(sub_s, z_rep))
        flat = sub_s.reshape(-1, sub_s.shape[-1])
        teach_mean = teacher.mean(flat, tgt.repeat_interleave(n, dim=0))
        teach = vae.clip_action(teach_mean).reshape(dec.shape)
        return float(((dec - teach) ** 2).mean().item())
