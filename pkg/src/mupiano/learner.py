"""Policy-gradient training core.

Feedforward Gaussian policies (state-independent learned log-std), a
multi-head critic for multi-objective training, generalized advantage
estimation, PPO-Clip updates with per-objective advantage
standardization, and a hinge-loss discriminator ensemble with gradient
penalty for adversarial imitation.

All modules run on CPU tensors; randomness goes through torch's global
generator so a seeded single-threaded run is reproducible.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

DESK_HIDDEN = (256, 256, 128)
PAPER_HIDDEN = (1024, 1024, 512)


@dataclass
class Hyperparams:
    policy_lr: float = 5e-6
    critic_lr: float = 1e-4
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    batch_size: int = 256
    epochs: int = 5
    disc_lr: float = 1e-5
    disc_batch: int = 512
    lambda_gp: float = 10.0
    objective_weights: tuple[float, ...] = (1.0,)
    entropy_coef: float = 0.0

    def __post_init__(self):
        if any(w <= 0 for w in self.objective_weights):
            raise ValueError("objective weights must be positive")


def mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    last = in_dim
    for h in hidden:
        layers += [nn.Linear(last, h), nn.ReLU()]
        last = h
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


def init_orthogonal(module: nn.Module, final_gain: float = 0.01) -> None:
    """Orthogonal init with a small final layer, the usual PPO recipe."""
    linears = [m for m in module.modules() if isinstance(m, nn.Linear)]
    for i, lin in enumerate(linears):
        gain = final_gain if i == len(linears) - 1 else math.sqrt(2.0)
        nn.init.orthogonal_(lin.weight, gain=gain)
        nn.init.zeros_(lin.bias)


class TargetEncoder(nn.Module):
    """Embeds a flattened future-target window into a pose embedding."""

    def __init__(self, target_dim: int, embed_dim: int = 32,
                 hidden: tuple[int, ...] = DESK_HIDDEN):
        super().__init__()
        self.net = mlp(target_dim, hidden, embed_dim)
        init_orthogonal(self.net, final_gain=1.0)

    def forward(self, target: torch.Tensor) -> torch.Tensor:
        return self.net(target)


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian policy over raw (unclipped) actions.

    An optional target encoder is applied to a second input and its
    embedding concatenated to the observation, so the encoder trains
    jointly with the policy trunk.
    """

    def __init__(self, obs_dim: int, action_dim: int,
                 hidden: tuple[int, ...] = DESK_HIDDEN,
                 log_std_init: float = -1.0,
                 target_encoder: TargetEncoder | None = None,
                 embed_dim: int = 0,
                 mean_bias: np.ndarray | None = None):
        super().__init__()
        self.target_encoder = target_encoder
        in_dim = obs_dim + (embed_dim if target_encoder is not None else 0)
        self.net = mlp(in_dim, hidden, action_dim)
        self.log_std = nn.Parameter(torch.full((action_dim,), log_std_init))
        init_orthogonal(self.net)
        if mean_bias is not None:
            with torch.no_grad():
                self.net[-1].bias.copy_(torch.as_tensor(mean_bias, dtype=torch.float32))

    def mean(self, obs: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
        if self.target_encoder is not None:
            obs = torch.cat([obs, self.target_encoder(target)], dim=-1)
        return self.net(obs)

    def distribution(self, obs, target=None) -> torch.distributions.Normal:
        return torch.distributions.Normal(self.mean(obs, target),
                                          self.log_std.exp())

    def act(self, obs, target=None, deterministic: bool = False):
        """Sample a raw action and its log-probability (no gradients)."""
        with torch.no_grad():
            dist = self.distribution(obs, target)
            action = dist.mean if deterministic else dist.sample()
            logp = dist.log_prob(action).sum(-1)
        return action, logp


class ValueNet(nn.Module):
    """Critic with one output head per objective."""

    def __init__(self, obs_dim: int, n_objectives: int = 1,
                 hidden: tuple[int, ...] = DESK_HIDDEN):
        super().__init__()
        self.net = mlp(obs_dim, hidden, n_objectives)
        init_orthogonal(self.net, final_gain=1.0)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs)


# ---------------------------------------------------------------------------
# advantage estimation

def gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimation.

    rewards/values: (T, B, K); dones: (T, B); last_values: (B, K).
    Bootstraps from last_values except across done boundaries. Returns
    (advantages, returns) with the input shape. 1-D/2-D inputs are
    treated as B = 1 and/or K = 1.
    """
    r = np.asarray(rewards, dtype=np.float64)
    squeeze = r.ndim
    while r.ndim < 3:
        r = r[..., None] if r.ndim == 2 else r[:, None]
    v = np.asarray(values, dtype=np.float64).reshape(r.shape)
    d = np.asarray(dones, dtype=np.float64).reshape(r.shape[:2])
    lastv = np.asarray(last_values, dtype=np.float64).reshape(r.shape[1:])

    T = r.shape[0]
    adv = np.zeros_like(r)
    carry = np.zeros_like(lastv)
    next_v = lastv
    for t in range(T - 1, -1, -1):
        live = (1.0 - d[t])[:, None]
        delta = r[t] + gamma * next_v * live - v[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_v = v[t]
    ret = adv + v
    if squeeze == 1:
        return adv[:, 0, 0], ret[:, 0, 0]
    if squeeze == 2:
        return adv[..., 0], ret[..., 0]
    return adv, ret


def standardize(x: torch.Tensor, dim=0, eps: float = 1e-8) -> torch.Tensor:
    return (x - x.mean(dim=dim, keepdim=True)) / (x.std(dim=dim, keepdim=True) + eps)


# ---------------------------------------------------------------------------
# rollout storage

@dataclass
class RolloutBuffer:
    """Time-aligned per-environment sequences collected between updates."""

    obs: torch.Tensor                 # (T, B, O) policy observation
    raw_actions: torch.Tensor         # (T, B, A)
    log_probs: torch.Tensor           # (T, B)
    rewards: torch.Tensor             # (T, B, K)
    dones: torch.Tensor               # (T, B)
    values: torch.Tensor              # (T, B, K)
    last_values: torch.Tensor         # (B, K)
    targets: torch.Tensor | None = None     # (T, B, G) second policy input
    critic_obs: torch.Tensor | None = None  # defaults to obs


class UpdateAborted(RuntimeError):
    """A PPO update hit a non-finite loss and was rolled back."""


def make_ppo_optimizer(policy: GaussianPolicy, value: ValueNet,
                       hp: Hyperparams) -> torch.optim.Optimizer:
    """One Adam over both networks, with per-network learning rates."""
    return torch.optim.Adam(
        [{"params": list(policy.parameters()), "lr": hp.policy_lr},
         {"params": list(value.parameters()), "lr": hp.critic_lr}],
        foreach=True)


def ppo_update(buffer: RolloutBuffer, policy: GaussianPolicy, value: ValueNet,
               optimizer: torch.optim.Optimizer, hp: Hyperparams) -> dict:
    """One PPO-Clip update over the buffer.

    Advantages are standardized per objective across the whole batch,
    combined with the objective weights, and fed to the clipped
    surrogate; value heads regress the GAE returns. The policy and
    value losses are disjoint in parameters, so they share one backward
    pass and one optimizer step. On a non-finite loss the previous
    parameters are restored and 'aborted' is set in the diagnostics.
    """
    adv_np, ret_np = gae(buffer.rewards.numpy(), buffer.values.numpy(),
                         buffer.dones.numpy(), buffer.last_values.numpy(),
                         hp.gamma, hp.gae_lambda)
    T, B, K = buffer.rewards.shape
    if len(hp.objective_weights) != K:
        raise ValueError("objective weight count must match reward heads")

    flat = lambda x: torch.as_tensor(x, dtype=torch.float32).reshape(T * B, -1)
    adv = standardize(flat(adv_np))
    w = torch.tensor(hp.objective_weights, dtype=torch.float32)
    adv = (adv * w).sum(-1)
    ret = flat(ret_np)
    obs = buffer.obs.reshape(T * B, -1)
    cobs = (buffer.critic_obs if buffer.critic_obs is not None else buffer.obs)
    cobs = cobs.reshape(T * B, -1)
    tgt = buffer.targets.reshape(T * B, -1) if buffer.targets is not None else None
    actions = buffer.raw_actions.reshape(T * B, -1)
    old_logp = buffer.log_probs.reshape(T * B)

    snapshot = (copy.deepcopy(policy.state_dict()), copy.deepcopy(value.state_dict()),
                copy.deepcopy(optimizer.state_dict()))
    n = T * B
    clip_frac_acc, kl_acc, ent_acc, ploss_acc, vloss_acc, steps = 0.0, 0.0, 0.0, 0.0, 0.0, 0
    for _ in range(hp.epochs):
        perm = torch.randperm(n)
        for i in range(0, n, hp.batch_size):
            idx = perm[i:i + hp.batch_size]
            dist = policy.distribution(obs[idx], None if tgt is None else tgt[idx])
            logp = dist.log_prob(actions[idx]).sum(-1)
            ratio = (logp - old_logp[idx]).exp()
            a = adv[idx]
            surrogate = torch.minimum(
                ratio * a,
                ratio.clamp(1.0 - hp.clip_range, 1.0 + hp.clip_range) * a)
            entropy = dist.entropy().sum(-1).mean()
            policy_loss = -surrogate.mean() - hp.entropy_coef * entropy
            value_loss = ((value(cobs[idx]) - ret[idx]) ** 2).mean()
            if not (torch.isfinite(policy_loss) and torch.isfinite(value_loss)):
                policy.load_state_dict(snapshot[0])
                value.load_state_dict(snapshot[1])
                optimizer.load_state_dict(snapshot[2])
                return {"aborted": 1.0}
            optimizer.zero_grad()
            (policy_loss + value_loss).backward()
            optimizer.step()

            with torch.no_grad():
                clip_frac_acc += ((ratio - 1.0).abs() > hp.clip_range).float().mean().item()
                kl_acc += (old_logp[idx] - logp).mean().item()
                ent_acc += entropy.item()
                ploss_acc += policy_loss.item()
                vloss_acc += value_loss.item()
                steps += 1
    return {
        "aborted": 0.0,
        "policy_loss": ploss_acc / steps,
        "value_loss": vloss_acc / steps,
        "clip_fraction": clip_frac_acc / steps,
        "approx_kl": kl_acc / steps,
        "entropy": ent_acc / steps,
        "mean_reward": float(buffer.rewards.mean().item()),
    }


# ---------------------------------------------------------------------------
# adversarial imitation

class DiscriminatorEnsemble(nn.Module):
    """One network with M output heads scoring transition realism."""

    def __init__(self, feature_dim: int, heads: int = 32,
                 hidden: tuple[int, ...] = (256, 256)):
        super().__init__()
        self.heads = heads
        self.net = mlp(2 * feature_dim, hidden, heads)
        init_orthogonal(self.net, final_gain=1.0)

    def forward(self, q_t: torch.Tensor, q_t1: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([q_t, q_t1], dim=-1))


def disc_update(disc: DiscriminatorEnsemble, opt: torch.optim.Optimizer,
                real: tuple[torch.Tensor, torch.Tensor],
                fake: tuple[torch.Tensor, torch.Tensor],
                lambda_gp: float) -> dict:
    """Hinge-loss update with a per-head gradient penalty.

    The penalty targets unit gradient norm of each head at samples
    interpolated between real and fake transitions.
    """
    d_real = disc(*real)
    d_fake = disc(*fake)
    hinge = (torch.relu(1.0 - d_real).mean() + torch.relu(1.0 + d_fake).mean())

    u = torch.rand(real[0].shape[0], 1)
    interp = tuple((u * r + (1.0 - u) * f).detach().requires_grad_(True)
                   for r, f in zip(real, fake))
    d_interp = disc(*interp)
    # per-head gradients in one batched backward pass
    eye = torch.eye(disc.heads).unsqueeze(1).expand(disc.heads,
                                                    d_interp.shape[0],
                                                    disc.heads)
    grads = torch.autograd.grad(d_interp, interp, grad_outputs=eye,
                                create_graph=True, is_grads_batched=True)
    norm = torch.cat(grads, dim=-1).norm(dim=-1)      # (heads, batch)
    gp = ((norm - 1.0) ** 2).mean()

    loss = hinge + lambda_gp * gp
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "disc_loss": float(loss.item()),
        "hinge": float(hinge.item()),
        "grad_penalty": float(gp.item()),
        "real_score": float(d_real.mean().item()),
        "fake_score": float(d_fake.mean().item()),
    }


def gradient_penalty_value(disc: DiscriminatorEnsemble,
                           samples: tuple[torch.Tensor, torch.Tensor]) -> float:
    """Mean per-head (grad norm - 1)^2 at the given samples (diagnostic)."""
    pts = tuple(s.detach().clone().requires_grad_(True) for s in samples)
    d = disc(*pts)
    acc = []
    for m in range(disc.heads):
        grads = torch.autograd.grad(d[:, m].sum(), pts, create_graph=False,
                                    retain_graph=True)
        norm = torch.cat(grads, dim=-1).norm(dim=-1)
        acc.append(((norm - 1.0) ** 2).mean().item())
    return float(np.mean(acc))


def imitation_reward(disc: DiscriminatorEnsemble, q_t: torch.Tensor,
                     q_t1: torch.Tensor) -> torch.Tensor:
    """Clipped mean head score in [-1, 1], per transition."""
    with torch.no_grad():
        return disc(q_t, q_t1).clamp(-1.0, 1.0).mean(dim=-1)
