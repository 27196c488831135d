"""Training stages, evaluation and deterministic playback.

Each stage is a plain function from a RunConfig (plus prerequisite
checkpoints) to a checkpoint path, writing its metric CSVs and a run
manifest into the output directory. All randomness is derived from the
run seed; with a single torch thread, repeated runs are byte-identical.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch

from .. import distill as distill_mod
from .. import sampler as sampler_mod
from .. import score as score_mod
from ..learner import (DiscriminatorEnsemble, GaussianPolicy, Hyperparams,
                       RolloutBuffer, TargetEncoder, ValueNet, disc_update,
                       imitation_reward, make_ppo_optimizer, ppo_update)
from ..plant import Plant, TICKS_PER_FRAME
from ..rewards import micro_f1, tracking_reward
from . import checkpoint as ckpt_mod
from .config import RunConfig, seed_streams
from .high_env import HandRig, PianoEnvBatch, reference_disc_features
from .reference import generate_references
from .track_env import TrackingEnvBatch, TrackSamplerParams


class StageError(RuntimeError):
    """Missing prerequisite or invalid stage input."""


class CsvLogger:
    """Append-only CSV with repr-formatted floats (byte-stable output)."""

    def __init__(self, path, fields: list[str]):
        self.path = Path(path)
        self.fields = fields
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            f.write(",".join(fields) + "\n")

    def row(self, **values) -> None:
        cells = []
        for name in self.fields:
            v = values[name]
            cells.append(repr(float(v)) if isinstance(v, (float, np.floating))
                         else str(v))
        with open(self.path, "a") as f:
            f.write(",".join(cells) + "\n")


def _manifest(run: RunConfig, stage: str, extra: dict | None = None) -> None:
    run.out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": stage,
        "seed": run.seed,
        "config_fingerprint": run.fingerprint(),
        "versions": {"numpy": np.__version__, "torch": torch.__version__},
    }
    payload.update(extra or {})
    with open(run.out_dir / f"manifest_{stage}.json", "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def _torch_seed(seed: int, tag: str) -> None:
    mix = np.random.SeedSequence([seed, zlib.crc32(tag.encode())])
    torch.manual_seed(int(mix.generate_state(1)[0]))


def _build_track_nets(plant: Plant, ts, n_objectives: int = 1):
    target_dim = ts.horizon * plant.n_dofs
    encoder = TargetEncoder(target_dim, embed_dim=ts.embed_dim, hidden=ts.hidden)
    policy = GaussianPolicy(plant.proprio_dim, plant.action_dim,
                            hidden=ts.hidden, log_std_init=ts.log_std_init,
                            target_encoder=encoder, embed_dim=ts.embed_dim)
    value = ValueNet(plant.proprio_dim + target_dim, n_objectives, hidden=ts.hidden)
    return policy, value


def _track_references(run: RunConfig, plant: Plant):
    ts = run.track()
    keyboard = run.keyboard_config() if run.raw.get("keyboard") else None
    return generate_references(plant, keyboard, ts.reference_kinds,
                               ts.reference_count, ts.reference_seconds,
                               ts.reference_seed)


def _state_arrays(policy, value, opt, env, rngs) -> tuple[dict, dict]:
    arrays = {}
    arrays.update(ckpt_mod.module_arrays("policy", policy))
    arrays.update(ckpt_mod.module_arrays("value", value))
    a, m = ckpt_mod.optimizer_arrays("opt", opt)
    arrays.update(a)
    meta = {"optimizers": {"opt": m}}
    if env is not None:
        arrays["sampler.r_bar"] = env.sampler.r_bar.copy()
        arrays["sampler.chunks"] = np.array(
            [[c.traj_id, c.start, c.end, c.sample_start, c.sample_end]
             for c in env.sampler.chunks], dtype=np.int64)
    rng_arrays, rng_meta = ckpt_mod.rng_arrays("rng", rngs)
    arrays.update(rng_arrays)
    meta["rng"] = rng_meta
    return arrays, meta


# ---------------------------------------------------------------------------
# stage 1: muscle-driven tracking

def stage_track(run: RunConfig) -> Path:
    ts = run.track()
    _torch_seed(run.seed, "track")
    rngs = seed_streams(run.seed, "env", "eval")

    plant = Plant(run.plant_config())
    references = _track_references(run, plant)
    if not references or all(len(r) == 0 for r in references):
        raise StageError("empty reference set")
    env = TrackingEnvBatch(
        plant, references, ts.envs, rngs["env"], horizon=ts.horizon,
        error_cap=ts.error_cap,
        sampler_params=TrackSamplerParams(ts.chunk_frames, ts.zeta, ts.eta,
                                          ts.alpha, ts.target_epochs,
                                          ts.rollout_ticks))
    policy, value = _build_track_nets(plant, ts)
    hp = Hyperparams(policy_lr=ts.policy_lr, critic_lr=ts.critic_lr,
                     gamma=ts.gamma, gae_lambda=ts.gae_lambda,
                     clip_range=ts.clip_range, batch_size=ts.batch_size,
                     epochs=ts.epochs, entropy_coef=ts.entropy_coef)
    opt = make_ppo_optimizer(policy, value, hp)

    log = CsvLogger(run.out_dir / "track_metrics.csv",
                    ["iteration", "ticks", "mean_reward", "mean_e_pos",
                     "policy_loss", "value_loss", "clip_fraction", "entropy",
                     "episodes", "aborted"])
    iterations = max(1, ts.total_ticks // (ts.envs * ts.rollout_ticks))
    best = {"reward": -np.inf, "policy": None, "value": None}

    base_lrs = [g["lr"] for g in opt.param_groups]
    for it in range(iterations):
        if ts.lr_decay != 1.0 and iterations > 1:
            scale = 1.0 + (ts.lr_decay - 1.0) * it / (iterations - 1)
            for g, lr in zip(opt.param_groups, base_lrs):
                g["lr"] = lr * scale
        buf, mean_e = _collect_tracking(env, policy, value, ts.rollout_ticks)
        out = ppo_update(buf, policy, value, opt, hp)
        mean_r = float(buf.rewards.mean().item())
        if out["aborted"]:
            if best["policy"] is not None:
                policy.load_state_dict(best["policy"])
                value.load_state_dict(best["value"])
        elif mean_r > best["reward"]:
            best = {"reward": mean_r,
                    "policy": {k: v.clone() for k, v in policy.state_dict().items()},
                    "value": {k: v.clone() for k, v in value.state_dict().items()}}
        if it % ts.log_every == 0 or it == iterations - 1:
            log.row(iteration=it, ticks=env.global_tick, mean_reward=mean_r,
                    mean_e_pos=mean_e, policy_loss=out.get("policy_loss", 0.0),
                    value_loss=out.get("value_loss", 0.0),
                    clip_fraction=out.get("clip_fraction", 0.0),
                    entropy=out.get("entropy", 0.0),
                    episodes=env.episodes_finished, aborted=out["aborted"])

    errors = evaluate_tracking(plant, references, policy, ts)
    sampler_mod.dump_csv(env.sampler, run.out_dir / "track_sampler.csv")
    eval_log = CsvLogger(run.out_dir / "track_eval.csv",
                         ["trajectory", "mean_tip_error", "amplitude"])
    for ti, (err, amp) in enumerate(errors):
        eval_log.row(trajectory=ti, mean_tip_error=err, amplitude=amp)

    arrays, meta = _state_arrays(policy, value, opt, env, rngs)
    meta.update({"proprio_dim": plant.proprio_dim,
                 "action_dim": plant.action_dim,
                 "target_dim": ts.horizon * plant.n_dofs,
                 "ticks": env.global_tick})
    path = run.out_dir / "track.ckpt"
    ckpt_mod.save(path, ckpt_mod.Checkpoint(
        stage="track", arrays=arrays, meta=meta,
        config_fingerprint=run.fingerprint()))
    _manifest(run, "track", {"final_eval": [
        {"trajectory": i, "mean_tip_error": e, "amplitude": a}
        for i, (e, a) in enumerate(errors)]})
    return path


def _collect_tracking(env: TrackingEnvBatch, policy, value, T: int):
    B = env.batch
    P, G = env.plant.proprio_dim, env.horizon * env.plant.n_dofs
    A = env.plant.action_dim
    obs = torch.zeros(T, B, P)
    tgt = torch.zeros(T, B, G)
    acts = torch.zeros(T, B, A)
    logps = torch.zeros(T, B)
    rews = torch.zeros(T, B, 1)
    dones = torch.zeros(T, B)
    vals = torch.zeros(T, B, 1)
    e_acc = 0.0

    window = env.target_window()
    for t in range(T):
        if env.tick_in_frame == 0:
            window = env.target_window()
        s = torch.as_tensor(env.proprio(), dtype=torch.float32)
        w = torch.as_tensor(window, dtype=torch.float32)
        a, logp = policy.act(s, w)
        with torch.no_grad():
            v = value(torch.cat([s, w], dim=-1))
        res = env.step(a.numpy().astype(float))
        obs[t], tgt[t], acts[t], logps[t] = s, w, a, logp
        rews[t, :, 0] = torch.as_tensor(res.reward, dtype=torch.float32)
        dones[t] = torch.as_tensor(res.done | res.diverged, dtype=torch.float32)
        vals[t] = v
        e_acc += float(res.e_pos.mean())

    if env.tick_in_frame == 0:
        window = env.target_window()
    s = torch.as_tensor(env.proprio(), dtype=torch.float32)
    w = torch.as_tensor(window, dtype=torch.float32)
    with torch.no_grad():
        last_v = value(torch.cat([s, w], dim=-1))
    buf = RolloutBuffer(obs=obs, raw_actions=acts, log_probs=logps,
                        rewards=rews, dones=dones, values=vals,
                        last_values=last_v, targets=tgt,
                        critic_obs=torch.cat([obs, tgt], dim=-1))
    return buf, e_acc / T


def rollout_tracking(plant: Plant, reference: np.ndarray, policy,
                     horizon: int, frames: int | None = None,
                     deterministic: bool = True):
    """Deterministic single-env rollout along one reference trajectory.

    Returns per-tick fingertip positions, their interpolated targets,
    link-position errors per tick, and the action/activation trace.
    """
    env = _SingleTrajectoryEnv(plant, reference, horizon)
    frames = len(reference) - 1 if frames is None else min(frames, len(reference) - 1)
    tips, tip_targets, errors, acts = [], [], [], []
    window = env.target_window()
    for f in range(frames):
        for k in range(TICKS_PER_FRAME):
            s = torch.as_tensor(env.proprio(), dtype=torch.float32)
            w = torch.as_tensor(window, dtype=torch.float32)
            a, _ = policy.act(s, w, deterministic=deterministic)
            tip, target, err, _ = env.step_tick_eval(a.numpy().astype(float))
            tips.append(tip)
            tip_targets.append(target)
            errors.append(err)
            acts.append(env.state.act[0].copy())
        window = env.target_window()
    return (np.asarray(tips), np.asarray(tip_targets), np.asarray(errors),
            np.asarray(acts))


class _SingleTrajectoryEnv:
    """Minimal non-episodic tracker used for evaluation and playback."""

    def __init__(self, plant: Plant, reference: np.ndarray, horizon: int):
        self.plant = plant
        self.ref = reference
        self.horizon = horizon
        self.weights = plant.config.tracking_weights()
        self.state = plant.rest_state(1)
        self.state.q[0] = reference[0]
        self.state.qdot[0] = (reference[min(1, len(reference) - 1)]
                              - reference[0]) * 60.0
        self.frame = 0
        self.tick_in_frame = 0

    def proprio(self):
        return self.plant.proprioception(self.state)

    def target_window(self):
        D = self.plant.n_dofs
        out = np.zeros((1, self.horizon * D))
        for h in range(self.horizon):
            out[0, h * D:(h + 1) * D] = self.ref[min(self.frame + 1 + h,
                                                     len(self.ref) - 1)]
        return out

    def step_tick_eval(self, action):
        self.state = self.plant.step(self.state, action)
        alpha = (self.tick_in_frame + 1) / TICKS_PER_FRAME
        nxt = min(self.frame + 1, len(self.ref) - 1)
        q_t = (1 - alpha) * self.ref[self.frame] + alpha * self.ref[nxt]
        tposes = self.plant.forward_kinematics(q_t[None])
        poses = self.plant.forward_kinematics(self.state.q, self.state.qdot)
        _, parts = tracking_reward(poses.positions, poses.angles,
                                   tposes.positions, tposes.angles,
                                   action, self.weights)
        tips = poses.positions[0, self.plant.fingertip_links]
        ttips = tposes.positions[0, self.plant.fingertip_links]
        self.tick_in_frame += 1
        if self.tick_in_frame == TICKS_PER_FRAME:
            self.tick_in_frame = 0
            self.frame += 1
        return tips, ttips, float(parts.e_pos[0]), None


def evaluate_tracking(plant: Plant, references: list[np.ndarray], policy,
                      ts) -> list[tuple[float, float]]:
    """Per-reference (mean fingertip error, motion amplitude).

    Amplitude is half the diameter of the reference fingertip path; the
    error is the mean over ticks and fingertips of the distance to the
    interpolated target.
    """
    out = []
    for ref in references:
        frames = min(ts.eval_frames, len(ref) - 1)
        tips, targets, _, _ = rollout_tracking(plant, ref, policy, ts.horizon,
                                               frames)
        err = float(np.linalg.norm(tips - targets, axis=-1).mean())
        flat = targets.reshape(-1, 3)
        span = flat.max(axis=0) - flat.min(axis=0)
        amplitude = 0.5 * float(np.linalg.norm(span))
        out.append((err, amplitude))
    return out


def load_track_policy(path, run: RunConfig):
    """Rebuild the tracking policy (and plant) from a stage-1 checkpoint."""
    ck = ckpt_mod.load(path)
    if ck.stage != "track":
        raise StageError(f"{path} is a {ck.stage} checkpoint, expected track")
    ts = run.track()
    plant = Plant(run.plant_config())
    policy, value = _build_track_nets(plant, ts)
    ckpt_mod.load_module("policy", policy, ck.arrays)
    ckpt_mod.load_module("value", value, ck.arrays)
    return plant, policy, value, ck


# ---------------------------------------------------------------------------
# stage 2: latent distillation

def _action_bounds(plant: Plant) -> tuple[np.ndarray, np.ndarray]:
    lo = np.concatenate([np.zeros(plant.n_muscles), -np.ones(plant.n_root)])
    hi = np.ones(plant.action_dim)
    return lo, hi


def _build_vae(plant: Plant, ds, embed_dim: int) -> distill_mod.LatentVAE:
    lo, hi = _action_bounds(plant)
    return distill_mod.LatentVAE(plant.proprio_dim, embed_dim, plant.action_dim,
                                 latent_dim=ds.latent_dim, hidden=ds.hidden,
                                 action_lo=lo, action_hi=hi)


def stage_distill(run: RunConfig, track_ckpt=None) -> Path:
    ds = run.distill()
    ts = run.track()
    if track_ckpt is None:
        if not ds.track_checkpoint:
            raise StageError("no stage-1 checkpoint configured or given")
        track_ckpt = run.base_dir / ds.track_checkpoint
    if not Path(track_ckpt).exists():
        raise StageError(f"stage-1 checkpoint not found: {track_ckpt}")
    _torch_seed(run.seed, "distill")
    rngs = seed_streams(run.seed, "env", "rollout")

    plant, teacher, _, track_ck = load_track_policy(track_ckpt, run)
    references = _track_references(run, plant)
    env = TrackingEnvBatch(
        plant, references, ds.envs, rngs["env"], horizon=ts.horizon,
        error_cap=ds.error_cap,
        sampler_params=TrackSamplerParams(ts.chunk_frames, ts.zeta, ts.eta,
                                          ts.alpha, ts.target_epochs,
                                          ts.rollout_ticks))
    vae = _build_vae(plant, ds, ts.embed_dim)
    opt = torch.optim.Adam(vae.parameters(), lr=ds.lr, foreach=True)

    log = CsvLogger(run.out_dir / "distill_metrics.csv",
                    ["update", "total", "recon", "kl", "holdout_mse", "dropped"])
    best_mse = np.inf
    best_state = None
    bad_evals = 0
    holdout = float("nan")
    for u in range(ds.max_updates):
        batch = distill_mod.hybrid_rollout(
            env, teacher, vae, ds.intervals_per_update, rngs["rollout"],
            teacher_prob=ds.teacher_prob, error_cap=ds.error_cap)
        out = distill_mod.distill_update(vae, teacher, opt, batch, ds.beta)
        if (u + 1) % ds.eval_every == 0:
            held = distill_mod.hybrid_rollout(
                env, teacher, vae, ds.holdout_intervals, rngs["rollout"],
                teacher_prob=ds.teacher_prob, error_cap=ds.error_cap)
            holdout = distill_mod.reconstruction_mse(vae, teacher, held)
            log.row(update=u, total=out["total"], recon=out["recon"],
                    kl=out["kl"], holdout_mse=holdout, dropped=out["dropped"])
            if holdout < best_mse * (1.0 - 1e-3):
                best_mse = holdout
                best_state = {k: v.clone() for k, v in vae.state_dict().items()}
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= ds.patience and u + 1 >= ds.min_updates:
                    break
    if best_state is not None:
        vae.load_state_dict(best_state)

    arrays = ckpt_mod.module_arrays("vae", vae)
    rng_arrays, rng_meta = ckpt_mod.rng_arrays("rng", rngs)
    arrays.update(rng_arrays)
    lo, hi = _action_bounds(plant)
    meta = {"rng": rng_meta, "latent_dim": ds.latent_dim,
            "proprio_dim": plant.proprio_dim, "action_dim": plant.action_dim,
            "embed_dim": ts.embed_dim, "hidden": list(ds.hidden),
            "holdout_mse": float(best_mse),
            "track_fingerprint": track_ck.config_fingerprint}
    path = run.out_dir / "distill.ckpt"
    ckpt_mod.save(path, ckpt_mod.Checkpoint(
        stage="distill", arrays=arrays, meta=meta,
        config_fingerprint=run.fingerprint()))
    _manifest(run, "distill", {"holdout_mse": float(best_mse)})
    return path


def load_decoder(path, plant: Plant) -> distill_mod.LatentVAE:
    ck = ckpt_mod.load(path)
    if ck.stage != "distill":
        raise StageError(f"{path} is a {ck.stage} checkpoint, expected distill")
    meta = ck.meta
    if meta["proprio_dim"] != plant.proprio_dim or \
            meta["action_dim"] != plant.action_dim:
        raise StageError("decoder checkpoint does not match the plant layout")
    lo, hi = _action_bounds(plant)
    vae = distill_mod.LatentVAE(meta["proprio_dim"], meta["embed_dim"],
                                meta["action_dim"], latent_dim=meta["latent_dim"],
                                hidden=tuple(meta["hidden"]),
                                action_lo=lo, action_hi=hi)
    ckpt_mod.load_module("vae", vae, ck.arrays)
    return vae


# ---------------------------------------------------------------------------
# stage 3: latent-space key-press control

def _parse_score(run: RunConfig, hs):
    kind, data = run.score_source()
    s = score_mod.parse_midi(data) if kind == "midi" \
        else score_mod.parse_text_score(data)
    s = score_mod.assign_hands(s, hs.hand_policy, hs.split_key)
    patterns = score_mod.build_patterns(s)
    onsets = sorted({int(round(n.onset * 60.0)) for n in s.notes})
    return s, patterns, onsets


def _build_rigs(run: RunConfig, hs, decoder_paths) -> list[HandRig]:
    if len(decoder_paths) != len(hs.hands):
        raise StageError("need one decoder checkpoint per hand")
    rigs = []
    for placement, dpath in zip(hs.hands, decoder_paths):
        if not Path(dpath).exists():
            raise StageError(f"decoder checkpoint not found: {dpath}")
        plant = Plant(run.plant_config(hand_side=placement.side,
                                       anchor=placement.anchor))
        rigs.append(HandRig(plant, load_decoder(dpath, plant), placement.side))
    return rigs


def stage_high(run: RunConfig, decoder_ckpts: list | None = None) -> Path:
    hs = run.high()
    if decoder_ckpts is None:
        if not hs.decoder_checkpoints:
            raise StageError("no stage-2 checkpoints configured or given")
        decoder_ckpts = [run.base_dir / p for p in hs.decoder_checkpoints]
    _torch_seed(run.seed, "high")
    rngs = seed_streams(run.seed, "env", "disc")

    score, patterns, onsets = _parse_score(run, hs)
    kb = run.keyboard_config()
    rigs = _build_rigs(run, hs, decoder_ckpts)
    env = PianoEnvBatch(rigs, kb, patterns, onsets, hs.envs, rngs["env"],
                        chunk_frames=hs.chunk_frames, zeta=hs.zeta, eta=hs.eta,
                        alpha=hs.alpha, goal_patterns=hs.goal_patterns,
                        timer_norm=hs.timer_norm, tail_frames=hs.tail_frames)

    hp = Hyperparams(policy_lr=hs.policy_lr, critic_lr=hs.critic_lr,
                     gamma=hs.gamma, gae_lambda=hs.gae_lambda,
                     clip_range=hs.clip_range, batch_size=hs.batch_size,
                     epochs=hs.epochs, entropy_coef=hs.entropy_coef,
                     objective_weights=hs.objective_weights)
    H = len(rigs)
    Z = rigs[0].decoder.latent_dim
    policies, values, opts, discs, disc_opts, real_data = [], [], [], [], [], []
    for rig in rigs:
        policy = GaussianPolicy(env.obs_dim, Z, hidden=hs.hidden,
                                log_std_init=hs.log_std_init)
        value = ValueNet(env.obs_dim, len(hs.objective_weights), hidden=hs.hidden)
        policies.append(policy)
        values.append(value)
        opts.append(make_ppo_optimizer(policy, value, hp))
        refs = _track_references(run, rig.plant)
        real = reference_disc_features(rig.plant, refs)
        real_data.append(real)
        groups, gopts = {}, {}
        for name, arr in real.items():
            d = DiscriminatorEnsemble(arr.shape[1] // 2, heads=hs.disc_heads,
                                      hidden=hs.disc_hidden)
            groups[name] = d
            gopts[name] = torch.optim.Adam(d.parameters(), lr=hs.disc_lr,
                                           foreach=True)
        discs.append(groups)
        disc_opts.append(gopts)

    log = CsvLogger(run.out_dir / "high_metrics.csv",
                    ["iteration", "ticks", "mean_key_reward", "mean_recall",
                     "mean_precision", "policy_loss", "value_loss",
                     "clip_fraction", "disc_hinge", "episodes", "aborted"])
    ticks_per_iter = hs.envs * hs.rollout_frames * 8
    iterations = max(1, hs.total_ticks // ticks_per_iter)

    for it in range(iterations):
        T, B = hs.rollout_frames, hs.envs
        obs_buf = torch.zeros(T, B, env.obs_dim)
        z_buf = [torch.zeros(T, B, Z) for _ in range(H)]
        logp_buf = [torch.zeros(T, B) for _ in range(H)]
        rew_buf = [torch.zeros(T, B, 3) for _ in range(H)]
        val_buf = [torch.zeros(T, B, 3) for _ in range(H)]
        done_buf = torch.zeros(T, B)
        fakes = [{k: ([], []) for k in real_data[h]} for h in range(H)]
        recall_acc = prec_acc = key_acc = 0.0

        for t in range(T):
            obs = torch.as_tensor(env.observe(), dtype=torch.float32)
            obs_buf[t] = obs
            zs = []
            for h in range(H):
                z, logp = policies[h].act(obs)
                with torch.no_grad():
                    val_buf[h][t] = values[h](obs)
                z_buf[h][t] = z
                logp_buf[h][t] = logp
                zs.append(z.numpy().astype(float))
            res = env.frame_step(zs)
            done_buf[t] = torch.as_tensor(res.done, dtype=torch.float32)
            for h in range(H):
                rew = np.zeros((B, 3))
                rew[:, 0] = res.key_reward[:, h]
                for gi, (gname, pair) in enumerate(res.disc_pairs[h].items()):
                    prev_t = torch.as_tensor(pair[0], dtype=torch.float32)
                    new_t = torch.as_tensor(pair[1], dtype=torch.float32)
                    rew[:, 1 + gi] = imitation_reward(
                        discs[h][gname], prev_t, new_t).numpy()
                    fakes[h][gname][0].append(pair[0])
                    fakes[h][gname][1].append(pair[1])
                rew_buf[h][t] = torch.as_tensor(rew, dtype=torch.float32)
            recall_acc += float(res.recall.mean())
            prec_acc += float(res.precision.mean())
            key_acc += float(res.key_reward.mean())

        obs_last = torch.as_tensor(env.observe(), dtype=torch.float32)
        diag = {}
        hinge = 0.0
        for h in range(H):
            with torch.no_grad():
                last_v = values[h](obs_last)
            buf = RolloutBuffer(obs=obs_buf, raw_actions=z_buf[h],
                                log_probs=logp_buf[h], rewards=rew_buf[h],
                                dones=done_buf, values=val_buf[h],
                                last_values=last_v)
            diag = ppo_update(buf, policies[h], values[h], opts[h], hp)
            for gname, (prev_list, new_list) in fakes[h].items():
                fake_prev = np.concatenate(prev_list, axis=0)
                fake_new = np.concatenate(new_list, axis=0)
                real = real_data[h][gname]
                n_real = real.shape[0]
                ridx = rngs["disc"].integers(0, n_real, hs.disc_batch)
                fidx = rngs["disc"].integers(0, fake_prev.shape[0], hs.disc_batch)
                dim = fake_prev.shape[1]
                out = disc_update(
                    discs[h][gname], disc_opts[h][gname],
                    (torch.as_tensor(real[ridx, :dim], dtype=torch.float32),
                     torch.as_tensor(real[ridx, dim:], dtype=torch.float32)),
                    (torch.as_tensor(fake_prev[fidx], dtype=torch.float32),
                     torch.as_tensor(fake_new[fidx], dtype=torch.float32)),
                    hs.lambda_gp)
                hinge += out["hinge"]
        if it % hs.log_every == 0 or it == iterations - 1:
            log.row(iteration=it, ticks=env.global_tick * hs.envs,
                    mean_key_reward=key_acc / T, mean_recall=recall_acc / T,
                    mean_precision=prec_acc / T,
                    policy_loss=diag.get("policy_loss", 0.0),
                    value_loss=diag.get("value_loss", 0.0),
                    clip_fraction=diag.get("clip_fraction", 0.0),
                    disc_hinge=hinge / max(1, H * 2),
                    episodes=env.episodes_finished,
                    aborted=diag.get("aborted", 0.0))

    precision, recall, f1, _ = evaluate_high(run, rigs, policies, patterns,
                                             onsets, kb, hs)
    arrays = {}
    meta = {"sides": [r.side for r in rigs], "obs_dim": env.obs_dim,
            "latent_dim": Z, "hidden": list(hs.hidden),
            "disc_hidden": list(hs.disc_hidden), "disc_heads": hs.disc_heads,
            "objectives": len(hs.objective_weights),
            "final_eval": {"precision": precision, "recall": recall, "f1": f1}}
    for h, rig in enumerate(rigs):
        arrays.update(ckpt_mod.module_arrays(f"policy.{rig.side}", policies[h]))
        arrays.update(ckpt_mod.module_arrays(f"value.{rig.side}", values[h]))
        for gname, d in discs[h].items():
            arrays.update(ckpt_mod.module_arrays(f"disc.{rig.side}.{gname}", d))
    arrays["sampler.r_bar"] = env.sampler.r_bar.copy()
    rng_arrays, rng_meta = ckpt_mod.rng_arrays("rng", rngs)
    arrays.update(rng_arrays)
    meta["rng"] = rng_meta
    path = run.out_dir / "high.ckpt"
    ckpt_mod.save(path, ckpt_mod.Checkpoint(
        stage="high", arrays=arrays, meta=meta,
        config_fingerprint=run.fingerprint()))
    sampler_mod.dump_csv(env.sampler, run.out_dir / "high_sampler.csv")
    _manifest(run, "high", {"final_eval": meta["final_eval"]})
    return path


def evaluate_high(run: RunConfig, rigs, policies, patterns, onsets, kb, hs,
                  episodes: int = 1):
    """Deterministic full-score rollout; micro-averaged frame P/R/F1."""
    frames_log = []
    per_frame = []
    for _ in range(max(1, episodes)):
        env = PianoEnvBatch(rigs, kb, patterns, onsets, 1,
                            np.random.default_rng(0),
                            chunk_frames=10 ** 9, zeta=hs.zeta, eta=hs.eta,
                            alpha=hs.alpha, goal_patterns=hs.goal_patterns,
                            timer_norm=hs.timer_norm, tail_frames=hs.tail_frames,
                            scripted_start=0)
        for f in range(env.score_end):
            obs = torch.as_tensor(env.observe(), dtype=torch.float32)
            zs = [policies[h].act(obs, deterministic=True)[0].numpy().astype(float)
                  for h in range(len(rigs))]
            res = env.frame_step(zs)
            left, right = env._targets[min(f + 1, env.score_end + 1)]
            frames_log.append((res.pressed[0], left | right))
            per_frame.append((f + 1, sorted(res.pressed[0]),
                              sorted(left | right)))
            if res.done[0]:
                break
    precision, recall, f1 = micro_f1(frames_log)
    return precision, recall, f1, per_frame


# ---------------------------------------------------------------------------
# reports and playback

def evaluate(run: RunConfig, checkpoint_path, episodes: int = 1) -> dict:
    """Evaluation report for a tracking or key-press checkpoint."""
    ck = ckpt_mod.load(checkpoint_path)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    if ck.stage == "track":
        ts = run.track()
        plant, policy, _, _ = load_track_policy(checkpoint_path, run)
        references = _track_references(run, plant)
        per_link = _tracking_error_table(plant, references, policy, ts)
        report = {"stage": "track", "per_link_error_mm": per_link}
        log = CsvLogger(run.out_dir / "eval_tracking.csv",
                        ["link", "mean_mm", "std_mm"])
        for name, (mean_mm, std_mm) in per_link.items():
            log.row(link=name, mean_mm=mean_mm, std_mm=std_mm)
    elif ck.stage == "high":
        hs = run.high()
        score, patterns, onsets = _parse_score(run, hs)
        kb = run.keyboard_config()
        decoder_ckpts = [run.base_dir / p for p in hs.decoder_checkpoints]
        rigs = _build_rigs(run, hs, decoder_ckpts)
        policies = _load_high_policies(ck, rigs, hs)
        precision, recall, f1, per_frame = evaluate_high(
            run, rigs, policies, patterns, onsets, kb, hs, episodes)
        report = {"stage": "high", "precision": precision, "recall": recall,
                  "f1": f1}
        log = CsvLogger(run.out_dir / "eval_frames.csv",
                        ["frame", "pressed", "target"])
        for f, pressed, target in per_frame:
            log.row(frame=f, pressed=" ".join(map(str, pressed)),
                    target=" ".join(map(str, target)))
    else:
        raise StageError(f"cannot evaluate a {ck.stage} checkpoint")
    with open(run.out_dir / "eval_report.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    return report


def _load_high_policies(ck, rigs, hs):
    policies = []
    obs_dim = ck.meta["obs_dim"]
    for rig in rigs:
        policy = GaussianPolicy(obs_dim, ck.meta["latent_dim"],
                                hidden=tuple(ck.meta["hidden"]),
                                log_std_init=hs.log_std_init)
        ckpt_mod.load_module(f"policy.{rig.side}", policy, ck.arrays)
        policies.append(policy)
    return policies


def _tracking_error_table(plant, references, policy, ts) -> dict:
    errs = {name: [] for name in [l.name for l in plant.config.links]}
    names = [l.name for l in plant.config.links]
    for ref in references:
        frames = min(ts.eval_frames, len(ref) - 1)
        env = _SingleTrajectoryEnv(plant, ref, ts.horizon)
        window = env.target_window()
        for f in range(frames):
            for k in range(TICKS_PER_FRAME):
                s = torch.as_tensor(env.proprio(), dtype=torch.float32)
                w = torch.as_tensor(window, dtype=torch.float32)
                a, _ = policy.act(s, w, deterministic=True)
                env.step_tick_eval(a.numpy().astype(float))
                alpha = env.tick_in_frame / TICKS_PER_FRAME
                poses = plant.forward_kinematics(env.state.q)
                nxt = min(env.frame + 1, len(ref) - 1)
                qt = (1 - alpha) * ref[env.frame] + alpha * ref[nxt] \
                    if alpha > 0 else ref[env.frame]
                tposes = plant.forward_kinematics(qt[None])
                d = np.linalg.norm(poses.positions[0] - tposes.positions[0],
                                   axis=-1)
                for li, name in enumerate(names):
                    errs[name].append(d[li] * 1000.0)
            window = env.target_window()
    return {name: (float(np.mean(v)), float(np.std(v)))
            for name, v in errs.items()}


def play(run: RunConfig, checkpoint_path, out_path=None) -> Path:
    """Deterministic rollout writing 60 Hz trajectory and activation CSVs."""
    ck = ckpt_mod.load(checkpoint_path)
    if ck.stage != "high":
        raise StageError("play needs a key-press (stage-3) checkpoint")
    hs = run.high()
    score, patterns, onsets = _parse_score(run, hs)
    kb = run.keyboard_config()
    decoder_ckpts = [run.base_dir / p for p in hs.decoder_checkpoints]
    rigs = _build_rigs(run, hs, decoder_ckpts)
    policies = _load_high_policies(ck, rigs, hs)
    env = PianoEnvBatch(rigs, kb, patterns, onsets, 1, np.random.default_rng(0),
                        chunk_frames=10 ** 9, zeta=hs.zeta, eta=hs.eta,
                        alpha=hs.alpha, goal_patterns=hs.goal_patterns,
                        timer_norm=hs.timer_norm, tail_frames=hs.tail_frames,
                        scripted_start=0)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    out = Path(out_path) if out_path else run.out_dir / "trajectory.csv"
    act_path = out.with_name(out.stem + "_activations.csv")

    q_cols = [f"{r.side}_q{d}" for r in rigs for d in range(r.plant.n_dofs)]
    key_cols = [f"key{k}" for k in range(kb.n_keys)]
    with open(out, "w") as f, open(act_path, "w") as fa:
        f.write("t," + ",".join(q_cols + key_cols) + ",pressed\n")
        act_cols = [f"{r.side}_a{m}" for r in rigs
                    for m in range(r.plant.n_muscles)]
        fa.write("t," + ",".join(act_cols) + "\n")
        for frame in range(env.score_end):
            obs = torch.as_tensor(env.observe(), dtype=torch.float32)
            zs = [policies[h].act(obs, deterministic=True)[0].numpy().astype(float)
                  for h in range(len(rigs))]
            res = env.frame_step(zs)
            t = (frame + 1) / 60.0
            qs = [repr(float(x)) for h in range(len(rigs))
                  for x in env.states[h].q[0]]
            keys = [repr(float(x)) for x in env.key_d[0]]
            pressed = " ".join(str(k) for k in sorted(res.pressed[0]))
            f.write(repr(t) + "," + ",".join(qs + keys) + "," + pressed + "\n")
            acts = [repr(float(x)) for h in range(len(rigs))
                    for x in env.states[h].act[0]]
            fa.write(repr(t) + "," + ",".join(acts) + "\n")
            if res.done[0]:
                break
    return out
