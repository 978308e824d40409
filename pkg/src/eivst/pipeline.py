"""Run orchestration: dataset generation, transition-model training, staged
diffusion training, sampling, evaluation, and the ablation matrix.

All commands are deterministic functions of (config, seeds): batch indices
and noise derive from hashed (seed, stage, step) labels rather than shared
RNG state, so interrupted runs resume bit-identically and reruns reproduce
every metric.
"""

import csv
import json
import os
from collections import Counter
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (file_sha256, load_checkpoint, load_state_into,
                         save_checkpoint, state_dict_tensors)
from .classifier import (load_instruction_classifier,
                         train_instruction_classifier)
from .data import load_dataset, serialize_dataset
from .diffusion import (DenoiserUNet, LocalizationHead, NoiseSchedule,
                        ddim_sample, q_sample, training_loss)
from .errors import (DivergenceError, InsufficientSamples, LockError,
                     NotReady, ValidationError)
from .metrics import (endpoint_mse, fvd_lite, mask_iou, mid_frame_mse, vic,
                      vtc, vtq)
from .rng import derive_seed, np_rng, torch_gen
from .tc import BaselineConditioner, TCModule, TvlmBroadcastConditioner, plan_weight_matrix
from .tvlm import (episodes_to_batch, evaluate_transition_model,
                   load_transition_model, predict_plan, train_transition_model)
from .world import TransitionPlan, PlanStep, generate_episode

EVAL_BATCH = 16


# ---------------------------------------------------------------------------
# Run-directory plumbing

class run_lock:
    """Exclusive lock file guarding a run directory against concurrent use."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"run directory locked by {self.path}") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _episode_seed(base_seed, index):
    return derive_seed(base_seed, "episode", index)


def _split_sizes(config):
    total = config.dataset_train_episodes
    n_test = max(1, int(round(total * config.dataset_held_fraction)))
    return total - n_test, n_test


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(config, out_dir, force=False):
    """Generate the episode corpus and write train/test files plus manifest."""
    config.validate()
    out = Path(out_dir)
    train_path, test_path = out / "train.bin", out / "test.bin"
    manifest_path = out / "dataset.json"
    existing = [p for p in (train_path, test_path, manifest_path) if p.exists()]
    if existing and not force:
        raise ValidationError(
            f"refusing to overwrite {existing[0]} (pass --force to replace)"
        )
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_test = _split_sizes(config)
    total = n_train + n_test
    episodes = [generate_episode(_episode_seed(config.seed, i), config)
                for i in range(total)]
    serialize_dataset(episodes[:n_train], train_path)
    serialize_dataset(episodes[n_train:], test_path)
    histogram = Counter(ep.plan.k for ep in episodes)
    manifest = {
        "kind": "dataset",
        "config_hash": config.config_hash(),
        "data_hash": config.data_hash(),
        "seed": config.seed,
        "n_train": n_train,
        "n_test": n_test,
        "n_frames": config.world_frames,
        "canvas_px": config.world_canvas_px,
        "k_histogram": {str(k): histogram[k] for k in sorted(histogram)},
        "train_sha256": file_sha256(train_path),
        "test_sha256": file_sha256(test_path),
    }
    write_json(manifest_path, manifest)
    print(f"wrote {n_train} train / {n_test} test episodes to {out}")
    print("K histogram:", dict(sorted(histogram.items())))
    return manifest


def _load_manifest(config, data_dir):
    manifest_path = Path(data_dir) / "dataset.json"
    if not manifest_path.exists():
        raise ValidationError(f"no dataset manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("data_hash") != config.data_hash():
        raise ValidationError(
            "dataset was generated under a different world/seed config; refusing"
        )
    return manifest


def regenerate_episodes(config, manifest, split):
    """Rebuild episodes (with scene states) from their recorded seeds."""
    n_train, n_test = manifest["n_train"], manifest["n_test"]
    index_range = range(n_train) if split == "train" else range(n_train, n_train + n_test)
    return [generate_episode(_episode_seed(manifest["seed"], i), config)
            for i in index_range]


# ---------------------------------------------------------------------------
# train-tvlm

def cmd_train_tvlm(config, data_dir, out_dir):
    """Train the transition model and the instruction classifier.

    Episodes are regenerated from manifest seeds because serialized datasets
    carry frames and plans but not scene states.  Held-out quality numbers
    are written next to the checkpoints.
    """
    config.validate()
    manifest = _load_manifest(config, data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_eps = regenerate_episodes(config, manifest, "train")
    held_eps = regenerate_episodes(config, manifest, "test")

    tvlm_path = out / "tvlm.ckpt"
    model = train_transition_model(train_eps, config, tvlm_path,
                                   loss_csv=out / "loss_tvlm.csv")
    tvlm_metrics = evaluate_transition_model(model, held_eps, config)

    classifier_path = out / "classifier.ckpt"
    _, accuracy = train_instruction_classifier(train_eps, held_eps, config,
                                               out_path=classifier_path)
    report = {
        "config_hash": config.config_hash(),
        "transition_model": tvlm_metrics,
        "classifier_accuracy": accuracy,
    }
    write_json(out / "tvlm_eval.json", report)
    print("transition model held-out:",
          {k: round(v, 4) for k, v in tvlm_metrics.items()})
    print("classifier held-out accuracy:",
          {k: round(v, 4) for k, v in accuracy.items()})
    return report


# ---------------------------------------------------------------------------
# Conditioning paths

class ConditioningPath(nn.Module):
    """The ablation-selected module mapping inputs to per-frame conditions."""

    def __init__(self, config, gen=None):
        super().__init__()
        if not config.use_tvlm:
            self.mode = "baseline"
            self.module = BaselineConditioner(config, gen=gen)
        elif not config.use_tc:
            self.mode = "broadcast"
            self.module = TvlmBroadcastConditioner(config, gen=gen)
        else:
            self.mode = "tc"
            self.module = TCModule(config, gen=gen)


def conditions_for(path, tvlm, config, frame_1, frame_n, tokens, n_frames,
                   force_k=None, plans=None, stochastic_gen=None):
    """Per-frame condition tokens (B, N, L, d_c) for one batch."""
    if path.mode == "baseline":
        return path.module(tokens, n_frames)
    with torch.no_grad():
        out = tvlm(frame_1, frame_n, tokens)
    f_s1, f_sn, f_t = out["f_s1"].detach(), out["f_sn"].detach(), out["f_t"].detach()
    if path.mode == "broadcast":
        return path.module(f_s1, f_sn, f_t, n_frames)
    if plans is None:
        plans = [predict_plan(out, n_frames, sample_index=b, force_k=force_k)
                 for b in range(tokens.shape[0])]
    weights = plan_weight_matrix(plans, n_frames, config,
                                 stochastic=stochastic_gen is not None,
                                 gen=stochastic_gen)
    return path.module(frame_1, frame_n, f_s1, f_sn, f_t, weights)


def _force_k_value(config, force_k=None):
    if force_k is not None:
        return force_k
    return None if config.fixed_k == "variable" else int(config.fixed_k)


# ---------------------------------------------------------------------------
# Diffusion training

class DiffusionData:
    """Train-split tensors held in memory for fast random batching."""

    def __init__(self, episodes, config):
        frames = np.stack([ep.frames for ep in episodes])
        self.frames = torch.from_numpy(frames).permute(0, 1, 4, 2, 3).contiguous()
        self.masks = torch.from_numpy(
            np.stack([ep.masks for ep in episodes]).astype(np.uint8)
        )
        batch = episodes_to_batch(episodes, config)
        self.tokens = batch["tokens"]

    def __len__(self):
        return self.frames.shape[0]

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        z0 = self.frames[idx]
        anchors = torch.stack([z0[:, 0], z0[:, -1]], dim=1)
        return {
            "z0": z0,
            "anchors": anchors,
            "tokens": self.tokens[idx],
            "masks": self.masks[idx].float(),
        }


def _named_trainable(stage, denoiser, cond, cond0, loc_head, config):
    """The (name, param) list optimized in a given stage, in a fixed order."""
    named = []
    if stage == 0:
        named += [("denoiser." + n, p) for n, p in denoiser.named_parameters()]
        named += [("cond0." + n, p) for n, p in cond0.named_parameters()]
    else:
        named += [("cond." + n, p) for n, p in cond.named_parameters()]
        named += [("denoiser." + n, p) for n, p in denoiser.cross_attention_parameters()]
        if loc_head is not None:
            named += [("loc." + n, p) for n, p in loc_head.named_parameters()]
        if stage == 2:
            named += [("denoiser." + n, p) for n, p in denoiser.spatial_parameters()]
    seen = set()
    unique = []
    for name, p in named:
        if name not in seen:
            seen.add(name)
            unique.append((name, p))
    return unique


def _apply_stage_freeze(named_trainable, all_modules):
    trainable_ids = {id(p) for _, p in named_trainable}
    for module in all_modules:
        if module is None:
            continue
        for p in module.parameters():
            p.requires_grad_(id(p) in trainable_ids)


def _opt_state_tensors(optimizer, named_params):
    tensors = {}
    for name, p in named_params:
        state = optimizer.state.get(p)
        if not state:
            continue
        tensors[f"opt.{name}.step"] = state["step"].detach().reshape(1).float()
        tensors[f"opt.{name}.exp_avg"] = state["exp_avg"]
        tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return tensors


def _load_opt_state(optimizer, named_params, tensors):
    for name, p in named_params:
        key = f"opt.{name}.step"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": tensors[key].reshape(()).clone(),
            "exp_avg": tensors[f"opt.{name}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"opt.{name}.exp_avg_sq"].clone(),
        }


def _model_tensors(denoiser, cond, cond0, loc_head):
    tensors = state_dict_tensors(denoiser, prefix="denoiser.")
    tensors.update(state_dict_tensors(cond, prefix="cond."))
    if cond0 is not None and cond0 is not cond:
        tensors.update(state_dict_tensors(cond0, prefix="cond0."))
    if loc_head is not None:
        tensors.update(state_dict_tensors(loc_head, prefix="loc."))
    return tensors


def _atomic_save(path, tensors, meta):
    tmp = Path(str(path) + ".tmp")
    save_checkpoint(tmp, tensors, meta)
    os.replace(tmp, path)
    os.replace(str(tmp) + ".json", str(path) + ".json")


def _rewrite_loss_csv(path, stage, next_step):
    """Drop rows at or past the resume point so the curve has no duplicates."""
    if not Path(path).exists():
        return
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    kept = [r for r in body
            if int(r[0]) < stage or (int(r[0]) == stage and int(r[1]) < next_step)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(head)
        writer.writerows(kept)


def train_diffusion(config, data_dir, out_dir, tvlm_path=None, trunk_path=None,
                    stages=(0, 1, 2), stop_after=None):
    """Staged denoiser training; resumable and bit-deterministic.

    Stage 0 pretrains the full U-Net with broadcast instruction conditioning
    (the stand-in for a pretrained interpolation backbone).  Stage 1 freezes
    the trunk and trains the conditioning path plus cross-attention (and the
    localization head under OAS).  Stage 2 additionally unfreezes the spatial
    convolution blocks at a lower learning rate; temporal attention stays
    frozen after stage 0.
    """
    config.validate()
    manifest = _load_manifest(config, data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = load_dataset(Path(data_dir) / "train.bin")
    data = DiffusionData(episodes, config)
    n_frames = config.world_frames

    denoiser = DenoiserUNet(config, gen=torch_gen(config.seed, "denoiser-init"))
    cond = ConditioningPath(config, gen=torch_gen(config.seed, "cond-init"))
    cond0 = cond if cond.mode == "baseline" else ConditioningPath(
        config.replace(use_tvlm=False, use_tc=False),
        gen=torch_gen(config.seed, "cond0-init"),
    )
    loc_head = (LocalizationHead(2 * config.denoiser_channels,
                                 gen=torch_gen(config.seed, "loc-init"))
                if config.use_oas else None)
    tvlm = None
    if config.use_tvlm:
        if tvlm_path is None:
            raise ValidationError("use_tvlm requires a transition-model checkpoint")
        tvlm, _ = load_transition_model(tvlm_path, config)
        for p in tvlm.parameters():
            p.requires_grad_(False)
    schedule = NoiseSchedule(config.diff_timesteps, config.diff_beta_start,
                             config.diff_beta_end)

    latest_path = out / "latest.ckpt"
    resume_stage, resume_step = stages[0], 0
    if latest_path.exists():
        tensors, meta = load_checkpoint(latest_path)
        load_state_into(denoiser, tensors, prefix="denoiser.")
        load_state_into(cond, tensors, prefix="cond.")
        if cond0 is not cond and any(k.startswith("cond0.") for k in tensors):
            load_state_into(cond0, tensors, prefix="cond0.")
        if loc_head is not None:
            load_state_into(loc_head, tensors, prefix="loc.")
        resume_stage, resume_step = meta["stage"], meta["next_step"]
        resume_opt_tensors = tensors
        print(f"resuming from stage {resume_stage} step {resume_step}")
    elif trunk_path is not None:
        tensors, trunk_meta = load_checkpoint(trunk_path)
        if trunk_meta.get("data_hash") != config.data_hash():
            raise ValidationError("trunk checkpoint trained on a different dataset")
        load_state_into(denoiser, tensors, prefix="denoiser.")
        if cond.mode == "baseline":
            load_state_into(cond, tensors, prefix="cond.")
        resume_opt_tensors = None
        if 0 in stages:
            stages = tuple(s for s in stages if s != 0)
            resume_stage = stages[0]
    else:
        resume_opt_tensors = None

    stage_plan = {
        0: (config.stage0_steps, config.stage0_lr, config.stage0_batch),
        1: (config.stage1_steps, config.stage1_lr, config.stage1_batch),
        2: (config.stage2_steps, config.stage2_lr, config.stage2_batch),
    }
    force_k = _force_k_value(config)
    lam = config.loc_loss_weight
    loss_csv = out / "loss_diffusion.csv"
    _rewrite_loss_csv(loss_csv, resume_stage, resume_step)
    csv_fh = open(loss_csv, "a", encoding="utf-8", newline="")
    writer = csv.writer(csv_fh)
    if csv_fh.tell() == 0:
        writer.writerow(["stage", "step", "total", "rec", "loc"])

    done = 0
    interrupted = False
    try:
        for stage in stages:
            if stage < resume_stage:
                continue
            steps, lr, batch_size = stage_plan[stage]
            start = resume_step if stage == resume_stage else 0
            if start >= steps:
                continue
            named = _named_trainable(stage, denoiser, cond, cond0, loc_head, config)
            _apply_stage_freeze(named, [denoiser, cond, cond0, loc_head])
            optimizer = torch.optim.Adam([p for _, p in named], lr=lr)
            if resume_opt_tensors is not None and stage == resume_stage:
                _load_opt_state(optimizer, named, resume_opt_tensors)
                resume_opt_tensors = None

            for step in range(start, steps):
                idx = np_rng(config.seed, "diff-batch", stage, step).integers(
                    0, len(data), size=min(batch_size, len(data))
                )
                batch = data.batch(idx)
                gen_step = torch_gen(config.seed, "diff-noise", stage, step)
                t = torch.randint(1, schedule.timesteps + 1,
                                  (batch["z0"].shape[0],), generator=gen_step)
                eps = torch.randn(batch["z0"].shape, generator=gen_step)
                if stage == 0:
                    conditions = cond0.module(batch["tokens"], n_frames)
                    head, masks = None, None
                else:
                    stoch = (gen_step if (config.tc_stochastic_weights
                                          and cond.mode == "tc") else None)
                    conditions = conditions_for(
                        cond, tvlm, config, batch["z0"][:, 0], batch["z0"][:, -1],
                        batch["tokens"], n_frames, force_k=force_k,
                        stochastic_gen=stoch,
                    )
                    head = loc_head if config.use_oas else None
                    masks = batch["masks"] if config.use_oas else None
                total, rec, loc = training_loss(
                    denoiser, head, batch["z0"], batch["anchors"], conditions,
                    t, eps, schedule, masks=masks, lam=lam,
                    fr=config.world_frame_rate,
                )
                if not torch.isfinite(total):
                    raise DivergenceError(
                        f"diffusion loss non-finite at stage {stage} step {step}"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                writer.writerow([stage, step, f"{total.item():.8f}",
                                 f"{rec.item():.8f}", f"{loc.item():.8f}"])
                done += 1
                if (step + 1) % config.checkpoint_every == 0 or step + 1 == steps:
                    tensors = _model_tensors(denoiser, cond, cond0, loc_head)
                    tensors.update(_opt_state_tensors(optimizer, named))
                    _atomic_save(latest_path, tensors, {
                        "kind": "latest", "stage": stage, "next_step": step + 1,
                        "config_hash": config.config_hash(),
                        "data_hash": config.data_hash(),
                    })
                    csv_fh.flush()
                if stop_after is not None and done >= stop_after:
                    interrupted = True
                    break
            if interrupted:
                break
    finally:
        csv_fh.close()

    if interrupted:
        print(f"stopped after {done} steps; resume from {latest_path}")
        return None

    model_path = out / "model.ckpt"
    tensors = _model_tensors(denoiser, cond, None, loc_head)
    if tvlm is not None:
        tensors.update(state_dict_tensors(tvlm, prefix="tvlm."))
    meta = {
        "kind": "model",
        "status": "trained",
        "stages": list(stages),
        "config_hash": config.config_hash(),
        "data_hash": config.data_hash(),
        "mode": cond.mode,
        "use_oas": config.use_oas,
    }
    save_checkpoint(model_path, tensors, meta)
    print(f"saved {model_path}")
    return model_path


def cmd_train(config, data_dir, out_dir, tvlm_path=None, trunk_path=None):
    stages = (1, 2) if trunk_path is not None else (0, 1, 2)
    return train_diffusion(config, data_dir, out_dir, tvlm_path=tvlm_path,
                           trunk_path=trunk_path, stages=stages)


# ---------------------------------------------------------------------------
# Sampling and evaluation

def load_model_checkpoint(config, path):
    """Rebuild all inference modules from a unified checkpoint."""
    tensors, meta = load_checkpoint(path)
    if meta.get("config_hash") != config.config_hash():
        raise ValidationError(
            "checkpoint was trained under a different config; refusing"
        )
    denoiser = DenoiserUNet(config)
    load_state_into(denoiser, tensors, prefix="denoiser.")
    cond = ConditioningPath(config)
    load_state_into(cond, tensors, prefix="cond.")
    loc_head = None
    if any(name.startswith("loc.") for name in tensors):
        loc_head = LocalizationHead(2 * config.denoiser_channels)
        load_state_into(loc_head, tensors, prefix="loc.")
    tvlm = None
    if any(name.startswith("tvlm.") for name in tensors):
        from .tvlm import TransitionModel

        tvlm = TransitionModel(config)
        load_state_into(tvlm, tensors, prefix="tvlm.")
        tvlm.eval()
    denoiser.eval()
    cond.eval()
    return denoiser, cond, loc_head, tvlm, meta


def _generate_batches(config, denoiser, cond, tvlm, episodes, noise_seed,
                      seed_label, force_k=None, override_plan=None):
    """Yield (chunk_episodes, anchors, generated videos) deterministically."""
    schedule = NoiseSchedule(config.diff_timesteps, config.diff_beta_start,
                             config.diff_beta_end)
    n_frames = config.world_frames
    for chunk_index, lo in enumerate(range(0, len(episodes), EVAL_BATCH)):
        chunk = episodes[lo : lo + EVAL_BATCH]
        batch = episodes_to_batch(chunk, config)
        anchors = torch.stack([batch["i1"], batch["i_n"]], dim=1)
        plans = [override_plan] * len(chunk) if override_plan is not None else None
        with torch.no_grad():
            conditions = conditions_for(cond, tvlm, config, batch["i1"],
                                        batch["i_n"], batch["tokens"], n_frames,
                                        force_k=force_k, plans=plans)
        gen = torch_gen(noise_seed, seed_label, chunk_index)
        videos = ddim_sample(denoiser, schedule, anchors, conditions, gen,
                             steps=config.ddim_steps, eta=config.ddim_eta,
                             n_frames=n_frames, fr=config.world_frame_rate)
        yield chunk, anchors, videos


def _load_override_plan(path, n_frames):
    spec = read_json(path)
    steps = tuple(PlanStep(label=s["label"], start=int(s["start"]),
                           end=int(s["end"])) for s in spec["steps"])
    plan = TransitionPlan(steps=steps)
    plan.validate(n_frames)
    return plan


def cmd_sample(config, checkpoint_path, data_dir, out_dir, seed=None, count=1,
               override_plan_path=None):
    """Sample videos for held-out episodes; writes raw frames and a plan
    sidecar per video."""
    config.validate()
    _load_manifest(config, data_dir)
    denoiser, cond, loc_head, tvlm, _ = load_model_checkpoint(config, checkpoint_path)
    episodes = load_dataset(Path(data_dir) / "test.bin")[:count]
    if not episodes:
        raise ValidationError("no test episodes to sample from")
    override_plan = None
    if override_plan_path is not None:
        if cond.mode != "tc":
            raise ValidationError("--override-plan requires the TC conditioning path")
        override_plan = _load_override_plan(override_plan_path, config.world_frames)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    noise_seed = config.seed if seed is None else seed
    force_k = _force_k_value(config)
    written = []
    index = 0
    for chunk, _, videos in _generate_batches(config, denoiser, cond, tvlm,
                                              episodes, noise_seed, "sample",
                                              force_k=force_k,
                                              override_plan=override_plan):
        for b, ep in enumerate(chunk):
            stem = out / f"sample_{index:03d}"
            frames = videos[b].numpy().astype("<f4")
            with open(f"{stem}.bin", "wb") as fh:
                fh.write(frames.tobytes())
            plan = override_plan
            if plan is None:
                plan = _predicted_or_true_plan(cond, tvlm, config, ep, force_k)
            write_json(f"{stem}.json", {
                "episode_index": index,
                "instruction": " ".join([ep.instruction.verb, *ep.instruction.args]),
                "plan": [{"label": s.label, "start": s.start, "end": s.end}
                         for s in plan.steps],
                "shape": list(frames.shape),
                "seed": noise_seed,
                "config_hash": config.config_hash(),
            })
            _maybe_write_png(stem, videos[b])
            written.append(str(stem) + ".bin")
            index += 1
    print(f"wrote {len(written)} videos to {out}")
    return written


def _predicted_or_true_plan(cond, tvlm, config, episode, force_k):
    if cond.mode != "tc":
        return episode.plan
    batch = episodes_to_batch([episode], config)
    with torch.no_grad():
        out = tvlm(batch["i1"], batch["i_n"], batch["tokens"])
    return predict_plan(out, config.world_frames, sample_index=0, force_k=force_k)


def _maybe_write_png(stem, video):
    try:
        from PIL import Image
    except ImportError:
        return
    array = (video.clamp(0, 1).numpy() * 255).astype(np.uint8)
    n, _, h, w = array.shape
    strip = array.transpose(2, 0, 3, 1).reshape(h, n * w, 3)
    Image.fromarray(strip).save(f"{stem}.png")


def evaluate_checkpoint(config, checkpoint_path, data_dir, classifier_path,
                        out_path=None, force_k=None):
    """Metric report for one checkpoint on the held-out split."""
    config.validate()
    _load_manifest(config, data_dir)
    denoiser, cond, loc_head, tvlm, meta = load_model_checkpoint(config, checkpoint_path)
    if not Path(classifier_path).exists():
        raise NotReady(f"no instruction classifier at {classifier_path}")
    classifier, _ = load_instruction_classifier(classifier_path)
    if not classifier.trained:
        raise NotReady("instruction classifier checkpoint is untrained")
    episodes = load_dataset(Path(data_dir) / "test.bin")[: config.eval_videos]
    if len(episodes) < 2:
        raise InsufficientSamples("evaluation needs at least 2 held-out episodes")
    force_k = _force_k_value(config, force_k)

    real_videos, gen_videos, anchor_pairs = [], [], []
    vtq_scores, vtc_scores, vic_scores = [], [], []
    for chunk, anchors, videos in _generate_batches(config, denoiser, cond,
                                                    tvlm, episodes, config.seed,
                                                    "eval-noise", force_k=force_k):
        for b, ep in enumerate(chunk):
            real = torch.from_numpy(ep.frames).permute(0, 3, 1, 2).float()
            video = videos[b]
            real_videos.append(real)
            gen_videos.append(video)
            anchor_pairs.append(anchors[b])
            vtq_scores.append(vtq(video))
            vtc_scores.append(vtc(video, ep.instruction, classifier))
            vic_scores.append(vic(video, anchors[b, 0], anchors[b, 1]))

    n = len(gen_videos)
    metrics = {
        "fvd_lite": fvd_lite(torch.stack(real_videos), torch.stack(gen_videos),
                             classifier.encode),
        "vtq": float(np.mean(vtq_scores)),
        "vtc": float(np.mean(vtc_scores)),
        "vic": float(np.mean(vic_scores)),
        "mid_frame_mse": mid_frame_mse(gen_videos, real_videos),
        "endpoint_mse": endpoint_mse(gen_videos, anchor_pairs),
    }
    if loc_head is not None:
        metrics["mask_iou"] = _localization_iou(config, denoiser, cond, tvlm,
                                                loc_head, episodes,
                                                force_k=force_k)
    report = {
        "metrics": {name: {"value": value, "n_samples": n,
                           "config_hash": config.config_hash()}
                    for name, value in metrics.items()},
        "checkpoint_sha256": file_sha256(checkpoint_path),
        "config_hash": config.config_hash(),
    }
    report["report_hash"] = _report_hash(report)
    if out_path is not None:
        write_json(out_path, report)
    print("eval:", {k: round(v, 6) for k, v in metrics.items()})
    return report


def _report_hash(report):
    import hashlib

    return hashlib.sha256(
        json.dumps(report, sort_keys=True).encode()
    ).hexdigest()


def _localization_iou(config, denoiser, cond, tvlm, loc_head, episodes,
                      force_k=None):
    """Localization-head IoU on noised real episodes at the eval timestep."""
    schedule = NoiseSchedule(config.diff_timesteps, config.diff_beta_start,
                             config.diff_beta_end)
    n_frames = config.world_frames
    total, weight = 0.0, 0
    for chunk_index, lo in enumerate(range(0, len(episodes), EVAL_BATCH)):
        chunk = episodes[lo : lo + EVAL_BATCH]
        batch = episodes_to_batch(chunk, config)
        z0 = torch.stack([
            torch.from_numpy(ep.frames).permute(0, 3, 1, 2) for ep in chunk
        ]).float()
        anchors = torch.stack([batch["i1"], batch["i_n"]], dim=1)
        masks = torch.from_numpy(np.stack([ep.masks for ep in chunk])).float()
        with torch.no_grad():
            conditions = conditions_for(cond, tvlm, config, batch["i1"],
                                        batch["i_n"], batch["tokens"], n_frames,
                                        force_k=force_k)
            gen = torch_gen(config.seed, "eval-loc", chunk_index)
            eps = torch.randn(z0.shape, generator=gen)
            t = torch.full((z0.shape[0],), config.eval_loc_timestep,
                           dtype=torch.long)
            z_t = q_sample(z0, t, eps, schedule)
            _, features = denoiser(z_t, t, conditions, anchors,
                                   fr=config.world_frame_rate)
            probs = torch.sigmoid(loc_head(features))
        total += mask_iou(probs, masks) * z0.shape[0]
        weight += z0.shape[0]
    return total / max(weight, 1)


def cmd_eval(config, checkpoint_path, data_dir, classifier_path, out_path):
    return evaluate_checkpoint(config, checkpoint_path, data_dir,
                               classifier_path, out_path=out_path)


# ---------------------------------------------------------------------------
# Ablation matrix

ABLATION_ROWS = (
    ("baseline", {"use_tvlm": False, "use_tc": False, "use_oas": False}),
    ("tvlm", {"use_tvlm": True, "use_tc": False, "use_oas": False}),
    ("tc", {"use_tvlm": True, "use_tc": True, "use_oas": False}),
    ("oas", {"use_tvlm": True, "use_tc": True, "use_oas": True}),
)


def cmd_ablate(config, out_dir, force=False):
    """Train and evaluate the four-row conditioning ablation plus the K table.

    Stage 0 is trained once and shared across rows, mirroring how every row
    would start from the same pretrained interpolation backbone.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    if not (data_dir / "dataset.json").exists() or force:
        cmd_gen_data(config, data_dir, force=force)
    _load_manifest(config, data_dir)

    tvlm_path = out / "tvlm.ckpt"
    classifier_path = out / "classifier.ckpt"
    if not tvlm_path.exists() or not classifier_path.exists() or force:
        cmd_train_tvlm(config, data_dir, out)

    trunk_cfg = config.replace(use_tvlm=False, use_tc=False, use_oas=False)
    trunk_dir = out / "trunk"
    trunk_path = trunk_dir / "model.ckpt"
    if not trunk_path.exists() or force:
        print("training shared stage-0 trunk")
        train_diffusion(trunk_cfg, data_dir, trunk_dir, stages=(0,))

    rows = []
    for name, flags in ABLATION_ROWS:
        row_cfg = config.replace(**flags)
        row_dir = out / "rows" / name
        ckpt = row_dir / "model.ckpt"
        if not ckpt.exists() or force:
            print(f"training ablation row: {name}")
            train_diffusion(row_cfg, data_dir, row_dir,
                            tvlm_path=tvlm_path if flags["use_tvlm"] else None,
                            trunk_path=trunk_path, stages=(1, 2))
        report = evaluate_checkpoint(row_cfg, ckpt, data_dir, classifier_path,
                                     out_path=row_dir / "eval.json")
        rows.append({"name": name, "flags": flags,
                     "metrics": {k: v["value"]
                                 for k, v in report["metrics"].items()}})

    baseline_fvd = rows[0]["metrics"]["fvd_lite"]
    for row in rows:
        row["fvd_delta_vs_baseline"] = row["metrics"]["fvd_lite"] - baseline_fvd

    full_cfg = config.replace(**ABLATION_ROWS[-1][1])
    full_ckpt = out / "rows" / ABLATION_ROWS[-1][0] / "model.ckpt"
    k_rows = [{"k": "variable", "metrics": rows[-1]["metrics"]}]
    for k in (1, 2, 4):
        report = evaluate_checkpoint(full_cfg, full_ckpt, data_dir,
                                     classifier_path, force_k=k)
        k_rows.append({"k": k, "metrics": {name: v["value"]
                                           for name, v in report["metrics"].items()}})

    ablation = {
        "config_hash": config.config_hash(),
        "rows": rows,
        "k_rows": k_rows,
    }
    write_json(out / "ablation_report.json", ablation)
    print("ablation FVD-lite:",
          {r["name"]: round(r["metrics"]["fvd_lite"], 4) for r in rows})
    print("K-table FVD-lite:",
          {str(r["k"]): round(r["metrics"]["fvd_lite"], 4) for r in k_rows})
    return ablation
