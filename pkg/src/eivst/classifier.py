"""Instruction classifier for the text-consistency metric.

A small per-frame conv trunk pooled over time yields a 64-dim video feature;
three linear heads predict the verb and the first object's color and shape.
The same trunk feature is the default encoder for FVD-lite, with a fixed
random-weight copy as the fallback when no classifier was trained.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_tensors, load_state_into
from .errors import DivergenceError, ValidationError
from .rng import derive_seed, init_conv_, init_linear_, np_rng, torch_gen
from .world import COLOR_NAMES, SHAPES, VERBS

HEAD_SIZES = {"verb": len(VERBS), "color": len(COLOR_NAMES), "shape": len(SHAPES)}


class InstructionClassifier(nn.Module):
    """Per-frame conv encoder with mean and motion pooling over time."""

    def __init__(self, gen=None):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        self.heads = nn.ModuleDict(
            {name: nn.Linear(64, size) for name, size in HEAD_SIZES.items()}
        )
        self.trained = False
        if gen is not None:
            for conv in (self.conv1, self.conv2, self.conv3):
                init_conv_(conv, gen)
            for head in self.heads.values():
                init_linear_(head, gen)

    def frame_features(self, frames):
        x = F.silu(self.conv1(frames))
        x = F.silu(self.conv2(x))
        x = F.silu(self.conv3(x))
        return x.mean(dim=(-2, -1))

    def encode(self, videos):
        """Map (B, N, 3, H, W) videos to 64-dim features."""
        videos = torch.as_tensor(videos).to(self.conv1.weight.dtype)
        if videos.dim() == 4:
            videos = videos.unsqueeze(0)
        b, n = videos.shape[:2]
        with torch.no_grad():
            per_frame = self.frame_features(videos.reshape(b * n, *videos.shape[2:]))
        per_frame = per_frame.reshape(b, n, -1)
        motion = (per_frame[:, 1:] - per_frame[:, :-1]).abs().mean(dim=1)
        return torch.cat([per_frame.mean(dim=1), motion], dim=-1)

    def forward(self, videos):
        videos = torch.as_tensor(videos).to(self.conv1.weight.dtype)
        b, n = videos.shape[:2]
        per_frame = self.frame_features(videos.reshape(b * n, *videos.shape[2:]))
        per_frame = per_frame.reshape(b, n, -1)
        motion = (per_frame[:, 1:] - per_frame[:, :-1]).abs().mean(dim=1)
        feats = torch.cat([per_frame.mean(dim=1), motion], dim=-1)
        return {name: head(feats) for name, head in self.heads.items()}

    def predict_probs(self, videos):
        with torch.no_grad():
            logits = self.forward(videos)
        return {name: torch.softmax(v, dim=-1) for name, v in logits.items()}

    @staticmethod
    def instruction_targets(instruction):
        """True head indices for an instruction's verb and first object."""
        color = next(a for a in instruction.args if a in COLOR_NAMES)
        shape = next(a for a in instruction.args if a in SHAPES)
        return {
            "verb": VERBS.index(instruction.verb),
            "color": COLOR_NAMES.index(color),
            "shape": SHAPES.index(shape),
        }


def fixed_random_encoder(seed=1234):
    """Untrained, deterministically seeded encoder for classifier-free runs."""
    return InstructionClassifier(gen=torch_gen(seed, "fvd-encoder"))


def _episode_tensors(episodes):
    videos = torch.stack(
        [torch.from_numpy(ep.frames).permute(0, 3, 1, 2) for ep in episodes]
    ).float()
    targets = {name: [] for name in HEAD_SIZES}
    for ep in episodes:
        t = InstructionClassifier.instruction_targets(ep.instruction)
        for name in HEAD_SIZES:
            targets[name].append(t[name])
    targets = {name: torch.tensor(v, dtype=torch.long) for name, v in targets.items()}
    return videos, targets


def train_instruction_classifier(train_episodes, held_episodes, config, out_path=None):
    """Train the classifier; returns (model, held-out per-head accuracy)."""
    if len(train_episodes) == 0:
        raise ValidationError("classifier training needs at least one episode")
    model = InstructionClassifier(gen=torch_gen(config.seed, "classifier-init"))
    videos, targets = _episode_tensors(train_episodes)
    opt = torch.optim.Adam(model.parameters(), lr=config.classifier_lr)
    batch = min(config.classifier_batch, len(train_episodes))
    for step in range(config.classifier_steps):
        idx = np_rng(derive_seed(config.seed, "classifier-batch", step)).integers(
            0, len(train_episodes), size=batch
        )
        idx = torch.from_numpy(idx)
        logits = model(videos[idx])
        loss = sum(
            F.cross_entropy(logits[name], targets[name][idx]) for name in HEAD_SIZES
        )
        if not torch.isfinite(loss):
            raise DivergenceError(f"classifier loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.trained = True
    accuracy = evaluate_classifier(model, held_episodes)
    if out_path is not None:
        meta = {"trained": True, "seed": config.seed, "accuracy": accuracy}
        save_checkpoint(out_path, state_dict_tensors(model), meta)
    return model, accuracy


def evaluate_classifier(model, episodes, batch_size=64):
    videos, targets = _episode_tensors(episodes)
    correct = {name: 0 for name in HEAD_SIZES}
    with torch.no_grad():
        for lo in range(0, len(episodes), batch_size):
            logits = model(videos[lo : lo + batch_size])
            for name in HEAD_SIZES:
                pred = logits[name].argmax(dim=-1)
                correct[name] += int((pred == targets[name][lo : lo + batch_size]).sum())
    n = max(len(episodes), 1)
    acc = {name: correct[name] / n for name in HEAD_SIZES}
    acc["mean"] = sum(acc[name] for name in HEAD_SIZES) / len(HEAD_SIZES)
    return acc


def load_instruction_classifier(path):
    tensors, meta = load_checkpoint(path)
    model = InstructionClassifier()
    load_state_into(model, tensors)
    model.trained = bool(meta.get("trained", False))
    return model, meta
