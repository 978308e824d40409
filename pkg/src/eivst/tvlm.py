"""Toy TransitionVLM: frozen small encoder plus state and transition branches.

The encoder ingests patch embeddings of the initial and final frames together
with instruction tokens.  Each branch applies its own adapter and a LoRA-
augmented projection over an identity base, then its prediction heads.  The
transition branch materializes per-step token features F^T_j from learned
query slots; the state branch emits F^S_1 and F^S_N plus state attributes.
"""

import csv
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state_into, save_checkpoint, state_dict_tensors
from .errors import DivergenceError, ShapeError, ValidationError
from .nn import Adapter, LoraLinear, TransformerBlock
from .rng import init_conv_, init_linear_, normal_, np_rng, torch_gen
from .world import (
    COLOR_NAMES,
    K_MAX,
    MAX_INSTRUCTION_LEN,
    PAD_ID,
    PALETTE,
    SHAPES,
    STEP_LABELS,
    PlanStep,
    TransitionPlan,
    VOCAB,
    proportional_partition,
    tokenize,
)

log = logging.getLogger(__name__)

POSITION_BINS = 8
ATTR_SIZES = (len(SHAPES), len(COLOR_NAMES), POSITION_BINS, POSITION_BINS)
SLOTS = 2
STATE_LOGITS = SLOTS * sum(ATTR_SIZES)


class TransitionModel(nn.Module):
    def __init__(self, config, gen=None):
        super().__init__()
        if gen is None:
            gen = torch_gen(config.seed, "tvlm-init")
        d = config.tvlm_dim
        self.config_snapshot = {
            "dim": d,
            "patch": config.tvlm_patch_px,
            "state_tokens": config.tvlm_state_tokens,
            "step_tokens": config.tvlm_step_tokens,
        }
        self.patch = config.tvlm_patch_px
        self.n_patches = (config.world_canvas_px // self.patch) ** 2
        self.state_tokens = config.tvlm_state_tokens
        self.step_tokens = config.tvlm_step_tokens

        self.patch_embed = nn.Conv2d(3, d, self.patch, stride=self.patch)
        init_conv_(self.patch_embed, gen)
        self.role_emb = nn.Parameter(torch.empty(2, d))
        self.patch_pos = nn.Parameter(torch.empty(self.n_patches, d))
        self.tok_emb = nn.Embedding(len(VOCAB), d)
        self.tok_pos = nn.Parameter(torch.empty(MAX_INSTRUCTION_LEN, d))
        for p in (self.role_emb, self.patch_pos, self.tok_pos, self.tok_emb.weight):
            normal_(p, 0.02, gen)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.tvlm_heads, gen=gen)
            for _ in range(config.tvlm_layers)
        )
        self.norm = nn.LayerNorm(d)

        eye = torch.eye(d)
        rank, alpha = config.tvlm_lora_rank, config.tvlm_lora_alpha
        self.s_adapter = Adapter(d, gen=gen)
        self.s_proj = LoraLinear(d, d, rank=rank, alpha=alpha, gen=gen, base_weight=eye)
        self.grid = config.world_canvas_px // self.patch
        self.slot_queries = nn.Parameter(torch.empty(SLOTS, d))
        normal_(self.slot_queries, 0.02, gen)
        self.slot_attn = TransformerBlock(d, config.tvlm_heads, kv_dim=d, gen=gen)
        self.appearance_head = init_linear_(
            nn.Linear(d, len(SHAPES) + len(COLOR_NAMES)), gen)
        self.pos_q = init_linear_(nn.Linear(d, d), gen)
        self.pos_k = init_linear_(nn.Linear(d, d), gen)
        # Near-identity maps from attention marginals over the patch grid to
        # position-bin logits; they only need to absorb the corner offset.
        self.pos_x_head = nn.Linear(self.grid, POSITION_BINS)
        self.pos_y_head = nn.Linear(self.grid, POSITION_BINS)
        for head in (self.pos_x_head, self.pos_y_head):
            with torch.no_grad():
                head.weight.copy_(self._grid_to_bins())
                head.bias.zero_()

        self.t_adapter = Adapter(d, gen=gen)
        self.t_proj = LoraLinear(d, d, rank=rank, alpha=alpha, gen=gen, base_weight=eye)
        self.step_queries = nn.Parameter(torch.empty(K_MAX, self.step_tokens, d))
        normal_(self.step_queries, 0.02, gen)
        self.step_attn = TransformerBlock(d, config.tvlm_heads, kv_dim=d, gen=gen)
        self.k_head = init_linear_(nn.Linear(d, K_MAX), gen)
        self.label_head = init_linear_(nn.Linear(d, len(STEP_LABELS)), gen)
        self.range_head = init_linear_(nn.Linear(d, 2), gen)

    def _grid_to_bins(self):
        """Overlap matrix from patch-grid cells to position bins, scaled."""
        w = torch.zeros(POSITION_BINS, self.grid)
        cell = 1.0 / self.grid
        binw = 1.0 / POSITION_BINS
        for b in range(POSITION_BINS):
            for g in range(self.grid):
                ov = min((b + 1) * binw, (g + 1) * cell) - max(b * binw, g * cell)
                w[b, g] = max(ov, 0.0) / binw
        return 4.0 * w

    # -- encoder -----------------------------------------------------------

    def encode_observation(self, frame_1, frame_n, tokens):
        """Base token features over both frames and the instruction."""
        if tokens.shape[1] > MAX_INSTRUCTION_LEN:
            raise ValidationError(
                f"instruction length {tokens.shape[1]} exceeds {MAX_INSTRUCTION_LEN}"
            )
        p1 = self._embed_frame(frame_1) + self.role_emb[0]
        pn = self._embed_frame(frame_n) + self.role_emb[1]
        te = self.tok_emb(tokens) + self.tok_pos[: tokens.shape[1]]
        x = torch.cat([p1, pn, te], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def _embed_frame(self, frame):
        tokens = self.patch_embed(frame).flatten(2).transpose(1, 2)
        return tokens + self.patch_pos

    # -- branches ----------------------------------------------------------

    def _pool_tokens(self, tokens, target_len):
        length = tokens.shape[1]
        if length == target_len:
            return tokens
        if length % target_len != 0:
            raise ShapeError(f"cannot pool {length} tokens to {target_len}")
        group = length // target_len
        return tokens.reshape(tokens.shape[0], target_len, group, -1).mean(2)

    def state_branch(self, base):
        h = self.s_proj(self.s_adapter(base))
        p = self.n_patches
        g = self.grid
        logits = []
        for frame_tokens in (h[:, :p], h[:, p : 2 * p]):
            q = self.slot_queries.unsqueeze(0).expand(h.shape[0], -1, -1)
            slots = self.slot_attn(q, kv=frame_tokens)
            # Slot-to-patch attention doubles as a location map: its row and
            # column marginals over the patch grid are the position logits, so
            # the position loss trains the attention to localize its object.
            scores = self.pos_q(slots) @ self.pos_k(frame_tokens).transpose(1, 2)
            attn = torch.softmax(scores / math.sqrt(slots.shape[-1]), dim=-1)
            attn = attn.reshape(h.shape[0], SLOTS, g, g)
            logits.append(torch.cat([
                self.appearance_head(slots),
                self.pos_x_head(attn.sum(dim=2)),
                self.pos_y_head(attn.sum(dim=3)),
            ], dim=-1).reshape(h.shape[0], -1))
        return {
            "f_s1": self._pool_tokens(h[:, :p], self.state_tokens),
            "f_sn": self._pool_tokens(h[:, p : 2 * p], self.state_tokens),
            "state_logits": torch.stack(logits, dim=1),
        }

    def transition_branch(self, base):
        h = self.t_proj(self.t_adapter(base))
        k_logits = self.k_head(h.mean(dim=1))
        slot_feats = []
        for j in range(K_MAX):
            queries = self.step_queries[j].unsqueeze(0).expand(h.shape[0], -1, -1)
            slot_feats.append(self.step_attn(queries, kv=h))
        f_t = torch.stack(slot_feats, dim=1)
        pooled = f_t.mean(dim=2)
        return {
            "f_t": f_t,
            "k_logits": k_logits,
            "label_logits": self.label_head(pooled),
            "range_fracs": torch.sigmoid(self.range_head(pooled)),
        }

    def forward(self, frame_1, frame_n, tokens):
        base = self.encode_observation(frame_1, frame_n, tokens)
        out = {"base": base}
        out.update(self.state_branch(base))
        out.update(self.transition_branch(base))
        return out

    def base_parameters(self):
        branch_prefixes = (
            "s_adapter", "s_proj", "slot_queries", "slot_attn",
            "appearance_head", "pos_q", "pos_k", "pos_x_head", "pos_y_head",
            "t_adapter", "t_proj", "step_queries", "step_attn",
            "k_head", "label_head", "range_head",
        )
        for name, p in self.named_parameters():
            if not name.startswith(branch_prefixes):
                yield name, p


# ---------------------------------------------------------------------------
# Targets and batching

def _color_index(rgb):
    for i, name in enumerate(COLOR_NAMES):
        if tuple(rgb) == PALETTE[name]:
            return i
    raise ValidationError(f"color {rgb!r} is not a palette color")


def _position_bin(value, canvas):
    cell = canvas / POSITION_BINS
    return min(POSITION_BINS - 1, max(0, int(value // cell)))


def _named_keys(instruction, role):
    """(color rgb, shape) lookup keys for the named object(s) in one state.

    A recolor rewrites the named object's color, so the key for the target
    state uses the destination color.
    """
    args = instruction.args
    if instruction.verb == "SWAP":
        return [(PALETTE[args[0]], args[1]), (PALETTE[args[2]], args[3])]
    color = args[0]
    if role == "target" and instruction.verb in ("RECOLOR", "MOVE_THEN_RECOLOR"):
        color = args[-1]
    return [(PALETTE[color], args[1])]


def slot_order(state, instruction, role):
    """Deterministic slot assignment: named object(s) first, then the rest.

    Naming is by appearance match against the instruction, which the model
    can resolve by content alone; raster order breaks the rare tie where a
    recolor leaves both objects looking identical.
    """
    keys = _named_keys(instruction, role)

    def rank(i):
        obj = state.objects[i]
        for r, (rgb, shape) in enumerate(keys):
            if obj.shape == shape and tuple(obj.color) == rgb:
                return r
        return len(keys)

    return sorted(
        range(len(state.objects)),
        key=lambda i: (rank(i), state.objects[i].position[1],
                       state.objects[i].position[0]),
    )


def state_targets(episode, canvas):
    """Integer targets (2 states, 2 slots, 4 attrs) for one episode."""
    out = np.zeros((2, SLOTS, 4), dtype=np.int64)
    states = (("initial", episode.initial_state), ("target", episode.target_state))
    for s_idx, (role, state) in enumerate(states):
        order = slot_order(state, episode.instruction, role)
        for slot, obj_idx in enumerate(order):
            obj = state.objects[obj_idx]
            out[s_idx, slot, 0] = SHAPES.index(obj.shape)
            out[s_idx, slot, 1] = _color_index(obj.color)
            out[s_idx, slot, 2] = _position_bin(obj.position[0], canvas)
            out[s_idx, slot, 3] = _position_bin(obj.position[1], canvas)
    return out


def episodes_to_batch(episodes, config, with_states=False):
    """Stack episodes into model input tensors (and targets if states exist)."""
    canvas = config.world_canvas_px
    i1 = torch.stack([
        torch.from_numpy(ep.frames[0]).permute(2, 0, 1) for ep in episodes
    ])
    i_n = torch.stack([
        torch.from_numpy(ep.frames[-1]).permute(2, 0, 1) for ep in episodes
    ])
    tokens = torch.full((len(episodes), MAX_INSTRUCTION_LEN), PAD_ID, dtype=torch.long)
    for b, ep in enumerate(episodes):
        ids = tokenize(ep.instruction)
        tokens[b, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    batch = {"i1": i1, "i_n": i_n, "tokens": tokens}

    n = config.world_frames
    k_target = torch.tensor([ep.plan.k - 1 for ep in episodes], dtype=torch.long)
    labels = torch.full((len(episodes), K_MAX), -1, dtype=torch.long)
    ranges = torch.zeros(len(episodes), K_MAX, 2)
    step_mask = torch.zeros(len(episodes), K_MAX)
    for b, ep in enumerate(episodes):
        for j, step in enumerate(ep.plan.steps):
            labels[b, j] = STEP_LABELS.index(step.label)
            ranges[b, j, 0] = (step.start - 1) / n
            ranges[b, j, 1] = step.end / n
            step_mask[b, j] = 1.0
    batch.update({"k_target": k_target, "labels": labels,
                  "ranges": ranges, "step_mask": step_mask})

    if with_states:
        st = np.stack([state_targets(ep, canvas) for ep in episodes])
        batch["state_targets"] = torch.from_numpy(st)
    return batch


def _split_state_logits(state_logits):
    """(B, 2, STATE_LOGITS) -> list of (B, 2, SLOTS, size) per attribute."""
    b = state_logits.shape[0]
    per_slot = state_logits.reshape(b, 2, SLOTS, sum(ATTR_SIZES))
    chunks = []
    offset = 0
    for size in ATTR_SIZES:
        chunks.append(per_slot[..., offset : offset + size])
        offset += size
    return chunks


def transition_losses(out, batch):
    """The four loss terms: state CE, K CE, step-label CE, range L1."""
    chunks = _split_state_logits(out["state_logits"])
    state_loss = 0.0
    for attr, logits in enumerate(chunks):
        target = batch["state_targets"][..., attr]
        state_loss = state_loss + F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), target.reshape(-1)
        )
    state_loss = state_loss / len(chunks)

    k_loss = F.cross_entropy(out["k_logits"], batch["k_target"])

    mask = batch["step_mask"]
    label_logits = out["label_logits"].reshape(-1, len(STEP_LABELS))
    label_target = batch["labels"].reshape(-1)
    label_loss = F.cross_entropy(label_logits, label_target.clamp(min=0), reduction="none")
    label_loss = (label_loss * mask.reshape(-1)).sum() / mask.sum().clamp(min=1.0)

    range_err = (out["range_fracs"] - batch["ranges"]).abs().sum(-1)
    range_loss = (range_err * mask).sum() / mask.sum().clamp(min=1.0)

    return state_loss, k_loss, label_loss, range_loss


# ---------------------------------------------------------------------------
# Range repair and plan prediction

def _start_order(fracs):
    return sorted(range(len(fracs)), key=lambda j: (fracs[j][0], j))


def repair_ranges(fracs, n_frames):
    """Turn per-step (start, end) fractions into a valid frame partition.

    Steps are ordered by predicted start, lengths taken as max(end - start, 0)
    and allocated by largest remainder; degenerate steps are repaired to
    single-frame ranges.  Ranges come back in temporal order.
    """
    fracs = [(float(s), float(e)) for s, e in fracs]
    if not fracs:
        raise ValidationError("cannot repair an empty range list")
    lengths = []
    degenerate = False
    for j in _start_order(fracs):
        s, e = fracs[j]
        if e < s:
            degenerate = True
        lengths.append(max(e - s, 0.0))
    if degenerate:
        log.debug("degenerate predicted range (end < start) repaired to one frame")
    return proportional_partition(lengths, n_frames, min_first=1)


def predict_plan(out, n_frames, sample_index=0, force_k=None):
    """Decode one sample's predicted TransitionPlan from model outputs."""
    k = force_k if force_k is not None else int(out["k_logits"][sample_index].argmax()) + 1
    k = max(1, min(K_MAX, k))
    fracs = out["range_fracs"][sample_index, :k].detach().cpu().tolist()
    ranges = repair_ranges(fracs, n_frames)
    label_ids = out["label_logits"][sample_index, :k].argmax(dim=-1).cpu().tolist()
    labels = [label_ids[j] for j in _start_order(fracs)]
    steps = tuple(
        PlanStep(label=STEP_LABELS[l], start=s, end=e)
        for l, (s, e) in zip(labels, ranges)
    )
    return TransitionPlan(steps=steps)


# ---------------------------------------------------------------------------
# Training

def _param_groups(model):
    adapters, lora = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if "lora_A" in name or "lora_B" in name:
            lora.append(p)
        else:
            adapters.append(p)
    return adapters, lora


def train_transition_model(episodes, config, out_path, loss_csv=None):
    """Warm-train the whole model, freeze the base, then tune branches.

    Episodes must carry scene states (training targets need them).  Returns
    the trained model; writes the checkpoint and an optional loss CSV.
    """
    if not episodes:
        raise ValidationError("transition-model training needs a nonempty dataset")
    for ep in episodes:
        if ep.initial_state is None or ep.target_state is None:
            raise ValidationError("episodes must carry scene states for training")

    model = TransitionModel(config, gen=torch_gen(config.seed, "tvlm-init"))
    n = len(episodes)
    steps_per_epoch = max(1, math.ceil(n / config.tvlm_batch))
    total_steps = config.tvlm_epochs * steps_per_epoch
    warm_steps = int(round(config.tvlm_warm_frac * total_steps))

    optimizer = torch.optim.Adam(model.parameters(), lr=config.tvlm_warm_lr)
    frozen = False
    rows = []
    last_good = state_dict_tensors(model, prefix="tvlm.")

    for step in range(total_steps):
        if not frozen and step >= warm_steps:
            for _, p in model.base_parameters():
                p.requires_grad_(False)
            adapters, lora = _param_groups(model)
            optimizer = torch.optim.Adam([
                {"params": adapters, "lr": config.tvlm_adapter_lr},
                {"params": lora, "lr": config.tvlm_lora_lr},
            ])
            frozen = True

        idx = np_rng(config.seed, "tvlm-batch", step).integers(0, n, size=min(config.tvlm_batch, n))
        batch = episodes_to_batch([episodes[i] for i in idx], config, with_states=True)
        out = model(batch["i1"], batch["i_n"], batch["tokens"])
        state_loss, k_loss, label_loss, range_loss = transition_losses(out, batch)
        loss = state_loss + k_loss + label_loss + range_loss

        if not torch.isfinite(loss):
            save_checkpoint(out_path, last_good, {
                "kind": "tvlm", "status": "diverged", "step": step,
                "config_hash": config.config_hash(),
            })
            raise DivergenceError(f"transition-model loss became non-finite at step {step}")

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last_good = state_dict_tensors(model, prefix="tvlm.")
        rows.append((step, "warm" if not frozen else "tuned",
                     loss.item(), state_loss.item(), k_loss.item(),
                     label_loss.item(), range_loss.item()))

    save_checkpoint(out_path, state_dict_tensors(model, prefix="tvlm."), {
        "kind": "tvlm", "status": "trained", "steps": total_steps,
        "warm_steps": warm_steps, "config_hash": config.config_hash(),
    })
    if loss_csv is not None:
        with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "phase", "total", "state", "k", "label", "range"])
            writer.writerows(rows)
    return model


def load_transition_model(path, config):
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    model = TransitionModel(config)
    load_state_into(model, tensors, prefix="tvlm.")
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# Evaluation

def _range_iou(a, b):
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union if union else 0.0


def evaluate_transition_model(model, episodes, config, batch_size=64):
    """Held-out metrics: state accuracy, range IoU, K and label accuracy."""
    n_frames = config.world_frames
    correct_attrs = 0
    total_attrs = 0
    ious = []
    k_hits = 0
    label_hits = 0
    label_total = 0
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(episodes), batch_size):
            chunk = episodes[lo : lo + batch_size]
            batch = episodes_to_batch(chunk, config, with_states=True)
            out = model(batch["i1"], batch["i_n"], batch["tokens"])
            preds = torch.cat([
                c.argmax(dim=-1, keepdim=True) for c in _split_state_logits(out["state_logits"])
            ], dim=-1)
            correct_attrs += (preds == batch["state_targets"]).sum().item()
            total_attrs += batch["state_targets"].numel()
            k_pred = out["k_logits"].argmax(dim=-1) + 1
            for b, ep in enumerate(chunk):
                k_true = ep.plan.k
                if int(k_pred[b]) == k_true:
                    k_hits += 1
                plan = predict_plan(out, n_frames, sample_index=b)
                pred_ranges = [(s.start, s.end) for s in plan.steps]
                true_ranges = [(s.start, s.end) for s in ep.plan.steps]
                pred_labels = [s.label for s in plan.steps]
                paired = min(len(pred_ranges), len(true_ranges))
                total = max(len(pred_ranges), len(true_ranges))
                sample_iou = sum(
                    _range_iou(pred_ranges[j], true_ranges[j]) for j in range(paired)
                ) / total
                ious.append(sample_iou)
                for j in range(paired):
                    label_total += 1
                    if pred_labels[j] == ep.plan.steps[j].label:
                        label_hits += 1
    return {
        "state_accuracy": correct_attrs / max(total_attrs, 1),
        "range_iou": float(np.mean(ious)) if ious else 0.0,
        "k_accuracy": k_hits / max(len(episodes), 1),
        "label_accuracy": label_hits / max(label_total, 1),
    }
