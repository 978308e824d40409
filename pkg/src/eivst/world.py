"""Procedural tabletop world: scenes, instructions, plans, rendering, episodes.

A scene holds two movable objects and one lidded container on a small canvas.
Six verbs decompose into one to four canonical steps; episodes interpolate the
step keyframes linearly and rasterize without anti-aliasing, so frames, masks,
and plans are exact ground truth.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyPlan,
    InconsistentStates,
    NoTransition,
    OutOfBounds,
    ShapeError,
    ValidationError,
)

VERBS = ("MOVE", "RECOLOR", "STORE", "RETRIEVE", "SWAP", "MOVE_THEN_RECOLOR")
SHAPES = ("square", "circle", "triangle")
REGIONS = ("region_tl", "region_tr", "region_bl", "region_br")
KEYWORDS = ("to", "into", "from", "with", "then", "container")
PAD_TOKEN = "<pad>"

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.15, 0.85),
}
COLOR_NAMES = tuple(PALETTE)

BACKGROUND = (0.12, 0.12, 0.14)
WALL_COLOR = (0.55, 0.55, 0.55)
LID_COLOR = (0.78, 0.74, 0.62)

VOCAB = VERBS + KEYWORDS + COLOR_NAMES + SHAPES + REGIONS + (PAD_TOKEN,)
TOKEN_ID = {sym: i for i, sym in enumerate(VOCAB)}
PAD_ID = TOKEN_ID[PAD_TOKEN]
MAX_INSTRUCTION_LEN = 8

STEP_LABELS = ("move", "recolor", "open_lid", "insert", "extract", "close_lid")
STEP_LABEL_ID = {label: i for i, label in enumerate(STEP_LABELS)}

# Canonical per-step durations in abstract units.
STEP_DURATION = {
    "move": 1.2,
    "insert": 1.2,
    "extract": 1.2,
    "open_lid": 1.0,
    "close_lid": 1.0,
    "recolor": 1.0,
}

K_MAX = 4


@dataclass
class WorldObject:
    id: str
    shape: str
    color: tuple
    position: tuple
    size: int


@dataclass
class Container:
    id: str
    position: tuple
    size: int
    lid_angle: float
    contents: tuple = ()


@dataclass
class SceneState:
    objects: list = field(default_factory=list)
    containers: list = field(default_factory=list)

    def find_object(self, color_name, shape):
        rgb = PALETTE[color_name]
        hits = [o for o in self.objects if o.shape == shape and o.color == rgb]
        if len(hits) != 1:
            raise InconsistentStates(
                f"expected exactly one {color_name} {shape}, found {len(hits)}"
            )
        return hits[0]

    def copy(self):
        return SceneState(
            objects=[replace(o) for o in self.objects],
            containers=[replace(c) for c in self.containers],
        )


@dataclass(frozen=True)
class Instruction:
    verb: str
    args: tuple

    @property
    def tokens(self):
        return tokenize(self)


@dataclass(frozen=True)
class PlanStep:
    label: str
    start: int
    end: int


@dataclass(frozen=True)
class TransitionPlan:
    steps: tuple

    @property
    def k(self):
        return len(self.steps)

    def validate(self, n_frames):
        if not 1 <= self.k <= K_MAX:
            raise ValidationError(f"plan has {self.k} steps, expected 1..{K_MAX}")
        prev_end = 0
        for step in self.steps:
            if step.label not in STEP_LABEL_ID:
                raise ValidationError(f"unknown step label {step.label!r}")
            if step.start != prev_end + 1 or step.end < step.start:
                raise ValidationError(f"ranges do not partition [1,{n_frames}]")
            prev_end = step.end
        if prev_end != n_frames:
            raise ValidationError(f"ranges do not partition [1,{n_frames}]")


@dataclass
class Episode:
    frames: np.ndarray
    instruction: Instruction
    plan: TransitionPlan
    masks: np.ndarray
    initial_state: SceneState = None
    target_state: SceneState = None


# ---------------------------------------------------------------------------
# Instruction grammar

_GRAMMAR = {
    "MOVE": ("color", "shape", "to", "region"),
    "RECOLOR": ("color", "shape", "to", "color"),
    "STORE": ("color", "shape", "into", "container"),
    "RETRIEVE": ("color", "shape", "from", "container", "to", "region"),
    "SWAP": ("color", "shape", "with", "color", "shape"),
    "MOVE_THEN_RECOLOR": ("color", "shape", "to", "region", "then", "color"),
}


def _symbol_class(sym):
    if sym in COLOR_NAMES:
        return "color"
    if sym in SHAPES:
        return "shape"
    if sym in REGIONS:
        return "region"
    return sym


def tokenize(instruction):
    """Encode an Instruction as vocabulary ids."""
    template = _GRAMMAR[instruction.verb]
    args = list(instruction.args)
    symbols = [instruction.verb]
    for slot in template:
        if slot in ("color", "shape", "region"):
            symbols.append(args.pop(0))
        else:
            symbols.append(slot)
    if args:
        raise ValidationError(f"too many arguments for {instruction.verb}")
    return [TOKEN_ID[s] for s in symbols]


def detokenize(tokens):
    """Decode vocabulary ids back into an Instruction."""
    symbols = []
    for t in tokens:
        if not 0 <= t < len(VOCAB):
            raise ValidationError(f"token id {t} out of vocabulary")
        symbols.append(VOCAB[t])
    if not symbols or symbols[0] not in _GRAMMAR:
        raise ValidationError("instruction must start with a verb")
    verb = symbols[0]
    template = _GRAMMAR[verb]
    if len(symbols) != len(template) + 1:
        raise ValidationError(f"{verb} instruction has wrong length {len(symbols)}")
    args = []
    for slot, sym in zip(template, symbols[1:]):
        cls = _symbol_class(sym)
        if slot in ("color", "shape", "region"):
            if cls != slot:
                raise ValidationError(f"expected a {slot}, got {sym!r}")
            args.append(sym)
        elif sym != slot:
            raise ValidationError(f"expected keyword {slot!r}, got {sym!r}")
    return Instruction(verb=verb, args=tuple(args))


def parse_instruction_text(text):
    """Parse a space-separated symbol string, e.g. 'MOVE red square to region_tl'."""
    symbols = text.split()
    unknown = [s for s in symbols if s not in TOKEN_ID]
    if unknown:
        raise ValidationError(f"unknown instruction symbols: {unknown}")
    return detokenize([TOKEN_ID[s] for s in symbols])


# ---------------------------------------------------------------------------
# Geometry and rendering

def _stencil(shape, size):
    """Binary footprint of a shape in a size x size box, no anti-aliasing."""
    s = np.zeros((size, size), dtype=bool)
    if shape == "square":
        s[:, :] = True
    elif shape == "circle":
        c = size / 2.0
        r2 = (size / 2.0) ** 2
        yy, xx = np.mgrid[0:size, 0:size]
        s = ((yy + 0.5 - c) ** 2 + (xx + 0.5 - c) ** 2) <= r2
    elif shape == "triangle":
        c = size / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        half_w = (yy + 1) / 2.0
        s = np.abs(xx + 0.5 - c) <= half_w
    else:
        raise ValidationError(f"unknown shape {shape!r}")
    return s


_STENCILS = {}


def stencil(shape, size):
    key = (shape, size)
    if key not in _STENCILS:
        _STENCILS[key] = _stencil(shape, size)
    return _STENCILS[key]


def container_geometry(container):
    """(wall mask offsets, interior origin, interior size) for a container."""
    n = container.size
    walls = np.zeros((n, n), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    return walls, 1, n - 2


def interior_center_position(container, obj_size):
    x, y = container.position
    off = (container.size - obj_size) / 2.0
    return (x + off, y + off)


def _lid_rows(container):
    _, _, inner = container_geometry(container)
    frac = math.cos(math.radians(container.lid_angle))
    return int(round(frac * inner))


def _rounded(position):
    return (int(round(position[0])), int(round(position[1])))


def render_scene(state, config):
    """Rasterize a scene; returns (frame H x W x 3 float32, masks id -> bool map).

    Masks are stencil footprints (placement maps), independent of draw order,
    so a translated rigid object keeps its pixel count under any occlusion.
    """
    hw = config.world_canvas_px
    frame = np.empty((hw, hw, 3), dtype=np.float32)
    frame[:, :] = np.asarray(BACKGROUND, dtype=np.float32)
    masks = {}

    def blit(mask_local, x, y, color, mask_key):
        h, w = mask_local.shape
        if x < 0 or y < 0 or x + w > hw or y + h > hw:
            raise OutOfBounds(f"entity {mask_key!r} at ({x},{y}) leaves the canvas")
        full = np.zeros((hw, hw), dtype=bool)
        full[y : y + h, x : x + w] = mask_local
        if mask_key is not None:
            masks[mask_key] = masks.get(mask_key, np.zeros((hw, hw), dtype=bool)) | full
        return full

    contained_ids = set()
    for cont in state.containers:
        contained_ids.update(cont.contents)

    # Containers: walls first, mask includes walls plus current lid cover.
    for cont in state.containers:
        walls, _, _ = container_geometry(cont)
        x, y = _rounded(cont.position)
        region = blit(walls, x, y, WALL_COLOR, cont.id)
        frame[region] = np.asarray(WALL_COLOR, dtype=np.float32)

    # Contained objects render beneath the lid.
    def draw_object(obj):
        sten = stencil(obj.shape, obj.size)
        x, y = _rounded(obj.position)
        region = blit(sten, x, y, obj.color, obj.id)
        frame[region] = np.asarray(obj.color, dtype=np.float32)

    for obj in state.objects:
        if obj.id in contained_ids:
            draw_object(obj)

    for cont in state.containers:
        rows = _lid_rows(cont)
        if rows > 0:
            _, off, inner = container_geometry(cont)
            lid = np.ones((rows, inner), dtype=bool)
            x, y = _rounded(cont.position)
            region = blit(lid, x + off, y + off, LID_COLOR, cont.id)
            frame[region] = np.asarray(LID_COLOR, dtype=np.float32)

    for obj in state.objects:
        if obj.id not in contained_ids:
            draw_object(obj)

    return frame, masks


# ---------------------------------------------------------------------------
# Planning

def proportional_partition(weights, n_frames, min_first=1):
    """Split [1, n_frames] into len(weights) consecutive ranges.

    Frame quotas are proportional to weights and rounded by largest remainder
    (ties toward lower index); every step keeps at least one frame and the
    first at least min_first.
    """
    k = len(weights)
    if k == 0:
        raise EmptyPlan("cannot partition frames over zero steps")
    mins = [1] * k
    mins[0] = max(1, min_first)
    if n_frames < sum(mins):
        raise ValidationError(f"{n_frames} frames cannot host {k} steps")
    total = float(sum(weights))
    if total <= 0:
        quotas = [n_frames / k] * k
    else:
        quotas = [n_frames * float(w) / total for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n_frames - sum(counts)
    order = sorted(range(k), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[:leftover]:
        counts[j] += 1
    # Repair any count under its minimum by taking from the largest surplus.
    for j in range(k):
        while counts[j] < mins[j]:
            donor = max(range(k), key=lambda i: (counts[i] - mins[i], -i))
            counts[donor] -= 1
            counts[j] += 1
    ranges = []
    start = 1
    for c in counts:
        ranges.append((start, start + c - 1))
        start += c
    return ranges


def _verb_step_labels(verb):
    return {
        "MOVE": ("move",),
        "RECOLOR": ("recolor",),
        "MOVE_THEN_RECOLOR": ("move", "recolor"),
        "STORE": ("open_lid", "insert", "close_lid"),
        "RETRIEVE": ("open_lid", "extract", "close_lid"),
        "SWAP": ("move", "move", "move", "move"),
    }[verb]


def region_position(region, config):
    """Top-left position of an object centered in the named quadrant."""
    q = config.world_canvas_px // 4
    half = config.world_object_px // 2
    centers = {
        "region_tl": (q, q),
        "region_tr": (3 * q, q),
        "region_bl": (q, 3 * q),
        "region_br": (3 * q, 3 * q),
    }
    cx, cy = centers[region]
    return (cx - half, cy - half)


def _aabb_overlap(pos_a, size_a, pos_b, size_b):
    ax, ay = pos_a
    bx, by = pos_b
    return ax < bx + size_b and bx < ax + size_a and ay < by + size_b and by < ay + size_a


def _staging_candidates(config):
    q = config.world_canvas_px // 4
    half = config.world_object_px // 2
    centers = [
        (q, q), (3 * q, q), (q, 3 * q), (3 * q, 3 * q),
        (2 * q, q), (2 * q, 3 * q), (q, 2 * q), (3 * q, 2 * q),
    ]
    return [(cx - half, cy - half) for cx, cy in centers]


def _swap_stagings(state, obj_a, obj_b, config):
    """First two collision-free staging spots from a fixed candidate scan."""
    size = obj_a.size
    blockers = [(obj_a.position, obj_a.size), (obj_b.position, obj_b.size)]
    blockers += [(c.position, c.size) for c in state.containers]
    picked = []
    for cand in _staging_candidates(config):
        if any(_aabb_overlap(cand, size, p, s) for p, s in blockers + [(c, size) for c in picked]):
            continue
        picked.append(cand)
        if len(picked) == 2:
            return picked
    raise InconsistentStates("no collision-free staging spots for SWAP")


def decompose(initial, instruction, config):
    """Keyframes after each canonical step: list of (label, SceneState)."""
    verb = instruction.verb
    labels = _verb_step_labels(verb)
    cur = initial.copy()
    out = []

    def emit(label, state):
        out.append((label, state.copy()))
        return state

    if verb in ("MOVE", "MOVE_THEN_RECOLOR"):
        color, shape = instruction.args[0], instruction.args[1]
        region = instruction.args[2]
        obj = cur.find_object(color, shape)
        obj.position = tuple(float(v) for v in region_position(region, config))
        cur = emit("move", cur)
        if verb == "MOVE_THEN_RECOLOR":
            obj = cur.find_object(color, shape)
            obj.color = PALETTE[instruction.args[3]]
            cur = emit("recolor", cur)
    elif verb == "RECOLOR":
        color, shape, new_color = instruction.args
        obj = cur.find_object(color, shape)
        obj.color = PALETTE[new_color]
        cur = emit("recolor", cur)
    elif verb == "STORE":
        color, shape = instruction.args
        obj = cur.find_object(color, shape)
        if not cur.containers:
            raise InconsistentStates("STORE requires a container")
        cont = cur.containers[0]
        if obj.id in cont.contents:
            raise InconsistentStates("object is already stored")
        if cont.contents:
            raise InconsistentStates("container is occupied")
        cont.lid_angle = 90.0
        cur = emit("open_lid", cur)
        obj = cur.find_object(color, shape)
        cont = cur.containers[0]
        obj.position = interior_center_position(cont, obj.size)
        cont.contents = cont.contents + (obj.id,)
        cur = emit("insert", cur)
        cur.containers[0].lid_angle = 0.0
        cur = emit("close_lid", cur)
    elif verb == "RETRIEVE":
        color, shape, region = instruction.args
        obj = cur.find_object(color, shape)
        if not cur.containers:
            raise InconsistentStates("RETRIEVE requires a container")
        cont = cur.containers[0]
        if obj.id not in cont.contents:
            raise InconsistentStates("object is not in the container")
        cont.lid_angle = 90.0
        cur = emit("open_lid", cur)
        obj = cur.find_object(color, shape)
        cont = cur.containers[0]
        obj.position = tuple(float(v) for v in region_position(region, config))
        cont.contents = tuple(i for i in cont.contents if i != obj.id)
        cur = emit("extract", cur)
        cur.containers[0].lid_angle = 0.0
        cur = emit("close_lid", cur)
    elif verb == "SWAP":
        c1, s1, c2, s2 = instruction.args
        obj_a = cur.find_object(c1, s1)
        obj_b = cur.find_object(c2, s2)
        pos_a, pos_b = obj_a.position, obj_b.position
        stage_a, stage_b = _swap_stagings(cur, obj_a, obj_b, config)
        obj_a.position = tuple(float(v) for v in stage_a)
        cur = emit("move", cur)
        cur.find_object(c2, s2).position = tuple(float(v) for v in stage_b)
        cur = emit("move", cur)
        cur.find_object(c1, s1).position = pos_b
        cur = emit("move", cur)
        cur.find_object(c2, s2).position = pos_a
        cur = emit("move", cur)
    else:
        raise ValidationError(f"unknown verb {verb!r}")

    assert tuple(label for label, _ in out) == labels
    return out


def apply_instruction(initial, instruction, config):
    """Final state after executing the instruction on the initial state."""
    return decompose(initial, instruction, config)[-1][1]


def plan_transition(initial, target, instruction, n_frames, config=None):
    """Canonical K-step plan with ranges partitioning [1, n_frames]."""
    if config is None:
        from .config import RunConfig

        config = RunConfig()
    if initial == target:
        raise NoTransition("initial and target states are identical")
    keyframes = decompose(initial, instruction, config)
    if keyframes[-1][1] != target:
        raise InconsistentStates("target does not match the instruction applied to initial")
    labels = [label for label, _ in keyframes]
    durations = [STEP_DURATION[label] for label in labels]
    min_first = 2 if len(labels) >= 2 else 1
    ranges = proportional_partition(durations, n_frames, min_first=min_first)
    steps = tuple(
        PlanStep(label=l, start=s, end=e) for l, (s, e) in zip(labels, ranges)
    )
    plan = TransitionPlan(steps=steps)
    plan.validate(n_frames)
    return plan


# ---------------------------------------------------------------------------
# Interpolation and episode generation

def _lerp(a, b, f):
    return a + (b - a) * f


def interpolate_states(state_a, state_b, f):
    """Linear blend of two keyframe states; exact copies at f == 0 and f == 1.

    Discrete fields (container contents) come from state_a until f reaches 1.
    """
    if f <= 0.0:
        return state_a.copy()
    if f >= 1.0:
        return state_b.copy()
    out = state_a.copy()
    for obj, oa, ob in zip(out.objects, state_a.objects, state_b.objects):
        obj.position = (
            _lerp(oa.position[0], ob.position[0], f),
            _lerp(oa.position[1], ob.position[1], f),
        )
        obj.color = tuple(_lerp(ca, cb, f) for ca, cb in zip(oa.color, ob.color))
    for cont, ca, cb in zip(out.containers, state_a.containers, state_b.containers):
        cont.lid_angle = _lerp(ca.lid_angle, cb.lid_angle, f)
    return out


def _named_entity_ids(state, instruction):
    ids = []
    if instruction.verb == "SWAP":
        c1, s1, c2, s2 = instruction.args
        ids.append(state.find_object(c1, s1).id)
        ids.append(state.find_object(c2, s2).id)
    else:
        color, shape = instruction.args[0], instruction.args[1]
        ids.append(state.find_object(color, shape).id)
        if instruction.verb in ("STORE", "RETRIEVE"):
            ids.append(state.containers[0].id)
    return ids


def render_episode_frames(initial, instruction, plan, config):
    """Render all frames and instruction masks for a planned episode."""
    n = plan.steps[-1].end
    hw = config.world_canvas_px
    keyframes = [initial] + [s for _, s in decompose(initial, instruction, config)]
    named = _named_entity_ids(initial, instruction)
    frames = np.empty((n, hw, hw, 3), dtype=np.float32)
    masks = np.zeros((n, hw, hw), dtype=bool)
    for j, step in enumerate(plan.steps):
        for i in range(step.start, step.end + 1):
            if step.end > step.start:
                f = (i - step.start) / (step.end - step.start)
            else:
                f = 1.0
            state = interpolate_states(keyframes[j], keyframes[j + 1], f)
            frame, obj_masks = render_scene(state, config)
            frames[i - 1] = frame
            m = np.zeros((hw, hw), dtype=bool)
            for entity_id in named:
                if entity_id in obj_masks:
                    m |= obj_masks[entity_id]
            masks[i - 1] = m
    return frames, masks


def _sample_free_position(rng, config, blockers, size):
    hi = config.world_canvas_px - size
    for _ in range(64):
        pos = (int(rng.integers(0, hi + 1)), int(rng.integers(0, hi + 1)))
        if not any(_aabb_overlap(pos, size, p, s) for p, s in blockers):
            return pos
    raise InconsistentStates("could not place an object without overlap")


def _sample_scene_and_instruction(rng, config):
    size = config.world_object_px
    canvas = config.world_canvas_px
    cont_size = size + 4
    verb = VERBS[int(rng.integers(len(VERBS)))]

    cont_pos = (
        int(rng.integers(1, canvas - cont_size)),
        int(rng.integers(1, canvas - cont_size)),
    )
    box = Container(id="box", position=tuple(float(v) for v in cont_pos),
                    size=cont_size, lid_angle=0.0, contents=())

    def draw_pair():
        return (COLOR_NAMES[int(rng.integers(8))], SHAPES[int(rng.integers(3))])

    pairs = [draw_pair()]
    while True:
        cand = draw_pair()
        if cand != pairs[0]:
            pairs.append(cand)
            break

    blockers = [(cont_pos, cont_size)]
    objects = []
    for idx, (color, shape) in enumerate(pairs):
        pos = _sample_free_position(rng, config, blockers, size)
        blockers.append((pos, size))
        objects.append(WorldObject(
            id=f"obj_{idx}", shape=shape, color=PALETTE[color],
            position=tuple(float(v) for v in pos), size=size,
        ))
    state = SceneState(objects=objects, containers=[box])

    target_idx = int(rng.integers(2))
    color, shape = pairs[target_idx]
    other_color, other_shape = pairs[1 - target_idx]

    if verb == "MOVE" or verb == "MOVE_THEN_RECOLOR":
        order = rng.permutation(len(REGIONS))
        chosen = None
        for region in (REGIONS[int(o)] for o in order):
            dest = region_position(region, config)
            if dest == _rounded(objects[target_idx].position):
                continue
            others = [(objects[1 - target_idx].position, size), (cont_pos, cont_size)]
            if any(_aabb_overlap(dest, size, p, s) for p, s in others):
                continue
            chosen = region
            break
        if chosen is None:
            raise InconsistentStates("no free destination region")
        if verb == "MOVE":
            instr = Instruction("MOVE", (color, shape, chosen))
        else:
            new_color = COLOR_NAMES[int(rng.integers(8))]
            while new_color == color:
                new_color = COLOR_NAMES[int(rng.integers(8))]
            instr = Instruction("MOVE_THEN_RECOLOR", (color, shape, chosen, new_color))
    elif verb == "RECOLOR":
        new_color = COLOR_NAMES[int(rng.integers(8))]
        while new_color == color:
            new_color = COLOR_NAMES[int(rng.integers(8))]
        instr = Instruction("RECOLOR", (color, shape, new_color))
    elif verb == "STORE":
        instr = Instruction("STORE", (color, shape))
    elif verb == "RETRIEVE":
        # Rebuild the scene with the chosen object already stored.
        obj = state.objects[target_idx]
        obj.position = interior_center_position(box, size)
        box.contents = (obj.id,)
        order = rng.permutation(len(REGIONS))
        chosen = None
        for region in (REGIONS[int(o)] for o in order):
            dest = region_position(region, config)
            others = [(state.objects[1 - target_idx].position, size), (cont_pos, cont_size)]
            if any(_aabb_overlap(dest, size, p, s) for p, s in others):
                continue
            chosen = region
            break
        if chosen is None:
            raise InconsistentStates("no free destination region")
        instr = Instruction("RETRIEVE", (color, shape, chosen))
    else:  # SWAP
        instr = Instruction("SWAP", (color, shape, other_color, other_shape))

    return state, instr


def generate_episode(seed, config):
    """Sample a full episode; a pure function of (seed, config)."""
    if config.world_frames < 4 or config.world_canvas_px < 16:
        raise ValidationError("world config requires N >= 4 and canvas >= 16")
    rng = np.random.default_rng(int(seed))
    last_err = None
    for _ in range(128):
        try:
            initial, instruction = _sample_scene_and_instruction(rng, config)
            target = apply_instruction(initial, instruction, config)
            plan = plan_transition(
                initial, target, instruction, config.world_frames, config
            )
            frames, masks = render_episode_frames(initial, instruction, plan, config)
            return Episode(
                frames=frames,
                instruction=instruction,
                plan=plan,
                masks=masks,
                initial_state=initial,
                target_state=target,
            )
        except (InconsistentStates, NoTransition, OutOfBounds, ValidationError) as err:
            last_err = err
    raise InconsistentStates(f"episode sampling failed repeatedly: {last_err}")
