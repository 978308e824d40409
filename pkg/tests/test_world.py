"""World generator: determinism, plan validity, and render consistency."""

import numpy as np
import pytest

from eivst.errors import EmptyPlan, ValidationError
from eivst.world import (
    Instruction,
    PlanStep,
    TransitionPlan,
    VOCAB,
    apply_instruction,
    detokenize,
    generate_episode,
    parse_instruction_text,
    proportional_partition,
    render_scene,
    tokenize,
)


def test_generate_episode_is_deterministic(tiny_config):
    # [TRIVIAL] same (seed, config) must give byte-identical episodes.
    a = generate_episode(123, tiny_config)
    b = generate_episode(123, tiny_config)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.masks, b.masks)
    assert a.instruction == b.instruction
    assert a.plan == b.plan


def test_generate_episode_seeds_differ(tiny_config):
    a = generate_episode(1, tiny_config)
    b = generate_episode(2, tiny_config)
    assert not np.array_equal(a.frames, b.frames)


def test_episode_shapes_and_ranges(tiny_config):
    # [TRIVIAL] frames are float32 RGB in [0,1]; masks are boolean per frame.
    ep = generate_episode(7, tiny_config)
    n = tiny_config.world_frames
    px = tiny_config.world_canvas_px
    assert ep.frames.shape == (n, px, px, 3)
    assert ep.frames.dtype == np.float32
    assert float(ep.frames.min()) >= 0.0 and float(ep.frames.max()) <= 1.0
    assert ep.masks.shape == (n, px, px)
    assert ep.masks.dtype == np.bool_


def test_episode_plan_partitions_frames(tiny_config):
    # [DERIVED] every sampled plan is a contiguous partition of [1, N].
    for seed in range(20):
        ep = generate_episode(seed, tiny_config)
        ep.plan.validate(tiny_config.world_frames)


def test_episode_endpoints_match_states(tiny_config):
    # [DERIVED] first/last frames must re-render exactly from the bound states.
    for seed in (3, 11, 29):
        ep = generate_episode(seed, tiny_config)
        first, _ = render_scene(ep.initial_state, tiny_config)
        last, _ = render_scene(ep.target_state, tiny_config)
        assert np.array_equal(ep.frames[0], first)
        assert np.array_equal(ep.frames[-1], last)


def test_target_state_matches_instruction(tiny_config):
    for seed in range(10):
        ep = generate_episode(seed, tiny_config)
        redo = apply_instruction(ep.initial_state, ep.instruction, tiny_config)
        assert redo == ep.target_state


def test_masks_cover_named_entity(tiny_config):
    # The mask should be non-empty on every frame (the named object is always
    # visible) and a strict subset of the canvas.
    ep = generate_episode(5, tiny_config)
    per_frame = ep.masks.reshape(ep.masks.shape[0], -1).sum(axis=1)
    assert (per_frame > 0).all()
    assert (per_frame < ep.masks[0].size).all()


def test_tokenize_round_trip(tiny_config):
    for seed in range(30):
        ep = generate_episode(seed, tiny_config)
        assert detokenize(tokenize(ep.instruction)) == ep.instruction


def test_tokenize_rejects_extra_args():
    bad = Instruction(verb="MOVE", args=("red", "square", "region_tl", "extra"))
    with pytest.raises(ValidationError):
        tokenize(bad)


def test_detokenize_rejects_garbage():
    with pytest.raises(ValidationError):
        detokenize([len(VOCAB) + 3])
    with pytest.raises(ValidationError):
        detokenize([])
    # A verb with a truncated template is invalid too.
    with pytest.raises(ValidationError):
        detokenize(tokenize(parse_instruction_text("MOVE red square to region_tl"))[:2])


def test_parse_instruction_text():
    ins = parse_instruction_text("RECOLOR blue circle to green")
    assert ins.verb == "RECOLOR"
    assert ins.args == ("blue", "circle", "green")
    with pytest.raises(ValidationError):
        parse_instruction_text("RECOLOR blue gizmo to green")


def test_plan_validate_rejections():
    def plan(*ranges):
        return TransitionPlan(steps=tuple(PlanStep("move", s, e) for s, e in ranges))

    plan((1, 4), (5, 8)).validate(8)
    with pytest.raises(ValidationError):
        plan((1, 4), (6, 8)).validate(8)  # gap
    with pytest.raises(ValidationError):
        plan((1, 4), (4, 8)).validate(8)  # overlap
    with pytest.raises(ValidationError):
        plan((1, 4), (5, 7)).validate(8)  # short
    with pytest.raises(ValidationError):
        plan((1, 8), (9, 9), (10, 10), (11, 11), (12, 12)).validate(12)  # k > 4
    with pytest.raises(ValidationError):
        TransitionPlan(steps=(PlanStep("fly", 1, 8),)).validate(8)


def test_proportional_partition_properties():
    # [DERIVED] output is always a contiguous partition with >=1 frame per step.
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(k, 33))
        weights = rng.random(k).tolist()
        ranges = proportional_partition(weights, n)
        assert ranges[0][0] == 1
        assert ranges[-1][1] == n
        for (s0, e0), (s1, e1) in zip(ranges, ranges[1:]):
            assert s1 == e0 + 1
        assert all(e >= s for s, e in ranges)


def test_proportional_partition_exact_quota():
    # [DERIVED] weights 1:3 over 8 frames give 2 and 6 frames.
    assert proportional_partition([1.0, 3.0], 8) == [(1, 2), (3, 8)]
    # Zero weights fall back to an even split.
    assert proportional_partition([0.0, 0.0], 8) == [(1, 4), (5, 8)]


def test_proportional_partition_rejections():
    with pytest.raises(EmptyPlan):
        proportional_partition([], 8)
    with pytest.raises(ValidationError):
        proportional_partition([1.0, 1.0, 1.0], 2)


def test_generate_episode_rejects_tiny_world(tiny_config):
    bad = tiny_config.replace(world_frames=2)
    with pytest.raises(ValidationError):
        generate_episode(0, bad)


def test_instruction_verbs_all_reachable(tiny_config):
    # With enough seeds every verb in the grammar should appear.
    seen = {generate_episode(seed, tiny_config).instruction.verb for seed in range(60)}
    assert seen == {"MOVE", "RECOLOR", "STORE", "RETRIEVE", "SWAP", "MOVE_THEN_RECOLOR"}
