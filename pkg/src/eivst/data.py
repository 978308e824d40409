"""Dataset container: lossless binary round trip for episode collections.

Layout (all integers little-endian): header {magic "EIVST\\0", version u16,
episode count u32, N u16, H u16, W u16}, then per episode the instruction
tokens (u16 length + u16 ids), the plan (u8 K, per step u8 label + u16 start
+ u16 end), frames as float32 row-major, and masks bit-packed per row (MSB
first, rows padded to whole bytes).
"""

import struct

import numpy as np

from .errors import DecodeError, UnsupportedVersion, ValidationError
from .world import Episode, PlanStep, STEP_LABELS, TransitionPlan, detokenize, tokenize

MAGIC = b"EIVST\x00"
VERSION = 1


def serialize_dataset(episodes, path):
    """Write episodes to path; all episodes must share frame geometry."""
    episodes = list(episodes)
    if not episodes:
        raise ValidationError("refusing to serialize an empty dataset")
    n, h, w, _ = episodes[0].frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIHHH", VERSION, len(episodes), n, h, w))
        for ep in episodes:
            if ep.frames.shape != (n, h, w, 3) or ep.masks.shape != (n, h, w):
                raise ValidationError("episode geometry differs from dataset header")
            tokens = tokenize(ep.instruction)
            fh.write(struct.pack("<H", len(tokens)))
            fh.write(struct.pack(f"<{len(tokens)}H", *tokens))
            fh.write(struct.pack("<B", ep.plan.k))
            for step in ep.plan.steps:
                fh.write(struct.pack("<BHH", STEP_LABELS.index(step.label),
                                     step.start, step.end))
            fh.write(np.ascontiguousarray(ep.frames, dtype="<f4").tobytes())
            packed = np.packbits(ep.masks.astype(np.uint8), axis=-1)
            fh.write(packed.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.data):
            raise DecodeError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_dataset(path):
    """Read a dataset file back into a list of episodes.

    Scene states are not part of the wire format; loaded episodes carry
    initial_state/target_state of None.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", offset=0)
    version, count, n, h, w = r.unpack("<HIHHH", "header")
    if version != VERSION:
        raise UnsupportedVersion(f"dataset version {version}, expected {VERSION}",
                                 offset=len(MAGIC))
    row_bytes = (w + 7) // 8
    episodes = []
    for idx in range(count):
        (tok_len,) = r.unpack("<H", f"episode {idx} token count")
        tokens = list(r.unpack(f"<{tok_len}H", f"episode {idx} tokens"))
        instruction = detokenize(tokens)
        (k,) = r.unpack("<B", f"episode {idx} step count")
        steps = []
        for j in range(k):
            label_id, start, end = r.unpack("<BHH", f"episode {idx} step {j}")
            if label_id >= len(STEP_LABELS):
                raise DecodeError(f"unknown step label id {label_id}", offset=r.offset - 5)
            steps.append(PlanStep(label=STEP_LABELS[label_id], start=start, end=end))
        plan = TransitionPlan(steps=tuple(steps))
        plan.validate(n)
        frame_bytes = r.take(n * h * w * 3 * 4, f"episode {idx} frames")
        frames = np.frombuffer(frame_bytes, dtype="<f4").reshape(n, h, w, 3).copy()
        mask_bytes = r.take(n * h * row_bytes, f"episode {idx} masks")
        packed = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(n, h, row_bytes)
        masks = np.unpackbits(packed, axis=-1, count=w).astype(bool)
        episodes.append(Episode(frames=frames, instruction=instruction,
                                plan=plan, masks=masks))
    if r.offset != len(data):
        raise DecodeError("trailing bytes after final episode", offset=r.offset)
    return episodes
