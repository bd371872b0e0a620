"""Feature-fusion state-space decoding and the full multitask model.

A stream set is a stacked tensor ``(S, H, W, C)`` in fixed stream order
(pre, post, vhr, risk). Three token rearrangements feed three VSS blocks:

* sequential: streams end to end, i.e. the grid ``(S*H, W)``;
* cross: token-wise interleaving, i.e. the grid ``(H, W*S)``;
* parallel: each stream separately through the same block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import HierarchicalEncoder, ModalityBundle, ModalityEmbedding, ModelConfig
from .nn import Linear, Module
from .tensor import Tensor
from .vss import VSSBlock

STREAM_ORDER = ("pre", "post", "vhr", "risk")
TASK_CLASSES = {"bda": 4, "fm": 3, "loc": 2}
TASKS = ("bda", "fm", "loc")


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskWiring:
    task: str
    streams: tuple[str, ...]
    fallback: tuple[tuple[str, str], ...] = ()

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def resolve(self, available: set[str]) -> tuple[str, ...]:
        """Streams actually used given which ones are present, in canonical order."""
        fb = dict(self.fallback)
        used = set()
        for s in self.streams:
            if s in available:
                used.add(s)
            elif s in fb and fb[s] in available:
                used.add(fb[s])
        return tuple(s for s in STREAM_ORDER if s in used)


@dataclass(frozen=True)
class Wiring:
    tasks: dict = field(default_factory=dict)  # task -> TaskWiring

    def __hash__(self):
        return hash(tuple(sorted(self.tasks.items())))

    def streams_needed(self) -> set[str]:
        need = set()
        for tw in self.tasks.values():
            need.update(tw.streams)
            need.update(dst for _, dst in tw.fallback)
        return need

    def to_json(self) -> dict:
        out = {}
        for task in TASKS:
            tw = self.tasks.get(task)
            out[task] = None if tw is None else {"streams": list(tw.streams),
                                                 "fallback": dict(tw.fallback)}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Wiring:
        tasks = {}
        for task in TASKS:
            spec = obj.get(task)
            if spec is None:
                continue
            streams = tuple(spec["streams"])
            bad = set(streams) - set(STREAM_ORDER)
            if bad or not streams:
                raise ValueError(f"wiring for {task}: invalid streams {sorted(bad) or streams}")
            tasks[task] = TaskWiring(task, streams, tuple(sorted(spec.get("fallback", {}).items())))
        return cls(tasks)


def _w(bda, fm, loc, loc_fallback=()):
    tasks = {"bda": TaskWiring("bda", bda), "loc": TaskWiring("loc", loc, loc_fallback)}
    if fm is not None:
        tasks["fm"] = TaskWiring("fm", fm)
    return Wiring(tasks)


# Ablation rows 0-4: which inputs feed which task.
WIRINGS = {
    0: _w(("pre", "post"), None, ("pre",)),
    1: _w(("pre", "post"), ("pre", "post"), ("pre",)),
    2: _w(("pre", "post", "risk"), ("pre", "post"), ("vhr",), (("vhr", "pre"),)),
    3: _w(("pre", "post", "risk"), ("pre", "post"), ("pre",)),
    4: _w(("pre", "post", "vhr", "risk"), ("pre", "post"), ("pre", "vhr")),
}


def load_wiring(path) -> Wiring:
    with open(path) as fh:
        obj = json.load(fh)
    return Wiring.from_json(obj.get("wiring", obj))


# ---------------------------------------------------------------------------
# rearrangements
# ---------------------------------------------------------------------------

def rearrange_sequential(s: Tensor) -> Tensor:
    S, H, W, C = s.shape
    return T.reshape(s, (S * H, W, C))


def reverse_sequential(g: Tensor, n_streams: int) -> Tensor:
    SH, W, C = g.shape
    return T.reshape(g, (n_streams, SH // n_streams, W, C))


def rearrange_cross(s: Tensor) -> Tensor:
    S, H, W, C = s.shape
    return T.reshape(T.transpose(s, (1, 2, 0, 3)), (H, W * S, C))


def reverse_cross(g: Tensor, n_streams: int) -> Tensor:
    H, WS, C = g.shape
    return T.transpose(T.reshape(g, (H, WS // n_streams, n_streams, C)), (2, 0, 1, 3))


def rearrange_parallel(s: Tensor) -> Tensor:
    return s


def reverse_parallel(g: Tensor, n_streams: int) -> Tensor:
    return g


def flatten_tokens(g: Tensor) -> Tensor:
    """Row-major token sequence of a grid: ``(H, W, C) -> (H*W, C)``."""
    return T.reshape(g, (-1, g.shape[-1]))


MECHANISMS = (
    ("sequential", rearrange_sequential, reverse_sequential),
    ("cross", rearrange_cross, reverse_cross),
    ("parallel", rearrange_parallel, reverse_parallel),
)


class FFSSBlock(Module):
    def __init__(self, rng, dim: int, out_dim: int, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.vss = {name: VSSBlock(rng, dim, cfg.expand, cfg.d_state, dt) for name, _, _ in MECHANISMS}
        self.proj = Linear(rng, 3 * dim, out_dim, dtype=dt)

    def __call__(self, streams: Tensor) -> Tensor:
        if streams.ndim != 4 or streams.shape[0] == 0:
            raise ValueError("ffss block needs a non-empty stacked stream set (S, H, W, C)")
        S = streams.shape[0]
        fused = []
        for name, fwd, rev in MECHANISMS:
            out = rev(self.vss[name](fwd(streams)), S)
            fused.append(T.sum_(out, axis=0))
        return self.proj(T.concat(fused, axis=-1))


class TaskDecoder(Module):
    """Deepest-first FFSS stages, each added to the upsampled deeper output, then a linear head."""

    def __init__(self, rng, n_classes: int, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.cfg = cfg
        self.blocks = [FFSSBlock(rng, d, cfg.decoder_dim, cfg) for d in cfg.dims]
        self.head = Linear(rng, cfg.decoder_dim, n_classes, dtype=dt)

    def __call__(self, stage_streams: list[Tensor]) -> Tensor:
        """``stage_streams[i]`` is the stacked stream set at encoder stage ``i``."""
        d = None
        for i in reversed(range(len(self.blocks))):
            f = self.blocks[i](stage_streams[i])
            d = f if d is None else T.upsample2x(d, channels_last=True) + f
        logits = self.head(d)
        return T.upsample(logits, self.cfg.patch, channels_last=True)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class FloodDamageModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, wiring: Wiring | int = 4, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.wiring = WIRINGS[wiring] if isinstance(wiring, int) else wiring
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.embed = {kind: ModalityEmbedding(rng, kind, cfg.embed_dim, dt) for kind in ("sar", "vhr", "risk")}
        self.image_encoder = HierarchicalEncoder(rng, cfg)
        self.risk_encoder = HierarchicalEncoder(rng, cfg)
        self.decoders = {task: TaskDecoder(rng, TASK_CLASSES[task], cfg) for task in TASKS
                         if task in self.wiring.tasks}

    def encode_image(self, g: Tensor) -> list[Tensor]:
        return self.image_encoder(g)

    def encode_risk(self, g: Tensor) -> list[Tensor]:
        return self.risk_encoder(g)

    def encode(self, b: ModalityBundle) -> dict[str, list[Tensor]]:
        """Per-stream feature pyramids for every stream the wiring can use."""
        need = self.wiring.streams_needed()
        image_streams = []
        grids = []
        if "pre" in need:
            image_streams.append("pre")
            grids.append(self.embed["sar"](b.pre_sar)[0])
        if "post" in need:
            image_streams.append("post")
            grids.append(self.embed["sar"](b.post_sar)[0])
        if "vhr" in need and b.has_vhr():
            image_streams.append("vhr")
            grids.append(self.embed["vhr"](b.vhr)[0])
        pyramids: dict[str, list[Tensor]] = {}
        if grids:
            feats = self.encode_image(T.stack(grids, axis=0))
            for i, name in enumerate(image_streams):
                pyramids[name] = [f[i] for f in feats]
        if "risk" in need:
            pyramids["risk"] = self.encode_risk(self.embed["risk"](b.risk)[0])
        return pyramids

    def decode(self, task: str, pyramids: dict[str, list[Tensor]]) -> Tensor:
        streams = self.wiring.tasks[task].resolve(set(pyramids))
        if not streams:
            raise ValueError(f"no input streams available for task {task}")
        n_stages = len(self.cfg.dims)
        stage_sets = [T.stack([pyramids[s][i] for s in streams], axis=0) for i in range(n_stages)]
        return self.decoders[task](stage_sets)

    def __call__(self, b: ModalityBundle) -> dict[str, Tensor]:
        return self.forward_full(b)

    def forward_full(self, b: ModalityBundle) -> dict[str, Tensor]:
        """Logits ``(H, W, K)`` for each task enabled by the wiring."""
        pyramids = self.encode(b)
        return {task: self.decode(task, pyramids) for task in TASKS if task in self.decoders}
