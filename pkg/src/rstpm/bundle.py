"""ModelBundle: the persisted set of teachers, students and attention gates."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import read_archive, write_archive
from .backbones import build_network, freeze, spec_from_dict, spec_to_dict
from .distill import GateSet, TrainConfig
from .errors import FormatError, StateError

BUNDLE_FORMAT = "rstpm-bundle"
NET_SLOTS = ("teacher_a", "student_a", "teacher_b", "student_b")
GATE_SLOTS = ("gates_a", "gates_b")


@dataclass
class ModelBundle:
    teacher_a: nn.Module | None = None
    student_a: nn.Module | None = None
    teacher_b: nn.Module | None = None
    student_b: nn.Module | None = None
    gates_a: GateSet | None = None
    gates_b: GateSet | None = None
    config: TrainConfig | None = None
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return "dual" if self.student_b is not None else "baseline"

    @property
    def attention(self) -> bool:
        return self.gates_a is not None

    def require(self, dual: bool) -> None:
        missing = [s for s in ("teacher_a", "student_a") if getattr(self, s) is None]
        if dual:
            missing += [s for s in ("teacher_b", "student_b") if getattr(self, s) is None]
            if self.gates_a is not None and self.gates_b is None:
                missing.append("gates_b")
        if missing:
            raise StateError(f"bundle is missing {', '.join(missing)}")


def _state(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {}
    slots = {}
    for slot in NET_SLOTS:
        net = getattr(bundle, slot)
        if net is None:
            continue
        slots[slot] = {"role": net.role, "spec": spec_to_dict(net.spec),
                       "frozen": bool(net.frozen), "meta": net.meta}
        tensors.update({f"{slot}/{k}": v for k, v in _state(net).items()})
    for slot in GATE_SLOTS:
        gates = getattr(bundle, slot)
        if gates is None:
            continue
        slots[slot] = {"pair": gates.pair,
                       "channels": {str(l): int(gates[l].weight.shape[1]) for l in gates.levels}}
        tensors.update({f"{slot}/{k}": v for k, v in _state(gates).items()})
    meta = {"format": BUNDLE_FORMAT, "slots": slots, "meta": bundle.meta,
            "config": bundle.config.to_dict() if bundle.config else None}
    write_archive(path, tensors, meta)


def load_bundle(path: str | Path) -> ModelBundle:
    tensors, meta = read_archive(path)
    if meta.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"{path}: not a model bundle")
    out = ModelBundle(meta=meta.get("meta", {}))
    if meta.get("config"):
        out.config = TrainConfig(**meta["config"])
    for slot, info in meta["slots"].items():
        prefix = slot + "/"
        if slot in NET_SLOTS:
            module = build_network(info["role"], spec_from_dict(info["spec"]), seed=0)
            module.meta = info.get("meta", {})
        elif slot in GATE_SLOTS:
            module = GateSet(info["pair"], {int(k): v for k, v in info["channels"].items()})
        else:
            raise FormatError(f"{path}: unknown slot {slot!r}")
        expected = module.state_dict().keys()
        state = {}
        for k in expected:
            if prefix + k not in tensors:
                raise FormatError(f"{path}: tensor {prefix + k!r} is missing")
            state[k] = torch.from_numpy(tensors[prefix + k].copy())
        module.load_state_dict(state)
        module.eval()
        if slot in NET_SLOTS and info["frozen"]:
            freeze(module)
        setattr(out, slot, module)
    return out
