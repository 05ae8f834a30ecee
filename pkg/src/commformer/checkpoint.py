"""Binary checkpoint container.

Layout: 8-byte little-endian header length, then a UTF-8 JSON header listing
tensor names, shapes and byte offsets (plus free-form metadata), then the raw
little-endian float32 arrays in header order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch

__all__ = ["save_container", "load_container", "trainer_state", "restore_trainer"]

_MAGIC = "commformer-checkpoint-v1"


def save_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr32.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format": _MAGIC, "meta": meta, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a commformer checkpoint")
        data = f.read()
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}.{idx}.{key}"] = val.detach().cpu().numpy()
            else:
                out[f"{prefix}.{idx}.{key}"] = np.asarray(float(val), dtype=np.float32)
    return out


def trainer_state(trainer) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten a Trainer into (tensors, meta) for save_container."""
    tensors: dict[str, np.ndarray] = {"alpha": trainer.alpha.detach().cpu().numpy()}
    for name, p in trainer.model.state_dict().items():
        tensors[f"model.{name}"] = p.detach().cpu().numpy()
    tensors.update(_optimizer_tensors(trainer.model_opt, "opt_model"))
    tensors.update(_optimizer_tensors(trainer.graph_opt, "opt_graph"))
    meta = {
        "mode": trainer.mode,
        "k": trainer.k,
        "env_steps": trainer.env_steps,
        "iteration": trainer.iteration,
        "inner_steps_done": trainer.inner_steps_done,
        "torch_rng": base64.b64encode(
            trainer.torch_gen.get_state().numpy().tobytes()
        ).decode("ascii"),
    }
    if trainer._frozen_graph is not None:
        tensors["frozen_edges"] = trainer._frozen_graph.edges.cpu().numpy()
    return tensors, meta


def _load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state_dict = opt.state_dict()
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.rsplit(".", 2)
        entry = state.setdefault(int(idx), {})
        if key == "step":
            entry[key] = torch.tensor(float(arr))
        else:
            entry[key] = torch.from_numpy(arr.copy())
    state_dict["state"] = state
    opt.load_state_dict(state_dict)


def restore_trainer(trainer, tensors: dict[str, np.ndarray], meta: dict) -> None:
    from .graph import CommGraph

    with torch.no_grad():
        trainer.alpha.copy_(torch.from_numpy(tensors["alpha"].copy()))
    model_state = {
        name[len("model.") :]: torch.from_numpy(arr.copy())
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    trainer.model.load_state_dict(model_state)
    _load_optimizer(trainer.model_opt, tensors, "opt_model")
    _load_optimizer(trainer.graph_opt, tensors, "opt_graph")
    trainer.env_steps = int(meta["env_steps"])
    trainer.iteration = int(meta["iteration"])
    trainer.inner_steps_done = int(meta["inner_steps_done"])
    rng = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8)
    trainer.torch_gen.set_state(torch.from_numpy(rng.copy()))
    if "frozen_edges" in tensors:
        trainer._frozen_graph = CommGraph(
            edges=torch.from_numpy(tensors["frozen_edges"].copy()), k=int(meta["k"])
        )
    trainer._last_edges = trainer.current_graph().edges.clone()
