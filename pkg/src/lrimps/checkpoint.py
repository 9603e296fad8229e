"""Binary checkpoints of a running engine.

Layout: 8-byte magic, little-endian uint32 version, uint64 header length,
UTF-8 JSON header, then the raw tensor payload.  The header lists every
tensor with its dtype, shape and byte offset into the payload; tensors are
stored as little-endian doubles (complex tensors as interleaved pairs).
"""
from __future__ import annotations

import json
import struct
from collections import deque
from pathlib import Path

import numpy as np

from .engine import ConvergenceState, Engine, EngineConfig, StepReport
from .mpo import Mpo

MAGIC = b"LRIMPSCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _pack(arr: np.ndarray) -> tuple[str, bytes]:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        return "<c16", np.ascontiguousarray(arr, dtype="<c16").tobytes()
    return "<f8", np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0
        self.index: dict[str, dict] = {}

    def add(self, name: str, arr) -> None:
        if arr is None:
            return
        dtype, raw = _pack(arr)
        self.index[name] = {"dtype": dtype, "shape": list(np.shape(arr)), "offset": self.offset,
                            "nbytes": len(raw)}
        self.chunks.append(raw)
        self.offset += len(raw)


def dumps(engine: Engine) -> bytes:
    """Serialize the full engine state."""
    w = _Writer()
    st = engine.state
    w.add("mpo", engine.mpo.bulk)
    w.add("L", engine.L)
    w.add("R", engine.R)
    w.add("A", engine.A)
    w.add("a_refer", st.a_refer)
    w.add("q_left", engine.q_left)
    w.add("q_right", engine.q_right)
    w.add("lam_left", engine.lam_left)
    w.add("lam_right", engine.lam_right)
    w.add("initial_lambda", getattr(engine, "initial_lambda", None))
    for i, v in enumerate(engine.recycled):
        w.add(f"recycled.{i}", v)
    for i, (_, v, hv) in enumerate(engine.pairs):
        w.add(f"pair_vec.{i}", v)
        w.add(f"pair_img.{i}", hv)
    header = {
        "config": engine.config.to_dict(),
        "mpo": {"name": engine.mpo.name, "params": engine.mpo.params},
        "state": {"avg_dev": st.avg_dev, "avg_acc": st.avg_acc, "n_dev": st.n_dev, "last_xi": st.last_xi,
                  "round": st.round, "streak": st.streak, "gamma_floor": st.gamma_floor,
                  "energy_per_site": list(st.energy_per_site)},
        "engine": {"shift": engine.shift, "gamma_prev": engine.gamma_prev,
                   "recycle_enabled": engine.recycle_enabled, "n_recycled": len(engine.recycled),
                   "pair_gaps": [p[0] for p in engine.pairs], "last_eigenvalue": engine.last_eigenvalue,
                   "initial_energy": getattr(engine, "initial_energy", None)},
        "rng": engine.rng.bit_generator.state,
        "reports": [r.as_dict() for r in engine.reports],
        "tensors": w.index,
    }
    blob = json.dumps(header, allow_nan=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(w.chunks)


def loads(data: bytes) -> Engine:
    if len(data) < _PREFIX.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(data)[start + hlen:]
    index = header["tensors"]

    def get(name):
        spec = index.get(name)
        if spec is None:
            return None
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        if len(raw) != spec["nbytes"]:
            raise CheckpointError(f"tensor {name} is truncated")
        return np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).astype(
            complex if spec["dtype"] == "<c16" else float)

    cfg = EngineConfig.from_dict(header["config"])
    mpo = Mpo(get("mpo"), header["mpo"]["name"], header["mpo"]["params"])
    eng = Engine(mpo, cfg, _skip_init=True)
    eng.rng.bit_generator.state = header["rng"]
    s = header["state"]
    eng.state = ConvergenceState(a_refer=get("a_refer"), avg_dev=s["avg_dev"], avg_acc=s["avg_acc"],
                                 n_dev=s["n_dev"], last_xi=s["last_xi"], round=s["round"], streak=s["streak"],
                                 gamma_floor=s["gamma_floor"], energy_per_site=list(s["energy_per_site"]))
    e = header["engine"]
    eng.L, eng.R, eng.A = get("L"), get("R"), get("A")
    eng.q_left, eng.q_right = get("q_left"), get("q_right")
    eng.lam_left, eng.lam_right = get("lam_left"), get("lam_right")
    eng.initial_lambda = get("initial_lambda")
    eng.initial_energy = e["initial_energy"]
    eng.shift = e["shift"]
    eng.gamma_prev = e["gamma_prev"]
    eng.recycle_enabled = e["recycle_enabled"]
    eng.last_eigenvalue = e["last_eigenvalue"]
    eng.recycled = deque((get(f"recycled.{i}") for i in range(e["n_recycled"])), maxlen=max(cfg.recycle, 1))
    eng.pairs = [(gap, get(f"pair_vec.{i}"), get(f"pair_img.{i}")) for i, gap in enumerate(e["pair_gaps"])]
    eng.reports = [StepReport(**r) for r in header["reports"]]
    return eng


def save(engine: Engine, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(engine))
    tmp.replace(path)


def load(path) -> Engine:
    return loads(Path(path).read_bytes())
