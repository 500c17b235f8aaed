"""
Checkpoint container: one numpy .npz file holding every parameter array of a
run plus a JSON manifest stored under MANIFEST_KEY. The manifest carries the
format version, each array's shape, dtype and SHA-256 digest, and free-form
metadata (config, task specs, shared-memory bookkeeping). load() verifies all
of it before handing anything back, and arrays round-trip bit-exactly.
"""
import hashlib
import json
import logging
import zipfile
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from mtgan import discriminator, environments, generator, shared_memory
from mtgan.errors import CheckpointError, MtganError
from mtgan.trainer import Trainer, TrainerConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def save(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None):
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    if MANIFEST_KEY in arrays:
        raise CheckpointError(f"{MANIFEST_KEY} is a reserved array name")
    manifest = {
        "version": FORMAT_VERSION,
        "arrays": {k: {"shape": list(v.shape), "dtype": v.dtype.str, "sha256": _digest(v)} for k, v in arrays.items()},
        "meta": meta or {},
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{MANIFEST_KEY: blob})
    log.debug("checkpoint %s written with %d arrays", path, len(arrays))


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            contents = {k: npz[k] for k in npz.files}
    except FileNotFoundError as err:
        raise CheckpointError(f"checkpoint {path} does not exist") from err
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as err:
        raise CheckpointError(f"checkpoint {path} is unreadable: {err}") from err
    blob = contents.pop(MANIFEST_KEY, None)
    if blob is None:
        raise CheckpointError(f"checkpoint {path} has no manifest")
    try:
        manifest = json.loads(blob.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"checkpoint {path} has a corrupted manifest") from err
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} is not {FORMAT_VERSION}")
    listed = manifest.get("arrays", {})
    if set(listed) != set(contents):
        raise CheckpointError(f"checkpoint {path} arrays do not match its manifest")
    for name, info in listed.items():
        a = contents[name]
        if list(a.shape) != info["shape"] or a.dtype.str != info["dtype"]:
            raise CheckpointError(f"array {name} has shape {a.shape}, manifest says {info['shape']}")
        if _digest(a) != info["sha256"]:
            raise CheckpointError(f"array {name} fails its integrity check")
    return contents, manifest.get("meta", {})


def pack_run(trainer: Trainer) -> Tuple[Dict[str, np.ndarray], dict]:
    """Flattens a trainer's generators, discriminator and shared memory into named arrays plus metadata."""
    arrays: Dict[str, np.ndarray] = {}
    for tid, gen in trainer.generators.items():
        for name, a in gen.arrays().items():
            arrays[f"gen/{tid}/{name}"] = a
    disc = trainer.discriminator
    if disc is not None:
        arrays["disc/embedding"] = disc.embedding
        for i, (K, b) in enumerate(zip(disc.kernels, disc.biases)):
            arrays[f"disc/kernel/{i}"] = K
            arrays[f"disc/bias/{i}"] = b
        arrays["disc/head_w"] = disc.head_w
        arrays["disc/head_b"] = disc.head_b
    mem = trainer.memory
    with mem.mu:
        if mem.basis is not None:
            arrays["memory/L"] = mem.basis.L
        for tid, st in mem.stats.items():
            arrays[f"memory/theta/{tid}"] = st.theta
            arrays[f"memory/z/{tid}"] = st.z
        for tid, code in mem.codes.items():
            arrays[f"memory/code/{tid}"] = code.s
        memory_meta = {
            "config": mem.config.to_dict(),
            "used": mem.used,
            "tasks": [[tid, st.n_samples] for tid, st in mem.stats.items()],
            "degenerate": [tid for tid, c in mem.codes.items() if c.degenerate],
        }
    meta = {
        "config": trainer.config.to_dict(),
        "specs": {str(tid): spec.to_dict() for tid, spec in trainer.specs.items()},
        "generators": sorted(trainer.generators),
        "discriminator": None if disc is None else {"n_banks": len(disc.kernels)},
        "memory": memory_meta,
        "aborted": list(trainer.metrics.aborted),
    }
    return arrays, meta


class RunState(NamedTuple):
    config: TrainerConfig
    generators: Dict[int, generator.GeneratorParams]
    discriminator: Optional[discriminator.DiscriminatorParams]
    memory: shared_memory.SharedMemory
    specs: Dict[int, environments.PlantSpec]


def unpack_run(arrays: Dict[str, np.ndarray], meta: dict) -> RunState:
    try:
        config = TrainerConfig.from_dict(meta["config"])
        gens = {
            int(tid): generator.GeneratorParams(**{n: arrays[f"gen/{tid}/{n}"] for n in generator.PARAM_FIELDS})
            for tid in meta["generators"]
        }
        disc = None
        if meta.get("discriminator"):
            n = meta["discriminator"]["n_banks"]
            disc = discriminator.DiscriminatorParams(
                embedding=arrays["disc/embedding"],
                kernels=tuple(arrays[f"disc/kernel/{i}"] for i in range(n)),
                biases=tuple(arrays[f"disc/bias/{i}"] for i in range(n)),
                head_w=arrays["disc/head_w"],
                head_b=arrays["disc/head_b"],
            )
        mm = meta["memory"]
        memory = shared_memory.SharedMemory(shared_memory.LifelongConfig.from_dict(mm["config"]))
        if "memory/L" in arrays:
            memory.basis = shared_memory.SharedBasis(arrays["memory/L"])
        memory.used = int(mm["used"])
        degenerate = set(mm["degenerate"])
        for tid, n_samples in mm["tasks"]:
            memory.stats[tid] = shared_memory.TaskStats(arrays[f"memory/theta/{tid}"], arrays[f"memory/z/{tid}"],
                                                        n_samples, task_id=tid)
            if f"memory/code/{tid}" in arrays:
                memory.codes[tid] = shared_memory.TaskCode(arrays[f"memory/code/{tid}"], tid, tid in degenerate)
        specs = {int(tid): environments.PlantSpec.from_dict(d) for tid, d in meta["specs"].items()}
    except (KeyError, TypeError, ValueError, MtganError) as err:
        raise CheckpointError(f"checkpoint contents are inconsistent: {err}") from err
    return RunState(config, gens, disc, memory, specs)


def save_run(path, trainer: Trainer):
    arrays, meta = pack_run(trainer)
    save(path, arrays, meta)


def load_run(path) -> RunState:
    return unpack_run(*load(path))
