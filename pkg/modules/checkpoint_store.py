"""
PFGT checkpoint format.

    magic      4 bytes   b"PFGT"
    version    uint32 LE
    header_len uint32 LE
    header     UTF-8 JSON: encoder config, activity mask, purged classes,
               LoRA state, metadata and the parameter table (name, shape,
               frozen, offset, count) in payload order
    payload    little-endian float32 arrays in header order
"""

import hashlib
import json
import logging
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from config.model_config import EncoderConfig
from modules.model_runner import PreForgettableModel, build_model
from modules.numerics import collect_parameters

logger = logging.getLogger(__name__)

MAGIC = b"PFGT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint"""


def _header_for(model: PreForgettableModel, metadata: Optional[Dict]) -> Tuple[Dict, list]:
    table = []
    arrays = []
    offset = 0
    for param in collect_parameters(model):
        array = param.tensor.detach().cpu().numpy().astype("<f4")
        table.append({
            "name": param.name,
            "shape": list(array.shape),
            "frozen": param.frozen,
            "offset": offset,
            "count": int(array.size),
        })
        arrays.append(array)
        offset += array.nbytes
    header = {
        "encoder": model.config.to_dict(),
        "active": model.pool.mask(),
        "purged": sorted(model.pool.purged),
        "lora_enabled": all(a.enabled for a in model.encoder.lora_adapters()),
        "sampler_seed": model.pool.rng_seed,
        "metadata": metadata or {},
        "parameters": table,
    }
    return header, arrays


def save_checkpoint(model: PreForgettableModel, path: str, metadata: Optional[Dict] = None) -> str:
    """Write the model to path; returns the sha256 digest of the file"""
    try:
        header, arrays = _header_for(model, metadata)
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for array in arrays:
                f.write(array.tobytes())
        digest = checkpoint_digest(path)
        logger.info(f"Saved checkpoint {path} ({len(arrays)} tensors, sha256 {digest[:12]})")
        return digest
    except Exception as e:
        logger.error(f"Failed to save checkpoint {path}: {e}")
        raise


def read_header(path: str) -> Tuple[Dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a PFGT checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    return header, blob[12 + header_len:]


def load_checkpoint(path: str) -> Tuple[PreForgettableModel, Dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)"""
    try:
        header, payload = read_header(path)
        config = EncoderConfig(**header["encoder"])
        model = build_model(config, sampler_seed=header.get("sampler_seed", 0))
        params = {p.name: p for p in collect_parameters(model)}
        for entry in header["parameters"]:
            name = entry["name"]
            if name not in params:
                raise CheckpointError(f"checkpoint parameter {name} does not exist in the model")
            target = params[name].tensor
            if list(target.shape) != entry["shape"]:
                raise CheckpointError(
                    f"{name}: checkpoint shape {entry['shape']} != model shape {list(target.shape)}")
            end = entry["offset"] + 4 * entry["count"]
            if end > len(payload):
                raise CheckpointError(f"{path} is truncated inside tensor {name}")
            values = np.frombuffer(payload, dtype="<f4", count=entry["count"], offset=entry["offset"])
            with torch.no_grad():
                target.copy_(torch.from_numpy(values.reshape(entry["shape"]).copy()))
            if bool(entry["frozen"]) != params[name].frozen:
                raise CheckpointError(f"{name}: frozen flag disagrees with the model definition")
        missing = set(params) - {e["name"] for e in header["parameters"]}
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        model.pool.purged = set(header.get("purged", []))
        model.pool.load_mask(header["active"])
        for adapter in model.encoder.lora_adapters():
            adapter.enabled = bool(header.get("lora_enabled", True))
        logger.info(f"Loaded checkpoint {path} ({model.pool.active_count}/{config.num_classes} prompts active)")
        return model, header.get("metadata", {})
    except CheckpointError as e:
        logger.error(f"Invalid checkpoint {path}: {e}")
        raise
    except Exception as e:
        logger.error(f"Failed to load checkpoint {path}: {e}")
        raise


def checkpoint_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()
