"""Self-describing binary container for trained models.

Layout: an 8-byte magic ``EXCHK001``, an 8-byte little-endian header
length, a UTF-8 JSON header, then the raw array payload.  The header
declares the format version, the model configuration, the rating scale,
free-form metadata, and one entry per array with its name, dtype string
(byte order included), shape, offset, and byte count, so any language
with a JSON parser can read the weights back.  Arrays are stored
C-contiguous and little-endian; saving and loading round-trips files
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RatingScale
from .layers import ExchLayerParams, block_key
from .models import FeaParams, ModelConfig, SelfSupervisedParams

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"EXCHK001"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    """A loaded model: configuration, weights, scale, and metadata."""

    config: ModelConfig
    params: SelfSupervisedParams | FeaParams
    scale: RatingScale
    metadata: dict
    format_version: int = FORMAT_VERSION


def _subset_from_key(key: str) -> frozenset[int]:
    if key == "wg":
        return frozenset()
    return frozenset(int(ch) for ch in key[1:])


def _layer_descriptor(layer: ExchLayerParams) -> dict:
    return {
        "block_keys": [block_key(S) for S in sorted(layer.blocks, key=sorted)],
        "tied": layer.tied,
        "pool_mode": layer.pool_mode,
        "nonlinearity": layer.nonlinearity,
        "slope": layer.slope,
    }


def _collect_arrays(prefix: str, layers) -> tuple[list[dict], dict[str, np.ndarray]]:
    descriptors = []
    arrays: dict[str, np.ndarray] = {}
    for i, layer in enumerate(layers, start=1):
        descriptors.append(_layer_descriptor(layer))
        seen: set[int] = set()
        for S in sorted(layer.blocks, key=sorted):
            arr = layer.blocks[S]
            if id(arr) in seen:
                continue  # tied blocks share one array; store it once
            seen.add(id(arr))
            arrays[f"{prefix}{i}.{block_key(S)}"] = arr
        arrays[f"{prefix}{i}.bias"] = layer.bias
    return descriptors, arrays


def _config_to_json(config: ModelConfig) -> dict:
    return {
        "architecture": config.architecture,
        "levels": config.levels,
        "widths": list(config.widths),
        "encoder_widths": list(config.encoder_widths),
        "decoder_widths": list(config.decoder_widths),
        "nonlinearity": config.nonlinearity,
        "dropout_rate": config.dropout_rate,
        "dropout_placement": sorted(config.dropout_placement),
        "mask_prob": config.mask_prob,
        "factor_size": config.factor_size,
    }


def _config_from_json(blob: dict) -> ModelConfig:
    return ModelConfig(
        architecture=blob["architecture"],
        levels=blob["levels"],
        widths=tuple(blob["widths"]),
        encoder_widths=tuple(blob["encoder_widths"]),
        decoder_widths=tuple(blob["decoder_widths"]),
        nonlinearity=blob["nonlinearity"],
        dropout_rate=blob["dropout_rate"],
        dropout_placement=frozenset(blob["dropout_placement"]),
        mask_prob=blob["mask_prob"],
        factor_size=blob["factor_size"],
    )


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    params: SelfSupervisedParams | FeaParams,
    scale: RatingScale,
    metadata: dict | None = None,
) -> None:
    """Write a model to ``path`` in the EXCHK001 container format."""
    if isinstance(params, SelfSupervisedParams):
        stacks = {"layers": _collect_arrays("layer", params.layers)}
    elif isinstance(params, FeaParams):
        stacks = {
            "encoder": _collect_arrays("enc", params.encoder),
            "decoder": _collect_arrays("dec", params.decoder),
        }
    else:
        raise TypeError(f"cannot checkpoint parameters of type {type(params)!r}")

    arrays: dict[str, np.ndarray] = {}
    stack_blob: dict[str, list] = {}
    for name, (descriptors, stack_arrays) in stacks.items():
        stack_blob[name] = descriptors
        arrays.update(stack_arrays)

    table = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        table.append(
            {
                "name": name,
                "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "model_config": _config_to_json(config),
        "scale": {"levels": list(scale.levels)},
        "metadata": metadata or {},
        "stacks": stack_blob,
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(bytes(payload))


def _rebuild_stack(
    prefix: str,
    descriptors: list[dict],
    arrays: dict[str, np.ndarray],
) -> tuple[ExchLayerParams, ...]:
    layers = []
    for i, desc in enumerate(descriptors, start=1):
        blocks: dict[frozenset[int], np.ndarray] = {}
        loaded: dict[str, np.ndarray] = {}
        for key in desc["block_keys"]:
            name = f"{prefix}{i}.{key}"
            if name not in arrays:
                # tied layers store the shared row/column block once
                if desc["tied"] and key in ("w0", "w1"):
                    other = "w1" if key == "w0" else "w0"
                    name = f"{prefix}{i}.{other}"
                else:
                    raise ValueError(f"checkpoint is missing array {name!r}")
            if name not in loaded:
                loaded[name] = arrays[name]
            blocks[_subset_from_key(key)] = loaded[name]
        layers.append(
            ExchLayerParams(
                blocks=blocks,
                bias=arrays[f"{prefix}{i}.bias"],
                pool_mode=desc["pool_mode"],
                nonlinearity=desc["nonlinearity"],
                slope=desc["slope"],
                tied=desc["tied"],
            )
        )
    return tuple(layers)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read an EXCHK001 container back into config, params, and scale."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an EXCHK001 checkpoint")
    header_len = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    body_start = len(MAGIC) + 8
    if len(raw) < body_start + header_len:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[body_start : body_start + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format version {header['format_version']}"
        )
    payload = raw[body_start + header_len :]

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise ValueError(f"{path}: truncated payload at {entry['name']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]), count=count,
            offset=entry["offset"],
        )
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    config = _config_from_json(header["model_config"])
    if config.architecture == "self-supervised":
        params = SelfSupervisedParams(
            layers=_rebuild_stack("layer", header["stacks"]["layers"], arrays)
        )
    else:
        params = FeaParams(
            encoder=_rebuild_stack("enc", header["stacks"]["encoder"], arrays),
            decoder=_rebuild_stack("dec", header["stacks"]["decoder"], arrays),
        )
    return Checkpoint(
        config=config,
        params=params,
        scale=RatingScale(tuple(header["scale"]["levels"])),
        metadata=header["metadata"],
        format_version=header["format_version"],
    )
