"""Checkpoint files: an ``.npz`` archive of named tensors plus a JSON header."""

from __future__ import annotations

import json
import zipfile

import numpy as np

from .model import ChatTranslator, ModelConfig, init_parameters, is_aux, parameter_shapes
from .autodiff import Tensor

FORMAT = "chatnct-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ChatTranslator, names=None, extra: dict | None = None) -> None:
    """Write ``model.params`` (or the subset ``names``) with the model config."""
    names = list(model.params) if names is None else list(names)
    header = {"format": FORMAT, "version": VERSION, "config": model.config.to_dict(),
              "names": names, "extra": extra or {}}
    arrays = {f"p{i}": model.params[n].data for i, n in enumerate(names)}
    with open(path, "wb") as fp:
        np.savez(fp, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def save_theta(path, model: ChatTranslator, extra=None) -> None:
    save_checkpoint(path, model, [n for n in model.params if not is_aux(n)], extra)


def read_checkpoint(path) -> tuple[dict, dict]:
    """``(header, {name: array})``; raises :class:`CheckpointError` on any malformed file."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} file")
            if header.get("version") != VERSION:
                raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
            arrays = {n: z[f"p{i}"] for i, n in enumerate(header["names"])}
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(exc).__name__}: {exc})") from None
    return header, arrays


def load_checkpoint(path, config: ModelConfig | None = None, seed: int = 0):
    """Build a model from a checkpoint.

    Parameters missing from the file (the auxiliary heads of a stage-1 file)
    are freshly initialised from ``seed``.  Returns ``(model, manifest)`` where
    the manifest lists ``loaded`` and ``fresh`` parameter names.
    """
    header, arrays = read_checkpoint(path)
    cfg = config or ModelConfig.from_dict(header["config"])
    shapes = parameter_shapes(cfg)
    dtype = np.dtype(cfg.dtype)
    for name, arr in arrays.items():
        if name not in shapes:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(arr.shape) != tuple(shapes[name]):
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, config expects {shapes[name]}")
    missing = [n for n in shapes if n not in arrays]
    missing_theta = [n for n in missing if not is_aux(n)]
    if missing_theta:
        raise CheckpointError(f"{path}: missing translation parameters {missing_theta[:3]}...")
    params = {}
    fresh = init_parameters(cfg, np.random.default_rng(seed), names=missing) if missing else {}
    for name in shapes:
        if name in arrays:
            params[name] = Tensor(arrays[name].astype(dtype), requires_grad=True, name=name)
        else:
            params[name] = fresh[name]
    model = ChatTranslator(cfg, params, seed=seed)
    manifest = {"loaded": [n for n in shapes if n in arrays], "fresh": missing, "extra": header.get("extra", {})}
    return model, manifest
