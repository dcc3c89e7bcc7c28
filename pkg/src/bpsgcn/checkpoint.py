"""Named-array archive: an ``.npz`` file with a JSON manifest entry.

The manifest records ``format_version``, free-form ``meta`` and one
``{name, shape, dtype}`` record per array; loading checks the arrays against it.
"""

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


class ArchiveError(ValueError):
    pass


def save_archive(path, arrays, meta=None):
    arrays = {name: np.asarray(a) for name, a in arrays.items()}
    if MANIFEST_KEY in arrays:
        raise ArchiveError(f"{MANIFEST_KEY!r} is reserved")
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in sorted(arrays.items())],
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **{MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))}, **arrays)
    return path


def load_archive(path):
    """Returns ``(arrays, meta)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if MANIFEST_KEY not in data.files:
            raise ArchiveError(f"{path}: missing manifest")
        manifest = json.loads(str(data[MANIFEST_KEY]))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ArchiveError(f"{path}: unsupported format version {manifest.get('format_version')}")
        arrays = {}
        for rec in manifest["arrays"]:
            arr = data[rec["name"]]
            if list(arr.shape) != rec["shape"] or str(arr.dtype) != rec["dtype"]:
                raise ArchiveError(f"{path}: array {rec['name']!r} does not match its manifest entry")
            arrays[rec["name"]] = arr
    return arrays, manifest["meta"]


def state_arrays(module, prefix):
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module, arrays, prefix):
    import torch

    state = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state)
