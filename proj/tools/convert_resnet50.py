#!/usr/bin/env python3
"""Convert a torchvision ResNet50 state_dict into a polypseg encoder archive.

    convert_resnet50.py resnet50-0676ba61.pth encoder.psegarch
    convert_resnet50.py resnet50.npz encoder.psegarch

A .pth input needs torch; a .npz input (one array per state_dict key) needs only numpy.
"""

import argparse
import hashlib
import json
import re
import struct
import sys

import numpy as np

MAGIC = b"PSEGARCH"
VERSION = 1


def load_state(path):
    if path.endswith(".npz"):
        with np.load(path) as data:
            return {k: data[k] for k in data.files}
    import torch

    state = torch.load(path, map_location="cpu", weights_only=True)
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def rename(key):
    """torchvision key -> polypseg parameter name, or None to drop."""
    if key.endswith("num_batches_tracked") or key.startswith("fc."):
        return None
    key = re.sub(r"^conv1\.", "encoder.stem.conv.", key)
    key = re.sub(r"^bn1\.", "encoder.stem.bn.", key)
    key = re.sub(r"^layer(\d)\.(\d+)\.", r"encoder.stage\1.block\2.", key)
    key = key.replace(".downsample.0.", ".downsample.conv.")
    key = key.replace(".downsample.1.", ".downsample.bn.")
    if not key.startswith("encoder."):
        raise ValueError("unexpected key in state_dict: " + key)
    return key


def write_archive(path, tensors, metadata):
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = json.dumps({"metadata": metadata, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<IQ", VERSION, len(header)))
        out.write(header)
        for _, arr in tensors:
            out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def main(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="torchvision state_dict (.pth) or .npz export")
    parser.add_argument("output", help="archive to write")
    args = parser.parse_args(argv)

    state = load_state(args.source)
    tensors = []
    for key in sorted(state):
        name = rename(key)
        if name is not None:
            tensors.append((name, np.asarray(state[key], dtype=np.float32)))
    with open(args.source, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    write_archive(args.output, tensors, {"source": "torchvision resnet50", "sha256": digest})
    print(f"wrote {len(tensors)} tensors to {args.output}")


if __name__ == "__main__":
    main(sys.argv[1:])
