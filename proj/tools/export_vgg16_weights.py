#!/usr/bin/env python3
"""Export the ImageNet VGG16 convolutional layers to the workbench format.

Layout (little-endian): 8-byte magic "AMALVGG1", u32 layer count (13), then
per layer u32 in_channels, u32 out_channels, u64 n + n float32 weights in
[out][in][ky][kx] order, u64 n + n float32 biases.

Requires torch and torchvision. Usage:
    export_vgg16_weights.py OUT.bin [--state-dict vgg16.pth]
"""

import argparse
import struct
import sys

MAGIC = b"AMALVGG1"


def conv_layers(state_dict):
    keys = sorted(
        {k.rsplit(".", 1)[0] for k in state_dict if k.startswith("features.") and k.endswith(".weight")},
        key=lambda k: int(k.split(".")[1]),
    )
    return [(state_dict[k + ".weight"], state_dict[k + ".bias"]) for k in keys]


def write(path, layers):
    if len(layers) != 13:
        sys.exit(f"expected 13 convolutional layers, found {len(layers)}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(layers)))
        expected_in = 3
        for weight, bias in layers:
            out_c, in_c, kh, kw = weight.shape
            if (kh, kw) != (3, 3) or in_c != expected_in:
                sys.exit(f"unexpected conv shape {tuple(weight.shape)}")
            w = weight.detach().cpu().float().contiguous().numpy().astype("<f4")
            b = bias.detach().cpu().float().contiguous().numpy().astype("<f4")
            f.write(struct.pack("<II", in_c, out_c))
            f.write(struct.pack("<Q", w.size))
            f.write(w.tobytes())
            f.write(struct.pack("<Q", b.size))
            f.write(b.tobytes())
            expected_in = out_c


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--state-dict", help="local torchvision VGG16 state dict instead of downloading")
    args = ap.parse_args()

    import torch
    import torchvision

    if args.state_dict:
        state = torch.load(args.state_dict, map_location="cpu")
    else:
        state = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1).state_dict()
    write(args.out, conv_layers(state))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
