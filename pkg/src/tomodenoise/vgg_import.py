"""Convert VGG-19 convolution weights into the extractor's archive format.

The perceptual feature extractor loads its convolution weights from a
named-tensor checkpoint (see ``formats``).  This script produces that file
from torchvision, either by downloading the ImageNet weights or from a
local ``.pth`` state dict::

    python -m tomodenoise.vgg_import --out vgg19.ckpt
    python -m tomodenoise.vgg_import --out vgg19.ckpt --state-dict vgg19.pth

Only the convolution stack is kept; classifier weights are dropped.
"""

from __future__ import annotations

import argparse
import sys

import torch

from .errors import ConfigurationError, IOFailureError, ToolError
from .formats import save_tensors
from .network import _VGG_PLAN

# positions of the conv layers inside torchvision's vgg19().features
_FEATURE_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)


def convert_state_dict(state_dict: dict) -> dict:
    """Map torchvision ``features.N.*`` tensors onto plan conv names."""
    conv_rows = [row for row in _VGG_PLAN if row != "pool"]
    if len(conv_rows) != len(_FEATURE_INDICES):
        raise ConfigurationError(
            f"plan lists {len(conv_rows)} convs, expected {len(_FEATURE_INDICES)}"
        )
    tensors = {}
    for idx, (name, in_ch, out_ch) in zip(_FEATURE_INDICES, conv_rows):
        for part, shape in (("weight", (out_ch, in_ch, 3, 3)), ("bias", (out_ch,))):
            key = f"features.{idx}.{part}"
            if key not in state_dict:
                raise ConfigurationError(f"state dict is missing {key}")
            tensor = torch.as_tensor(state_dict[key])
            if tuple(tensor.shape) != shape:
                raise ConfigurationError(
                    f"{key} has shape {tuple(tensor.shape)}, expected {shape}"
                )
            tensors[f"{name}.{part}"] = tensor.to(torch.float32).numpy()
    return tensors


def _load_source(state_dict_path):
    if state_dict_path is not None:
        try:
            obj = torch.load(state_dict_path, map_location="cpu", weights_only=True)
        except OSError as e:
            raise IOFailureError(f"cannot read {state_dict_path}: {e}") from None
        except Exception as e:
            raise ConfigurationError(f"cannot parse {state_dict_path}: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigurationError(f"{state_dict_path} does not hold a state dict")
        return obj, f"state_dict:{state_dict_path}"
    try:
        from torchvision.models import VGG19_Weights, vgg19

        model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as e:
        raise IOFailureError(
            f"cannot fetch pretrained weights ({e}); pass --state-dict with a local copy"
        ) from None
    return model.state_dict(), "torchvision:vgg19-imagenet1k-v1"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tomodenoise.vgg_import", description=__doc__.splitlines()[0]
    )
    parser.add_argument("--out", required=True, help="destination checkpoint path")
    parser.add_argument("--state-dict", help="local .pth state dict instead of downloading")
    args = parser.parse_args(argv)
    try:
        state_dict, source = _load_source(args.state_dict)
        tensors = convert_state_dict(state_dict)
        save_tensors(args.out, tensors, meta={"kind": "vgg19_features", "source": source})
    except ToolError as e:
        print(e.oneline(), file=sys.stderr)
        return 1
    print(f"wrote {len(tensors)} tensors to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
