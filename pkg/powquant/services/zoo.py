"""
MODEL ZOO - Desk-scale model recipes for the three tasks

1. seg - encoder-decoder FCN (7 conv layers) producing a per-pixel 2-class map
2. cls - over-parameterized CNN: 3 conv layers + 3 dense layers
3. asr - Deep-Speech-shaped stack: 3 time-distributed dense layers, a bidirectional
   RNN, one more dense layer and a per-frame softmax

"small" variants halve channel widths (seg, cls) and drop layers: the
second dense layer for cls, the second and third dense layers before the RNN for asr.
"""

from typing import List, Sequence

import numpy as np

from powquant.services.nncore import LayerSpec, ModelGraph

TASKS = ("seg", "cls", "asr")
SIZES = ("full", "small")


def _conv_block(filters: int, pad: bool = True) -> List[LayerSpec]:
    block = [LayerSpec("pad2d", pad=1)] if pad else []
    return block + [LayerSpec("conv2d", filters=filters, kernel_size=3), LayerSpec("relu")]


def seg_specs(size: str = "full") -> List[LayerSpec]:
    c = 16 if size == "full" else 8
    specs: List[LayerSpec] = []
    specs += _conv_block(c) + _conv_block(c)
    specs += [LayerSpec("maxpool2x2")]
    specs += _conv_block(2 * c) + _conv_block(2 * c)
    specs += [LayerSpec("upsample2x")]
    specs += _conv_block(c) + _conv_block(c)
    specs += [LayerSpec("conv2d", filters=2, kernel_size=1), LayerSpec("softmax_output")]
    return specs


def cls_specs(n_classes: int, size: str = "full") -> List[LayerSpec]:
    c = 16 if size == "full" else 8
    hidden = 128 if size == "full" else 64
    specs = _conv_block(c, pad=False) + _conv_block(c, pad=False)
    specs += [LayerSpec("maxpool2x2")]
    specs += _conv_block(2 * c, pad=False)
    specs += [LayerSpec("maxpool2x2"), LayerSpec("flatten")]
    specs += [LayerSpec("dense", units=hidden), LayerSpec("relu")]
    if size == "full":
        specs += [LayerSpec("dense", units=hidden), LayerSpec("relu")]
    specs += [LayerSpec("dense", units=n_classes), LayerSpec("softmax_output")]
    return specs


def asr_specs(n_classes: int, size: str = "full") -> List[LayerSpec]:
    fc = [LayerSpec("dense", units=64), LayerSpec("relu")]
    specs = list(fc)
    if size == "full":
        specs += fc + fc
    specs += [LayerSpec("birnn", hidden=32)]
    specs += [LayerSpec("dense", units=64), LayerSpec("relu")]
    specs += [LayerSpec("dense", units=n_classes), LayerSpec("softmax_output")]
    return specs


def build_model(task: str, input_shape: Sequence[int], n_classes: int, size: str = "full",
                seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Build the recipe model for a task."""
    if task not in TASKS:
        raise ValueError(f"Unknown task '{task}', expected one of {TASKS}")
    if size not in SIZES:
        raise ValueError(f"Unknown model size '{size}', expected one of {SIZES}")

    if task == "seg":
        specs = seg_specs(size)
    elif task == "cls":
        specs = cls_specs(n_classes, size)
    else:
        specs = asr_specs(n_classes, size)
    return ModelGraph(input_shape, specs, seed=seed, dtype=dtype, name=f"{task}-{size}-s{seed}")
