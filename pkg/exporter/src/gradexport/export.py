"""Extract per-filter saliency profiles from torchvision models.

For every sample the exporter backpropagates the cross-entropy loss and
records, per convolution filter, the mean absolute gradient over the
filter's kernel weights and bias (bias included when the layer has one;
batch-norm parameters are never part of a filter's index set). Output is a
manifest.json + raw little-endian float32 matrix, the exact on-disk format
the analysis engine consumes, so `filterpot fit` and `filterpot rank` run
on real networks unchanged.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MANIFEST_VERSION = 1
DTYPE_TAG = "f32le"
MATRIX_FILENAME = "profiles.f32"

# ResNet naming: conv1 plus layer1..layer4 block convolutions map onto the
# five conventional groups; 1x1 downsample shortcuts are not counted as
# group filters.
_RESNET_BLOCK_CONV = re.compile(r"^layer([1-4])\.\d+\.conv\d+$")
_RESNET_GROUP_BY_STAGE = {"1": "conv2_x", "2": "conv3_x", "3": "conv4_x", "4": "conv5_x"}


class ExportError(RuntimeError):
    """Environment or configuration problem with an actionable message."""


@dataclass(frozen=True)
class FilterRecord:
    filter_id: int
    layer_name: str
    layer_group: str
    num_params: int


@dataclass(frozen=True)
class ExportSpec:
    model: str
    data_dir: Path
    split: str
    out_dir: Path
    batch_size: int = 16
    image_size: int = 64
    weights_file: Path | None = None
    group_rule: str = "resnet"
    device: str = "cpu"


def resnet_group_rule(module_path: str) -> str | None:
    """Map a ResNet conv module path to its layer group, or None to skip."""
    if module_path == "conv1":
        return "conv1"
    match = _RESNET_BLOCK_CONV.match(module_path)
    if match:
        return _RESNET_GROUP_BY_STAGE[match.group(1)]
    return None


def toplevel_group_rule(module_path: str) -> str | None:
    """Group every conv by the first component of its module path."""
    return module_path.split(".")[0]


_GROUP_RULES = {"resnet": resnet_group_rule, "toplevel": toplevel_group_rule}


def conv_filter_inventory(model: nn.Module, group_rule="resnet"):
    """Enumerate conv filters in module order.

    Returns (records, sources) where sources[i] is the (module, channel)
    pair behind records[i]. Filters whose module the group rule maps to
    None are excluded entirely.
    """
    rule = _GROUP_RULES[group_rule] if isinstance(group_rule, str) else group_rule
    records: list[FilterRecord] = []
    sources: list[tuple[nn.Conv2d, int]] = []
    for name, module in model.named_modules():
        if not isinstance(module, nn.Conv2d):
            continue
        group = rule(name)
        if group is None:
            continue
        per_filter = module.weight[0].numel() + (1 if module.bias is not None else 0)
        for channel in range(module.out_channels):
            records.append(
                FilterRecord(
                    filter_id=len(records),
                    layer_name=name,
                    layer_group=group,
                    num_params=per_filter,
                )
            )
            sources.append((module, channel))
    if not records:
        raise ExportError(
            "no convolution filters matched the group rule; check --group-rule"
        )
    return records, sources


def group_filter_counts(model: nn.Module, group_rule="resnet") -> dict[str, int]:
    records, _ = conv_filter_inventory(model, group_rule)
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.layer_group] = counts.get(rec.layer_group, 0) + 1
    return counts


def _conv_modules(records, sources):
    """Unique conv modules in filter order with their filter-id spans."""
    modules = []
    seen = set()
    for rec, (module, _) in zip(records, sources):
        if id(module) not in seen:
            seen.add(id(module))
            modules.append((module, rec.filter_id))
    return modules


def _per_filter_mean_abs_grad(module: nn.Conv2d) -> np.ndarray:
    if module.weight.grad is None:
        raise ExportError(f"no gradient on {module}; backward() did not reach it")
    w = module.weight.grad.detach().abs()
    total = w.flatten(1).sum(dim=1)
    count = float(module.weight[0].numel())
    if module.bias is not None:
        total = total + module.bias.grad.detach().abs()
        count += 1.0
    return (total / count).cpu().numpy().astype(np.float64)


def _resolve_model(spec: ExportSpec) -> nn.Module:
    import torchvision.models as tvm

    try:
        model = tvm.get_model(spec.model, weights=None)
    except (ValueError, KeyError) as exc:
        raise ExportError(
            f"unknown torchvision model {spec.model!r}; "
            f"pick a name from torchvision.models.list_models()"
        ) from exc
    if spec.weights_file is not None:
        try:
            state = torch.load(spec.weights_file, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise ExportError(f"cannot load weights from {spec.weights_file}: {exc}") from exc
        model.load_state_dict(state)
    return model.to(spec.device)


def _resolve_dataset(spec: ExportSpec):
    from torchvision import datasets, transforms

    split_dir = Path(spec.data_dir) / spec.split
    if not split_dir.is_dir():
        raise ExportError(
            f"dataset split directory {split_dir} does not exist; expected "
            "an image-folder layout <data>/<split>/<class>/<image>"
        )
    transform = transforms.Compose(
        [
            transforms.Resize((spec.image_size, spec.image_size)),
            transforms.ToTensor(),
        ]
    )
    return datasets.ImageFolder(str(split_dir), transform=transform)


def export_profiles(spec: ExportSpec) -> Path:
    """Compute one profile row per sample and write manifest + matrix.

    Gradients are taken per sample (the saliency definition is per input,
    so batching only affects data loading). Returns the manifest path.
    """
    model = _resolve_model(spec)
    dataset = _resolve_dataset(spec)
    records, sources = conv_filter_inventory(model, spec.group_rule)
    modules = _conv_modules(records, sources)

    model.eval()
    rows = np.empty((len(dataset), len(records)), dtype=np.float64)
    loader = torch.utils.data.DataLoader(
        dataset, batch_size=max(1, spec.batch_size), shuffle=False, num_workers=0
    )
    row = 0
    for images, labels in loader:
        images = images.to(spec.device)
        labels = labels.to(spec.device)
        for i in range(images.shape[0]):
            model.zero_grad(set_to_none=True)
            logits = model(images[i : i + 1])
            if int(labels[i]) >= logits.shape[1]:
                raise ExportError(
                    f"class index {int(labels[i])} exceeds the model's "
                    f"{logits.shape[1]} outputs"
                )
            loss = F.cross_entropy(logits, labels[i : i + 1])
            loss.backward()
            for module, offset in modules:
                means = _per_filter_mean_abs_grad(module)
                rows[row, offset : offset + means.size] = means
            row += 1

    if not np.all(np.isfinite(rows)) or np.any(rows < 0.0):
        raise ExportError("computed profiles contain non-finite or negative values")

    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MATRIX_FILENAME).write_bytes(
        np.ascontiguousarray(rows.astype("<f4")).tobytes()
    )
    manifest = {
        "version": MANIFEST_VERSION,
        "num_samples": int(rows.shape[0]),
        "num_filters": int(rows.shape[1]),
        "dtype": DTYPE_TAG,
        "matrix_file": MATRIX_FILENAME,
        "filters": [
            {
                "filter_id": rec.filter_id,
                "layer_name": rec.layer_name,
                "layer_group": rec.layer_group,
                "num_params": rec.num_params,
            }
            for rec in records
        ],
        "exporter": {
            "tool": "gradexport",
            "model": spec.model,
            "split": spec.split,
            "image_size": spec.image_size,
            "saliency": "mean absolute cross-entropy gradient over kernel weights"
            " and bias; batch-norm parameters excluded",
        },
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path
