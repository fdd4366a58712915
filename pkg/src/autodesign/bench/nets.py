"""Small constructed networks used by the pruning and quantization pipelines."""

from ..errors import ConfigError
from ..nncore import LayerSpec, NetSpec


def redundant_chain(in_channels=3, image_size=4, width=8, wide=32, classes=4):
    """conv3x3 -> wide conv3x3 -> pointwise bottleneck -> pool -> dense.

    The middle layer is far wider than the task needs, so most of its
    channels are redundant, while the `width`-channel layers around it are
    bottlenecks.
    """
    hw = (image_size, image_size)
    return NetSpec([
        LayerSpec("conv2d", in_channels, width, kernel_size=3, spatial_in=hw),
        LayerSpec("relu", width, width, spatial_in=hw),
        LayerSpec("conv2d", width, wide, kernel_size=3, spatial_in=hw),
        LayerSpec("relu", wide, wide, spatial_in=hw),
        LayerSpec("pointwise_conv2d", wide, width, spatial_in=hw),
        LayerSpec("relu", width, width, spatial_in=hw),
        LayerSpec("global_pool", width, width, spatial_in=hw),
        LayerSpec("dense", width, classes),
    ], classes)


def mobile_net(in_channels=3, image_size=6, stem=16, widths=(16, 16), kernel_size=3, classes=4):
    """conv3x3 stem, then one depthwise-separable block (depthwise k x k,
    pointwise) per entry of `widths`, then pool and dense."""
    hw = (image_size, image_size)
    layers = [LayerSpec("conv2d", in_channels, stem, kernel_size=3, spatial_in=hw),
              LayerSpec("relu", stem, stem, spatial_in=hw)]
    c = stem
    for w in widths:
        layers += [
            LayerSpec("depthwise_conv2d", c, c, kernel_size=kernel_size, spatial_in=hw),
            LayerSpec("relu", c, c, spatial_in=hw),
            LayerSpec("pointwise_conv2d", c, w, spatial_in=hw),
            LayerSpec("relu", w, w, spatial_in=hw),
        ]
        c = w
    layers += [LayerSpec("global_pool", c, c, spatial_in=hw), LayerSpec("dense", c, classes)]
    return NetSpec(layers, classes)


BUILDERS = {"redundant_chain": redundant_chain, "mobile_net": mobile_net}


def build_net(spec, in_channels, image_size, classes):
    """NetSpec from a config mapping: {"name": builder, ...kwargs} or
    {"layers": [LayerSpec fields, ...]}."""
    spec = dict(spec)
    if "layers" in spec:
        extra = set(spec) - {"layers"}
        if extra:
            raise ConfigError(f"net: unexpected keys {sorted(extra)} next to 'layers'")
        try:
            layers = [LayerSpec(**{**l, "spatial_in": tuple(l.get("spatial_in", (1, 1)))}) for l in spec["layers"]]
            return NetSpec(layers, classes)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"net: {e}") from None
    name = spec.pop("name", None)
    if name not in BUILDERS:
        raise ConfigError(f"net: unknown builder {name!r}; known: {sorted(BUILDERS)}")
    try:
        return BUILDERS[name](in_channels=in_channels, image_size=image_size, classes=classes, **spec)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"net {name}: {e}") from None
