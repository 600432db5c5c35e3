"""Architecture hyperparameters.

Field defaults are the desk-scale values; :meth:`ModelConfig.paper_scale`
switches to the full-size configuration used for parameter accounting
(content stack matching a 12-layer/768-dim masked-prediction encoder,
other_dim solved so the cross-information encoder lands between the two
published figures, decoder regularizer around 9.3M).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

ConvSpec = tuple[tuple[int, int, int], ...]

# (channels, kernel, stride) x 7, total stride 320 -> one frame per 20 ms at 16 kHz
PAPER_CONV_SPEC: ConvSpec = (
    (512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
    (512, 3, 2), (512, 2, 2), (512, 2, 2),
)
# same stride ladder at desk width
TOY_CONV_SPEC: ConvSpec = tuple((64, k, s) for _, k, s in PAPER_CONV_SPEC)


@dataclass
class ModelConfig:
    sample_rate: int = 16000
    shared_conv_spec: ConvSpec = TOY_CONV_SPEC

    # content path
    content_layers: int = 4
    content_dim: int = 64
    content_heads: int = 4
    content_ffn: int = 256
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    mask_ratio: float = 0.5
    mask_span: int = 10

    # other path
    other_blocks: int = 4
    other_dim: int = 32
    pool_kernel: int = 10
    group_size: int = 10
    sa_kernel: int = 11
    res2net_scale: int = 4
    other_uses_masked: bool = False

    # heads
    teacher_dim: int = 512
    vocab_size: int = 32
    num_label_sets: int = 6
    code_dim: int = 16
    untie_label_projections: bool = False
    tau: float = 0.1

    # regularizer
    regularizer_enabled: bool = True
    reg_heads: int = 8
    reg_dim: int = 64
    reg_ffn: int = 256
    grl_lambda: float = 1.0

    def __post_init__(self):
        stride = 1
        for _, _, s in self.shared_conv_spec:
            stride *= s
        if self.sample_rate == 16000 and stride != 320:
            raise ValueError(f"shared conv stack stride {stride} != 320 at 16 kHz")
        self.total_stride = stride
        if self.pool_kernel != self.group_size:
            raise ValueError("pool_kernel must equal group_size (split/append arithmetic)")
        if self.sa_kernel != self.group_size + 1:
            raise ValueError("sa_kernel must equal group_size + 1")
        if self.content_dim % self.content_heads:
            raise ValueError("content_dim must be divisible by content_heads")
        if self.other_dim % self.res2net_scale:
            raise ValueError("other_dim must be divisible by res2net_scale")
        if self.reg_dim % self.reg_heads:
            raise ValueError("reg_dim must be divisible by reg_heads")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        # num_label_sets capped at content_layers; a 4-layer encoder cannot
        # host six distinct label-set taps.
        base = dict(num_label_sets=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            shared_conv_spec=PAPER_CONV_SPEC,
            content_layers=12, content_dim=768, content_heads=12,
            content_ffn=3072, pos_conv_kernel=128, pos_conv_groups=16,
            other_blocks=12, other_dim=256,
            vocab_size=1005, num_label_sets=6, code_dim=256,
            reg_dim=768, reg_heads=8, reg_ffn=2304,
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("total_stride", None)
        d["shared_conv_spec"] = [list(s) for s in self.shared_conv_spec]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["shared_conv_spec"] = tuple(tuple(s) for s in d["shared_conv_spec"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
