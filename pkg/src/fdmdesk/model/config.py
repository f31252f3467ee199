"""Model configuration and the two standard presets."""
from dataclasses import dataclass, replace

from ..errors import ConfigError
from .. import vocab


@dataclass(frozen=True)
class ModelConfig:
    blocks: int
    heads: int
    width: int
    ffn_size: int
    seq_len: int
    dropout: float = 0.1
    norm_placement: str = "pre"  # "pre" | "post"
    tied_embedding: bool = True
    mem_len: int = 0  # 0 -> defaults to seq_len
    table_size: int = vocab.TABLE_SIZE
    pos_vocab: int = vocab.POS_VOCAB
    local_pos_vocab: int = 512
    patch_channels: int = 32  # GroupNorm uses 32 groups, so multiples of 32
    patch_pool: int = 4
    gn_groups: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.ffn_size < self.width:
            raise ConfigError("ffn_size must be >= width")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError(f"norm_placement {self.norm_placement!r}")
        if self.patch_channels % self.gn_groups:
            raise ConfigError("patch_channels must be a multiple of gn_groups")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def memory_len(self):
        return self.mem_len if self.mem_len > 0 else self.seq_len


PRESETS = {
    "db1": ModelConfig(blocks=24, heads=16, width=2048, ffn_size=8192, seq_len=1024),
    "desk": ModelConfig(blocks=4, heads=4, width=128, ffn_size=512, seq_len=256),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (have: {sorted(PRESETS)})")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg
