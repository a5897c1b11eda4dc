"""Neural building blocks of the detector."""
from .acmix import ACmix
from .bra import (
    BiFormerBlock,
    BiLevelRoutingAttention,
    ChannelLayerNorm,
    gather_kv,
    multihead_attention,
    region_merge,
    region_partition,
    routing_topk,
)
from .common import CBS, ELAN, MP, maxpool
from .container import load_arrays, read_tensors, state_to_arrays, write_tensors
from .elan import ESAN
from .params import BlockParamCount, count_params, param_table, passthrough_bn
from .spp import ACSPPCSPC, SPPCSPC

__all__ = [
    "ACmix", "BiFormerBlock", "BiLevelRoutingAttention", "ChannelLayerNorm", "gather_kv",
    "multihead_attention", "region_merge", "region_partition", "routing_topk", "CBS", "ELAN",
    "MP", "maxpool", "load_arrays", "read_tensors", "state_to_arrays", "write_tensors", "ESAN",
    "BlockParamCount", "count_params", "param_table", "passthrough_bn", "ACSPPCSPC", "SPPCSPC",
]
