# app/nn/checkpoint.py

"""
================================================================================
 网络参数二进制格式 (app/nn/checkpoint.py)
================================================================================

单个网络的序列化格式（全部小端序）：

    b"CRI1"                       魔数
    u32 层数 n，随后 n 个 u32      各层宽度
    u8                            激活函数标签 (0 = tanh, 1 = relu)
    f64 * n_params                压平的参数向量

往返必须逐位一致。
"""
import struct
from typing import Tuple

import numpy as np

from app.errors import DataError
from app.nn.mlp import ACTIVATION_TAGS, MlpSpec

MAGIC = b"CRI1"
_TAG_TO_ACTIVATION = {tag: act for act, tag in ACTIVATION_TAGS.items()}


def dump_network(spec: MlpSpec, params: np.ndarray) -> bytes:
    widths = spec.layer_widths
    header = MAGIC + struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    header += struct.pack("<B", ACTIVATION_TAGS[spec.activation])
    return header + np.asarray(params, dtype="<f8").tobytes()


def load_network(blob: bytes, offset: int = 0) -> Tuple[MlpSpec, np.ndarray, int]:
    """
    从字节串中解析一个网络。

    Returns:
        tuple: (spec, params, 读取结束后的偏移量)。偏移量允许多个网络顺序拼接。
    """
    if blob[offset:offset + 4] != MAGIC:
        raise DataError(f"偏移 {offset} 处缺少网络魔数 {MAGIC!r}")
    offset += 4
    (n,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    widths = struct.unpack_from(f"<{n}I", blob, offset)
    offset += 4 * n
    (tag,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if tag not in _TAG_TO_ACTIVATION:
        raise DataError(f"未知的激活函数标签 {tag}")
    spec = MlpSpec(tuple(widths), _TAG_TO_ACTIVATION[tag])
    end = offset + 8 * spec.n_params
    if end > len(blob):
        raise DataError("网络参数块被截断")
    params = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
    return spec, params, end
