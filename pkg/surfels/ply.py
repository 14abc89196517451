"""
Binary little-endian PLY persistence for surfel clouds.
"""
import io

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .cloud import SurfelCloud
from .exceptions import InvalidArgument
from .sh import MAX_SH_BASIS

SH_SLOTS = 3 * MAX_SH_BASIS


def construct_list_of_attributes():
    attributes = [('x', 'f4'), ('y', 'f4'), ('z', 'f4')]
    attributes += [(f'rot_{i}', 'f4') for i in range(4)]
    attributes += [(f'scale_{i}', 'f4') for i in range(2)]
    attributes += [('opacity', 'f4'), ('confidence', 'f4'), ('task', 'u1'), ('sh_order', 'u1')]
    attributes += [(f'sh_{i}', 'f4') for i in range(SH_SLOTS)]
    return attributes


def _to_ply(cloud):
    count = len(cloud)
    elements = np.empty(count, dtype=construct_list_of_attributes())
    state = {k: v.detach().cpu().numpy() for k, v in cloud.state_dict().items()}
    for axis, name in enumerate('xyz'):
        elements[name] = state['xyz'][:, axis]
    for i in range(4):
        elements[f'rot_{i}'] = state['rotation'][:, i]
    for i in range(2):
        elements[f'scale_{i}'] = state['scaling'][:, i]
    elements['opacity'] = state['opacity'][:, 0]
    elements['confidence'] = state['confidence'][:, 0]
    elements['task'] = state['task']
    elements['sh_order'] = state['sh_order']
    # slots above a surfel's order are written as zeros
    order_mask = (np.arange(MAX_SH_BASIS)[None, :] < (state['sh_order'][:, None] + 1) ** 2)
    sh = (state['sh'] * order_mask[..., None]).reshape(count, SH_SLOTS)
    for i in range(SH_SLOTS):
        elements[f'sh_{i}'] = sh[:, i]
    return PlyData([PlyElement.describe(elements, 'vertex')], text=False, byte_order='<')


def save_ply(cloud, path):
    _to_ply(cloud).write(str(path))


def ply_bytes(cloud):
    buffer = io.BytesIO()
    _to_ply(cloud).write(buffer)
    return buffer.getvalue()


def load_ply(path, dtype=torch.float32):
    plydata = PlyData.read(str(path))
    if 'vertex' not in plydata:
        raise InvalidArgument(f'{path} has no vertex element')
    vertex = plydata['vertex']

    def column(*names):
        return torch.as_tensor(np.stack([np.asarray(vertex[n], dtype=np.float64) for n in names], axis=1), dtype=dtype)

    count = len(vertex.data)
    sh = column(*[f'sh_{i}' for i in range(SH_SLOTS)]).reshape(count, MAX_SH_BASIS, 3)
    return SurfelCloud(
        column('x', 'y', 'z'),
        column(*[f'rot_{i}' for i in range(4)]),
        column('scale_0', 'scale_1'),
        column('opacity'),
        sh,
        column('confidence'),
        sh_order=torch.as_tensor(np.asarray(vertex['sh_order'], dtype=np.int64)),
        task=torch.as_tensor(np.asarray(vertex['task'], dtype=np.int64)),
    )
