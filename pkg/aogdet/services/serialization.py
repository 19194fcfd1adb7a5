# aogdet/services/serialization.py
# AOGM model files.
#
#   "AOGM" | u32 version | u32 section count
#   per section: 4-byte tag | u64 payload length | payload
#     NODE  utf-8 JSON structure (nodes, shapes, handles)
#     WGHT  flattened parameters, little-endian float64
#     EDGE  u32 leaf-edge count, (u32 a, u32 b, 4 x f8)*,
#           u32 and-edge count,  (u32 r, u32 r', 6 x f8)*
# Everything little-endian.

import json
import logging
import os
import struct

import numpy as np

from aogdet.errors import CorruptModel, DimensionMismatch, IoError, VersionError
from aogdet.models import AND_EDGE_DIM, LEAF_EDGE_DIM, AndOrGraph, flatten_parameters, unflatten_parameters
from aogdet.services.imaging import PartShape

logger = logging.getLogger(__name__)

MAGIC = b'AOGM'
FORMAT_VERSION = 1

_LEAF_EDGE = np.dtype([('a', '<u4'), ('b', '<u4'), ('alpha', '<f8', (LEAF_EDGE_DIM,))])
_AND_EDGE = np.dtype([('r', '<u4'), ('rp', '<u4'), ('alpha', '<f8', (AND_EDGE_DIM,))])


# --- 1. Encoding ---

def _structure(graph):
    return {
        'feature_dim': graph.feature_dim,
        'next_handle': graph._next_handle,
        'and_nodes': [{'id': node.id, 'class_name': node.class_name, 'view': node.view,
                       'root_shape': [node.root_shape.rows, node.root_shape.cols]}
                      for node in graph.and_nodes],
        'or_nodes': [{'owner': node.owner_class, 'slot': node.part_slot,
                      'anchor': list(node.anchor_offset), 'children': list(node.children)}
                     for node in graph.or_nodes],
        'leaves': [{'handle': leaf.handle, 'slot': leaf.part_slot,
                    'shape': [leaf.shape.rows, leaf.shape.cols]}
                   for leaf in graph.leaves],
    }


def _edges(graph):
    leaf = np.zeros(len(graph.edges.leaf_edges), dtype=_LEAF_EDGE)
    for index, ((a, b), alpha) in enumerate(sorted(graph.edges.leaf_edges.items())):
        leaf[index] = (a, b, alpha)
    pairs = np.zeros(len(graph.edges.and_edges), dtype=_AND_EDGE)
    for index, ((r, rp), alpha) in enumerate(sorted(graph.edges.and_edges.items())):
        pairs[index] = (r, rp, alpha)
    return (struct.pack('<I', leaf.size) + leaf.tobytes()
            + struct.pack('<I', pairs.size) + pairs.tobytes())


def serialize(graph):
    """Encodes the graph as an AOGM byte string (lossless)."""
    sections = [
        (b'NODE', json.dumps(_structure(graph), sort_keys=True).encode('utf-8')),
        (b'WGHT', flatten_parameters(graph).astype('<f8').tobytes()),
        (b'EDGE', _edges(graph)),
    ]
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(sections))]
    for tag, payload in sections:
        chunks.append(tag + struct.pack('<Q', len(payload)))
        chunks.append(payload)
    return b''.join(chunks)


# --- 2. Decoding ---

def _read_sections(data):
    if len(data) < 12:
        raise CorruptModel("Model stream is truncated (header)")
    if data[:4] != MAGIC:
        raise CorruptModel(f"Not an AOGM model (magic {data[:4]!r})")
    version, count = struct.unpack_from('<II', data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"Unsupported model format version {version} (expected {FORMAT_VERSION})",
                           version=version)
    offset = 12
    sections = {}
    for _ in range(count):
        if offset + 12 > len(data):
            raise CorruptModel("Model stream is truncated (section header)")
        tag = data[offset:offset + 4]
        (length,) = struct.unpack_from('<Q', data, offset + 4)
        offset += 12
        if offset + length > len(data):
            raise CorruptModel(f"Model stream is truncated (section {tag!r})")
        sections[tag] = data[offset:offset + length]
        offset += length
    if offset != len(data):
        raise CorruptModel(f"{len(data) - offset} trailing bytes after the last section")
    for tag in (b'NODE', b'WGHT', b'EDGE'):
        if tag not in sections:
            raise CorruptModel(f"Missing section {tag.decode()}")
    return sections


def _parse_edges(payload):
    try:
        (n_leaf,) = struct.unpack_from('<I', payload, 0)
        offset = 4
        leaf = np.frombuffer(payload, dtype=_LEAF_EDGE, count=n_leaf, offset=offset)
        offset += n_leaf * _LEAF_EDGE.itemsize
        (n_and,) = struct.unpack_from('<I', payload, offset)
        offset += 4
        pairs = np.frombuffer(payload, dtype=_AND_EDGE, count=n_and, offset=offset)
        offset += n_and * _AND_EDGE.itemsize
    except (struct.error, ValueError) as e:
        raise CorruptModel(f"Corrupt EDGE section: {e}")
    if offset != len(payload):
        raise CorruptModel("EDGE section length mismatch")
    return leaf, pairs


def deserialize(data):
    """
    Rebuilds a graph from AOGM bytes.

    Raises:
        VersionError: unknown format version
        CorruptModel: truncated or inconsistent stream
    """
    sections = _read_sections(bytes(data))
    try:
        structure = json.loads(sections[b'NODE'].decode('utf-8'))
        graph = AndOrGraph(feature_dim=int(structure['feature_dim']))
        for node in structure['and_nodes']:
            graph.add_and_node(node['class_name'], int(node['view']), PartShape(*node['root_shape']),
                               with_leaves=False)
        for leaf in structure['leaves']:
            graph._next_handle = int(leaf['handle'])
            graph.add_leaf(int(leaf['slot']), PartShape(*leaf['shape']))
        graph._next_handle = int(structure['next_handle'])
        for node in structure['or_nodes']:
            or_node = graph.or_node(int(node['owner']), int(node['slot']))
            or_node.anchor_offset = tuple(int(v) for v in node['anchor'])
            or_node.children = sorted(int(h) for h in node['children'])
        graph.compact()
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as e:
        raise CorruptModel(f"Corrupt NODE section: {e}")

    if len(sections[b'WGHT']) % 8:
        raise CorruptModel("WGHT section is not a whole number of doubles")
    omega = np.frombuffer(sections[b'WGHT'], dtype='<f8').astype(np.float64)
    try:
        unflatten_parameters(graph, omega)
    except DimensionMismatch as e:
        raise CorruptModel(f"Weight section does not match the structure: {e.message}")

    leaf, pairs = _parse_edges(sections[b'EDGE'])
    for record in leaf:
        graph.edges.leaf_edges[(int(record['a']), int(record['b']))] = record['alpha'].astype(np.float64)
    for record in pairs:
        graph.edges.and_edges[(int(record['r']), int(record['rp']))] = record['alpha'].astype(np.float64)
    return graph


# --- 3. Files ---

def save_model(path, graph):
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'wb') as handle:
            handle.write(serialize(graph))
    except OSError as e:
        raise IoError(f"Cannot write model {path}: {e}", path=path)
    logger.info(f"Saved model with m={graph.m}, n={graph.n} to {path}")


def load_model(path):
    """
    Raises:
        IoError: "model not found" for a missing path
    """
    if not os.path.isfile(path):
        raise IoError(f"model not found: {path}", path=path)
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as e:
        raise IoError(f"Cannot read model {path}: {e}", path=path)
    return deserialize(data)
