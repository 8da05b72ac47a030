""" Canonical encoding, hashing and Merkle commitment primitives.

Layout rules (normative, bit-exact):

- floats encode as the 8-byte little-endian IEEE-754 bit pattern, indices as 8-byte
  little-endian unsigned integers, byte strings pass through unchanged;
- leaf digest = SHA-256(0x00 || leaf bytes), internal digest = SHA-256(0x01 || left || right);
- a level with an odd number of nodes promotes its last node unchanged.
"""
from dataclasses import dataclass
import hashlib
from math import ceil, log2
from numbers import Integral, Real
import struct

import numpy as np

from .enumerations import DIGEST_SIZE, LEAF_PREFIX, NODE_PREFIX, Side
from .exceptions import EmptyInput, IndexOutOfRange


class Digest(bytes):
    """ A 32-byte hash value. Equality is byte equality. """

    def __new__(cls, value):
        value = bytes(value)
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"Digest must be {DIGEST_SIZE} bytes, got {len(value)}.")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"Digest({self.hex()[:16]}...)"


@dataclass(frozen=True)
class MerkleTree:
    """ Immutable Merkle tree.

    Attributes
    ----------
    levels: tuple[tuple[Digest, ...], ...]
        Hash layers from the leaf digests (``levels[0]``) up to the root (``levels[-1]``).
    """
    levels: tuple

    @property
    def leaves(self):
        return self.levels[0]

    @property
    def root(self):
        return self.levels[-1][0]

    @property
    def leaf_count(self):
        return len(self.levels[0])

    def __len__(self):
        return self.leaf_count


@dataclass(frozen=True)
class Evidence:
    """ Co-path hashes proving membership of one leaf.

    Attributes
    ----------
    index: int
        0-based leaf position.
    path: tuple[tuple[Digest, Side], ...]
        Sibling digests from the leaf level upwards, each with the side the sibling is on.
    leaf_count: int
        Number of leaves in the tree the evidence was cut from. Together with ``index`` it
        fixes the expected path shape, which binds the evidence to its position.
    """
    index: int
    path: tuple
    leaf_count: int

    def to_json(self):
        return {
            "index": self.index,
            "leaf_count": self.leaf_count,
            "path": [[sibling.hex(), side.value] for sibling, side in self.path],
        }

    @classmethod
    def from_json(cls, obj):
        path = tuple((Digest(bytes.fromhex(s)), Side(side)) for s, side in obj["path"])
        return cls(index=obj["index"], path=path, leaf_count=obj["leaf_count"])


#region Encoding and hashing
def encode_value(v):
    """ Canonical byte encoding of a scalar, an index or a byte string.

    Parameters
    ----------
    v: float, int or bytes
        Python/numpy floats encode as IEEE-754 doubles; non-negative integers as 64-bit
        unsigned indices; ``bytes`` pass through.

    Returns
    -------
    bytes
    """
    if isinstance(v, (bytes, bytearray)):
        return bytes(v)
    if isinstance(v, (bool, np.bool_)):
        raise TypeError("Booleans have no canonical encoding.")
    if isinstance(v, Integral):
        return struct.pack("<Q", int(v))
    if isinstance(v, Real):
        return struct.pack("<d", float(v))
    raise TypeError(f"Cannot encode value of type {type(v).__name__}.")


def decode_float(data):
    """ Inverse of ``encode_value`` for floats. """
    if len(data) != 8:
        raise ValueError(f"A float encodes to 8 bytes, got {len(data)}.")
    return struct.unpack("<d", bytes(data))[0]


def bit_equal(a, b):
    """ True iff two floats have the same IEEE-754 bit pattern. """
    return struct.pack("<d", float(a)) == struct.pack("<d", float(b))


def encode_values(values):
    """ Concatenated float encodings of ``values`` (any array-like), in row-major order. """
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def sha256(data):
    return Digest(hashlib.sha256(data).digest())


def leaf_hash(data):
    return sha256(LEAF_PREFIX + data)


def node_hash(left, right):
    return sha256(NODE_PREFIX + left + right)


def leaf_digest_of_group(values):
    """ Leaf digest of one group of float values, as built by ``group_commit``. """
    return leaf_hash(encode_values(values))
#endregion


#region Construction
def commit_digests(leaf_digests):
    """ Builds a tree over already-hashed leaves. """
    level = tuple(Digest(d) for d in leaf_digests)
    if len(level) == 0:
        raise EmptyInput("Cannot build a Merkle tree with no leaves.")
    levels = [level]
    while len(level) > 1:
        parents = [node_hash(level[k], level[k + 1]) for k in range(0, len(level) - 1, 2)]
        if len(level) % 2 == 1:
            parents.append(level[-1])
        level = tuple(parents)
        levels.append(level)
    return MerkleTree(levels=tuple(levels))


def construct_commit(leaves):
    """ Constructs a Merkle tree over a non-empty list of byte sequences.

    Parameters
    ----------
    leaves: list[bytes]

    Returns
    -------
    MerkleTree
        Tree whose ``root`` is the commitment to ``leaves``.

    Raises
    ------
    EmptyInput
        ``leaves`` is empty.
    """
    if len(leaves) == 0:
        raise EmptyInput("Cannot build a Merkle tree with no leaves.")
    return commit_digests([leaf_hash(bytes(leaf)) for leaf in leaves])


def group_commit(groups):
    """ Constructs a Merkle tree with one leaf per group of scalars.

    Leaf ``k`` hashes the concatenated encodings of ``groups[k]`` in order.

    Parameters
    ----------
    groups: iterable of array-likes of float

    Returns
    -------
    MerkleTree

    Raises
    ------
    EmptyInput
        No groups, or an empty group.
    """
    digests = []
    for group in groups:
        values = np.asarray(group, dtype=np.float64)
        if values.size == 0:
            raise EmptyInput("Groups must be non-empty.")
        digests.append(leaf_digest_of_group(values))
    return commit_digests(digests)
#endregion


#region Evidence and verification
def evidence_for(tree, i):
    """ Returns the co-path evidence for leaf ``i``.

    Raises
    ------
    IndexOutOfRange
        ``i`` is not a leaf position.
    """
    if not 0 <= i < tree.leaf_count:
        raise IndexOutOfRange(f"Leaf {i} is out of range for a tree of {tree.leaf_count} leaves.")
    path = []
    idx = i
    for level in tree.levels[:-1]:
        if idx % 2 == 1:
            path.append((level[idx - 1], Side.LEFT))
        elif idx + 1 < len(level):
            path.append((level[idx + 1], Side.RIGHT))
        idx //= 2
    return Evidence(index=i, path=tuple(path), leaf_count=tree.leaf_count)


def expected_sides(i, leaf_count):
    """ Sibling sides a genuine evidence for leaf ``i`` of a ``leaf_count``-leaf tree has. """
    sides = []
    idx, width = i, leaf_count
    while width > 1:
        if idx % 2 == 1:
            sides.append(Side.LEFT)
        elif idx + 1 < width:
            sides.append(Side.RIGHT)
        idx //= 2
        width = (width + 1) // 2
    return sides


def climb(leaf_digest, evid):
    """ Recomputes the root reached from ``leaf_digest`` by replaying ``evid``. """
    current = leaf_digest
    for sibling, side in evid.path:
        if side == Side.LEFT:
            current = node_hash(sibling, current)
        else:
            current = node_hash(current, sibling)
    return current


def verify_digest(leaf_digest, i, commitment, evid, leaf_count=None):
    """ Checks an already-hashed leaf against a commitment. Returns False on any mismatch. """
    if not isinstance(evid, Evidence) or evid.index != i:
        return False
    if leaf_count is not None and evid.leaf_count != leaf_count:
        return False
    if not 0 <= i < evid.leaf_count:
        return False
    if [side for _, side in evid.path] != expected_sides(i, evid.leaf_count):
        return False
    try:
        return climb(leaf_digest, evid) == commitment
    except (TypeError, ValueError):
        return False


def verify_element(u, i, commitment, evid, leaf_count=None):
    """ Verifies that ``u`` is leaf ``i`` of the tree committed to by ``commitment``.

    Parameters
    ----------
    u: bytes
        Leaf bytes (not yet hashed).
    i: int
        Claimed 0-based leaf position.
    commitment: Digest
        Root of the tree.
    evid: Evidence
        Co-path evidence for leaf ``i``.
    leaf_count: int, optional
        If given, the evidence must be cut from a tree of this many leaves.

    Returns
    -------
    bool
    """
    return verify_digest(leaf_hash(bytes(u)), i, commitment, evid, leaf_count)


def evidence_bound(leaf_count):
    """ Upper bound on the evidence length for a tree of ``leaf_count`` leaves. """
    return ceil(log2(leaf_count)) if leaf_count > 1 else 0
#endregion


#region Serialization
def serialize_tree(tree):
    """ Length-prefixed binary blob: u64 leaf count, then digests level by level. """
    parts = [struct.pack("<Q", tree.leaf_count)]
    for level in tree.levels:
        parts.extend(level)
    return b"".join(parts)


def deserialize_tree(blob):
    """ Rebuilds a tree from ``serialize_tree`` output and checks its internal levels.

    Raises
    ------
    ValueError
        The blob is truncated or its internal levels do not hash to the stored values.
    """
    if len(blob) < 8:
        raise ValueError("Tree blob is truncated.")
    (leaf_count,) = struct.unpack("<Q", blob[:8])
    if leaf_count == 0:
        raise EmptyInput("Tree blob has no leaves.")
    body = blob[8:]
    leaves = [Digest(body[k * DIGEST_SIZE:(k + 1) * DIGEST_SIZE]) for k in range(leaf_count)]
    tree = commit_digests(leaves)
    if serialize_tree(tree) != blob:
        raise ValueError("Tree blob does not match its recomputed levels.")
    return tree
#endregion
