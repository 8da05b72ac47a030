""" Signed training records and the record commitment the monitor is initialised with.

A record is ``(x, y, sigma)`` where ``sigma`` is the authority's signature over the root of
a Merkle tree built over the encoded x values followed by the encoded y values. Across all
records a second tree is built whose leaf ``i`` hashes ``encode(i) || sigma_i``. Record ids
are 1-based; leaf ordinals are ``id - 1``.
"""
from dataclasses import dataclass, field, replace
import hashlib
import hmac
import json
from pathlib import Path
from typing import Protocol, runtime_checkable

from loguru import logger
import numpy as np

from .exceptions import EmptyInput, IndexOutOfRange, InvalidRecord, ShapeMismatch
from .hashing_merkle import construct_commit, encode_value, evidence_for
from .utilities import derive_key, require_keys, test_finite


#region Signatures
@runtime_checkable
class Signer(Protocol):
    """ Pluggable signature scheme: ``verify(m, sign(m))`` holds and fails on any tampered ``m``. """
    key_id: str

    def sign(self, message: bytes) -> bytes: ...

    def verify(self, message: bytes, signature: bytes) -> bool: ...


class HmacSigner:
    """ Keyed-hash MAC held by a simulated party.

    The verifier must hold the same key, which matches the simulation's trust model
    (authority, coordinator and monitors share pre-established keys).
    """

    def __init__(self, key, key_id="authority"):
        if len(key) == 0:
            raise ValueError("HMAC key must not be empty.")
        self._key = bytes(key)
        self.key_id = key_id

    @classmethod
    def from_seed(cls, seed, label):
        return cls(derive_key(seed, label), key_id=label)

    @classmethod
    def from_hex(cls, key_hex, label):
        return cls(bytes.fromhex(key_hex), key_id=label)

    def sign(self, message):
        return hmac.new(self._key, bytes(message), hashlib.sha256).digest()

    def verify(self, message, signature):
        if not isinstance(signature, (bytes, bytearray)):
            return False
        return hmac.compare_digest(self.sign(message), bytes(signature))

    def __repr__(self):
        return f"HmacSigner(key_id={self.key_id!r})"
#endregion


#region Records
@dataclass(frozen=True, eq=False)
class Record:
    """ One signed training sample.

    Attributes
    ----------
    id: int
        1-based position in the record store, 0 until the store assigns it.
    x: np.ndarray
        n_X input values.
    y: np.ndarray
        n_Y label values.
    sigma: bytes
        Authority signature over ``record_hash(x, y)``.
    """
    id: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    sigma: bytes = field(repr=False)


def record_leaves(x, y):
    """ Leaf bytes of the per-record tree: encoded x values, then encoded y values. """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise EmptyInput("Records need at least one x and one y value.")
    return [encode_value(float(v)) for v in x] + [encode_value(float(v)) for v in y]


def record_tree(x, y):
    return construct_commit(record_leaves(x, y))


def record_hash(x, y):
    """ Root of the per-record Merkle tree over x then y.

    Raises
    ------
    EmptyInput
        x or y is empty.
    """
    return record_tree(x, y).root


def sign_record(x, y, authority, record_id=0):
    x = test_finite(x, "x").ravel()
    y = test_finite(y, "y").ravel()
    return Record(id=record_id, x=x, y=y, sigma=authority.sign(record_hash(x, y)))


def validate_record(r, authority):
    """ True iff ``r.sigma`` is a valid authority signature over the record's hash. """
    try:
        return bool(authority.verify(record_hash(r.x, r.y), r.sigma))
    except (EmptyInput, ValueError, TypeError):
        return False


def record_leaf_input(record_id, sigma):
    """ Bytes hashed into leaf ``record_id - 1`` of the record tree: encode(id) || sigma. """
    return encode_value(int(record_id)) + bytes(sigma)
#endregion


#region Record store
@dataclass(frozen=True, eq=False)
class RecordStore:
    """ Worker-side collection of validated records and their commitment.

    Only ``h_R`` and ``n_R`` are handed to the monitor.
    """
    records: tuple = field(repr=False)
    record_tree: object = field(repr=False)
    per_record: dict = field(default_factory=dict, repr=False)

    @property
    def h_R(self):
        return self.record_tree.root

    @property
    def n_R(self):
        return len(self.records)

    @property
    def n_X(self):
        return self.records[0].x.size

    @property
    def n_Y(self):
        return self.records[0].y.size

    def record(self, i):
        if not 1 <= i <= self.n_R:
            raise IndexOutOfRange(f"Record id {i} is outside [1, {self.n_R}].")
        return self.records[i - 1]

    def membership(self, i):
        """ Returns ``(h_i, evidence)`` proving record ``i`` belongs to ``h_R``. """
        self.record(i)
        return self.record_tree.leaves[i - 1], evidence_for(self.record_tree, i - 1)

    def record_leaf_evidence(self, i, k):
        """ Returns ``(leaf bytes, evidence)`` for value ``k`` of record ``i``.

        ``k`` indexes the concatenation of x and y, so label ``j`` is ``k = n_X + j``.
        """
        return self.record_leaf_evidences(i, [k])[0]

    def record_leaf_evidences(self, i, ks):
        """ ``record_leaf_evidence`` for several values. The record tree is built on first use and kept. """
        r = self.record(i)
        if i not in self.per_record:
            leaves = record_leaves(r.x, r.y)
            self.per_record[i] = (leaves, construct_commit(leaves))
        leaves, tree = self.per_record[i]
        for k in ks:
            if not 0 <= k < len(leaves):
                raise IndexOutOfRange(f"Record value {k} is outside [0, {len(leaves)}).")
        return [(leaves[k], evidence_for(tree, k)) for k in ks]

    def public_view(self):
        """ Everything the monitor learns during preparation. """
        return {"h_R": self.h_R, "n_R": self.n_R}


def build_record_store(records, authority):
    """ Assigns ids 1..n_R, validates every record and builds the record tree.

    Parameters
    ----------
    records: list[Record]
    authority: Signer

    Returns
    -------
    RecordStore

    Raises
    ------
    EmptyInput
        No records.
    InvalidRecord
        Names the first record whose signature does not verify.
    ShapeMismatch
        Records disagree on n_X or n_Y.
    """
    if len(records) == 0:
        raise EmptyInput("Cannot build a record store with no records.")
    assigned = []
    for position, r in enumerate(records, start=1):
        r = replace(r, id=position)
        if r.x.size != records[0].x.size or r.y.size != records[0].y.size:
            raise ShapeMismatch(f"Record {position} does not match the shape of record 1.")
        if not validate_record(r, authority):
            raise InvalidRecord(position)
        assigned.append(r)
    tree = construct_commit([record_leaf_input(r.id, r.sigma) for r in assigned])
    logger.info(f"Record store built: n_R={len(assigned)}, h_R={tree.root.hex()[:16]}")
    return RecordStore(records=tuple(assigned), record_tree=tree)
#endregion


#region Loading
def load_records(fp, authority):
    """ Reads records from a JSON file and signs them with ``authority``.

    The expected format is as follows:

    ```
    {"n_X": 4, "n_Y": 2, "records": [{"x": [...], "y": [...]}, ...]}
    ```

    Arguments
    ---------
    fp: str or pathlib.Path
        Filepath to the records file
    authority: Signer

    Returns
    -------
    list[Record]
    """
    fp = Path(fp)
    if not fp.is_file():
        raise FileNotFoundError(f"File {fp} does not exist.")
    with open(fp) as f:
        obj = json.load(f)
    require_keys(obj, ["n_X", "n_Y", "records"], str(fp))
    out = []
    for position, entry in enumerate(obj["records"], start=1):
        x = np.asarray(entry["x"], dtype=np.float64)
        y = np.asarray(entry["y"], dtype=np.float64)
        if x.size != obj["n_X"] or y.size != obj["n_Y"]:
            raise ShapeMismatch(f"Record {position} in {fp} does not match n_X={obj['n_X']}, n_Y={obj['n_Y']}.")
        out.append(sign_record(x, y, authority, record_id=position))
    return out


def generate_records(n_R, n_X, n_Y, seed, authority):
    """ Synthetic standard-normal records, deterministic given ``seed``. """
    rng = np.random.default_rng(seed)
    return [sign_record(rng.standard_normal(n_X), rng.standard_normal(n_Y), authority, record_id=k + 1)
            for k in range(n_R)]
#endregion
