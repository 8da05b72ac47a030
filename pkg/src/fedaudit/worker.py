""" The untrusted worker: runs layer stages, commits to them and answers challenges.

A round is a forward pass over the layer stack, the loss, then a backward pass in reverse.
Stage ids are ``fwd:<l>``, ``loss`` and ``bwd:<l>``. Each stage exposes one or more
computation sets (components) that the monitor samples from:

- convolution forward ``y``; backward ``dx`` and ``df``;
- fully-connected forward ``y_prime``; backward ``dx`` and ``dtheta``;
- activation forward and backward ``simd``;
- loss ``loss``.

The leaf layouts defined at the top of this module are shared with the monitor and the
coordinator; they are the normative mapping from structured indices to leaf ordinals.
"""
from dataclasses import dataclass, field
import hashlib
import math

from loguru import logger
import numpy as np

from .data_records import record_hash
from .enumerations import CheatMode, FAKE_DELTA_HIGH, FAKE_DELTA_LOW, TreeId
from .exceptions import ConfigError, MissingPriorCommitment, ProtocolOrderError, UnknownLeaf
from .hashing_merkle import Digest, Evidence, encode_value, encode_values, evidence_for, group_commit
from .nn_core import (
    activation_apply, activation_grad, conv_backward, conv_forward, fc_backward, fc_backward_partials,
    fc_partials, loss_eval, ordered_sum, split_size,
)


#region Leaf layouts
def landmark_grid(spec):
    """ Number of landmark blocks along each side of X. """
    return math.ceil(spec.alpha_X / spec.alpha_F_landmark)


def landmark_block_shape(spec, bi, bj):
    a = spec.alpha_F_landmark
    return min(a, spec.alpha_X - bi * a), min(a, spec.alpha_X - bj * a)


def landmark_blocks(spec, X):
    """ Row-major landmark blocks of X; edge blocks are clipped to X. Leaf ordinal bi * grid + bj. """
    a, nb = spec.alpha_F_landmark, landmark_grid(spec)
    X = np.asarray(X, dtype=np.float64).reshape(spec.alpha_X, spec.alpha_X)
    return [X[bi * a:(bi + 1) * a, bj * a:(bj + 1) * a].ravel() for bi in range(nb) for bj in range(nb)]


def covering_blocks(spec, r, c):
    """ Landmark blocks (bi, bj) intersecting the receptive field of output (r, c), row-major. """
    a, d = spec.alpha_F_landmark, spec.delta
    rows = range((r * d) // a, (r * d + spec.alpha_F - 1) // a + 1)
    cols = range((c * d) // a, (c * d + spec.alpha_F - 1) // a + 1)
    return [(bi, bj) for bi in rows for bj in cols]


def patch_from_blocks(spec, blocks, r, c):
    """ Rebuilds the receptive field of (r, c) from its covering blocks.

    Parameters
    ----------
    blocks: dict[(int, int), np.ndarray]
        Flattened block values keyed by block position.
    """
    a, d = spec.alpha_F_landmark, spec.delta
    keys = covering_blocks(spec, r, c)
    bi0, bj0 = keys[0]
    bi1, bj1 = keys[-1]
    height = sum(landmark_block_shape(spec, bi, bj0)[0] for bi in range(bi0, bi1 + 1))
    width = sum(landmark_block_shape(spec, bi0, bj)[1] for bj in range(bj0, bj1 + 1))
    canvas = np.zeros((height, width), dtype=np.float64)
    for bi, bj in keys:
        h, w = landmark_block_shape(spec, bi, bj)
        top, left = (bi - bi0) * a, (bj - bj0) * a
        canvas[top:top + h, left:left + w] = np.asarray(blocks[(bi, bj)], dtype=np.float64).reshape(h, w)
    top, left = r * d - bi0 * a, c * d - bj0 * a
    return canvas[top:top + spec.alpha_F, left:left + spec.alpha_F]


def conv_x_groups(spec, X):
    """ Groups X_{i,j,u} = {X[u*delta + i, v*delta + j] : v}. Leaf ordinal (i * alpha_F + j) * alpha_Y + u. """
    X = np.asarray(X, dtype=np.float64).reshape(spec.alpha_X, spec.alpha_X)
    a_F, a_Y, d = spec.alpha_F, spec.alpha_Y, spec.delta
    I = np.arange(a_F)[:, None, None, None]
    J = np.arange(a_F)[None, :, None, None]
    U = np.arange(a_Y)[None, None, :, None]
    V = np.arange(a_Y)[None, None, None, :]
    return X[U * d + I, V * d + J].reshape(a_F * a_F * a_Y, a_Y)


def theta_forward_groups(theta, n_X):
    """ Group (k, c) holds theta rows k*s_X .. (k+1)*s_X - 1 of column c. Leaf ordinal k * l_Y + c. """
    l_X, l_Y = theta.shape
    s_X = l_X // n_X
    return np.asarray(theta, dtype=np.float64).reshape(n_X, s_X, l_Y).transpose(0, 2, 1).reshape(n_X * l_Y, s_X)


def theta_backward_groups(theta, n_Y):
    """ Group (j, k) holds theta[j, k*s_Y .. (k+1)*s_Y - 1]. Leaf ordinal j * n_Y + k. """
    l_X, l_Y = theta.shape
    return np.asarray(theta, dtype=np.float64).reshape(l_X * n_Y, l_Y // n_Y)


def expected_leaf_counts(layer, direction):
    """ Leaf count of every tree a stage commits, derived from the layer alone.

    For the loss stage pass the label count n_Y in place of a layer.
    """
    if direction == "loss":
        return {TreeId.LOSS: 1 + layer}
    if layer.kind == "activation":
        counts = {TreeId.BASIC_IN: layer.length, TreeId.BASIC_OUT: layer.length}
        if direction == "bwd":
            counts[TreeId.BASIC_GRAD_OUT] = layer.length
        return counts
    if layer.kind == "conv":
        spec = layer.spec
        if direction == "fwd":
            return {TreeId.X_LANDMARK: landmark_grid(spec) ** 2, TreeId.Y_ROWS: spec.n_F * spec.alpha_Y}
        return {
            TreeId.GRAD_X: spec.alpha_X ** 2,
            TreeId.GRAD_F: spec.n_F * spec.alpha_F ** 2,
            TreeId.GRAD_Y_ROWS: spec.n_F * spec.alpha_Y,
            TreeId.X_GROUPS: spec.alpha_F ** 2 * spec.alpha_Y,
        }
    spec = layer.spec
    n_X, _ = split_size(spec.l_X)
    n_Y, _ = split_size(spec.l_Y)
    if direction == "fwd":
        return {TreeId.Y_PRIME_ROWS: spec.l_Y, TreeId.X_SUBVECTORS: n_X, TreeId.THETA_GROUPS: n_X * spec.l_Y}
    return {
        TreeId.GRAD_X_PRIME_ROWS: spec.l_X,
        TreeId.GRAD_Y_SUBVECTORS: n_Y,
        TreeId.THETA_BWD_GROUPS: spec.l_X * n_Y,
        TreeId.X_SUBVECTORS: n_X,
        TreeId.GRAD_THETA_ROWS: spec.l_X,
    }


def stage_components(layer, direction):
    """ Computation sets of a stage with their sizes, in a fixed order. Loss takes n_Y as ``layer``. """
    if direction == "loss":
        return {"loss": 1 + layer}
    if layer.kind == "activation":
        return {"simd": layer.length}
    spec = layer.spec
    if layer.kind == "conv":
        if direction == "fwd":
            return {"y": spec.n_outputs}
        return {"dx": spec.n_F * spec.alpha_X ** 2, "df": spec.n_F * spec.alpha_F ** 2 * spec.alpha_Y}
    n_X, _ = split_size(spec.l_X)
    n_Y, _ = split_size(spec.l_Y)
    if direction == "fwd":
        return {"y_prime": spec.l_Y * n_X}
    return {"dx": spec.l_X * n_Y, "dtheta": spec.l_X * spec.l_Y}


def stage_order(n_layers):
    return [f"fwd:{l}" for l in range(n_layers)] + ["loss"] + [f"bwd:{l}" for l in reversed(range(n_layers))]


def parse_stage(stage_id):
    """ ``fwd:3`` -> ("fwd", 3); ``loss`` -> ("loss", None). """
    if stage_id == "loss":
        return "loss", None
    direction, _, index = stage_id.partition(":")
    if direction not in ("fwd", "bwd") or not index.isdigit():
        raise ConfigError(f"Unknown stage id '{stage_id}'.")
    return direction, int(index)


def updates_digest(updates):
    """ Digest binding a round's per-layer weight updates, in ascending layer order. """
    h = hashlib.sha256()
    for l in sorted(updates):
        arr = np.asarray(updates[l], dtype=np.float64)
        h.update(encode_value(int(l)))
        h.update(encode_values(np.asarray(arr.shape, dtype=np.float64)))
        h.update(encode_values(arr))
    return Digest(h.digest())
#endregion


#region Messages
@dataclass(frozen=True)
class CheatStrategy:
    """ How a dishonest worker deviates.

    Attributes
    ----------
    stage: str
        Target stage id. Ignored by ``wrong_record``.
    mode: CheatMode
    m: int
        Number of faked computations for ``fake_outputs``.
    component: str, optional
        Target computation set; the stage's first component if omitted.
    """
    stage: str = "fwd:0"
    mode: CheatMode = CheatMode.FAKE_OUTPUTS
    m: int = 1
    component: str = None

    @classmethod
    def from_dict(cls, obj):
        return cls(stage=obj.get("stage", "fwd:0"), mode=CheatMode(obj.get("mode", "fake_outputs")),
                   m=int(obj.get("m", 1)), component=obj.get("component"))

    def to_dict(self):
        return {"stage": self.stage, "mode": self.mode.value, "m": self.m, "component": self.component}


@dataclass(frozen=True)
class StageCommitments:
    stage: str
    roots: dict
    components: dict

    def to_json(self):
        return {"stage": self.stage, "roots": {t.value: r.hex() for t, r in self.roots.items()},
                "components": dict(self.components)}


@dataclass(frozen=True)
class Challenge:
    """ Leaves requested from one stage, each as (tree id, leaf ordinal). """
    stage: str
    leaves: tuple

    def to_json(self):
        return {"stage": self.stage, "leaves": [[t.value, int(k)] for t, k in self.leaves]}


@dataclass(frozen=True)
class ChallengeResponse:
    """ Requested leaf values with their evidences, keyed by (tree id, leaf ordinal). """
    stage: str
    items: dict = field(repr=False)

    def values(self, tree_id, ordinal):
        return self.items[(tree_id, ordinal)][0]

    def evidence(self, tree_id, ordinal):
        return self.items[(tree_id, ordinal)][1]

    def to_json(self):
        return {"stage": self.stage, "items": [
            {"tree": t.value, "leaf": int(k), "values": np.asarray(v).tolist(), "evidence": e.to_json()}
            for (t, k), (v, e) in self.items.items()]}


@dataclass(frozen=True)
class FinalLayerSubmission:
    """ What the worker hands over for the final-layer recomputation. """
    record_id: int
    yhat: np.ndarray = field(repr=False)
    loss: float
    grad: np.ndarray = field(repr=False)
    record_root: Digest = field(repr=False)
    sigma: bytes = field(repr=False)
    y_items: tuple = field(repr=False)


@dataclass(frozen=True)
class RoundResult:
    record_id: int
    updates: dict = field(repr=False)
    updates_digest: Digest
#endregion


@dataclass
class _Stage:
    stage: str
    layer: int
    trees: dict = field(default_factory=dict)
    leaves: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    faked: dict = field(default_factory=dict)


class Worker:
    """ Untrusted worker holding a record store and the current global model.

    Parameters
    ----------
    worker_id: str
    store: RecordStore
    cheat: CheatStrategy, optional
        Honest if omitted.
    seed: int
        Seeds the cheating randomness.
    """

    def __init__(self, worker_id, store, cheat=None, seed=0):
        self.worker_id = worker_id
        self.store = store
        self.cheat = cheat
        self._rng = np.random.default_rng(seed)
        self._layers = None
        self._stages = {}
        self._transcript = None
        self._record = None
        self._claimed_record = None
        self._activations = []
        self._grads = {}
        self._updates = {}
        self._loss = None
        self.reads = 0
        self.reads_by_stage = {}

    #region Properties
    @property
    def layers(self):
        return self._layers

    @property
    def stage_ids(self):
        return stage_order(len(self._layers))

    @property
    def updates(self):
        return dict(self._updates)

    def faked_indices(self, stage_id, component):
        """ Flat computation indices faked in the current round, for diagnostics. """
        return self._stages[stage_id].faked.get(component, [])
    #endregion

    def load_model(self, layers):
        self._layers = tuple(layers)
        self._stages = {}
        logger.debug(f"Worker {self.worker_id} loaded a model with {len(self._layers)} layers")

    #region Round
    def record_membership(self, i):
        """ Answers the round-initialisation challenge for record ``i`` with (h_i, evidence). """
        claimed = i
        if self.cheat is not None and self.cheat.mode == CheatMode.WRONG_RECORD:
            claimed = i % self.store.n_R + 1
        self._record = self.store.record(claimed)
        self._claimed_record = i
        h, evid = self.store.membership(claimed)
        self._count_reads("init", 1 + len(evid.path))
        return h, evid

    def begin_round(self, record_id, transcript=None):
        if self._layers is None:
            raise MissingPriorCommitment("No model has been loaded.")
        if self._claimed_record != record_id:
            self.record_membership(record_id)
        self._transcript = transcript
        self._stages = {}
        self._activations = [self._record.x]
        self._grads = {}
        self._updates = {}
        self._loss = None

    def train_round(self, record_id, transcript=None):
        """ Runs every stage of one round, committing each before the next starts. """
        self.begin_round(record_id, transcript)
        for stage_id in self.stage_ids:
            self.run_stage(stage_id)
        result = RoundResult(record_id=record_id, updates=self.updates, updates_digest=updates_digest(self._updates))
        logger.debug(f"Worker {self.worker_id} finished round on record {record_id}")
        return result

    def run_stage(self, stage_id):
        """ Executes one stage and commits to it.

        Returns
        -------
        tuple[np.ndarray, StageCommitments]
            The stage output vector and the roots sent to the monitor.

        Raises
        ------
        MissingPriorCommitment
            The previous stage (or round initialisation) has not been committed.
        ProtocolOrderError
            The stage has already been committed this round.
        """
        if self._record is None or self._layers is None:
            raise MissingPriorCommitment("The round has not been initialised.")
        order = self.stage_ids
        if stage_id not in order:
            raise UnknownLeaf(stage_id)
        if stage_id in self._stages:
            raise ProtocolOrderError(f"Stage {stage_id} has already been committed.")
        position = order.index(stage_id)
        if position > 0 and order[position - 1] not in self._stages:
            raise MissingPriorCommitment(f"Stage {order[position - 1]} must be committed before {stage_id}.")

        direction, l = parse_stage(stage_id)
        if direction == "fwd":
            output, stage = self._forward(stage_id, l)
        elif direction == "loss":
            output, stage = self._loss_stage(stage_id)
        else:
            output, stage = self._backward(stage_id, l)

        for tree_id, groups in stage.leaves.items():
            stage.trees[tree_id] = group_commit(groups)
        self._stages[stage_id] = stage
        commitments = StageCommitments(stage=stage_id, roots={t: tree.root for t, tree in stage.trees.items()},
                                       components=dict(stage.components))
        if self._transcript is not None:
            self._transcript.commit(stage_id, commitments.roots)
        logger.debug(f"Worker {self.worker_id} committed {stage_id} ({len(stage.trees)} trees)")
        return output, commitments
    #endregion

    #region Stages
    def _forward(self, stage_id, l):
        layer = self._layers[l]
        x = self._activations[l]
        stage = _Stage(stage_id, l, components=stage_components(layer, "fwd"))
        if layer.kind == "conv":
            spec = layer.spec
            X = x.reshape(spec.alpha_X, spec.alpha_X)
            Y = self._tamper(stage, "y", conv_forward(spec, X, layer.filters))
            stage.leaves[TreeId.X_LANDMARK] = landmark_blocks(spec, X)
            stage.leaves[TreeId.Y_ROWS] = Y.reshape(spec.n_F * spec.alpha_Y, spec.alpha_Y)
            output = Y.ravel()
        elif layer.kind == "fc":
            spec = layer.spec
            n_X, s_X = split_size(spec.l_X)
            y_prime, _ = fc_partials(spec, x, n_X)
            y_prime = self._tamper(stage, "y_prime", y_prime)
            stage.leaves[TreeId.Y_PRIME_ROWS] = y_prime
            stage.leaves[TreeId.X_SUBVECTORS] = x.reshape(n_X, s_X)
            stage.leaves[TreeId.THETA_GROUPS] = theta_forward_groups(spec.theta, n_X)
            output = ordered_sum(y_prime, axis=1)
        else:
            out = self._tamper(stage, "simd", activation_apply(layer.activation, x))
            stage.leaves[TreeId.BASIC_IN] = x.reshape(-1, 1)
            stage.leaves[TreeId.BASIC_OUT] = out.reshape(-1, 1)
            output = out
        self._activations.append(np.asarray(output, dtype=np.float64).ravel())
        return self._activations[-1], stage

    def _loss_stage(self, stage_id):
        yhat = self._activations[-1]
        n_Y = yhat.size
        stage = _Stage(stage_id, len(self._layers), components=stage_components(n_Y, "loss"))
        loss, grad = loss_eval(yhat, self._record.y)
        values = self._tamper(stage, "loss", np.concatenate([[loss], grad]))
        self._loss = float(values[0])
        self._grads[len(self._layers)] = values[1:].copy()
        stage.leaves[TreeId.LOSS] = values.reshape(-1, 1)
        return values, stage

    def _backward(self, stage_id, l):
        layer = self._layers[l]
        x = self._activations[l]
        grad_out = self._grads[l + 1]
        stage = _Stage(stage_id, l, components=stage_components(layer, "bwd"))
        if layer.kind == "conv":
            spec = layer.spec
            X = x.reshape(spec.alpha_X, spec.alpha_X)
            grad_y = grad_out.reshape(spec.n_F, spec.alpha_Y, spec.alpha_Y)
            grads = conv_backward(spec, X, layer.filters, grad_y)
            per_filter = self._tamper(stage, "dx", grads.grad_x_per_filter)
            expanded = self._tamper(stage, "df", grads.grad_f_expanded)
            grad_x = ordered_sum(per_filter, axis=0)
            self._updates[l] = -spec.eta * ordered_sum(expanded, axis=-1)
            stage.leaves[TreeId.GRAD_X] = per_filter.reshape(spec.n_F, -1).T
            stage.leaves[TreeId.GRAD_F] = expanded.reshape(-1, spec.alpha_Y)
            stage.leaves[TreeId.GRAD_Y_ROWS] = grad_y.reshape(-1, spec.alpha_Y)
            stage.leaves[TreeId.X_GROUPS] = conv_x_groups(spec, X)
        elif layer.kind == "fc":
            spec = layer.spec
            n_X, s_X = split_size(spec.l_X)
            n_Y, s_Y = split_size(spec.l_Y)
            grad_x_prime, _ = fc_backward_partials(spec, grad_out, n_Y)
            grad_x_prime = self._tamper(stage, "dx", grad_x_prime)
            grad_x = ordered_sum(grad_x_prime, axis=1)
            _, grad_theta = fc_backward(spec, x, grad_out)
            grad_theta = self._tamper(stage, "dtheta", grad_theta)
            self._updates[l] = grad_theta
            stage.leaves[TreeId.GRAD_X_PRIME_ROWS] = grad_x_prime
            stage.leaves[TreeId.GRAD_Y_SUBVECTORS] = grad_out.reshape(n_Y, s_Y)
            stage.leaves[TreeId.THETA_BWD_GROUPS] = theta_backward_groups(spec.theta, n_Y)
            stage.leaves[TreeId.X_SUBVECTORS] = x.reshape(n_X, s_X)
            stage.leaves[TreeId.GRAD_THETA_ROWS] = grad_theta
        else:
            grad_x = self._tamper(stage, "simd", activation_grad(layer.activation, x, grad_out))
            stage.leaves[TreeId.BASIC_IN] = x.reshape(-1, 1)
            stage.leaves[TreeId.BASIC_GRAD_OUT] = grad_out.reshape(-1, 1)
            stage.leaves[TreeId.BASIC_OUT] = grad_x.reshape(-1, 1)
        self._grads[l] = np.asarray(grad_x, dtype=np.float64).ravel()
        return self._grads[l], stage

    def _targets(self, stage, component):
        if self.cheat is None or self.cheat.stage != stage.stage:
            return False
        target = self.cheat.component or next(iter(stage.components))
        return target == component

    def _tamper(self, stage, component, values):
        """ Applies the cheat strategy to one computation set's outputs, if it is targeted. """
        values = np.array(values, dtype=np.float64, order="C")
        if not self._targets(stage, component):
            return values
        n = stage.components[component]
        if self.cheat.mode == CheatMode.SKIP_COMPUTATION:
            stage.faked[component] = list(range(n))
            return np.zeros_like(values)
        if self.cheat.mode != CheatMode.FAKE_OUTPUTS:
            return values
        if not 0 <= self.cheat.m <= n:
            raise ConfigError(f"Cannot fake {self.cheat.m} of {n} computations in {stage.stage}/{component}.")
        picked = np.sort(self._rng.choice(n, size=self.cheat.m, replace=False))
        flat = values.reshape(-1)
        flat[picked] = flat[picked] + self._rng.uniform(FAKE_DELTA_LOW, FAKE_DELTA_HIGH, size=picked.size)
        stage.faked[component] = picked.tolist()
        logger.debug(f"Worker {self.worker_id} faked {picked.size} outputs of {stage.stage}/{component}")
        return values
    #endregion

    #region Challenges
    def answer_challenge(self, challenge):
        """ Returns the requested leaves and their evidences from the committed trees.

        Raises
        ------
        ProtocolOrderError
            The stage has not been committed.
        UnknownLeaf
            A requested tree or leaf does not exist.
        """
        if challenge.stage not in self._stages:
            raise ProtocolOrderError(f"Stage {challenge.stage} has not been committed.")
        stage = self._stages[challenge.stage]
        forge = (self.cheat is not None and self.cheat.mode == CheatMode.FAKE_EVIDENCE
                 and self.cheat.stage == challenge.stage)
        items = {}
        for tree_id, ordinal in challenge.leaves:
            tree = stage.trees.get(tree_id)
            if tree is None or not 0 <= ordinal < tree.leaf_count:
                raise UnknownLeaf((challenge.stage, tree_id, ordinal))
            evid = evidence_for(tree, int(ordinal))
            if forge and len(evid.path) > 0:
                path = tuple((Digest(self._rng.bytes(32)), side) for _, side in evid.path)
                evid = Evidence(index=evid.index, path=path, leaf_count=evid.leaf_count)
            values = np.array(stage.leaves[tree_id][ordinal], dtype=np.float64).ravel()
            items[(tree_id, int(ordinal))] = (values, evid)
            self._count_reads(challenge.stage, values.size + len(evid.path))
        return ChallengeResponse(stage=challenge.stage, items=items)

    def record_inputs(self, ordinals):
        """ Input values of the round's record with evidences against its signed root.

        Returns
        -------
        tuple[Digest, bytes, dict]
            Record root, authority signature and ``{k: (leaf bytes, evidence)}``.
        """
        if self._record is None:
            raise MissingPriorCommitment("The round has not been initialised.")
        ordinals = [int(k) for k in ordinals]
        items = dict(zip(ordinals, self.store.record_leaf_evidences(self._record.id, ordinals)))
        self._count_reads("record", 1 + sum(1 + len(e.path) for _, e in items.values()))
        return self.store_record_root(), self._record.sigma, items

    def final_layer_submission(self):
        """ Hands over the loss inputs, the loss and its gradient, and the round's labels with evidences. """
        if "loss" not in self._stages:
            raise MissingPriorCommitment("The loss stage has not been committed.")
        r = self._record
        n_X = r.x.size
        y_items = tuple(self.store.record_leaf_evidences(r.id, [n_X + k for k in range(r.y.size)]))
        self._count_reads("loss", self._activations[-1].size + 1 + r.y.size
                          + sum(1 + len(e.path) for _, e in y_items))
        loss_values = self._stages["loss"].leaves[TreeId.LOSS].ravel()
        return FinalLayerSubmission(
            record_id=self._claimed_record, yhat=self._activations[-1].copy(), loss=self._loss,
            grad=loss_values[1:].copy(), record_root=self.store_record_root(), sigma=r.sigma, y_items=y_items)

    def store_record_root(self):
        return record_hash(self._record.x, self._record.y)
    #endregion

    def _count_reads(self, stage_id, n):
        self.reads += int(n)
        self.reads_by_stage[stage_id] = self.reads_by_stage.get(stage_id, 0) + int(n)
