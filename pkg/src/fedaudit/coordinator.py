""" The central server: builds and signs the global model, aggregates endorsed updates. """
import base64
from dataclasses import dataclass, field
import math

from loguru import logger
import numpy as np

from .enumerations import ActivationKind, DEFAULT_LEARNING_RATE
from .exceptions import ConfigError, InvalidSpec, NoEndorsedUpdates
from .hashing_merkle import Digest, encode_value, encode_values, group_commit
from .nn_core import (
    ActivationLayer, ConvLayer, ConvSpec, FcLayer, FcSpec, check_layer_stack, split_size, tensor_from_json,
    tensor_to_json,
)
from .worker import theta_backward_groups, theta_forward_groups, updates_digest


#region Signed messages
def filter_message(l, t, filt):
    """ Bytes the coordinator signs for filter ``t`` of layer ``l``. """
    return b"filter" + encode_value(int(l)) + encode_value(int(t)) + encode_values(filt)


def theta_root_message(l, direction, root):
    """ Bytes the coordinator signs for the forward or backward weight-group commitment of layer ``l``. """
    return b"theta" + encode_value(int(l)) + direction.encode() + bytes(root)


def theta_roots(layer):
    """ Forward and backward weight-group roots of a fully-connected layer. """
    spec = layer.spec
    n_X, _ = split_size(spec.l_X)
    n_Y, _ = split_size(spec.l_Y)
    return (group_commit(theta_forward_groups(spec.theta, n_X)).root,
            group_commit(theta_backward_groups(spec.theta, n_Y)).root)
#endregion


#region Model
@dataclass(frozen=True, eq=False)
class GlobalModel:
    layers: tuple
    version: int = 0


def layer_to_json(layer):
    if layer.kind == "conv":
        s = layer.spec
        return {"type": "conv", "n_F": s.n_F, "alpha_F": s.alpha_F, "delta": s.delta, "alpha_X": s.alpha_X,
                "eta": s.eta, "filters": tensor_to_json(layer.filters)}
    if layer.kind == "fc":
        s = layer.spec
        return {"type": "fc", "l_X": s.l_X, "l_Y": s.l_Y, "eta": s.eta, "theta": tensor_to_json(s.theta)}
    return {"type": "activation", "kind": layer.activation.value, "length": layer.length}


def layer_from_json(obj):
    kind = obj["type"]
    if kind == "conv":
        spec = ConvSpec(obj["n_F"], obj["alpha_F"], obj["delta"], obj["alpha_X"], obj["eta"])
        return ConvLayer(spec, tensor_from_json(obj["filters"]))
    if kind == "fc":
        return FcLayer(FcSpec(obj["l_X"], obj["l_Y"], tensor_from_json(obj["theta"]), obj["eta"]))
    if kind == "activation":
        return ActivationLayer(ActivationKind(obj["kind"]), obj["length"])
    raise ConfigError(f"Unknown layer type '{kind}'.")


def build_model(layers, n_X, n_Y, seed, eta=DEFAULT_LEARNING_RATE):
    """ Builds a randomly initialised model from a list of layer descriptions.

    Each description is a dict such as ``{"type": "conv", "n_F": 2, "alpha_F": 3, "delta": 1}``,
    ``{"type": "activation", "kind": "relu"}`` or ``{"type": "fc", "l_Y": 4}``. Input sizes
    are inferred from the previous layer; a final fully-connected layer defaults to ``n_Y``
    outputs. Weights are normal with standard deviation 1/sqrt(fan-in).

    Raises
    ------
    ConfigError
        The descriptions do not form a valid stack.
    """
    rng = np.random.default_rng(seed)
    out, length = [], n_X
    try:
        for position, desc in enumerate(layers):
            kind = desc.get("type")
            layer_eta = desc.get("eta", eta)
            if kind == "conv":
                alpha_X = math.isqrt(length)
                if alpha_X * alpha_X != length:
                    raise ConfigError(f"Layer {position}: {length} inputs do not form a square image.")
                spec = ConvSpec(desc["n_F"], desc["alpha_F"], desc.get("delta", 1), alpha_X, layer_eta)
                filters = rng.standard_normal((spec.n_F, spec.alpha_F, spec.alpha_F)) / spec.alpha_F
                layer = ConvLayer(spec, filters)
            elif kind == "fc":
                l_Y = desc.get("l_Y", n_Y if position == len(layers) - 1 else None)
                if l_Y is None:
                    raise ConfigError(f"Layer {position}: fully-connected layers need 'l_Y'.")
                theta = rng.standard_normal((length, l_Y)) / math.sqrt(length)
                layer = FcLayer(FcSpec(length, l_Y, theta, layer_eta))
            elif kind == "activation":
                layer = ActivationLayer(ActivationKind(desc.get("kind", "relu")), length)
            else:
                raise ConfigError(f"Layer {position}: unknown type '{kind}'.")
            out.append(layer)
            length = layer.output_length
        check_layer_stack(out, n_X, n_Y)
    except (InvalidSpec, KeyError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid model description: {e}") from e
    return GlobalModel(layers=tuple(out), version=0)


@dataclass(frozen=True, eq=False)
class ModelPackage:
    """ The signed model as downloaded by workers and monitors.

    Attributes
    ----------
    layers: tuple
    version: int
    filter_signatures: dict[(int, int), bytes]
        Signature over each filter, keyed by (layer, filter).
    theta_roots: dict[(int, str), Digest]
        Weight-group roots keyed by (layer, "fwd" | "bwd").
    theta_signatures: dict[(int, str), bytes]
    """
    layers: tuple
    version: int
    filter_signatures: dict = field(default_factory=dict)
    theta_roots: dict = field(default_factory=dict)
    theta_signatures: dict = field(default_factory=dict)

    def to_json(self):
        b64 = lambda b: base64.b64encode(bytes(b)).decode()
        return {
            "version": self.version,
            "layers": [layer_to_json(layer) for layer in self.layers],
            "filter_signatures": [[l, t, b64(s)] for (l, t), s in sorted(self.filter_signatures.items())],
            "theta_roots": [[l, d, b64(r)] for (l, d), r in sorted(self.theta_roots.items())],
            "theta_signatures": [[l, d, b64(s)] for (l, d), s in sorted(self.theta_signatures.items())],
        }

    @classmethod
    def from_json(cls, obj):
        unb64 = base64.b64decode
        return cls(
            layers=tuple(layer_from_json(layer) for layer in obj["layers"]),
            version=obj["version"],
            filter_signatures={(l, t): unb64(s) for l, t, s in obj["filter_signatures"]},
            theta_roots={(l, d): Digest(unb64(r)) for l, d, r in obj["theta_roots"]},
            theta_signatures={(l, d): unb64(s) for l, d, s in obj["theta_signatures"]},
        )
#endregion


class Coordinator:
    """ Signs and distributes the model, then aggregates the updates monitors have endorsed.

    Parameters
    ----------
    model: GlobalModel
    signer: Signer
        The coordinator's key.
    ledger: ContractState
    """

    def __init__(self, model, signer, ledger):
        self._model = model
        self._signer = signer
        self._ledger = ledger

    @property
    def model(self):
        return self._model

    def publish(self):
        """ Signs every filter and both weight-group roots of every fully-connected layer. """
        filter_signatures, roots, root_signatures = {}, {}, {}
        for l, layer in enumerate(self._model.layers):
            if layer.kind == "conv":
                for t, filt in enumerate(layer.filters):
                    filter_signatures[(l, t)] = self._signer.sign(filter_message(l, t, filt))
            elif layer.kind == "fc":
                for direction, root in zip(("fwd", "bwd"), theta_roots(layer)):
                    roots[(l, direction)] = root
                    root_signatures[(l, direction)] = self._signer.sign(theta_root_message(l, direction, root))
        return ModelPackage(layers=self._model.layers, version=self._model.version,
                            filter_signatures=filter_signatures, theta_roots=roots,
                            theta_signatures=root_signatures)

    def aggregate(self, round_id, submissions):
        """ Applies the mean of the endorsed updates and evicts workers without an endorsement.

        Parameters
        ----------
        round_id: int
        submissions: dict[str, RoundResult]
            Each worker's updates and their digest.

        Returns
        -------
        GlobalModel
            The new model, version + 1.

        Raises
        ------
        NoEndorsedUpdates
            No submission carries a recorded endorsement.
        """
        accepted = []
        for worker_id in sorted(submissions):
            result = submissions[worker_id]
            endorsed = self._ledger.endorsed_digest(worker_id, round_id)
            if (endorsed is not None and endorsed == result.updates_digest
                    and updates_digest(result.updates) == result.updates_digest):
                accepted.append(result)
            else:
                logger.warning(f"Round {round_id}: update from {worker_id} is not endorsed")
        for worker_id in self._ledger.active_workers():
            if not self._ledger.has_endorsement(worker_id, round_id):
                self._ledger.slash(worker_id, "missing endorsement")
        if not accepted:
            raise NoEndorsedUpdates(f"No endorsed updates in round {round_id}.")

        layers = []
        for l, layer in enumerate(self._model.layers):
            if layer.weights is None:
                layers.append(layer)
                continue
            delta = np.mean(np.stack([np.asarray(r.updates[l], dtype=np.float64) for r in accepted]), axis=0)
            layers.append(layer.with_weights(layer.weights + delta))
        self._model = GlobalModel(layers=tuple(layers), version=self._model.version + 1)
        logger.info(f"Round {round_id}: aggregated {len(accepted)} updates, model version {self._model.version}")
        return self._model
