""" Simulated deposit contract: joining, slashing, eviction and the endorsement registry.

State is a pure fold over an append-only event log, so replaying the log reproduces it.
Amounts are integer micro-units.
"""
from dataclasses import dataclass
import json
import math

from loguru import logger

from .enumerations import DEFAULT_PROBES, MICRO_UNITS, WorkerStatus
from .exceptions import AlreadyJoined, BadSignature, InsufficientDeposit, NotActive
from .game_theory import min_deposit
from .hashing_merkle import encode_value


def endorsement_message(round_id, digest):
    """ Bytes a monitor signs to endorse a round's updates. """
    return b"endorse" + encode_value(int(round_id)) + bytes(digest)


def to_micro(amount):
    return int(round(float(amount) * MICRO_UNITS))


def required_deposit(max_stage_cost, p=DEFAULT_PROBES):
    """ Deposit a worker must lock, in micro-units.

    The larger of twice the maximal stage cost and the honesty bound c / (1 - e^-(p-1)).

    Parameters
    ----------
    max_stage_cost: int
        Maximal stage cost in micro-units.
    p: int
        Probes per stage.
    """
    return max(2 * int(max_stage_cost), math.ceil(min_deposit(int(max_stage_cost), p)))


@dataclass
class WorkerAccount:
    balance: int
    status: WorkerStatus


class ContractState:
    """ Single-writer contract state. Commands validate, then append an event and fold it in. """

    def __init__(self):
        self._accounts = {}
        self._endorsements = {}
        self._events = []
        self._monitor_keys = {}
        self.coordinator_balance = 0

    #region Queries
    @property
    def events(self):
        return [dict(e) for e in self._events]

    def account(self, worker_id):
        return self._accounts.get(worker_id)

    def balance(self, worker_id):
        acc = self._accounts.get(worker_id)
        return acc.balance if acc is not None else 0

    def status(self, worker_id):
        acc = self._accounts.get(worker_id)
        return acc.status if acc is not None else None

    def is_active(self, worker_id):
        return self.status(worker_id) == WorkerStatus.ACTIVE

    def active_workers(self):
        return sorted(w for w, acc in self._accounts.items() if acc.status == WorkerStatus.ACTIVE)

    def total_balance(self):
        return self.coordinator_balance + sum(acc.balance for acc in self._accounts.values())

    def has_endorsement(self, worker_id, round_id):
        return (worker_id, int(round_id)) in self._endorsements

    def endorsed_digest(self, worker_id, round_id):
        return self._endorsements.get((worker_id, int(round_id)))
    #endregion

    #region Commands
    def register_monitor(self, worker_id, verifier):
        """ Registers the key a worker's endorsements must verify under. """
        self._monitor_keys[worker_id] = verifier

    def join(self, worker_id, d, required):
        """ Locks deposit ``d`` for ``worker_id``.

        Raises
        ------
        InsufficientDeposit
            ``d < required``.
        AlreadyJoined
            The worker is already active.
        NotActive
            The worker has been evicted.
        """
        d, required = int(d), int(required)
        if d < 0:
            raise ValueError("Deposits must be non-negative.")
        status = self.status(worker_id)
        if status == WorkerStatus.ACTIVE:
            raise AlreadyJoined(f"Worker {worker_id} has already joined.")
        if status == WorkerStatus.EVICTED:
            raise NotActive(f"Worker {worker_id} has been evicted.")
        if d < required:
            raise InsufficientDeposit(f"Deposit {d} is below the required {required}.")
        return self._emit({"kind": "join", "worker": worker_id, "amount": d})

    def slash(self, worker_id, reason):
        """ Transfers the worker's whole balance to the coordinator and evicts it. """
        if not self.is_active(worker_id):
            raise NotActive(f"Worker {worker_id} is not active.")
        receipt = self._emit({"kind": "slash", "worker": worker_id, "amount": self.balance(worker_id),
                              "reason": str(reason)})
        logger.warning(f"Slashed worker {worker_id}: {reason}")
        return receipt

    def record_endorsement(self, worker_id, round_id, signature, digest):
        """ Records a monitor endorsement of ``digest`` for a round.

        Raises
        ------
        NotActive
            The worker is not active.
        BadSignature
            The signature does not verify under the worker's registered monitor key.
        """
        if not self.is_active(worker_id):
            raise NotActive(f"Worker {worker_id} is not active.")
        verifier = self._monitor_keys.get(worker_id)
        if verifier is None or not verifier.verify(endorsement_message(round_id, digest), signature):
            raise BadSignature(f"Endorsement by worker {worker_id} for round {round_id} does not verify.")
        return self._emit({"kind": "endorse", "worker": worker_id, "round": int(round_id),
                           "digest": bytes(digest).hex(), "signature": bytes(signature).hex()})
    #endregion

    #region Event log
    def _emit(self, event):
        event = dict(event, seq=len(self._events))
        self._apply(event)
        self._events.append(event)
        return dict(event)

    def _apply(self, event):
        kind, worker = event["kind"], event["worker"]
        if kind == "join":
            self._accounts[worker] = WorkerAccount(balance=int(event["amount"]), status=WorkerStatus.ACTIVE)
        elif kind == "slash":
            acc = self._accounts[worker]
            self.coordinator_balance += acc.balance
            acc.balance = 0
            acc.status = WorkerStatus.EVICTED
        elif kind == "endorse":
            self._endorsements[(worker, int(event["round"]))] = bytes.fromhex(event["digest"])
        else:
            raise ValueError(f"Unknown ledger event kind '{kind}'.")

    @classmethod
    def replay(cls, events):
        """ Rebuilds a state by folding ``events`` in order, without re-checking signatures. """
        state = cls()
        for event in events:
            state._apply(event)
            state._events.append(dict(event))
        return state

    def to_json_lines(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self._events)

    @classmethod
    def from_json_lines(cls, text):
        return cls.replay([json.loads(line) for line in text.splitlines() if line.strip()])

    def snapshot(self):
        return {
            "coordinator_balance": self.coordinator_balance,
            "workers": {w: {"balance": acc.balance, "status": acc.status.value}
                        for w, acc in sorted(self._accounts.items())},
            "endorsements": [[w, r, d.hex()] for (w, r), d in sorted(self._endorsements.items())],
        }
    #endregion
