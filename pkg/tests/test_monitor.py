from dataclasses import replace
import json
import math
import unittest

import numpy as np

from fedaudit.coordinator import Coordinator, build_model
from fedaudit.data_records import HmacSigner, build_record_store, generate_records
from fedaudit.enumerations import CheatMode, TreeId
from fedaudit.exceptions import DomainError, ProtocolOrderError, RefusedDishonest
from fedaudit.game_theory import detection_prob_exact, detection_prob_paper
from fedaudit.hashing_merkle import decode_float, encode_value, evidence_bound
from fedaudit.ledger import ContractState, endorsement_message
from fedaudit.monitor import AuditTranscript, Monitor
from fedaudit.worker import Challenge, CheatStrategy, Worker, landmark_grid

CONV_LAYERS = [
    {"type": "conv", "n_F": 2, "alpha_F": 2, "delta": 1},
    {"type": "activation", "kind": "relu"},
    {"type": "fc", "l_Y": 2},
]

FC_LAYERS = [
    {"type": "fc", "l_Y": 8},
    {"type": "activation", "kind": "sigmoid"},
    {"type": "fc", "l_Y": 2},
]

# 7x7 input, stride 2, two hidden fully-connected layers
DEEP_LAYERS = [
    {"type": "conv", "n_F": 3, "alpha_F": 3, "delta": 2},
    {"type": "activation", "kind": "sigmoid"},
    {"type": "fc", "l_Y": 4},
    {"type": "activation", "kind": "relu"},
    {"type": "fc", "l_Y": 2},
]


def make_session(cheat=None, layers=CONV_LAYERS, p=2, seed=5, n_R=4, worker_cls=Worker, n_X=16, n_Y=2):
    authority = HmacSigner.from_seed(seed, "authority")
    coordinator_key = HmacSigner.from_seed(seed, "coordinator")
    monitor_key = HmacSigner.from_seed(seed, "monitor")
    store = build_record_store(generate_records(n_R, n_X, n_Y, seed, authority), authority)
    coordinator = Coordinator(build_model(layers, n_X, n_Y, seed), coordinator_key, ContractState())
    package = coordinator.publish()
    worker = worker_cls("w", store, cheat, seed=seed)
    worker.load_model(package.layers)
    monitor = Monitor("w", store.h_R, store.n_R, package, coordinator_key, authority, monitor_key, p=p, seed=seed)
    return worker, monitor, monitor_key


def committed_session(**kwargs):
    """ A session whose worker has committed a full round, with every root handed to the monitor. """
    worker, monitor, _ = make_session(**kwargs)
    transcript = AuditTranscript("w")
    i, _ = monitor.init_round(worker)
    worker.train_round(i, transcript)
    for stage in worker.stage_ids:
        monitor.state.roots[stage] = transcript.roots(stage)
    monitor._updates = worker.updates
    return worker, monitor


class LabelSwapWorker(Worker):
    """ Submits a label one unit away from the record's. """

    def final_layer_submission(self):
        sub = super().final_layer_submission()
        items = list(sub.y_items)
        leaf, evid = items[0]
        items[0] = (encode_value(decode_float(leaf) + 1.0), evid)
        return replace(sub, y_items=tuple(items))


class NudgedLossWorker(Worker):
    """ Submits a loss one ulp away from the computed one. """

    def final_layer_submission(self):
        sub = super().final_layer_submission()
        return replace(sub, loss=float(np.nextafter(sub.loss, np.inf)))


class ZeroRecordWorker(Worker):
    """ Trains on zeros instead of the drawn record's inputs. """

    def begin_round(self, record_id, transcript=None):
        super().begin_round(record_id, transcript)
        self._activations[0] = np.zeros_like(self._activations[0])


class ConstantInputWorker(Worker):
    """ Feeds layer 2 a constant instead of the activation output. """

    def _forward(self, stage_id, l):
        if l == 2:
            self._activations[2] = np.full_like(self._activations[2], 3.0)
        return super()._forward(stage_id, l)


class ShiftedGradientWorker(Worker):
    """ Backpropagates through layer 1 a gradient one unit off the one layer 2 committed. """

    def _backward(self, stage_id, l):
        if l == 1:
            self._grads[2] = self._grads[2] + 1.0
        return super()._backward(stage_id, l)


class StaleInputWorker(Worker):
    """ Computes the filter gradients of layer 0 against zeros. """

    def _backward(self, stage_id, l):
        if l == 0:
            self._activations[0] = np.zeros_like(self._activations[0])
        return super()._backward(stage_id, l)


class TestHonestAudit(unittest.TestCase):

    def test_conv_model(self):
        """ Honest workers pass every round and get an endorsement that verifies. """
        for seed in range(4):
            worker, monitor, key = make_session(seed=seed)
            for round_id in (1, 2):
                result = monitor.audit_round(worker, round_id, AuditTranscript("w"))
                self.assertTrue(result.honest, result.first_failure())
                digest = result.round_result.updates_digest
                sig = monitor.endorse(round_id, digest)
                self.assertTrue(key.verify(endorsement_message(round_id, digest), sig))

    def test_fc_model(self):
        for seed in range(4):
            worker, monitor, _ = make_session(layers=FC_LAYERS, seed=seed, p=3)
            result = monitor.audit_round(worker, 1)
            self.assertTrue(result.honest, result.first_failure())

    def test_many_rounds_never_flag_honest_workers(self):
        """ No false positives over many seeds, sample sizes and rounds. """
        for layers, n_X in ((CONV_LAYERS, 16), (FC_LAYERS, 16), (DEEP_LAYERS, 49)):
            for seed in range(8):
                for p in (2, 5):
                    worker, monitor, _ = make_session(layers=layers, seed=seed, p=p, n_X=n_X)
                    for round_id in (1, 2, 3):
                        result = monitor.audit_round(worker, round_id)
                        self.assertTrue(result.honest, (n_X, seed, p, round_id, result.first_failure()))

    def test_every_battery_runs(self):
        worker, monitor, _ = make_session()
        result = monitor.audit_round(worker, 1)
        covered = {(r.stage, r.component) for r in result.reports}
        expected = {("init", "record"), ("fwd:0", "y"), ("fwd:1", "simd"), ("fwd:2", "y_prime"),
                    ("bwd:2", "dx"), ("bwd:2", "dtheta"), ("bwd:1", "simd"), ("bwd:0", "dx"), ("bwd:0", "df"),
                    ("loss", "loss")}
        self.assertEqual(covered, expected)

    def test_every_check_is_linked(self):
        worker, monitor, _ = make_session()
        result = monitor.audit_round(worker, 1)
        for report in result.reports:
            if report.stage in ("init", "loss"):
                continue
            self.assertGreater(report.link_reads, 0, report.stage)
            for checked in report.probes:
                self.assertTrue(checked.checks["input_link"], (report.stage, report.component))

    def test_exhaustive_sampling_honest(self):
        """ Probing every computation of every set still finds nothing. """
        for layers in (CONV_LAYERS, FC_LAYERS):
            worker, monitor, _ = make_session(layers=layers, p=10_000)
            result = monitor.audit_round(worker, 1)
            self.assertTrue(result.honest, result.first_failure())

    def test_too_few_probes(self):
        with self.assertRaises(DomainError):
            make_session(p=1)

    def test_endorse_without_round(self):
        _, monitor, _ = make_session()
        with self.assertRaises(RefusedDishonest):
            monitor.endorse(1, b"\x00" * 32)


class TestAccessBudget(unittest.TestCase):

    def test_conv_forward_reads(self):
        """ Monitor reads per conv forward probe stay within landmark blocks, a row and evidences. """
        worker, monitor, _ = make_session()
        transcript = AuditTranscript("w")
        i, _ = monitor.init_round(worker)
        worker.train_round(i, transcript)
        spec = worker.layers[0].spec
        report = monitor.test_conv_forward(worker, "fwd:0", transcript)
        evid = max(evidence_bound(landmark_grid(spec) ** 2), evidence_bound(spec.n_F * spec.alpha_Y))
        bound = 2 * (4 * (spec.alpha_F_landmark ** 2 + evid) + spec.alpha_Y + evid)
        self.assertTrue(report.verdict.honest)
        self.assertLessEqual(report.reads, bound)

    def test_conv_backward_reads(self):
        """ Each backward check reads one gradient tuple or group plus at most ceil(alpha_F / delta) rows. """
        p = 4
        layers = [{"type": "conv", "n_F": 2, "alpha_F": 3, "delta": 1}, {"type": "fc", "l_Y": 2}]
        worker, monitor = committed_session(layers=layers, p=p, n_X=64)
        spec = worker.layers[0].spec
        a_F, a_X, a_Y, n_F = spec.alpha_F, spec.alpha_X, spec.alpha_Y, spec.n_F
        e_rows = evidence_bound(n_F * a_Y)
        dx = monitor.test_conv_backward_dx(worker, "bwd:0")
        df = monitor.test_conv_backward_df(worker, "bwd:0")
        self.assertTrue(dx.verdict.honest and df.verdict.honest)
        dx_bound = p * (n_F + evidence_bound(a_X ** 2) + math.ceil(a_F / spec.delta) * (a_Y + e_rows))
        df_bound = p * (3 * a_Y + evidence_bound(n_F * a_F ** 2) + e_rows + evidence_bound(a_F ** 2 * a_Y))
        self.assertLessEqual(dx.reads, dx_bound)
        self.assertLessEqual(df.reads, df_bound)
        committed = n_F * a_X ** 2 + n_F * a_F ** 2 * a_Y + n_F * a_Y ** 2 + a_F ** 2 * a_Y ** 2
        self.assertLess(dx.reads + df.reads, committed)


class TestDishonestAudit(unittest.TestCase):

    TARGETS = [
        ("fwd:0", "y"), ("fwd:1", "simd"), ("fwd:2", "y_prime"), ("bwd:2", "dx"), ("bwd:2", "dtheta"),
        ("bwd:1", "simd"), ("bwd:0", "dx"), ("bwd:0", "df"), ("loss", "loss"),
    ]

    def test_single_fake_caught_by_exhaustive_sampling(self):
        """ One faked value in any computation set is caught at that stage when every value is sampled. """
        for stage, component in self.TARGETS:
            cheat = CheatStrategy(stage=stage, mode=CheatMode.FAKE_OUTPUTS, m=1, component=component)
            worker, monitor, _ = make_session(cheat, p=10_000)
            result = monitor.audit_round(worker, 1)
            failure = result.first_failure()
            self.assertIsNotNone(failure, (stage, component))
            self.assertEqual(failure.stage, stage)
            with self.assertRaises(RefusedDishonest):
                monitor.endorse(1, result.round_result.updates_digest)

    def test_fake_partial_sums_caught(self):
        """ Faked fully-connected partial sums are caught in a first and in a later layer. """
        for layers, stage in ((FC_LAYERS, "fwd:0"), (FC_LAYERS, "fwd:2"), (CONV_LAYERS, "fwd:2")):
            cheat = CheatStrategy(stage=stage, m=3, component="y_prime")
            worker, monitor, _ = make_session(cheat, layers=layers, p=10_000)
            failure = monitor.audit_round(worker, 1).first_failure()
            self.assertEqual((failure.stage, failure.component), (stage, "y_prime"))
            self.assertTrue(failure.verdict.reason.startswith("recompute"), failure.verdict.reason)

    def test_all_faked_caught_with_two_probes(self):
        worker, monitor, _ = make_session(CheatStrategy(stage="fwd:0", m=18))
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual((failure.stage, failure.component), ("fwd:0", "y"))

    def test_skip_computation(self):
        worker, monitor, _ = make_session(CheatStrategy(stage="bwd:2", mode=CheatMode.SKIP_COMPUTATION))
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual((failure.stage, failure.component), ("bwd:2", "dx"))

    def test_wrong_record(self):
        worker, monitor, _ = make_session(CheatStrategy(mode=CheatMode.WRONG_RECORD))
        result = monitor.audit_round(worker, 1)
        self.assertEqual(result.first_failure().stage, "init")
        self.assertIsNone(result.round_result)

    def test_wrong_record_single_record(self):
        """ With one record the substituted record is the drawn one. """
        worker, monitor, _ = make_session(CheatStrategy(mode=CheatMode.WRONG_RECORD), n_R=1)
        self.assertTrue(monitor.audit_round(worker, 1).honest)

    def test_fake_evidence(self):
        worker, monitor, _ = make_session(CheatStrategy(stage="bwd:0", mode=CheatMode.FAKE_EVIDENCE))
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual((failure.stage, failure.component), ("bwd:0", "dx"))

    def test_forged_filter_signature(self):
        worker, monitor, _ = make_session()
        package = Coordinator(build_model(CONV_LAYERS, 16, 2, 5), HmacSigner.from_seed(5, "coordinator"),
                              ContractState()).publish()
        forged = replace(package, filter_signatures={k: b"\x00" * 32 for k in package.filter_signatures})
        monitor.load_package(forged)
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual(failure.stage, "fwd:0")
        self.assertIn("filter_signature", failure.verdict.reason)

    def test_forged_theta_signature(self):
        worker, monitor, _ = make_session(layers=FC_LAYERS)
        package = Coordinator(build_model(FC_LAYERS, 16, 2, 5), HmacSigner.from_seed(5, "coordinator"),
                              ContractState()).publish()
        monitor.load_package(replace(package, theta_signatures={k: b"\x00" * 32 for k in package.theta_signatures}))
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual((failure.stage, failure.component), ("fwd:0", "y_prime"))
        self.assertEqual(failure.verdict.reason, "theta signature invalid")

    def test_substituted_label(self):
        worker, monitor, _ = make_session(worker_cls=LabelSwapWorker)
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual(failure.stage, "loss")
        self.assertTrue(failure.verdict.reason.startswith("labels"))

    def test_loss_one_ulp_off(self):
        worker, monitor, _ = make_session(worker_cls=NudgedLossWorker)
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual(failure.stage, "loss")
        self.assertTrue(failure.verdict.reason.startswith("loss"))


class TestInputLinking(unittest.TestCase):

    CASES = [
        (ZeroRecordWorker, CONV_LAYERS, ("fwd:0", "y")),
        (ZeroRecordWorker, FC_LAYERS, ("fwd:0", "y_prime")),
        (ConstantInputWorker, CONV_LAYERS, ("fwd:2", "y_prime")),
        (ConstantInputWorker, FC_LAYERS, ("fwd:2", "y_prime")),
        (ShiftedGradientWorker, CONV_LAYERS, ("bwd:1", "simd")),
        (StaleInputWorker, CONV_LAYERS, ("bwd:0", "df")),
    ]

    def test_rewired_inputs_caught(self):
        """ Computing from values other than the ones produced upstream fails the link, not the recompute. """
        for worker_cls, layers, target in self.CASES:
            for p in (2, 10_000):
                worker, monitor, _ = make_session(layers=layers, p=p, worker_cls=worker_cls)
                result = monitor.audit_round(worker, 1)
                failure = result.first_failure()
                self.assertIsNotNone(failure, (worker_cls.__name__, p))
                self.assertEqual((failure.stage, failure.component), target, worker_cls.__name__)
                self.assertTrue(failure.verdict.reason.startswith("input_link"), failure.verdict.reason)
                with self.assertRaises(RefusedDishonest):
                    monitor.endorse(1, result.round_result.updates_digest)

    def test_record_evidence_checked(self):
        """ Record values must verify against the signed root of the drawn record. """

        class ForeignRecordWorker(Worker):
            def record_inputs(self, ordinals):
                root, sigma, items = super().record_inputs(ordinals)
                other = self.store.record(self._record.id % self.store.n_R + 1)
                return root, other.sigma, items

        worker, monitor, _ = make_session(layers=FC_LAYERS, worker_cls=ForeignRecordWorker)
        failure = monitor.audit_round(worker, 1).first_failure()
        self.assertEqual((failure.stage, failure.component), ("fwd:0", "y_prime"))
        self.assertTrue(failure.verdict.reason.startswith("input_link"))


class TestDetectionRate(unittest.TestCase):

    IDENTITY_LAYERS = [{"type": "fc", "l_Y": 100}, {"type": "activation", "kind": "identity"},
                       {"type": "fc", "l_Y": 2}]

    def test_caught_exactly_when_a_fake_is_drawn(self):
        """ Over 10^4 batteries a verdict is dishonest iff some sampled index landed on a faked element. """
        worker, monitor = committed_session(cheat=CheatStrategy(stage="fwd:1", m=10), layers=self.IDENTITY_LAYERS,
                                            seed=11)
        faked = set(worker.faked_indices("fwd:1", "simd"))
        self.assertEqual(len(faked), 10)
        for _ in range(10_000):
            report = monitor.test_simd_stage(worker, "fwd:1")
            hit = any(r.index[0] in faked for r in report.probes)
            self.assertEqual(report.verdict.honest, not hit)
            monitor.state.reports.clear()

    def test_detection_matches_hypergeometric(self):
        """ p=2 samples over 100 activations: empirical rate within 3 sigma of the exact value, never below the
        independent-sampling value by more than 3 sigma. """
        trials = 10_000
        for m in (1, 10, 50, 90):
            worker, monitor = committed_session(cheat=CheatStrategy(stage="fwd:1", m=m),
                                                layers=self.IDENTITY_LAYERS, seed=11 + m)
            caught = 0
            for _ in range(trials):
                caught += not monitor.test_simd_stage(worker, "fwd:1").verdict.honest
                monitor.state.reports.clear()
            exact = detection_prob_exact(100, 2, m)
            sigma = math.sqrt(exact * (1 - exact) / trials)
            self.assertLess(abs(caught / trials - exact), 3 * sigma, m)
            self.assertGreaterEqual(caught / trials, detection_prob_paper(100, 2, m) - 3 * sigma, m)

    def test_single_fake_slash_round_is_geometric(self):
        """ A worker faking one of ten activations every round is slashed after 1/q rounds on average. """
        layers = [{"type": "fc", "l_Y": 10}, {"type": "activation", "kind": "identity"}, {"type": "fc", "l_Y": 1}]
        q = detection_prob_exact(10, 2, 1)
        lifetimes = 400
        slash_rounds = []
        for seed in range(lifetimes):
            worker, monitor, _ = make_session(CheatStrategy(stage="fwd:1", m=1), layers=layers, seed=seed,
                                              n_X=4, n_Y=1)
            for round_id in range(1, 200):
                if not monitor.audit_round(worker, round_id).honest:
                    break
            slash_rounds.append(round_id)
        slash_rounds = np.asarray(slash_rounds, dtype=np.float64)
        mean_sigma = math.sqrt((1 - q) / q ** 2 / lifetimes)
        self.assertLess(abs(slash_rounds.mean() - 1 / q), 3 * mean_sigma)
        first_sigma = math.sqrt(q * (1 - q) / lifetimes)
        self.assertLess(abs(np.mean(slash_rounds == 1) - q), 3 * first_sigma)

class TestTranscript(unittest.TestCase):

    def setUp(self):
        self.transcript = AuditTranscript("w", 3)
        self.roots = {TreeId.BASIC_IN: b"\x01" * 32}

    def test_challenge_before_commit(self):
        with self.assertRaises(ProtocolOrderError):
            self.transcript.challenge(Challenge("fwd:0", ((TreeId.BASIC_IN, 0),)))

    def test_double_commit(self):
        self.transcript.commit("fwd:0", self.roots)
        with self.assertRaises(ProtocolOrderError):
            self.transcript.commit("fwd:0", self.roots)

    def test_roots_before_commit(self):
        with self.assertRaises(ProtocolOrderError):
            self.transcript.roots("fwd:0")

    def test_json_lines(self):
        """ Entries are sequenced and serialize one JSON object per line. """
        self.transcript.commit("fwd:0", self.roots)
        self.transcript.challenge(Challenge("fwd:0", ((TreeId.BASIC_IN, 0),)))
        lines = [json.loads(line) for line in self.transcript.to_json_lines().splitlines()]
        self.assertEqual([e["kind"] for e in lines], ["commit", "challenge"])
        self.assertEqual([e["seq"] for e in lines], [0, 1])
        self.assertEqual(lines[0]["round"], 3)

    def test_new_round_resets(self):
        self.transcript.commit("fwd:0", self.roots)
        self.transcript.start_round(4)
        self.assertFalse(self.transcript.is_committed("fwd:0"))
        self.assertEqual(len(self.transcript.entries), 1)
