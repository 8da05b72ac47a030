""" The trusted local monitor: round initialisation, selective tests and endorsement.

The monitor holds only the record commitment ``(h_R, n_R)``, the coordinator-signed model
and the roots each stage commits to. It samples ``p`` distinct computations per
computation set, asks the worker for exactly the leaves those computations depend on,
checks every leaf against its committed root and recomputes the probed value with the
same kernel the worker used. Recomputed values must match bit for bit.

Every input element a probe computed with is then traced back to where it was produced:
the signed record for layer 0, the committed output of the previous forward stage, or the
committed output of the next backward stage (the loss gradient for the last layer).
"""
from dataclasses import dataclass, field
import json

from loguru import logger
import numpy as np

from .coordinator import filter_message, theta_root_message
from .data_records import record_leaf_input
from .enumerations import DEFAULT_PROBES, MIN_PROBES, TreeId
from .exceptions import DomainError, ProtocolOrderError, RefusedDishonest
from .hashing_merkle import (
    bit_equal, decode_float, group_commit, leaf_digest_of_group, leaf_hash, verify_digest, verify_element,
)
from .ledger import endorsement_message
from .nn_core import (
    activation_apply, activation_grad, conv_backward_dx_element, conv_dx_rows, conv_dx_terms,
    conv_expanded_df_element, conv_forward_element, fc_grad_theta_element, fc_partial_element, loss_eval,
    ordered_sum, split_size,
)
from .worker import (
    Challenge, covering_blocks, expected_leaf_counts, landmark_grid, parse_stage, patch_from_blocks,
    stage_components, stage_order, updates_digest,
)


#region Transcript
class AuditTranscript:
    """ Append-only log of Commit, Challenge and Response messages for one worker.

    Enforces commit-then-challenge: a stage can be committed once, and can only be
    challenged after it has been committed.
    """

    def __init__(self, worker_id="", round_id=0):
        self.worker_id = worker_id
        self.round_id = round_id
        self._entries = []
        self._roots = {}
        self._pending = set()

    @property
    def entries(self):
        return list(self._entries)

    def start_round(self, round_id):
        self.round_id = round_id
        self._roots = {}
        self._pending = set()

    def commit(self, stage, roots):
        if stage in self._roots:
            raise ProtocolOrderError(f"Stage {stage} is already committed in round {self.round_id}.")
        self._roots[stage] = dict(roots)
        self._append("commit", stage, roots={t.value: r.hex() for t, r in roots.items()})

    def is_committed(self, stage):
        return stage in self._roots

    def roots(self, stage):
        if stage not in self._roots:
            raise ProtocolOrderError(f"Stage {stage} has not been committed.")
        return dict(self._roots[stage])

    def challenge(self, challenge):
        if challenge.stage not in self._roots:
            raise ProtocolOrderError(f"Cannot challenge {challenge.stage} before it is committed.")
        self._pending.add(challenge.stage)
        self._append("challenge", challenge.stage, leaves=challenge.to_json()["leaves"])

    def respond(self, response, reads):
        if response.stage not in self._pending:
            raise ProtocolOrderError(f"Response for {response.stage} without a challenge.")
        self._pending.discard(response.stage)
        self._append("response", response.stage, items=len(response.items), reads=int(reads))

    def _append(self, kind, stage, **payload):
        entry = {"seq": len(self._entries), "round": self.round_id, "worker": self.worker_id,
                 "kind": kind, "stage": stage}
        entry.update(payload)
        self._entries.append(entry)

    def to_json_lines(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self._entries)
#endregion


#region Reports
@dataclass(frozen=True)
class Verdict:
    honest: bool
    reason: str = ""

    def to_json(self):
        return {"honest": self.honest, "reason": self.reason}


@dataclass(frozen=True)
class ProbeResult:
    index: tuple
    checks: dict

    @property
    def passed(self):
        return all(self.checks.values())

    def failed_checks(self):
        return [name for name, ok in self.checks.items() if not ok]


@dataclass(frozen=True)
class TestReport:
    """ Outcome of one test battery.

    Attributes
    ----------
    stage: str
    component: str
    probes: list[ProbeResult]
    verdict: Verdict
    reads: int
        Scalars and digests received from the worker.
    link_reads: int
        Reads spent tying probed inputs to the record or to earlier stages.
    """
    __test__ = False

    stage: str
    component: str
    probes: list = field(default_factory=list)
    verdict: Verdict = Verdict(True)
    reads: int = 0
    link_reads: int = 0

    def to_json(self):
        return {
            "stage": self.stage,
            "component": self.component,
            "verdict": self.verdict.to_json(),
            "reads": self.reads,
            "link_reads": self.link_reads,
            "probes": [{"index": [int(v) for v in p.index], "checks": p.checks} for p in self.probes],
        }


def _matches(trusted, used):
    return all(trusted.get(k) is not None and bit_equal(trusted[k], v) for k, v in used.items())


def _verdict_from(probes, extra_failures=()):
    for name in extra_failures:
        return Verdict(False, name)
    for probe in probes:
        failed = probe.failed_checks()
        if failed:
            return Verdict(False, f"{failed[0]} failed at {tuple(int(v) for v in probe.index)}")
    return Verdict(True)


@dataclass
class AuditResult:
    round_id: int
    record_id: int
    reports: list
    round_result: object = None

    @property
    def honest(self):
        return all(r.verdict.honest for r in self.reports)

    def first_failure(self):
        for r in self.reports:
            if not r.verdict.honest:
                return r
        return None
#endregion


@dataclass
class MonitorState:
    """ Everything the monitor keeps. No raw training data is ever stored here. """
    h_R: bytes
    n_R: int
    layers: tuple
    p: int
    rng: np.random.Generator
    filter_signatures: dict = field(default_factory=dict)
    theta_roots: dict = field(default_factory=dict)
    theta_signatures: dict = field(default_factory=dict)
    version: int = 0
    round_id: int = 0
    record_id: int = None
    h_i: bytes = None
    roots: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)


class Monitor:
    """ Trusted local monitor paired with one worker.

    Parameters
    ----------
    worker_id: str
    h_R: Digest
        Record commitment from preparation.
    n_R: int
        Number of records.
    package: ModelPackage
        Coordinator-signed global model; the monitor's trusted copy.
    coordinator: Signer
        Verifies the model package signatures.
    authority: Signer
        Verifies record signatures.
    signer: Signer
        The monitor's own endorsement key.
    p: int
        Probes per computation set, at least 2.
    seed: int
    """

    def __init__(self, worker_id, h_R, n_R, package, coordinator, authority, signer, p=DEFAULT_PROBES, seed=0):
        if p < MIN_PROBES:
            raise DomainError(f"At least {MIN_PROBES} probes per stage are required, got {p}.")
        self.worker_id = worker_id
        self._coordinator = coordinator
        self._authority = authority
        self._signer = signer
        self._updates = {}
        self.state = MonitorState(h_R=h_R, n_R=n_R, layers=tuple(package.layers), p=p,
                                  rng=np.random.default_rng(seed))
        self.load_package(package)

    def load_package(self, package):
        self.state.layers = tuple(package.layers)
        self.state.filter_signatures = dict(package.filter_signatures)
        self.state.theta_roots = dict(package.theta_roots)
        self.state.theta_signatures = dict(package.theta_signatures)
        self.state.version = package.version

    @property
    def n_X(self):
        return self.state.layers[0].input_length

    @property
    def n_Y(self):
        return self.state.layers[-1].output_length

    #region Round
    def init_round(self, worker):
        """ Draws a record id uniformly and checks the worker's membership evidence for it.

        Returns
        -------
        tuple[int, Verdict]
        """
        i = int(self.state.rng.integers(1, self.state.n_R + 1))
        h, evid = worker.record_membership(i)
        self.state.record_id = i
        self.state.h_i = h
        ok = verify_digest(h, i - 1, self.state.h_R, evid, leaf_count=self.state.n_R)
        verdict = Verdict(True) if ok else Verdict(False, f"record {i} membership evidence rejected")
        report = TestReport(stage="init", component="record", probes=[ProbeResult((i,), {"membership": ok})],
                            verdict=verdict, reads=1 + len(evid.path))
        self.state.reports.append(report)
        if not ok:
            logger.warning(f"Monitor {self.worker_id}: round {self.state.round_id} init failed for record {i}")
        return i, verdict

    def audit_round(self, worker, round_id, transcript=None):
        """ Runs one full round against ``worker``: init, every stage battery, the final layer.

        Stops at the first dishonest verdict.

        Returns
        -------
        AuditResult
        """
        transcript = transcript if transcript is not None else AuditTranscript(self.worker_id, round_id)
        transcript.start_round(round_id)
        self.state.round_id = round_id
        self.state.reports = []
        self.state.roots = {}
        i, verdict = self.init_round(worker)
        result = AuditResult(round_id=round_id, record_id=i, reports=self.state.reports)
        if not verdict.honest:
            return result
        result.round_result = worker.train_round(i, transcript)
        self._updates = result.round_result.updates
        if updates_digest(self._updates) != result.round_result.updates_digest:
            self.state.reports.append(TestReport("updates", "digest", verdict=Verdict(False, "updates digest mismatch")))
            return result
        for stage in stage_order(len(self.state.layers)):
            self.state.roots[stage] = transcript.roots(stage)
        for stage in stage_order(len(self.state.layers)):
            if stage == "loss":
                continue
            for report in self.test_stage(worker, stage, transcript):
                if not report.verdict.honest:
                    logger.warning(f"Monitor {self.worker_id}: {stage}/{report.component} dishonest "
                                   f"({report.verdict.reason})")
                    return result
        report = self.test_final_layer(worker, transcript)
        if not report.verdict.honest:
            logger.warning(f"Monitor {self.worker_id}: final layer dishonest ({report.verdict.reason})")
        else:
            logger.info(f"Monitor {self.worker_id}: round {round_id} passed on record {i}")
        return result

    def test_stage(self, worker, stage, transcript=None):
        """ Runs every battery that applies to ``stage`` and returns their reports. """
        direction, l = parse_stage(stage)
        layer = self.state.layers[l]
        if layer.kind == "activation":
            return [self.test_simd_stage(worker, stage, transcript)]
        if layer.kind == "conv":
            if direction == "fwd":
                return [self.test_conv_forward(worker, stage, transcript)]
            reports = [self.test_conv_backward_dx(worker, stage, transcript)]
            if reports[0].verdict.honest:
                reports.append(self.test_conv_backward_df(worker, stage, transcript))
            return reports
        reports = []
        for component in stage_components(layer, direction):
            reports.append(self.test_fc(worker, stage, component, transcript))
            if not reports[-1].verdict.honest:
                break
        return reports

    def endorse(self, round_id, digest):
        """ Signs (round id, updates digest) if every verdict of the round is honest.

        Raises
        ------
        RefusedDishonest
            Some report of the round is dishonest, or the round never ran.
        """
        if not self.state.reports or any(not r.verdict.honest for r in self.state.reports):
            raise RefusedDishonest(f"Monitor {self.worker_id} refuses to endorse round {round_id}.")
        return self._signer.sign(endorsement_message(round_id, digest))
    #endregion

    #region Plumbing
    def _sample(self, n):
        p = min(self.state.p, n)
        return [int(k) for k in self.state.rng.choice(n, size=p, replace=False)]

    def _roots(self, stage, transcript):
        if stage not in self.state.roots:
            if transcript is None:
                raise ProtocolOrderError(f"No commitment received for {stage}.")
            self.state.roots[stage] = transcript.roots(stage)
        return self.state.roots[stage]

    def _request(self, worker, stage, leaves, transcript):
        challenge = Challenge(stage=stage, leaves=tuple(dict.fromkeys(leaves)))
        if transcript is not None:
            transcript.challenge(challenge)
        before = worker.reads
        response = worker.answer_challenge(challenge)
        reads = worker.reads - before
        if transcript is not None:
            transcript.respond(response, reads)
        return response, reads

    def _leaf(self, response, roots, counts, tree_id, ordinal, root=None):
        """ Returns (ok, values) for one leaf of a response, checked against its root. """
        item = response.items.get((tree_id, ordinal))
        committed = root if root is not None else roots.get(tree_id)
        if item is None or committed is None:
            return False, None
        values, evid = item
        ok = verify_digest(leaf_digest_of_group(values), ordinal, committed, evid, leaf_count=counts[tree_id])
        return ok, values

    def _report(self, stage, component, probes, reads, extra_failures=(), link_reads=0):
        report = TestReport(stage=stage, component=component, probes=probes,
                            verdict=_verdict_from(probes, extra_failures), reads=reads, link_reads=link_reads)
        self.state.reports.append(report)
        logger.debug(f"Monitor {self.worker_id}: {stage}/{component} {len(probes)} probes, "
                     f"{reads}+{link_reads} reads, honest={report.verdict.honest}")
        return report

    def _missing_trees(self, roots, counts):
        return [f"commitment for {t.value} missing" for t in counts if t not in roots]
    #endregion

    #region Input linking
    def _output_locator(self, layer, direction):
        """ Maps element ``k`` of a stage's output vector to (tree id, leaf ordinal, reader). """
        if layer.kind == "activation":
            return lambda k: (TreeId.BASIC_OUT, k, lambda values: values[0])
        if layer.kind == "conv" and direction == "fwd":
            spec = layer.spec
            a_Y = spec.alpha_Y

            def locate(k):
                t, r, c = (int(v) for v in np.unravel_index(k, (spec.n_F, a_Y, a_Y)))
                return TreeId.Y_ROWS, t * a_Y + r, lambda values: values[c]
            return locate
        tree_id = {("conv", "bwd"): TreeId.GRAD_X, ("fc", "fwd"): TreeId.Y_PRIME_ROWS,
                   ("fc", "bwd"): TreeId.GRAD_X_PRIME_ROWS}[(layer.kind, direction)]
        return lambda k: (tree_id, k, ordered_sum)

    def _committed_outputs(self, worker, stage, ks, transcript):
        """ Output elements ``ks`` of an earlier stage, read from its committed trees. """
        direction, l = parse_stage(stage)
        layer = self.state.layers[l]
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, direction)
        locate = self._output_locator(layer, direction)
        located = {k: locate(k) for k in ks}
        response, reads = self._request(worker, stage, [(t, o) for t, o, _ in located.values()], transcript)
        trusted = {}
        for k, (tree_id, ordinal, read) in located.items():
            ok, values = self._leaf(response, roots, counts, tree_id, ordinal)
            try:
                trusted[k] = read(values) if ok else None
            except IndexError:
                trusted[k] = None
        return trusted, reads

    def _record_inputs(self, worker, ks):
        """ Record input elements ``ks``, checked against the signed record of this round. """
        before = worker.reads
        root, sigma, items = worker.record_inputs(ks)
        reads = worker.reads - before
        signed = (self.state.h_i is not None
                  and leaf_hash(record_leaf_input(self.state.record_id, sigma)) == self.state.h_i
                  and self._authority.verify(root, sigma))
        trusted = {}
        for k in ks:
            item = items.get(k)
            ok = (signed and item is not None and len(item[0]) == 8
                  and verify_element(item[0], k, root, item[1], leaf_count=self.n_X + self.n_Y))
            trusted[k] = decode_float(item[0]) if ok else None
        return trusted, reads

    def _source_inputs(self, worker, l, ks, transcript):
        """ Trusted values of input elements ``ks`` of layer ``l``.

        Layer 0 reads them from the signed record; later layers from the committed output of
        the previous forward stage. Elements without valid evidence map to None.
        """
        ks = sorted(ks)
        if not ks:
            return {}, 0
        if l == 0:
            return self._record_inputs(worker, ks)
        return self._committed_outputs(worker, f"fwd:{l - 1}", ks, transcript)

    def _source_grads(self, worker, l, ks, transcript):
        """ Trusted values of elements ``ks`` of the gradient entering the backward stage of layer ``l``. """
        ks = sorted(ks)
        if not ks:
            return {}, 0
        if l < len(self.state.layers) - 1:
            return self._committed_outputs(worker, f"bwd:{l + 1}", ks, transcript)
        roots = self._roots("loss", transcript)
        counts = expected_leaf_counts(self.n_Y, "loss")
        response, reads = self._request(worker, "loss", [(TreeId.LOSS, 1 + k) for k in ks], transcript)
        trusted = {}
        for k in ks:
            ok, values = self._leaf(response, roots, counts, TreeId.LOSS, 1 + k)
            trusted[k] = values[0] if ok and len(values) else None
        return trusted, reads

    def _link_inputs(self, worker, l, pending, transcript):
        """ Adds an ``input_link`` check to every probe of a battery on layer ``l``.

        Parameters
        ----------
        pending: list[tuple[dict, dict, dict]]
            (checks, inputs used, gradients used) per probe. The used maps take element
            indices to the values the probe computed with; None when the probe's own leaves failed.

        Returns
        -------
        int
            Reads spent on the earlier stages and the record.
        """
        xs = {k for _, x_used, _ in pending if x_used for k in x_used}
        gs = {k for _, _, g_used in pending if g_used for k in g_used}
        x_src, x_reads = self._source_inputs(worker, l, xs, transcript)
        g_src, g_reads = self._source_grads(worker, l, gs, transcript)
        for checks, x_used, g_used in pending:
            checks["input_link"] = (x_used is not None and g_used is not None
                                    and _matches(x_src, x_used) and _matches(g_src, g_used))
        return x_reads + g_reads
    #endregion

    #region Batteries
    def test_simd_stage(self, worker, stage, transcript=None):
        """ Generic selective test of an elementwise stage: g(u0) == u1 for p sampled elements. """
        direction, l = parse_stage(stage)
        layer = self.state.layers[l]
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, direction)
        picks = self._sample(layer.length)
        leaves = [(TreeId.BASIC_IN, k) for k in picks] + [(TreeId.BASIC_OUT, k) for k in picks]
        if direction == "bwd":
            leaves += [(TreeId.BASIC_GRAD_OUT, k) for k in picks]
        response, reads = self._request(worker, stage, leaves, transcript)
        probes, pending = [], []
        for k in picks:
            ok_in, u0 = self._leaf(response, roots, counts, TreeId.BASIC_IN, k)
            ok_out, u1 = self._leaf(response, roots, counts, TreeId.BASIC_OUT, k)
            checks = {"input": ok_in, "output": ok_out}
            if direction == "bwd":
                checks["grad_out"], g = self._leaf(response, roots, counts, TreeId.BASIC_GRAD_OUT, k)
            x_used = g_used = None
            if all(checks.values()):
                try:
                    if direction == "fwd":
                        expected = activation_apply(layer.activation, u0[:1])[0]
                        g_used = {}
                    else:
                        expected = activation_grad(layer.activation, u0[:1], g[:1])[0]
                        g_used = {k: g[0]}
                    x_used = {k: u0[0]}
                    checks["recompute"] = bit_equal(expected, u1[0])
                except (ValueError, IndexError):
                    checks["recompute"] = False
            else:
                checks["recompute"] = False
            probes.append(ProbeResult((k,), checks))
            pending.append((checks, x_used, g_used))
        link_reads = self._link_inputs(worker, l, pending, transcript)
        return self._report(stage, "simd", probes, reads, self._missing_trees(roots, counts), link_reads)

    def test_conv_forward(self, worker, stage, transcript=None):
        """ Landmark-block battery for a convolution forward stage. """
        _, l = parse_stage(stage)
        layer = self.state.layers[l]
        spec = layer.spec
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, "fwd")
        nb, a_X, a_Y, d = landmark_grid(spec), spec.alpha_X, spec.alpha_Y, spec.delta
        picks = [np.unravel_index(k, (spec.n_F, a_Y, a_Y)) for k in self._sample(spec.n_outputs)]
        leaves = []
        for t, r, c in picks:
            leaves += [(TreeId.X_LANDMARK, bi * nb + bj) for bi, bj in covering_blocks(spec, r, c)]
            leaves.append((TreeId.Y_ROWS, int(t) * a_Y + int(r)))
        response, reads = self._request(worker, stage, leaves, transcript)
        probes, pending = [], []
        for t, r, c in picks:
            t, r, c = int(t), int(r), int(c)
            filt = layer.filters[t]
            checks = {"filter_signature": self._coordinator.verify(
                filter_message(l, t, filt), self.state.filter_signatures.get((l, t), b""))}
            blocks, blocks_ok = {}, True
            for bi, bj in covering_blocks(spec, r, c):
                ok, values = self._leaf(response, roots, counts, TreeId.X_LANDMARK, bi * nb + bj)
                blocks_ok = blocks_ok and ok
                blocks[(bi, bj)] = values
            checks["landmarks"] = blocks_ok
            checks["row"], row = self._leaf(response, roots, counts, TreeId.Y_ROWS, t * a_Y + r)
            checks["recompute"] = False
            x_used = None
            if blocks_ok and checks["row"]:
                try:
                    patch = patch_from_blocks(spec, blocks, r, c)
                    checks["recompute"] = bit_equal(conv_forward_element(patch, filt), row[c])
                    x_used = {(r * d + a) * a_X + c * d + b: patch[a, b]
                              for a in range(spec.alpha_F) for b in range(spec.alpha_F)}
                except (ValueError, IndexError):
                    pass
            probes.append(ProbeResult((t, r, c), checks))
            pending.append((checks, x_used, {}))
        link_reads = self._link_inputs(worker, l, pending, transcript)
        return self._report(stage, "y", probes, reads, self._missing_trees(roots, counts), link_reads)

    def test_conv_backward_dx(self, worker, stage, transcript=None):
        """ Input-gradient battery: per-filter gradient leaf, the grad_Y rows it uses, recompute. """
        _, l = parse_stage(stage)
        layer = self.state.layers[l]
        spec = layer.spec
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, "bwd")
        a_X, a_Y = spec.alpha_X, spec.alpha_Y
        picks = [np.unravel_index(k, (spec.n_F, a_X, a_X)) for k in self._sample(spec.n_F * a_X * a_X)]
        leaves = []
        for t, i, j in picks:
            leaves.append((TreeId.GRAD_X, int(i) * a_X + int(j)))
            leaves += [(TreeId.GRAD_Y_ROWS, int(t) * a_Y + u) for u in conv_dx_rows(spec, int(i))]
        response, reads = self._request(worker, stage, leaves, transcript)
        probes, pending = [], []
        for t, i, j in picks:
            t, i, j = int(t), int(i), int(j)
            checks = {}
            checks["grad_x"], tuple_values = self._leaf(response, roots, counts, TreeId.GRAD_X, i * a_X + j)
            rows, rows_ok = {}, True
            for u in conv_dx_rows(spec, i):
                ok, values = self._leaf(response, roots, counts, TreeId.GRAD_Y_ROWS, t * a_Y + u)
                rows_ok = rows_ok and ok
                rows[u] = values
            checks["grad_y_rows"] = rows_ok
            checks["recompute"] = False
            g_used = None
            if checks["grad_x"] and rows_ok:
                try:
                    expected = conv_backward_dx_element(spec, rows, layer.filters[t], i, j)
                    checks["recompute"] = bit_equal(expected, tuple_values[t])
                    g_used = {(t * a_Y + u) * a_Y + v: rows[u][v] for u, v in conv_dx_terms(spec, i, j)}
                except (ValueError, IndexError, KeyError):
                    pass
            probes.append(ProbeResult((t, i, j), checks))
            pending.append((checks, {}, g_used))
        link_reads = self._link_inputs(worker, l, pending, transcript)
        return self._report(stage, "dx", probes, reads, self._missing_trees(roots, counts), link_reads)

    def test_conv_backward_df(self, worker, stage, transcript=None):
        """ Filter-gradient battery over expanded vectors, with the fold into the submitted update. """
        _, l = parse_stage(stage)
        layer = self.state.layers[l]
        spec = layer.spec
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, "bwd")
        a_F, a_X, a_Y, d = spec.alpha_F, spec.alpha_X, spec.alpha_Y, spec.delta
        n = spec.n_F * a_F * a_F * a_Y
        picks = [np.unravel_index(k, (spec.n_F, a_F, a_F, a_Y)) for k in self._sample(n)]
        leaves = []
        for t, i, j, u in picks:
            t, i, j, u = int(t), int(i), int(j), int(u)
            leaves += [(TreeId.GRAD_F, (t * a_F + i) * a_F + j), (TreeId.GRAD_Y_ROWS, t * a_Y + u),
                       (TreeId.X_GROUPS, (i * a_F + j) * a_Y + u)]
        response, reads = self._request(worker, stage, leaves, transcript)
        update = self._updates.get(l)
        probes, pending = [], []
        for t, i, j, u in picks:
            t, i, j, u = int(t), int(i), int(j), int(u)
            checks = {}
            checks["expanded"], vec = self._leaf(response, roots, counts, TreeId.GRAD_F, (t * a_F + i) * a_F + j)
            checks["grad_y_row"], row = self._leaf(response, roots, counts, TreeId.GRAD_Y_ROWS, t * a_Y + u)
            checks["x_group"], group = self._leaf(response, roots, counts, TreeId.X_GROUPS, (i * a_F + j) * a_Y + u)
            leaves_ok = all(checks.values())
            checks["recompute"] = False
            x_used = g_used = None
            if leaves_ok:
                try:
                    checks["recompute"] = bit_equal(conv_expanded_df_element(row, group), vec[u])
                    g_used = {(t * a_Y + u) * a_Y + v: row[v] for v in range(a_Y)}
                    x_used = {(u * d + i) * a_X + v * d + j: group[v] for v in range(a_Y)}
                except (ValueError, IndexError):
                    pass
            if update is not None:
                checks["fold"] = bool(checks["expanded"]) and bit_equal(
                    -spec.eta * ordered_sum(vec), np.asarray(update)[t, i, j])
            probes.append(ProbeResult((t, i, j, u), checks))
            pending.append((checks, x_used, g_used))
        link_reads = self._link_inputs(worker, l, pending, transcript)
        return self._report(stage, "df", probes, reads, self._missing_trees(roots, counts), link_reads)

    def _theta_root(self, l, direction):
        root = self.state.theta_roots.get((l, direction))
        signature = self.state.theta_signatures.get((l, direction), b"")
        if root is None or not self._coordinator.verify(theta_root_message(l, direction, root), signature):
            return None
        return root

    def test_fc(self, worker, stage, component, transcript=None):
        """ Hierarchical fully-connected battery.

        ``y_prime`` (forward) and ``dx`` (backward) probe one partial sum each: the row
        holding it, the input sub-vector, the weight group checked against the
        coordinator-signed root, and the recomputation. ``dtheta`` probes one weight update
        against the grad_Y and X sub-vectors it is built from.
        """
        direction, l = parse_stage(stage)
        layer = self.state.layers[l]
        spec = layer.spec
        roots = self._roots(stage, transcript)
        counts = expected_leaf_counts(layer, direction)
        n_X, s_X = split_size(spec.l_X)
        n_Y, s_Y = split_size(spec.l_Y)
        extra = self._missing_trees(roots, counts)
        update = self._updates.get(l)
        probes, pending = [], []

        if component in ("y_prime", "dx"):
            if component == "y_prime":
                shape, s_sub = (spec.l_Y, n_X), s_X
                row_tree, sub_tree, group_tree = TreeId.Y_PRIME_ROWS, TreeId.X_SUBVECTORS, TreeId.THETA_GROUPS
                group_of = lambda a, b: b * spec.l_Y + a
            else:
                shape, s_sub = (spec.l_X, n_Y), s_Y
                row_tree, sub_tree, group_tree = (TreeId.GRAD_X_PRIME_ROWS, TreeId.GRAD_Y_SUBVECTORS,
                                                  TreeId.THETA_BWD_GROUPS)
                group_of = lambda a, b: a * n_Y + b
            trusted = self._theta_root(l, direction)
            if trusted is None:
                extra.append("theta signature invalid")
            elif roots.get(group_tree) != trusted:
                extra.append("theta commitment differs from the signed one")
            picks = [tuple(int(v) for v in np.unravel_index(k, shape)) for k in self._sample(shape[0] * shape[1])]
            leaves = []
            for a, b in picks:
                leaves += [(row_tree, a), (sub_tree, b), (group_tree, group_of(a, b))]
            response, reads = self._request(worker, stage, leaves, transcript)
            for a, b in picks:
                checks = {}
                checks["row"], row = self._leaf(response, roots, counts, row_tree, a)
                checks["sub_vector"], sub = self._leaf(response, roots, counts, sub_tree, b)
                checks["theta_group"], group = self._leaf(response, roots, counts, group_tree, group_of(a, b),
                                                          root=trusted)
                leaves_ok = all(checks.values())
                checks["recompute"] = False
                used = None
                if leaves_ok:
                    try:
                        checks["recompute"] = bit_equal(fc_partial_element(sub, group), row[b])
                        used = {b * s_sub + q: sub[q] for q in range(s_sub)}
                    except (ValueError, IndexError):
                        pass
                probes.append(ProbeResult((a, b), checks))
                pending.append((checks, used, {}) if component == "y_prime" else (checks, {}, used))
            link_reads = self._link_inputs(worker, l, pending, transcript)
            return self._report(stage, component, probes, reads, extra, link_reads)

        picks = [tuple(int(v) for v in np.unravel_index(k, (spec.l_X, spec.l_Y)))
                 for k in self._sample(spec.l_X * spec.l_Y)]
        leaves = []
        for j, i in picks:
            leaves += [(TreeId.GRAD_THETA_ROWS, j), (TreeId.GRAD_Y_SUBVECTORS, i // s_Y),
                       (TreeId.X_SUBVECTORS, j // s_X)]
        response, reads = self._request(worker, stage, leaves, transcript)
        for j, i in picks:
            checks = {}
            checks["row"], row = self._leaf(response, roots, counts, TreeId.GRAD_THETA_ROWS, j)
            checks["grad_y"], gy = self._leaf(response, roots, counts, TreeId.GRAD_Y_SUBVECTORS, i // s_Y)
            checks["x"], xs = self._leaf(response, roots, counts, TreeId.X_SUBVECTORS, j // s_X)
            leaves_ok = all(checks.values())
            checks["recompute"] = False
            x_used = g_used = None
            if leaves_ok:
                try:
                    expected = fc_grad_theta_element(spec.eta, gy[i % s_Y], xs[j % s_X])
                    checks["recompute"] = bit_equal(expected, row[i])
                    x_used, g_used = {j: xs[j % s_X]}, {i: gy[i % s_Y]}
                except (ValueError, IndexError):
                    pass
            if update is not None:
                checks["fold"] = bool(checks["row"]) and bit_equal(row[i], np.asarray(update)[j, i])
            probes.append(ProbeResult((j, i), checks))
            pending.append((checks, x_used, g_used))
        link_reads = self._link_inputs(worker, l, pending, transcript)
        return self._report(stage, "dtheta", probes, reads, extra, link_reads)

    def test_final_layer(self, worker, transcript=None):
        """ Recomputes the loss and its gradient from verified inputs. """
        n_layers = len(self.state.layers)
        last = self.state.layers[-1]
        last_fwd, last_bwd = f"fwd:{n_layers - 1}", f"bwd:{n_layers - 1}"
        before = worker.reads
        sub = worker.final_layer_submission()
        checks = {}
        i = self.state.record_id
        checks["record"] = (sub.record_id == i
                            and self.state.h_i is not None
                            and leaf_hash(record_leaf_input(i, sub.sigma)) == self.state.h_i
                            and self._authority.verify(sub.record_root, sub.sigma))
        y, labels_ok = [], len(sub.y_items) == self.n_Y
        for k, (leaf_bytes, evid) in enumerate(sub.y_items):
            labels_ok = labels_ok and verify_element(leaf_bytes, self.n_X + k, sub.record_root, evid,
                                                     leaf_count=self.n_X + self.n_Y)
            y.append(decode_float(leaf_bytes) if len(leaf_bytes) == 8 else float("nan"))
        checks["labels"] = labels_ok

        roots = self._roots(last_fwd, transcript)
        counts = expected_leaf_counts(last, "fwd")
        if last.kind == "fc":
            tree_id, width = TreeId.Y_PRIME_ROWS, last.spec.l_Y
        else:
            tree_id, width = TreeId.BASIC_OUT, last.length
        response, _ = self._request(worker, last_fwd, [(tree_id, k) for k in range(width)], transcript)
        yhat, yhat_ok = [], True
        for k in range(width):
            ok, values = self._leaf(response, roots, counts, tree_id, k)
            yhat_ok = yhat_ok and ok
            yhat.append(ordered_sum(values) if (ok and last.kind == "fc") else (values[0] if ok else float("nan")))
        checks["yhat"] = yhat_ok and len(sub.yhat) == width and all(
            bit_equal(a, b) for a, b in zip(yhat, sub.yhat))

        checks["loss"] = False
        checks["commitment"] = False
        checks["grad_link"] = False
        if checks["yhat"] and checks["labels"]:
            loss, grad = loss_eval(np.asarray(yhat), np.asarray(y))
            checks["loss"] = bit_equal(loss, sub.loss) and len(sub.grad) == len(grad) and all(
                bit_equal(a, b) for a, b in zip(grad, sub.grad))
            loss_root = self._roots("loss", transcript).get(TreeId.LOSS)
            checks["commitment"] = loss_root == group_commit(np.concatenate([[loss], grad]).reshape(-1, 1)).root
            bwd_roots = self._roots(last_bwd, transcript)
            if last.kind == "fc":
                n_Y, s_Y = split_size(last.spec.l_Y)
                checks["grad_link"] = bwd_roots.get(TreeId.GRAD_Y_SUBVECTORS) == group_commit(grad.reshape(n_Y, s_Y)).root
            else:
                checks["grad_link"] = bwd_roots.get(TreeId.BASIC_GRAD_OUT) == group_commit(grad.reshape(-1, 1)).root
        reads = worker.reads - before
        return self._report("loss", "loss", [ProbeResult((i if i is not None else 0,), checks)], reads)
    #endregion
