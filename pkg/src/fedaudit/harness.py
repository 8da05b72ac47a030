""" Batch experiments: protocol rounds, cost benchmarks, detection sweeps and game checks.

Every experiment is fixed by an ``ExperimentConfig`` and its seed. Outputs other than
timing columns are byte-identical across runs with the same configuration.
"""
from dataclasses import asdict, dataclass, field
import json
from pathlib import Path
import statistics
import time

from loguru import logger
import numpy as np
import pandas as pd

from .coordinator import Coordinator, GlobalModel, build_model
from .data_records import HmacSigner, build_record_store, generate_records, load_records
from .enumerations import (
    BENCH_COLUMNS, BENCH_REPETITIONS, BENCH_WARMUP, CONV_BASE, CONV_GRIDS, DEFAULT_DETECTION_GRID,
    DEFAULT_GAME_B, DEFAULT_GAME_N, DEFAULT_GAME_P, DEFAULT_LEARNING_RATE, DEFAULT_PROBES, DEFAULT_TRIALS,
    DETECTION_COLUMNS, FC_GRIDS, MIN_PROBES,
)
from .exceptions import ConfigError, InsufficientDeposit, NoEndorsedUpdates
from .game_theory import (
    GameParams, alternative_min_deposit, best_response, detection_table, honesty_report, min_deposit,
    theorem_bounds_check,
)
from .hashing_merkle import group_commit
from .ledger import ContractState, required_deposit, to_micro
from .monitor import AuditTranscript, Monitor
from .nn_core import (
    ConvLayer, ConvSpec, FcLayer, FcSpec, conv_backward, conv_forward, fc_backward, fc_backward_partials,
    fc_forward, fc_partials, split_size,
)
from .tables import write_table
from .utilities import config_hash, derive_seed
from .worker import (
    CheatStrategy, Worker, conv_x_groups, landmark_blocks, theta_backward_groups, theta_forward_groups,
)

DEFAULT_LAYERS = [
    {"type": "conv", "n_F": 2, "alpha_F": 2, "delta": 1},
    {"type": "activation", "kind": "relu"},
    {"type": "fc", "l_Y": 2},
]

GAME_COLUMNS = ["n", "p", "B", "d", "bounds_ok", "honesty_paper", "honesty_exact", "best_response",
                "min_deposit", "alternative_min_deposit", "diagnostic", "config_hash"]


@dataclass
class ExperimentConfig:
    """ Everything an experiment depends on.

    Attributes
    ----------
    seed: int
    n_R, n_X, n_Y: int
        Synthetic record count and shape, ignored when ``records_path`` is given.
    records_path: str, optional
        JSON records file.
    layers: list[dict]
        Layer descriptions, see ``coordinator.build_model``.
    rounds: int
    workers: list[dict]
        ``{"id": str, "cheat": {...} | None, "deposit": int | None}``.
    p: int
        Probes per computation set.
    stage_cost: float
        Maximal stage cost in currency units; sets the required deposit.
    game: dict
        ``n``, ``p``, ``B`` lists plus ``c``, ``B_prime``, ``penalty`` and an optional forced ``d``.
    detect: dict
        ``grid`` of [n, p, m] and ``trials``.
    bench: dict
        Optional ``tables`` (names to run), per-table value lists, ``repetitions``.
    keys: dict
        Optional hex keys for ``authority``, ``coordinator`` and ``monitor:<id>``.
    out: str
    """
    seed: int = 0
    n_R: int = 8
    n_X: int = 16
    n_Y: int = 2
    records_path: str = None
    layers: list = field(default_factory=lambda: [dict(d) for d in DEFAULT_LAYERS])
    rounds: int = 3
    workers: list = field(default_factory=lambda: [{"id": "w1"}])
    p: int = DEFAULT_PROBES
    eta: float = DEFAULT_LEARNING_RATE
    stage_cost: float = 1.0
    game: dict = field(default_factory=dict)
    detect: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    out: str = "out"

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1.")
        if self.p < MIN_PROBES:
            raise ConfigError(f"p must be >= {MIN_PROBES}.")
        if min(self.n_R, self.n_X, self.n_Y) < 1:
            raise ConfigError("n_R, n_X and n_Y must be >= 1.")
        if len(self.workers) == 0:
            raise ConfigError("At least one worker is required.")
        ids = [w.get("id") for w in self.workers]
        if None in ids or len(set(ids)) != len(ids):
            raise ConfigError("Workers need distinct ids.")
        for w in self.workers:
            if w.get("cheat"):
                try:
                    CheatStrategy.from_dict(w["cheat"])
                except ValueError as e:
                    raise ConfigError(f"Worker {w['id']}: invalid cheat strategy: {e}") from e
        if self.detect.get("grid") == []:
            raise ConfigError("The detection grid must not be empty.")

    @classmethod
    def from_dict(cls, obj, **overrides):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}.")
        merged = dict(obj)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**merged)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, fp, **overrides):
        fp = Path(fp)
        if not fp.is_file():
            raise FileNotFoundError(f"File {fp} does not exist.")
        with open(fp) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{fp} is not valid JSON: {e}") from e
        return cls.from_dict(obj, **overrides)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        """ Provenance hash; the output directory does not affect results and is excluded. """
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    def signer(self, label):
        if label in self.keys:
            return HmacSigner.from_hex(self.keys[label], label)
        return HmacSigner.from_seed(self.seed, label)


def _write_json(obj, fp):
    Path(fp).parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


#region Rounds
def run_rounds(config, out=None):
    """ Runs the protocol end to end for ``config.rounds`` rounds.

    Writes ``round_report.json``, ``ledger_events.jsonl`` and ``transcript.jsonl`` to ``out``
    when given.

    Returns
    -------
    dict
        Per round and worker: record id, stage verdicts, endorsement and slashing; plus the
        final model version and the ledger snapshot.
    """
    seed = config.seed
    authority = config.signer("authority")
    coordinator_key = config.signer("coordinator")
    if config.records_path:
        records = load_records(config.records_path, authority)
    else:
        records = generate_records(config.n_R, config.n_X, config.n_Y, derive_seed(seed, "records"), authority)
    store = build_record_store(records, authority)
    model = build_model(config.layers, store.n_X, store.n_Y, derive_seed(seed, "model"), config.eta)

    ledger = ContractState()
    required = required_deposit(to_micro(config.stage_cost), config.p)
    coordinator = Coordinator(model, coordinator_key, ledger)
    package = coordinator.publish()
    workers, monitors, transcripts = {}, {}, {}
    for w in config.workers:
        wid = w["id"]
        cheat = CheatStrategy.from_dict(w["cheat"]) if w.get("cheat") else None
        monitor_key = config.signer(f"monitor:{wid}")
        ledger.register_monitor(wid, monitor_key)
        try:
            ledger.join(wid, w.get("deposit", required), required)
        except InsufficientDeposit as e:
            raise ConfigError(f"Worker {wid}: {e}") from e
        workers[wid] = Worker(wid, store, cheat, seed=derive_seed(seed, "worker", wid))
        monitors[wid] = Monitor(wid, store.h_R, store.n_R, package, coordinator_key, authority, monitor_key,
                                p=config.p, seed=derive_seed(seed, "monitor", wid))
        transcripts[wid] = AuditTranscript(wid)
    logger.info(f"Running {config.rounds} rounds with {len(workers)} workers, deposit {required}")
    logger.warning("Monitors run in the worker process; enclave isolation is simulated")

    rounds = []
    for round_id in range(1, config.rounds + 1):
        package = coordinator.publish()
        submissions, entries = {}, []
        for wid in ledger.active_workers():
            worker, monitor = workers[wid], monitors[wid]
            worker.load_model(package.layers)
            monitor.load_package(package)
            audit = monitor.audit_round(worker, round_id, transcripts[wid])
            entry = {"worker": wid, "record_id": audit.record_id, "endorsed": False, "slashed": False,
                     "verdicts": [{"stage": r.stage, "component": r.component, "honest": r.verdict.honest,
                                   "reason": r.verdict.reason, "reads": r.reads, "link_reads": r.link_reads}
                                  for r in audit.reports]}
            if audit.honest:
                digest = audit.round_result.updates_digest
                ledger.record_endorsement(wid, round_id, monitor.endorse(round_id, digest), digest)
                submissions[wid] = audit.round_result
                entry["endorsed"] = True
            else:
                ledger.slash(wid, audit.first_failure().verdict.reason)
                entry["slashed"] = True
            entries.append(entry)
        if entries:
            try:
                coordinator.aggregate(round_id, submissions)
            except NoEndorsedUpdates:
                logger.warning(f"Round {round_id}: no endorsed updates, model unchanged")
        rounds.append({"round": round_id, "model_version": coordinator.model.version, "workers": entries})
        if not ledger.active_workers():
            logger.warning(f"Round {round_id}: every worker has been evicted")
            break

    report = {
        "config_hash": config.hash(),
        "seed": seed,
        "rounds": rounds,
        "final_model_version": coordinator.model.version,
        "ledger": ledger.snapshot(),
        "slashed": sorted({e["worker"] for r in rounds for e in r["workers"] if e["slashed"]}),
    }
    if out is not None:
        out = Path(out)
        _write_json(report, out / "round_report.json")
        (out / "ledger_events.jsonl").write_text(ledger.to_json_lines())
        (out / "transcript.jsonl").write_text("".join(transcripts[w].to_json_lines() for w in sorted(transcripts)))
    return report
#endregion


#region Benchmarks
def median_time(fn, repetitions=BENCH_REPETITIONS, warmup=BENCH_WARMUP):
    """ Median wall-clock time of ``fn()`` in microseconds, warm-up runs discarded. """
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e6)
    return statistics.median(samples)


def _rehash(*arrays):
    for arr in arrays:
        group_commit(np.asarray(arr, dtype=np.float64).reshape(-1, 1))


def _bench_session(layers, seed):
    """ A worker that has committed one round on a single-record store, and its monitor. """
    authority = HmacSigner.from_seed(seed, "authority")
    coordinator_key = HmacSigner.from_seed(seed, "coordinator")
    n_X, n_Y = layers[0].input_length, layers[-1].output_length
    store = build_record_store(generate_records(1, n_X, n_Y, seed, authority), authority)
    ledger = ContractState()
    package = Coordinator(GlobalModel(tuple(layers)), coordinator_key, ledger).publish()
    monitor_key = HmacSigner.from_seed(seed, "monitor")
    worker = Worker("bench", store, seed=seed)
    worker.load_model(package.layers)
    monitor = Monitor("bench", store.h_R, store.n_R, package, coordinator_key, authority, monitor_key, seed=seed)
    transcript = AuditTranscript("bench")
    i, _ = monitor.init_round(worker)
    worker.train_round(i, transcript)
    for stage in worker.stage_ids:
        monitor.state.roots[stage] = transcript.roots(stage)
    monitor._updates = worker.updates
    return worker, monitor, store.records[0].x


def _conv_row(values, direction, reps, seed):
    spec = ConvSpec(values["n_F"], values["alpha_F"], values["delta"], values["alpha_X"])
    rng = np.random.default_rng(seed)
    filters = rng.standard_normal((spec.n_F, spec.alpha_F, spec.alpha_F))
    head = FcLayer(FcSpec(spec.n_outputs, 1, rng.standard_normal((spec.n_outputs, 1)) / np.sqrt(spec.n_outputs)))
    worker, monitor, x = _bench_session([ConvLayer(spec, filters), head], seed)
    X = x.reshape(spec.alpha_X, spec.alpha_X)
    Y = conv_forward(spec, X, filters)
    grad_y = rng.standard_normal(Y.shape)
    if direction == "fwd":
        original = median_time(lambda: conv_forward(spec, X, filters), reps)
        baseline = median_time(lambda: (conv_forward(spec, X, filters), _rehash(X, Y)), reps)
        compute = median_time(lambda: (conv_forward(spec, X, filters), landmark_blocks(spec, X)), reps)
        commit = median_time(lambda: (group_commit(landmark_blocks(spec, X)),
                                      group_commit(Y.reshape(-1, spec.alpha_Y))), reps)
        monitor_test = median_time(lambda: monitor.test_conv_forward(worker, "fwd:0"), reps)
        return original, baseline, compute, commit, monitor_test
    grads = conv_backward(spec, X, filters, grad_y)
    original = median_time(lambda: conv_backward(spec, X, filters, grad_y), reps)
    baseline = median_time(lambda: (conv_backward(spec, X, filters, grad_y),
                                    _rehash(X, grad_y, grads.grad_x, grads.grad_f)), reps)
    compute = median_time(lambda: (conv_backward(spec, X, filters, grad_y), conv_x_groups(spec, X)), reps)
    commit = median_time(lambda: (group_commit(grads.grad_x_per_filter.reshape(spec.n_F, -1).T),
                                  group_commit(grads.grad_f_expanded.reshape(-1, spec.alpha_Y)),
                                  group_commit(grad_y.reshape(-1, spec.alpha_Y)),
                                  group_commit(conv_x_groups(spec, X))), reps)
    monitor_test = median_time(lambda: (monitor.test_conv_backward_dx(worker, "bwd:0"),
                                        monitor.test_conv_backward_df(worker, "bwd:0")), reps)
    return original, baseline, compute, commit, monitor_test


def _fc_row(values, direction, reps, seed):
    l_X, l_Y = values["l_X"], values["l_Y"]
    rng = np.random.default_rng(seed)
    spec = FcSpec(l_X, l_Y, rng.standard_normal((l_X, l_Y)) / np.sqrt(l_X))
    head = FcLayer(FcSpec(l_Y, 1, rng.standard_normal((l_Y, 1)) / np.sqrt(l_Y)))
    worker, monitor, x = _bench_session([FcLayer(spec), head], seed)
    n_X, s_X = split_size(l_X)
    n_Y, s_Y = split_size(l_Y)
    grad_y = rng.standard_normal(l_Y)
    if direction == "fwd":
        y_prime, Y = fc_partials(spec, x, n_X)
        original = median_time(lambda: fc_forward(spec, x), reps)
        baseline = median_time(lambda: (fc_forward(spec, x), _rehash(x, Y)), reps)
        compute = median_time(lambda: fc_partials(spec, x, n_X), reps)
        commit = median_time(lambda: (group_commit(y_prime), group_commit(x.reshape(n_X, s_X)),
                                      group_commit(theta_forward_groups(spec.theta, n_X))), reps)
        monitor_test = median_time(lambda: monitor.test_fc(worker, "fwd:0", "y_prime"), reps)
        return original, baseline, compute, commit, monitor_test
    grad_x_prime, grad_x = fc_backward_partials(spec, grad_y, n_Y)
    _, grad_theta = fc_backward(spec, x, grad_y)
    original = median_time(lambda: fc_backward(spec, x, grad_y), reps)
    baseline = median_time(lambda: (fc_backward(spec, x, grad_y), _rehash(x, grad_y, grad_x, grad_theta)), reps)
    compute = median_time(lambda: (fc_backward_partials(spec, grad_y, n_Y), fc_backward(spec, x, grad_y)), reps)
    commit = median_time(lambda: (group_commit(grad_x_prime), group_commit(grad_y.reshape(n_Y, s_Y)),
                                  group_commit(theta_backward_groups(spec.theta, n_Y)),
                                  group_commit(x.reshape(n_X, s_X)), group_commit(grad_theta)), reps)
    monitor_test = median_time(lambda: (monitor.test_fc(worker, "bwd:0", "dx"),
                                        monitor.test_fc(worker, "bwd:0", "dtheta")), reps)
    return original, baseline, compute, commit, monitor_test


def bench_tables():
    """ Names of every benchmark table with (layer kind, direction, varied setting, values, base settings). """
    tables = {}
    for direction in ("fwd", "bwd"):
        for name, (key, values) in CONV_GRIDS.items():
            tables[f"conv_{direction}_{name}"] = ("conv", direction, key, values, dict(CONV_BASE))
        for name, (key, values, base) in FC_GRIDS.items():
            tables[f"fc_{direction}_{name}"] = ("fc", direction, key, values, dict(base))
    return tables


def bench(config, out=None):
    """ Cost tables, one per varied setting, with median timings in microseconds.

    Returns
    -------
    dict[str, pandas.DataFrame]
    """
    available = bench_tables()
    names = config.bench.get("tables", list(available))
    reps = int(config.bench.get("repetitions", BENCH_REPETITIONS))
    chash = config.hash()
    results = {}
    for name in names:
        if name not in available:
            raise ConfigError(f"Unknown benchmark table '{name}'.")
        kind, direction, key, values, base = available[name]
        values = config.bench.get(name, values)
        if len(values) == 0:
            raise ConfigError(f"Benchmark grid '{name}' is empty.")
        rows = []
        for value in values:
            settings = dict(base, **{key: value})
            row_fn = _conv_row if kind == "conv" else _fc_row
            try:
                original, baseline, compute, commit, monitor_test = row_fn(
                    settings, direction, reps, derive_seed(config.seed, name, value))
            except ValueError as e:
                raise ConfigError(f"Benchmark '{name}' setting {value}: {e}") from e
            rows.append([value, original, baseline, compute, commit, monitor_test,
                         compute + commit + monitor_test, chash])
            logger.debug(f"{name} {key}={value}: worker {compute + commit:.0f}us, monitor {monitor_test:.0f}us")
        results[name] = pd.DataFrame(columns=BENCH_COLUMNS, data=rows)
        if out is not None:
            write_table(results[name], Path(out) / f"{name}.csv", BENCH_COLUMNS)
        logger.info(f"Benchmark table {name}: {len(rows)} settings")
    return results
#endregion


#region Analytics
def detect_sim(config, out=None):
    """ Simulated against analytic detection over ``config.detect['grid']``. """
    grid = config.detect.get("grid", DEFAULT_DETECTION_GRID)
    trials = int(config.detect.get("trials", DEFAULT_TRIALS))
    df = detection_table([tuple(int(v) for v in row) for row in grid], trials, config.seed)
    df["config_hash"] = config.hash()
    if out is not None:
        write_table(df, Path(out) / "detection.csv", DETECTION_COLUMNS)
    return df


def game_check(config, out=None):
    """ Deposit-bound and best-response checks over the configured (n, p, B) grid.

    Hypothesis failures (p < 2) and forced deposits below the bound are reported as
    violations rather than raised.

    Returns
    -------
    tuple[pandas.DataFrame, list[dict]]
        The per-point table and the violations.
    """
    game = config.game
    c = float(game.get("c", 1.0))
    chash = config.hash()
    rows, violations = [], []
    for n in game.get("n", DEFAULT_GAME_N):
        for p in game.get("p", DEFAULT_GAME_P):
            for B in game.get("B", DEFAULT_GAME_B):
                if p < 2:
                    diag = f"hypothesis fails: the deposit bound needs p >= 2, got p={p}"
                    rows.append([n, p, B, game.get("d", float("nan")), False, False, False, -1,
                                 float("nan"), alternative_min_deposit(c), diag, chash])
                    violations.append({"n": n, "p": p, "B": B, "reason": diag})
                    continue
                d = float(game.get("d", min_deposit(c, p)))
                params = GameParams(n=n, p=min(p, n), B=B, B_prime=float(game.get("B_prime", 0.0)), d=d,
                                    penalty=float(game.get("penalty", 0.0)), c_total=c)
                bounds_ok = theorem_bounds_check(n, p) if n >= p else False
                report = honesty_report(params)
                enforced = report["deposit_ok"] and report["paper"]
                reply = best_response(params)
                diag = ""
                if not bounds_ok:
                    diag = "detection bound check failed"
                elif not enforced:
                    diag = "deposit below bound" if not report["deposit_ok"] else "cheating is profitable"
                if diag:
                    violations.append({"n": n, "p": p, "B": B, "reason": diag})
                rows.append([n, p, B, d, bounds_ok, report["paper"], report["exact"], reply,
                             min_deposit(c, p), alternative_min_deposit(c), diag, chash])
    df = pd.DataFrame(columns=GAME_COLUMNS, data=rows)
    if out is not None:
        write_table(df, Path(out) / "game_check.csv", GAME_COLUMNS)
        _write_json({"config_hash": chash, "violations": violations}, Path(out) / "game_check.json")
    if violations:
        logger.warning(f"Game check: {len(violations)} violations")
    return df, violations
#endregion
