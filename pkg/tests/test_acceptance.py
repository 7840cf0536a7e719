"""Acceptance gate: one test per shipped claim, at its stated tolerance.

Each test prints a single PASS/FAIL line (run with -s to see them live).
The matrix-game criteria train full 20000-episode runs in process, and the
grid-world criteria train subprocess runs through the command line, so this
file takes on the order of hours; the long runs start in the background as
soon as the module starts and the fast criteria execute while they cook.
"""

import subprocess
import sys
import threading
import time
from collections import deque

import numpy as np
import pytest

from qfactor.cli import main as cli_main
from qfactor.envs import PAYOFF, MatrixGame, make_env
from qfactor.harness import (
    additive_residual,
    phi_stability,
    read_metrics_csv,
    read_phi_csv,
    read_reconstruction_csv,
    reconstruct_qtot,
    smooth_cma10,
)
from qfactor.mixers import (
    QtranHeads,
    igm_holds,
    joint_sum_table,
    qtran_losses,
    random_factorization_instance,
    residual_factorization_holds,
)
from qfactor.nn import Tensor, no_grad
from qfactor.training import EpisodeRecord, FlatBatch, Trainer, pad_batch

SEEDS = (0, 1, 2)
MATRIX_REGIME = {"buffer_size": 500, "epsilon_fixed": 1.0, "gamma": 1.0}


def report(criterion, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def train_matrix(algo, seed):
    trainer = Trainer(MatrixGame(), algo, seed, **MATRIX_REGIME)
    trainer.run(20000)
    return trainer


def matrix_table(trainer):
    return reconstruct_qtot(trainer.agent, trainer.algo, trainer.env,
                            mixer=trainer.mixer, heads=trainer.heads,
                            estimator=trainer.estimator)


# -- background training pool --------------------------------------------


class RunPool:
    """Runs training commands as subprocesses, a few at a time."""

    def __init__(self, max_live=3):
        self.max_live = max_live
        self._lock = threading.Lock()
        self._queue = deque()
        self._live = {}
        self._done = {}
        self._stop = False

    def submit(self, key, argv):
        with self._lock:
            self._queue.append((key, argv))
        self._pump()

    def _pump(self):
        with self._lock:
            for key, proc in list(self._live.items()):
                if proc.poll() is not None:
                    self._done[key] = proc.returncode
                    del self._live[key]
            while self._queue and len(self._live) < self.max_live:
                key, argv = self._queue.popleft()
                self._live[key] = subprocess.Popen(
                    argv, stdout=subprocess.DEVNULL,
                    stderr=subprocess.DEVNULL)

    def pump_forever(self, interval=5.0):
        while not self._stop:
            self._pump()
            time.sleep(interval)

    def wait(self, key):
        while True:
            with self._lock:
                if key in self._done:
                    return self._done[key]
            self._pump()
            time.sleep(2.0)

    def shutdown(self):
        self._stop = True
        with self._lock:
            self._queue.clear()
            for proc in self._live.values():
                proc.terminate()


def train_cmd(algo, episodes, seed, out, extra=()):
    return [sys.executable, "-m", "qfactor.cli", "train", "--algo", algo,
            "--env", "predator_prey", "--episodes", str(episodes),
            "--seed", str(seed), "--out", str(out), *extra]


@pytest.fixture(scope="module")
def work_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module", autouse=True)
def pool(request, work_dir):
    selected = " ".join(item.name for item in request.session.items)
    pool = RunPool(max_live=3)
    if "criterion_09" in selected or "criterion_10" in selected:
        for seed in SEEDS:
            pool.submit(("c9", seed),
                        train_cmd("rqn", 5000, seed,
                                  work_dir / f"c9_s{seed}",
                                  ("--n-predators", "2")))
    if "criterion_11" in selected:
        harder = ("--n-predators", "4", "--capture-penalty", "-0.1",
                  "--preset", "table2")
        for algo in ("rqn", "qmix"):
            for seed in SEEDS:
                pool.submit(("c11", algo, seed),
                            train_cmd(algo, 20000, seed,
                                      work_dir / f"c11_{algo}_s{seed}",
                                      harder))
    thread = threading.Thread(target=pool.pump_forever, daemon=True)
    thread.start()
    yield pool
    pool.shutdown()


# -- matrix-game reconstructions -----------------------------------------


@pytest.fixture(scope="module")
def reference_run(work_dir):
    out = work_dir / "reference"
    argv = ["train", "--algo", "rqn", "--env", "matrix", "--episodes",
            "20000", "--epsilon-fixed", "1", "--buffer", "500", "--seed",
            "0", "--out", str(out)]
    assert cli_main(argv) == 0
    assert cli_main(["reconstruct", str(out)]) == 0
    return out, argv


def test_criterion_01_residual_reconstruction(reference_run):
    out, _ = reference_run
    table = read_reconstruction_csv(out / "reconstruction.csv")
    err = np.abs(table - PAYOFF).max()
    report(1, err <= 0.15,
           f"residual-factor reconstruction max error {err:.3f} (bar 0.15)")


def test_criterion_02_joint_critic_reconstruction():
    table = matrix_table(train_matrix("qtran", seed=1))
    err = np.abs(table - PAYOFF).max()
    report(2, err <= 0.15,
           f"joint-critic reconstruction max error {err:.3f} (bar 0.15)")


def test_criterion_03_plain_sum_failure():
    table = matrix_table(train_matrix("vdn", seed=0))
    residual = additive_residual(table)
    ok = table[0, 0] <= 0.0 and residual <= 1e-6
    report(3, ok, f"plain sum (A,A) {table[0, 0]:.2f} <= 0 with additive "
                  f"residual {residual:.1e} (bar 1e-6)")


def mixer_min_derivative(trainer, bump=1e-6):
    rng = np.random.default_rng(99)
    q = rng.normal(scale=3.0, size=(200, 2))
    state = np.ones((200, 1))
    worst = np.inf
    with no_grad():
        base = trainer.mixer(Tensor(q), Tensor(state)).data[:, 0]
        for i in range(2):
            up = q.copy()
            up[:, i] += bump
            out = trainer.mixer(Tensor(up), Tensor(state)).data[:, 0]
            worst = min(worst, float(((out - base) / bump).min()))
    return worst


def test_criterion_04_monotone_mixer_failure():
    trainer = Trainer(MatrixGame(), "qmix", seed=0, **MATRIX_REGIME)
    worst = np.inf
    for _ in range(10):
        trainer.run(2000)
        worst = min(worst, mixer_min_derivative(trainer))
    table = matrix_table(trainer)
    ok = table[0, 0] < -4.0 and abs(table[1, 1]) <= 0.5 and worst >= -1e-9
    report(4, ok, f"monotone mixer (A,A) {table[0, 0]:.2f} < -4, "
                  f"(B,B) {table[1, 1]:+.3f} within 0.5, min mixing "
                  f"derivative {worst:.1e} across training")


# -- tabular verification sweeps -----------------------------------------


def test_criterion_05_verification_implies_greedy_consistency():
    shapes = [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3)]
    kinds = ("satisfying", "random", "adversarial")
    rng = np.random.default_rng(5)
    cpu0 = time.process_time()
    failures = verified = 0
    for n_agents, n_actions in shapes:
        for i in range(1000):
            q, phi, q_tot = random_factorization_instance(
                rng, n_agents, n_actions, kinds[i % 3])
            if residual_factorization_holds(q, phi, q_tot):
                verified += 1
                if not igm_holds(q, q_tot):
                    failures += 1
    cpu = time.process_time() - cpu0
    ok = failures == 0 and verified >= 1000 and cpu < 30.0
    report(5, ok, f"{failures} implication failures over 5000 instances "
                  f"({verified} verified) in {cpu:.1f}s cpu")


def test_criterion_06_factor_shift_invariance():
    shapes = [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3)]
    rng = np.random.default_rng(6)
    exceptions = 0
    for i in range(10000):
        n_agents, n_actions = shapes[i % len(shapes)]
        q = rng.normal(size=(n_agents, n_actions))
        phi = rng.normal(size=n_agents)
        if (np.argmax(joint_sum_table(q))
                != np.argmax(joint_sum_table(q + phi[:, None]))):
            exceptions += 1
    report(6, exceptions == 0,
           f"{exceptions} greedy changes over 10000 factor-shifted instances")


# -- gradient correctness -------------------------------------------------


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def fd_worst_error(loss_fn, modules, rng, h=1e-6, coords=3):
    params = [p for m in modules for _, p in m.named_parameters("m.")]
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = (np.zeros_like(flat) if p.grad is None
                else p.grad.reshape(-1))
        for idx in rng.choice(flat.size, size=min(coords, flat.size),
                              replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            up = loss_fn().item()
            flat[idx] = keep - h
            down = loss_fn().item()
            flat[idx] = keep
            worst = max(worst, rel_err((up - down) / (2 * h), grad[idx]))
    return worst


def toy_records(rng, lengths, obs_dim=1, state_dim=1, n_actions=3,
                n_agents=2):
    return [EpisodeRecord(
        obs=rng.normal(size=(t, n_agents, obs_dim)).astype(np.float32),
        states=rng.normal(size=(t, state_dim)).astype(np.float32),
        actions=rng.integers(0, n_actions, size=(t, n_agents)),
        rewards=rng.normal(size=t).astype(np.float32))
        for t in lengths]


def test_criterion_07_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0

    # full residual-algorithm loss, factors fed by mean/max trajectory stats
    for algo in ("rqn", "qmix"):
        trainer = Trainer(MatrixGame(), algo, seed=13)
        flat = FlatBatch(pad_batch(toy_records(rng, (3, 2))), 3)
        targets = trainer._td_targets(flat)
        modules = list(trainer.modules.values())
        worst = max(worst, fd_worst_error(
            lambda: trainer._loss(flat, targets), modules, rng))

    # joint-critic heads against fixed comparison values
    heads = QtranHeads(n_actions=3, hidden_dim=8,
                       rng=np.random.default_rng(8))
    h_sum = Tensor(rng.normal(size=(5, 8)))
    taken = Tensor(rng.normal(size=(5, 3)))
    y = Tensor(rng.normal(size=(5, 1)))
    greedy_sum = Tensor(rng.normal(size=(5, 1)))
    taken_sum = Tensor(rng.normal(size=(5, 1)))
    greedy_ref = Tensor(rng.normal(size=(5, 1)))
    taken_ref = Tensor(rng.normal(size=(5, 1)) + 3.0)

    def heads_loss():
        f_taken = heads.joint_value(h_sum, taken)
        value = heads.state_value(h_sum)
        l_td, l_opt, l_nopt = qtran_losses(
            f_taken, y, greedy_sum, taken_sum, value, greedy_ref, taken_ref)
        return l_td + l_opt + l_nopt

    worst = max(worst, fd_worst_error(heads_loss, [heads], rng))
    report(7, worst <= 1e-4,
           f"worst relative gradient error {worst:.2e} (bar 1e-4)")


# -- estimator isolation over a whole run --------------------------------


def test_criterion_08_targets_never_touch_the_estimator():
    trainer = Trainer(MatrixGame(), "rqn", seed=2, **MATRIX_REGIME)
    history = trainer.run(400)
    expected = len(history["loss"]) + len(history["phi"])
    ok = trainer.estimator.calls == expected
    report(8, ok, f"estimator forward calls {trainer.estimator.calls} == "
                  f"{len(history['loss'])} train steps + "
                  f"{len(history['phi'])} factor snapshots")


# -- grid-world learning --------------------------------------------------


def shortest_capture_return(seed_seq):
    env = make_env("predator_prey", n_predators=2)
    env.reset(seed_seq)
    prey = tuple(env.prey[0])
    size = env.size
    goals = {(prey[0] + dr, prey[1] + dc)
             for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
             if 0 <= prey[0] + dr < size and 0 <= prey[1] + dc < size}

    def steps_to_adjacency(start):
        if start in goals:
            return 0
        seen = {start, prey}
        frontier = deque([(start, 0)])
        while frontier:
            (r, c), d = frontier.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                cell = (r + dr, c + dc)
                if (cell in seen or not (0 <= cell[0] < size)
                        or not (0 <= cell[1] < size)):
                    continue
                if cell in goals:
                    return d + 1
                seen.add(cell)
                frontier.append((cell, d + 1))
        raise RuntimeError("prey unreachable")

    near, far = sorted(steps_to_adjacency(tuple(p)) for p in env.predators)
    # an early arriver presses capture on the step its partner walks in;
    # simultaneous arrivals leave the capture press to the next step
    steps = far if far > near else far + 1
    return 5.0 * 2 - 0.01 * 2 * steps


@pytest.fixture(scope="module")
def grid2_results(pool, work_dir):
    results = []
    for seed in SEEDS:
        code = pool.wait(("c9", seed))
        assert code == 0, f"two-predator run for seed {seed} exited {code}"
        _, values = read_metrics_csv(work_dir / f"c9_s{seed}" / "metrics.csv")
        optimal = np.mean([
            shortest_capture_return(np.random.SeedSequence([seed, 4, k]))
            for k in range(20)])
        results.append((seed, smooth_cma10(values)[-1], float(optimal)))
    passing = [seed for seed, final, optimal in results
               if final >= 0.9 * optimal]
    return results, passing


def test_criterion_09_learns_near_optimal_capture(grid2_results):
    results, passing = grid2_results
    detail = ", ".join(f"seed {s}: {f:.2f} vs 0.9x{o:.2f}"
                       for s, f, o in results)
    report(9, len(passing) >= 2,
           f"{len(passing)}/3 seeds at >= 0.9x shortest-path oracle "
           f"({detail})")


def test_criterion_10_factors_settle(grid2_results, work_dir):
    _, passing = grid2_results
    assert passing, "criterion 10 needs a seed that passed criterion 9"
    worst_ratio = worst_slope = 0.0
    for seed in passing:
        _, trace = read_phi_csv(work_dir / f"c9_s{seed}" / "phi.csv")
        ratios, _ = phi_stability(trace)
        spans = trace.max(axis=0) - trace.min(axis=0)
        tail = trace[-max(2, round(len(trace) * 0.1)):]
        steps = np.arange(len(tail))
        for agent in range(trace.shape[1]):
            worst_ratio = max(worst_ratio, ratios[agent])
            if spans[agent] > 0.0:
                slope = np.polyfit(steps, tail[:, agent], 1)[0]
                worst_slope = max(worst_slope,
                                  abs(slope) / spans[agent])
    ok = worst_ratio < 0.1 and worst_slope < 0.01
    report(10, ok, f"factor tails over {len(passing)} passing seeds: "
                   f"worst std ratio {worst_ratio:.3f} (bar 0.1), worst "
                   f"slope {worst_slope * 100:.2f}% of range (bar 1%)")


def test_criterion_11_penalty_robustness(pool, work_dir):
    finals = {}
    for algo in ("rqn", "qmix"):
        for seed in SEEDS:
            code = pool.wait(("c11", algo, seed))
            assert code == 0, f"{algo} seed {seed} exited {code}"
            _, values = read_metrics_csv(
                work_dir / f"c11_{algo}_s{seed}" / "metrics.csv")
            finals[algo, seed] = smooth_cma10(values)[-1]
    wins = sum(finals["rqn", s] > finals["qmix", s] for s in SEEDS)
    detail = ", ".join(
        f"seed {s}: {finals['rqn', s]:.2f} vs {finals['qmix', s]:.2f}"
        for s in SEEDS)
    report(11, wins >= 2,
           f"residual beats monotone mixing on {wins}/3 seeds under "
           f"capture penalty ({detail})")


# -- determinism ----------------------------------------------------------


def test_criterion_12_reruns_are_byte_identical(reference_run, work_dir):
    out, argv = reference_run
    repeat = work_dir / "repeat"
    argv = argv[:-1] + [str(repeat)]
    assert cli_main(argv) == 0
    assert cli_main(["reconstruct", str(repeat)]) == 0
    same_metrics = ((out / "metrics.csv").read_bytes()
                    == (repeat / "metrics.csv").read_bytes())
    same_table = ((out / "reconstruction.csv").read_bytes()
                  == (repeat / "reconstruction.csv").read_bytes())
    report(12, same_metrics and same_table,
           "metrics.csv and reconstruction.csv byte-identical on rerun")
