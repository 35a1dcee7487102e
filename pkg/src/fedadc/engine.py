"""Round loop, client selection, evaluation and result files."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import __version__, kernels, nn
from .algorithms import (
    ServerState,
    local_round,
    normalize_momentum,
    pseudo_delta,
    server_update_dm,
    server_update_fedadc,
    server_update_fedavg,
    server_update_slowmo,
)
from .config import ExperimentConfig, participants
from .data import gen_train_test, load_dataset, partition
from .distillation import TeacherSnapshot
from .errors import ConfigError, SelectionError
from .personalization import personalize_all

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "selected_clients", "global_acc", "global_loss",
               "mean_train_loss", "elapsed_ms")

# stream tags for np.random.SeedSequence([seed, tag, ...])
_DATA, _PARTITION, _INIT, _SELECT, _CLIENT, _PERSONAL = range(1, 7)


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    """Batch-order stream for one client in one round; depends on nothing else."""
    return np.random.default_rng([seed, _CLIENT, round_idx, client_id])


@dataclass
class RoundMetrics:
    round: int
    selected: List[int]
    global_acc: float
    global_loss: float
    mean_train_loss: float
    elapsed_ms: float


@dataclass
class RunRecord:
    config: dict
    rounds: List[RoundMetrics]
    final_acc: float
    seed: int
    version: str = __version__
    backend: str = kernels.BACKEND
    personalization: Optional[dict] = None
    record_wall_time: bool = False
    final_theta: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------- selection

def select_random(num_clients: int, c: float, rng: np.random.Generator) -> List[int]:
    m = participants(num_clients, c)
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def shard_label_sets(shards, labels) -> List[frozenset]:
    return [frozenset(np.unique(labels[s.train_indices]).tolist()) for s in
            sorted(shards, key=lambda s: s.client_id)]


def _covers(selected, label_sets, k):
    covered = set()
    for i in selected:
        covered |= label_sets[i]
    return len(covered) == k


def _greedy_complete(selected, label_sets, k):
    sel = set(selected)
    everything = set(range(k))
    for _ in range(len(label_sets) * k):
        counts = {}
        for i in sel:
            for lbl in label_sets[i]:
                counts[lbl] = counts.get(lbl, 0) + 1
        missing = everything - set(counts)
        if not missing:
            return sorted(sel)
        add = max((i for i in range(len(label_sets)) if i not in sel),
                  key=lambda i: (len(label_sets[i] & missing), -i), default=None)
        if add is None or not label_sets[add] & missing:
            break
        # drop the member whose removal uncovers the fewest classes
        drop = min(sorted(sel), key=lambda i: sum(1 for lbl in label_sets[i] if counts[lbl] == 1))
        lost = {lbl for lbl in label_sets[drop] if counts[lbl] == 1}
        if len(label_sets[add] & missing) <= len(lost - label_sets[add]):
            break
        sel.remove(drop)
        sel.add(add)
    return None


def _search_cover(label_sets, k, m, rng, budget=200_000):
    """Backtracking over the rarest uncovered class; random branch order."""
    holders = [[i for i, ls in enumerate(label_sets) if lbl in ls] for lbl in range(k)]
    for h in holders:
        rng.shuffle(h)
    nodes = [0]
    best = [set()]

    def dfs(chosen, covered):
        nodes[0] += 1
        if len(covered) > len(best[0]):
            best[0] = set(covered)
        if len(covered) == k:
            return list(chosen)
        if len(chosen) == m or nodes[0] > budget:
            return None
        missing = min((lbl for lbl in range(k) if lbl not in covered),
                      key=lambda lbl: len(holders[lbl]))
        for i in holders[missing]:
            if i in chosen:
                continue
            found = dfs(chosen + [i], covered | label_sets[i])
            if found is not None:
                return found
        return None

    found = dfs([], frozenset())
    if found is None:
        short = sorted(set(range(k)) - best[0])
        raise SelectionError(f"no {m} clients cover every class; classes {short} left uncovered")
    rest = [i for i in rng.permutation(len(label_sets)) if i not in found]
    return sorted(found + [int(i) for i in rest[:m - len(found)]])


def select_class_cover(label_sets, num_classes: int, c: float, rng: np.random.Generator,
                       max_retries: int = 1000) -> List[int]:
    """Random client subset whose training labels jointly cover every class.

    Rejection sampling first; after ``max_retries`` misses the last draw is
    repaired by greedy swaps, and if that stalls an exact backtracking
    search decides whether any cover of this size exists.
    """
    n = len(label_sets)
    m = participants(n, c)
    union = set().union(*label_sets)
    absent = sorted(set(range(num_classes)) - union)
    if absent:
        raise SelectionError(f"no client holds classes {absent}")
    widest = max(len(s) for s in label_sets)
    if m * widest < num_classes:
        raise SelectionError(
            f"{m} clients with at most {widest} labels each cannot cover "
            f"{num_classes} classes"
        )
    draw = None
    for _ in range(max_retries):
        draw = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
        if _covers(draw, label_sets, num_classes):
            return draw
    if draw is None:
        draw = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    log.info("class-cover selection fell back to greedy completion")
    done = _greedy_complete(draw, label_sets, num_classes)
    if done is not None:
        return done
    return _search_cover(label_sets, num_classes, m, rng)


# --------------------------------------------------------------- evaluation

def evaluate_global(theta, spec: nn.ModelSpec, test_set):
    """Top-1 accuracy and mean cross-entropy over the whole test set."""
    logits = nn.forward(spec, theta, test_set.features)
    y = test_set.labels
    probs = nn.softmax_temp(logits)
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(y.size), y], nn.PROB_FLOOR))))
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return acc, loss


# ---------------------------------------------------------------- run loop

def load_data(cfg: ExperimentConfig):
    if cfg.dataset == "file":
        train, test = load_dataset(cfg.train_path), load_dataset(cfg.test_path)
        if train.num_classes != test.num_classes or train.dim != test.dim:
            raise ConfigError("train and test files disagree on dim or K")
        return train, test
    return gen_train_test(cfg.num_classes, cfg.input_dim, cfg.train_per_class,
                          cfg.test_per_class, cfg.class_separation, cfg.data_seed)


def prepare(cfg: ExperimentConfig):
    """Resolve seeds and build data, shards, model spec and initial parameters."""
    cfg = cfg.resolved()
    train, test = load_data(cfg)
    shards = partition(train, cfg.partition_spec())
    spec = cfg.model_spec_for(train.dim, train.num_classes)
    theta0 = nn.init_params(spec, np.random.default_rng([cfg.seed, _INIT]))
    return cfg, train, test, shards, spec, theta0


def _server_step(rule, state, updates):
    if rule == "fedavg":
        return server_update_fedavg(state, updates)
    d_bar = pseudo_delta(updates, state.eta)
    if rule == "slowmo":
        return server_update_slowmo(state, d_bar)
    if rule == "fedadc":
        return server_update_fedadc(state, d_bar)
    return server_update_dm(state, d_bar)


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None,
                   callback: Optional[Callable] = None, record_grads: bool = False) -> RunRecord:
    """Run ``cfg.rounds`` federated rounds.

    ``callback(round_idx, state_before, updates, state_after)`` is invoked
    after each server update (``updates`` sorted by client id).
    """
    cfg, train, test, shards, spec, theta = prepare(cfg)
    threads = cfg.threads if threads is None else threads
    local_cfg = cfg.local_config()
    embeds = cfg.local_rule.startswith("fedadc")
    state = ServerState.initial(theta, **cfg.server_hyper())
    label_sets = shard_label_sets(shards, train.labels)
    by_id = {s.client_id: s for s in shards}
    combined = local_cfg.loss.kind == "combined"

    metrics = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            start = time.perf_counter()
            sel_rng = np.random.default_rng([cfg.seed, _SELECT, t])
            if cfg.selection == "class-cover":
                selected = select_class_cover(label_sets, train.num_classes,
                                              cfg.participation, sel_rng)
            else:
                selected = select_random(len(shards), cfg.participation, sel_rng)
            teacher = TeacherSnapshot(state.theta, spec, cfg.tau) if combined else None

            def work(cid, state=state, teacher=teacher, t=t):
                shard = by_id[cid]
                steps = local_cfg.num_steps(shard.train_indices.size)
                if embeds:
                    m_bar = normalize_momentum(state.momentum, state.beta_local, steps)
                else:
                    m_bar = np.zeros_like(state.theta)
                return local_round(state.theta, m_bar, shard, train, spec, local_cfg,
                                   state.eta, client_rng(cfg.seed, t, cid), teacher,
                                   round_idx=t, record_grads=record_grads)

            if pool is None:
                updates = [work(cid) for cid in selected]
            else:
                updates = list(pool.map(work, selected))
            updates.sort(key=lambda u: u.client_id)
            new_state = _server_step(cfg.server_rule, state, updates)
            if callback is not None:
                callback(t, state, updates, new_state)
            state = new_state
            acc, loss = evaluate_global(state.theta, spec, test)
            train_loss = float(np.mean([u.train_loss for u in updates]))
            metrics.append(RoundMetrics(t, list(selected), acc, loss, train_loss,
                                        (time.perf_counter() - start) * 1e3))
    finally:
        if pool is not None:
            pool.shutdown()

    window = metrics[-cfg.final_window:]
    final_acc = float(np.mean([m.global_acc for m in window]))
    personal = None
    pcfg = cfg.personalization_config()
    if pcfg is not None:
        personal = personalize_all(state.theta, spec, shards, train, pcfg,
                                   derive_seed(cfg.seed, _PERSONAL), default_lr=cfg.eta)
    return RunRecord(cfg.to_dict(), metrics, final_acc, cfg.seed,
                     personalization=personal, record_wall_time=cfg.record_wall_time,
                     final_theta=state.theta)


# ------------------------------------------------------------------ output

def _fmt(x: float) -> str:
    return format(x, ".6g")


def metrics_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in record.rounds:
        writer.writerow([
            m.round,
            ";".join(str(i) for i in m.selected),
            _fmt(m.global_acc),
            _fmt(m.global_loss),
            _fmt(m.mean_train_loss),
            _fmt(m.elapsed_ms) if record.record_wall_time else "",
        ])
    return buf.getvalue()


def summary_dict(record: RunRecord) -> dict:
    out = {
        "version": record.version,
        "kernel_backend": record.backend,
        "seed": record.seed,
        "config": record.config,
        "final_acc": record.final_acc,
        "rounds": [
            {
                "round": m.round,
                "selected_clients": m.selected,
                "global_acc": m.global_acc,
                "global_loss": m.global_loss,
                "mean_train_loss": m.mean_train_loss,
                "elapsed_ms": m.elapsed_ms,
            }
            for m in record.rounds
        ],
    }
    if record.personalization is not None:
        out["personalization"] = record.personalization
    return out


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(record: RunRecord, outdir) -> tuple:
    """Write ``metrics.csv`` and ``summary.json`` into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "metrics.csv")
    json_path = os.path.join(outdir, "summary.json")
    _atomic_write(csv_path, metrics_csv(record))
    _atomic_write(json_path, json.dumps(summary_dict(record), indent=2) + "\n")
    return csv_path, json_path
