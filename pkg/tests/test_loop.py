import json

import pytest

from coldal.acquisition import RankedPool, random_select
from coldal.config import SettingConfig
from coldal.errors import FormatError, InvalidTransitionError, VersionMismatchError
from coldal.loop import (
    Dataset, PoolState, cold_start, decode_state, encode_state, load_state, run_active_iteration, run_cell,
    run_experiment, run_proxy_stage, save_state, simulate_annotation,
)
from coldal.metrics import read_csv
from coldal.model import HEAD, init_params
from coldal.phantom import PhantomSpec, generate_dataset, write_dataset
from coldal.rng import derive_seed

TINY = dict(k=2, j=2, full_steps=2000, desk_scale=0.005, proxy_steps=10, proxy_val_every=5, m=2, seeds=(0,))


def tiny(name, **kw):
    return SettingConfig(name, **{**TINY, **kw})


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantoms")
    train, val = generate_dataset(PhantomSpec(seed=11), 10, 3)
    write_dataset(d, PhantomSpec(seed=11), train, val)
    return d


@pytest.fixture(scope="module")
def data(data_dir):
    return Dataset.load(data_dir)


@pytest.fixture(scope="module")
def proxy(data):
    return run_proxy_stage(data, tiny("P"), 0)


class TestPoolState:
    def _state(self):
        ranking = RankedPool((("b", 0.5), ("a", 0.25), ("c", 1 / 3)), "proxy")
        return PoolState(2, ("a", "d"), ("b", "c"), ("b",), ranking)

    def test_roundtrip(self, tmp_path):
        s = self._state()
        assert decode_state(encode_state(s)) == s
        save_state(tmp_path / "s.json", s)
        assert load_state(tmp_path / "s.json") == s
        assert encode_state(load_state(tmp_path / "s.json")) == encode_state(s)

    def test_json_layout(self):
        doc = json.loads(encode_state(self._state()))
        assert set(doc) == {"version", "iteration", "labeled", "unlabeled", "noisy", "proxy_ranking"}
        assert doc["proxy_ranking"][0] == ["b", 0.5]

    def test_version_mismatch(self):
        doc = json.loads(encode_state(self._state()))
        doc["version"] = 99
        with pytest.raises(VersionMismatchError):
            decode_state(json.dumps(doc).encode())

    def test_corrupt(self):
        with pytest.raises(FormatError):
            decode_state(b"{not json")
        with pytest.raises(FormatError):
            decode_state(b'{"version": 1, "iteration": 0}')

    def test_overlap_rejected(self):
        with pytest.raises(InvalidTransitionError):
            PoolState(0, ("a",), ("a", "b"))


class TestAnnotation:
    def test_moves_ids(self):
        s = PoolState.initial([f"c{i}" for i in range(10)])
        t = simulate_annotation(s, ["c3", "c1", "c7", "c0", "c9"])
        assert len(t.labeled) == 5 and len(t.unlabeled) == 5 and t.pool_size == 10
        assert t.labeled == ("c3", "c1", "c7", "c0", "c9")

    def test_empty(self):
        s = PoolState.initial(["a", "b"])
        assert simulate_annotation(s, []) == s

    def test_double_annotation(self):
        s = simulate_annotation(PoolState.initial(["a", "b"]), ["a"])
        with pytest.raises(InvalidTransitionError):
            simulate_annotation(s, ["a"])
        with pytest.raises(InvalidTransitionError):
            simulate_annotation(s, ["b", "b"])


class TestProxyStage:
    def test_binary_and_complete(self, proxy, data):
        assert proxy.checkpoint.config.out_channels == 2
        assert proxy.checkpoint.provenance == "proxy"
        assert sorted(proxy.ranking.ids) == data.pool_ids
        assert 0.0 <= proxy.best_val_dice <= 1.0

    def test_deterministic(self, proxy, data):
        again = run_proxy_stage(data, tiny("P"), 0)
        assert again.ranking == proxy.ranking and again.checkpoint.params.equal(proxy.checkpoint.params)

    def test_ranking_kind(self, proxy, data):
        ent = sorted(proxy.scores, key=lambda i: (-proxy.scores[i][1], i))
        var = sorted(proxy.scores, key=lambda i: (-proxy.scores[i][0], i))
        assert proxy.ranking.ids == var
        assert run_proxy_stage(data, tiny("P", proxy_kind="entropy"), 0).ranking.ids == ent


class TestIteration:
    def test_cold_start_proxy_top_k(self, data, proxy):
        s = cold_start(tiny("PR", proxy_ranking=True, acquisition="proxy_static"), data, 0, proxy)
        assert s.labeled == tuple(proxy.ranking.ids[:2])

    def test_cold_start_random(self, data):
        s = cold_start(tiny("R"), data, 4, None)
        assert list(s.labeled) == random_select(data.pool_ids, 2, derive_seed(4, "cold"))

    def test_warm_start_from_proxy(self, data, proxy):
        setting = tiny("W", pretrained_weights=True, full_steps=1, desk_scale=1.0, lr=1e-3)
        state = cold_start(setting, data, 0, None)
        res = run_active_iteration(state, proxy.checkpoint, setting, data, 0)
        for name, t in res.checkpoint.params.tensors.items():
            if not name.startswith(HEAD + "."):
                # one Adam step moves each weight by at most lr
                assert float((t - proxy.checkpoint.params[name]).abs().max()) <= 1e-3 * 1.0001

    def test_fresh_init_without_pretraining(self, data):
        setting = tiny("F", full_steps=1, desk_scale=1.0, lr=1e-3)
        state = cold_start(setting, data, 0, None)
        res = run_active_iteration(state, None, setting, data, 0)
        ref = init_params(res.checkpoint.config, derive_seed(0, "init"))
        assert all(float((t - ref[n]).abs().max()) <= 1e-3 * 1.0001 for n, t in res.checkpoint.params.tensors.items())

    def test_continue_from_previous(self, data, proxy):
        setting = tiny("C", pretrained_weights=True, full_steps=1, desk_scale=1.0, lr=1e-3, warm_start_from="previous")
        state = cold_start(setting, data, 0, None)
        first = run_active_iteration(state, proxy.checkpoint, setting, data, 0)
        second = run_active_iteration(first.state, proxy.checkpoint, setting, data, 0, previous=first.checkpoint)
        for name, t in second.checkpoint.params.tensors.items():
            assert float((t - first.checkpoint.params[name]).abs().max()) <= 1e-3 * 1.0001

    def test_semi_bookkeeping(self, data, proxy):
        setting = tiny("S", proxy_ranking=True, pretrained_weights=True, semi_supervised=True, acquisition="variance")
        state = cold_start(setting, data, 0, proxy)
        res = run_active_iteration(state, proxy.checkpoint, setting, data, 0)
        assert len(res.noisy) == len(state.labeled)
        assert set(res.noisy) <= set(state.unlabeled)
        assert res.checkpoint.provenance == "semi"
        assert len(res.state.labeled) == len(state.labeled) + setting.k
        assert res.state.iteration == 1

    def test_no_selection_after_last_iteration(self, data):
        setting = tiny("L", j=0)
        state = cold_start(setting, data, 0, None)
        res = run_active_iteration(state, None, setting, data, 0)
        assert res.selected == () and res.state.labeled == state.labeled


class TestCell:
    def test_proxy_static_follows_frozen_ranking(self, data, tmp_path, proxy):
        setting = tiny("PR", proxy_ranking=True, pretrained_weights=True, acquisition="proxy_static")
        seen = []
        run_cell(setting, data, 0, tmp_path, observer=lambda before, res: seen.append(res.selected))
        ranking = load_state(tmp_path / "cells" / "PR" / "seed_0" / "state.json").proxy_ranking.ids
        k = setting.k
        for t, selected in enumerate(seen[:-1]):
            assert list(selected) == ranking[(t + 1) * k:(t + 2) * k]

    def test_random_baseline_degeneracy(self, data, tmp_path):
        setting = tiny("Rand")
        rows, _, _ = run_cell(setting, data, 3, tmp_path)
        state = load_state(tmp_path / "cells" / "Rand" / "seed_3" / "state.json")
        pool = data.pool_ids
        labeled = random_select(pool, 2, derive_seed(3, "cold"))
        for t in range(setting.j):
            rest = [i for i in pool if i not in labeled]
            labeled += random_select(rest, 2, derive_seed(3, "acq", t))
        assert list(state.labeled) == labeled
        assert [r.labeled_count for r in rows] == [2, 4, 6]

    def test_bookkeeping_every_iteration(self, data, tmp_path):
        setting = tiny("VS", k=1, semi_supervised=True, acquisition="variance")
        checks = []

        def observe(before, res):
            after = res.state
            checks.append((
                len(before.labeled) == setting.k * (before.iteration + 1),
                not set(after.labeled) & set(after.unlabeled),
                after.pool_size == len(data.pool_ids),
                len(res.noisy) == len(before.labeled),
            ))

        run_cell(setting, data, 0, tmp_path, observer=observe)
        assert len(checks) == setting.j + 1 and all(all(c) for c in checks)


class TestExperiment:
    def test_rows_and_files(self, data_dir, tmp_path):
        settings = [tiny("A", seeds=(0, 1)), tiny("B", acquisition="entropy", seeds=(0, 1))]
        res = run_experiment(settings, data_dir, tmp_path, record_wall_time=True)
        assert res.complete and len(res.rows) == 2 * 2 * 3
        rows = read_csv(tmp_path / "metrics.csv")
        assert [(r["setting"], r["seed"], r["iteration"]) for r in rows] == [
            (s, str(seed), str(it)) for s in ("A", "B") for seed in (0, 1) for it in range(3)
        ]
        assert all(r["wall_s"] for r in rows)
        for name in ("per_volume.csv", "summary.csv", "pairwise_wilcoxon.csv", "timing.csv", "report.md"):
            assert (tmp_path / name).exists()

    def test_wall_time_blank_by_default(self, data_dir, tmp_path):
        run_experiment([tiny("A", j=0)], data_dir, tmp_path)
        assert all(r["wall_s"] == "" for r in read_csv(tmp_path / "metrics.csv"))

    def test_stop_and_resume(self, data_dir, tmp_path):
        settings = [tiny("A")]
        full = tmp_path / "full"
        run_experiment(settings, data_dir, full)
        part = tmp_path / "part"
        assert not run_experiment(settings, data_dir, part, stop_after=1).complete
        assert run_experiment(settings, data_dir, part, resume=True).complete
        assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
