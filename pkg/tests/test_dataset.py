import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mftune import dataset as ds


def write_jsonl(tmp_path, lines):
    p = tmp_path / "data.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(p)


def line(task, *turns):
    return json.dumps({"task": task, "turns": [{"role": r, "content": c} for r, c in turns]})


class TestLoadJsonl:
    def test_minimal_two_task_file(self, tmp_path):
        path = write_jsonl(tmp_path, [line(0, ("human", "a"), ("bot", "b")), line(1, ("human", "c"), ("bot", "d"))])
        m = ds.load_jsonl(path)
        assert len(m.tasks) == 2
        assert m.counts() == {0: 1, 1: 1}

    def test_unknown_role_reports_line_number(self, tmp_path):
        path = write_jsonl(
            tmp_path,
            [line(0, ("human", "a"), ("bot", "b")), line(0, ("assistant", "x"), ("bot", "y"))],
        )
        with pytest.raises(ds.DatasetError, match="line 2.*unknown role"):
            ds.load_jsonl(path)

    def test_malformed_json_reports_line_number(self, tmp_path):
        path = write_jsonl(tmp_path, [line(0, ("human", "a"), ("bot", "b")), "{not json"])
        with pytest.raises(ds.DatasetError, match="line 2"):
            ds.load_jsonl(path)

    def test_sample_must_end_with_bot(self, tmp_path):
        path = write_jsonl(tmp_path, [line(0, ("human", "a"), ("human", "b"))])
        with pytest.raises(ds.DatasetError, match="end with a bot turn"):
            ds.load_jsonl(path)

    def test_hundred_samples_three_tasks(self, tmp_path):
        lines = [line(i % 3, ("human", f"q{i}"), ("bot", f"a{i}")) for i in range(100)]
        m = ds.load_jsonl(write_jsonl(tmp_path, lines))
        assert len(m.samples) == 100
        assert sum(m.counts().values()) == 100

    def test_reserialization_is_byte_identical(self, tmp_path):
        lines = [line(i % 2, ("system", ""), ("human", f"q{i} é"), ("bot", f"a{i}")) for i in range(10)]
        path = write_jsonl(tmp_path, lines)
        m = ds.load_jsonl(path)
        p1 = tmp_path / "one.jsonl"
        p2 = tmp_path / "two.jsonl"
        ds.save_jsonl(m, str(p1))
        ds.save_jsonl(ds.load_jsonl(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()


class TestRenderParse:
    def test_spec_format(self):
        s = ds.InstructionSample(
            0, (ds.ChatTurn(ds.Role.HUMAN, "hi"), ds.ChatTurn(ds.Role.BOT, "ok"))
        )
        assert ds.render_chatml(s) == "<|role_start|>human<|role_end|>hi<|role_start|>bot<|role_end|>ok"

    def test_empty_system_turn(self):
        s = ds.InstructionSample(
            0,
            (ds.ChatTurn(ds.Role.SYSTEM, ""), ds.ChatTurn(ds.Role.HUMAN, "q"), ds.ChatTurn(ds.Role.BOT, "a")),
        )
        assert ds.render_chatml(s).startswith("<|role_start|>system<|role_end|><|role_start|>human")

    def test_roundtrip_500_random_samples(self):
        rng = np.random.default_rng(17)
        alphabet = list("abcdefgh 0123.ü")
        for _ in range(500):
            turns = [ds.ChatTurn(ds.Role.SYSTEM, "")] if rng.random() < 0.3 else []
            for _ in range(int(rng.integers(1, 4))):
                turns.append(ds.ChatTurn(ds.Role.HUMAN, "".join(rng.choice(alphabet, size=rng.integers(1, 12)))))
                turns.append(ds.ChatTurn(ds.Role.BOT, "".join(rng.choice(alphabet, size=rng.integers(1, 12)))))
            s = ds.InstructionSample(0, tuple(turns))
            assert ds.parse_chatml(ds.render_chatml(s)) == s


class TestSplit:
    def make(self, per_task, n_tasks=2):
        tasks = [ds.TaskSpec(i, f"t{i}") for i in range(n_tasks)]
        samples = [
            ds.InstructionSample(i, (ds.ChatTurn(ds.Role.HUMAN, f"q{i}-{j}"), ds.ChatTurn(ds.Role.BOT, "a")))
            for i in range(n_tasks)
            for j in range(per_task)
        ]
        return ds.DatasetManifest(tasks=tasks, samples=samples)

    def test_fraction_point_two(self):
        tr, va = ds.split(self.make(10), 0.2, seed=0)
        assert tr.counts() == {0: 8, 1: 8}
        assert va.counts() == {0: 2, 1: 2}

    def test_same_seed_same_split(self):
        m = self.make(9)
        a = ds.split(m, 0.3, seed=42)
        b = ds.split(m, 0.3, seed=42)
        assert a[0].samples == b[0].samples and a[1].samples == b[1].samples

    def test_odd_count_floors_to_val(self):
        tr, va = ds.split(self.make(5, n_tasks=1), 0.5, seed=1)
        assert tr.counts() == {0: 3}
        assert va.counts() == {0: 2}

    def test_task_below_two_samples_rejected(self):
        with pytest.raises(ds.DatasetError, match="need >= 2"):
            ds.split(self.make(1), 0.5, seed=0)

    def test_disjoint_and_exhaustive(self):
        m = self.make(13, n_tasks=3)
        tr, va = ds.split(m, 0.25, seed=7)
        key = lambda s: s.turns[0].content
        assert set(map(key, tr.samples)).isdisjoint(map(key, va.samples))
        assert len(tr.samples) + len(va.samples) == len(m.samples)

    @settings(max_examples=50, deadline=None)
    @given(per_task=st.integers(2, 40), frac=st.floats(0.05, 0.9), seed=st.integers(0, 10_000))
    def test_stratified_proportion_within_one_sample(self, per_task, frac, seed):
        m = self.make(per_task, n_tasks=3)
        tr, va = ds.split(m, frac, seed=seed)
        for tid, count in va.counts().items():
            assert abs(count - frac * per_task) <= 1
            assert count >= 1 and tr.counts()[tid] >= 1


class TestSynth:
    def test_copy_bot_equals_human(self):
        m = ds.synth_tasks(["copy"], [3], seed=1)
        for s in m.samples:
            assert s.turns[0].content == s.turns[1].content

    def test_add2digit_exact_sums(self):
        m = ds.synth_tasks(["add2digit"], [50], seed=2)
        for s in m.samples:
            prompt = s.turns[0].content
            a, b = prompt.rstrip("=").split("+")
            assert 10 <= int(a) <= 99 and 10 <= int(b) <= 99
            assert int(s.turns[1].content) == int(a) + int(b)

    def test_sort_digits_sorted(self):
        m = ds.synth_tasks(["sort_digits"], [20], seed=3)
        for s in m.samples:
            payload = s.turns[0].content.removeprefix("sort: ")
            assert s.turns[1].content == "".join(sorted(payload))

    def test_dedup_first_occurrence(self):
        m = ds.synth_tasks(["held_out_dedup"], [20], seed=4)
        for s in m.samples:
            payload = s.turns[0].content.removeprefix("dedup: ")
            expected = ""
            for ch in payload:
                if ch not in expected:
                    expected += ch
            assert s.turns[1].content == expected

    def test_imbalanced_counts_sum(self):
        m = ds.synth_tasks(["copy", "add2digit", "sort_digits"], [5000, 1000, 200], seed=11)
        assert len(m.samples) == 6200
        assert m.counts() == {0: 5000, 1: 1000, 2: 200}

    def test_generators_pure_in_kind_index_seed(self):
        a = ds.synth_tasks(["copy", "reverse"], [5, 5], seed=9)
        b = ds.synth_tasks(["reverse"], [3], seed=9)
        # reverse sample j is identical no matter what else the manifest holds
        assert a.samples[5].turns == b.samples[0].turns
        assert a.samples[7].turns == b.samples[2].turns

    def test_unknown_kind(self):
        with pytest.raises(ds.DatasetError, match="unknown synthetic task kind"):
            ds.synth_tasks(["copyy"], [1], seed=0)

    def test_validate_manifest_catches_bad_task_ref(self):
        m = ds.synth_tasks(["copy"], [2], seed=0)
        m.samples.append(
            ds.InstructionSample(9, (ds.ChatTurn(ds.Role.HUMAN, "x"), ds.ChatTurn(ds.Role.BOT, "y")))
        )
        with pytest.raises(ds.DatasetError, match="unresolved task id"):
            ds.validate_manifest(m)
