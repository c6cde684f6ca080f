import pytest
from hypothesis import given, settings, strategies as st

from faultlab.core import (
    EVENTS,
    LOG_HEADER,
    WORKLOAD_HEADER,
    ExecutionLogEntry,
    ExecutionLogWriter,
    ParseError,
    Task,
    ToolConfig,
    ValidationError,
    Workload,
    format_core_list,
    log_file_name,
    parse_core_list,
    parse_log_text,
    parse_tool_config_text,
    parse_workload,
    parse_workload_text,
    program_from_args,
    read_execution_log,
    workload_to_text,
    write_workload,
)

SAMPLE = """timestamp;duration;seqNum;isFault;cores;args
0;1723;1;False;0-7;./hpl lininput
355;244;2;True;6;sudo ./cpufreq 258
914;291;3;True;4;./leak 316
"""


def brute_force_overlaps(intervals):
    """Independent O(n^2) interval overlap check used as oracle."""
    hits = []
    for i, (s1, e1) in enumerate(intervals):
        for s2, e2 in intervals[i + 1 :]:
            if s1 < e2 and s2 < e1:
                hits.append(((s1, e1), (s2, e2)))
    return hits


class TestCoreList:
    def test_range(self):
        assert parse_core_list("0-7") == (0, 1, 2, 3, 4, 5, 6, 7)

    def test_empty_means_no_pinning(self):
        assert parse_core_list("") is None
        assert parse_core_list("  ") is None

    def test_duplicates_collapse_ascending(self):
        assert parse_core_list("4,6,4") == (4, 6)
        assert parse_core_list("3,1,2") == (1, 2, 3)

    def test_mixed(self):
        assert parse_core_list("0-2,5") == (0, 1, 2, 5)

    @pytest.mark.parametrize("bad", ["a", "1-", "-3", "2-1", "1;2"])
    def test_rejects_garbage(self, bad):
        with pytest.raises(ParseError):
            parse_core_list(bad)

    @given(st.sets(st.integers(min_value=0, max_value=64), min_size=1, max_size=16))
    def test_format_parse_round_trip(self, cores):
        expect = tuple(sorted(cores))
        assert parse_core_list(format_core_list(expect)) == expect


class TestWorkloadFormat:
    def test_sample_rows_round_trip_byte_identical(self):
        w = parse_workload_text(SAMPLE)
        assert workload_to_text(w) == SAMPLE
        assert w.tasks[0].cores == (0, 1, 2, 3, 4, 5, 6, 7)
        assert w.tasks[1].is_fault and w.tasks[1].cores == (6,)
        assert w.tasks[2].args == "./leak 316"

    def test_lowercase_booleans_accepted(self):
        text = WORKLOAD_HEADER + "\n5;10;1;true;;x\n20;10;2;false;;y\n"
        w = parse_workload_text(text)
        assert w.tasks[0].is_fault is True
        assert w.tasks[1].is_fault is False

    def test_header_checked(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_workload_text("time;dur\n")

    def test_malformed_row_names_line(self):
        text = WORKLOAD_HEADER + "\n0;10;1;False;;ok\n5;x;2;False;;bad\n"
        with pytest.raises(ParseError, match="line 3"):
            parse_workload_text(text)

    def test_args_may_contain_semicolons(self):
        text = WORKLOAD_HEADER + "\n0;10;1;False;;sh -c 'a; b; c'\n"
        w = parse_workload_text(text)
        assert w.tasks[0].args == "sh -c 'a; b; c'"
        assert parse_workload_text(workload_to_text(w)) == w

    def test_file_round_trip(self, tmp_path):
        w = parse_workload_text(SAMPLE)
        path = tmp_path / "w.csv"
        write_workload(w, path)
        assert parse_workload(path) == w

    @given(
        st.lists(
            st.tuples(
                st.integers(min_value=0, max_value=10_000),  # timestamp
                st.integers(min_value=1, max_value=500),  # duration
                st.booleans(),
                st.one_of(
                    st.none(),
                    st.sets(st.integers(0, 15), min_size=1, max_size=4).map(
                        lambda s: tuple(sorted(s))
                    ),
                ),
                st.text(
                    alphabet=st.characters(
                        blacklist_characters="\n\r", min_codepoint=32, max_codepoint=126
                    ),
                    min_size=1,
                    max_size=30,
                ).filter(lambda s: s.strip()),
            ),
            max_size=20,
        )
    )
    @settings(max_examples=60)
    def test_round_trip_any_valid_workload(self, rows):
        tasks = []
        fault_end = -1
        for i, (ts, dur, is_fault, cores, args) in enumerate(rows):
            if is_fault:
                ts = max(ts, fault_end)  # keep faults non-overlapping
                fault_end = ts + dur
            tasks.append(
                Task(
                    args=args,
                    timestamp=ts,
                    duration=dur,
                    is_fault=is_fault,
                    seq_num=i + 1,
                    cores=cores,
                )
            )
        w = Workload(tuple(tasks))
        assert parse_workload_text(workload_to_text(w)) == w


class TestValidation:
    def test_zero_duration_rejected(self):
        with pytest.raises(ValidationError, match="duration"):
            Task(args="x", timestamp=0, duration=0, is_fault=False, seq_num=1)

    def test_negative_timestamp_rejected(self):
        with pytest.raises(ValidationError):
            Task(args="x", timestamp=-1, duration=5, is_fault=False, seq_num=1)

    def test_duplicate_seq_num_rejected(self):
        t1 = Task(args="a", timestamp=0, duration=5, is_fault=False, seq_num=1)
        t2 = Task(args="b", timestamp=50, duration=5, is_fault=False, seq_num=1)
        with pytest.raises(ValidationError, match="seq_num 1"):
            Workload((t1, t2))

    def test_fault_overlap_rejected(self):
        t1 = Task(args="a", timestamp=0, duration=100, is_fault=True, seq_num=1)
        t2 = Task(args="b", timestamp=50, duration=5, is_fault=True, seq_num=2)
        assert brute_force_overlaps([(0, 100), (50, 55)])
        with pytest.raises(ValidationError, match="overlap"):
            Workload((t1, t2))

    def test_fault_back_to_back_allowed(self):
        t1 = Task(args="a", timestamp=0, duration=50, is_fault=True, seq_num=1)
        t2 = Task(args="b", timestamp=50, duration=5, is_fault=True, seq_num=2)
        assert Workload((t1, t2)).end_time == 55

    def test_app_overlap_allowed(self):
        t1 = Task(args="a", timestamp=0, duration=100, is_fault=False, seq_num=1)
        t2 = Task(args="b", timestamp=50, duration=100, is_fault=False, seq_num=2)
        assert len(Workload((t1, t2))) == 2

    def test_tasks_sorted_by_timestamp(self):
        t1 = Task(args="a", timestamp=500, duration=5, is_fault=False, seq_num=1)
        t2 = Task(args="b", timestamp=10, duration=5, is_fault=False, seq_num=2)
        w = Workload((t1, t2))
        assert [t.seq_num for t in w] == [2, 1]


class TestExecutionLog:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "host_123.log.csv"
        entries = [
            ExecutionLogEntry(1000, "n1:30000", None, "session_start", "session=abc"),
            ExecutionLogEntry(1005, "n1:30000", 3, "task_start", "attempt=1 fault=True cores=6 args=./leak 316; rm x"),
            ExecutionLogEntry(1010, "n1:30000", 3, "task_end", "completed"),
        ]
        with ExecutionLogWriter(path) as wr:
            for e in entries:
                wr.record(e)
        assert read_execution_log(path) == entries

    def test_detail_newlines_sanitised(self):
        e = ExecutionLogEntry(1, "h", None, "error", "boom\nline2")
        assert "\n" not in e.to_row()
        parsed = parse_log_text(LOG_HEADER + "\n" + e.to_row() + "\n")
        assert parsed[0].detail == "boom line2"

    def test_unknown_event_rejected(self):
        with pytest.raises(ValidationError):
            ExecutionLogEntry(1, "h", None, "task_explode", "")

    def test_events_cover_connection_and_session(self):
        assert {"connection_lost", "connection_restored", "session_start", "session_end"} <= EVENTS

    def test_log_file_name(self):
        assert log_file_name("node1:30000", 1700000000) == "node1-30000_1700000000.log.csv"

    def test_append_only(self, tmp_path):
        path = tmp_path / "a.log.csv"
        with ExecutionLogWriter(path) as wr:
            wr.record(ExecutionLogEntry(1, "h", None, "session_start", ""))
        with ExecutionLogWriter(path) as wr:
            wr.record(ExecutionLogEntry(2, "h", None, "session_end", ""))
        assert [e.event for e in read_execution_log(path)] == [
            "session_start",
            "session_end",
        ]


class TestToolConfig:
    def test_defaults(self):
        cfg = parse_tool_config_text("")
        assert cfg.listen_port == 30000
        assert cfg.pool_size == 4
        assert cfg.exact_duration_mode is False

    def test_full_parse(self):
        cfg = parse_tool_config_text(
            """
            # engine side
            listen_port = 31000
            pool_size = 8
            exact_duration_mode = True
            results_dir = /tmp/results
            target_hosts = n1:30000, n2:30000
            companion_commands = ldmsd -x sock:411, sar -o out 1
            """
        )
        assert cfg.listen_port == 31000
        assert cfg.pool_size == 8
        assert cfg.exact_duration_mode is True
        assert cfg.results_dir == "/tmp/results"
        assert cfg.target_hosts == ("n1:30000", "n2:30000")
        assert cfg.companion_commands == ("ldmsd -x sock:411", "sar -o out 1")

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ParseError, match="max_threads"):
            parse_tool_config_text("max_threads = 4\n")

    def test_bad_int(self):
        with pytest.raises(ParseError, match="pool_size"):
            parse_tool_config_text("pool_size = many\n")

    def test_pool_size_must_be_positive(self):
        with pytest.raises(ValidationError):
            ToolConfig(pool_size=0)


class TestProgramFromArgs:
    def test_module_invocation(self):
        assert program_from_args("/usr/bin/python3 -m faultlab fault leak --duration 60") == "leak"
        assert program_from_args("python -m faultlab bench cpu --threads 2") == "cpu"

    def test_legacy_style(self):
        assert program_from_args("./leak 316") == "leak"
        assert program_from_args("sudo ./cpufreq 258") == "cpufreq"
        assert program_from_args("/opt/apps/hpl lininput") == "hpl"
