import pandas as pd

from utils import EventTrace, ensure_dir, format_rate, write_metrics


def test_trace_counts_by_kind():
    trace = EventTrace()
    trace.record(1.0, 'quarantine', 1, 4)
    trace.record(2.0, 'alarm_sent', 4)
    trace.record(3.0, 'quarantine', 2, 4, 'alarm')
    assert len(trace) == 3
    assert trace.count('quarantine') == 2
    assert trace.count('quarantine', since=1) == 1
    assert trace.events('alarm_sent') == [(2.0, 'alarm_sent', 4, None, '')]


def test_trace_writes_nullable_ids(tmp_path):
    trace = EventTrace()
    trace.record(0.1234567, 'group_founded', 0, None)
    frame = pd.read_csv(trace.write(tmp_path / 'trace.csv'))
    assert list(frame.columns) == ['time', 'event_kind', 'node', 'peer', 'detail']
    assert frame.loc[0, 'time'] == 0.123457
    assert pd.isna(frame.loc[0, 'peer'])


def test_metrics_and_dirs(tmp_path):
    out = ensure_dir(str(tmp_path / 'a' / 'b'))
    path = write_metrics([{'x': 1.0, 'y': None}], f"{out}/m.csv", ['x', 'y'])
    frame = pd.read_csv(path)
    assert frame.loc[0, 'x'] == 1.0
    assert pd.isna(frame.loc[0, 'y'])


def test_format_rate():
    assert format_rate(None) == 'absent'
    assert format_rate(0.5) == '0.5000'
