import logging
import os

import pandas as pd

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['time', 'event_kind', 'node', 'peer', 'detail']


class EventTrace:
    """Structured event log of a run, written next to the metrics."""

    def __init__(self):
        self.rows = []

    def __len__(self):
        return len(self.rows)

    def record(self, time, kind, node=None, peer=None, detail=''):
        self.rows.append((round(float(time), 6), kind, node, peer, detail))

    def events(self, kind, since=0):
        return [row for row in self.rows[since:] if row[1] == kind]

    def count(self, kind, since=0):
        return len(self.events(kind, since))

    def to_frame(self):
        frame = pd.DataFrame(self.rows, columns=TRACE_COLUMNS)
        for column in ('node', 'peer'):
            frame[column] = frame[column].astype('Int64')
        return frame

    def write(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote {len(self.rows)} trace events to {path}")
        return path


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_metrics(rows, path, columns=None):
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, float_format='%.6f')
    logger.info(f"Wrote {len(frame)} metrics rows to {path}")
    return path


def format_rate(value):
    return 'absent' if value is None else f"{value:.4f}"


def format_verdict_table(verdicts):
    """Plain-text pass/fail table of the security goals."""
    width = max((len(v.title) for v in verdicts), default=10)
    lines = [f"{'goal'.ljust(width)}  result  trials  failures"]
    for verdict in verdicts:
        result = 'PASS' if verdict.passed else 'FAIL'
        lines.append(f"{verdict.title.ljust(width)}  {result:<6}  {verdict.trials:>6}  {verdict.failures:>8}")
        if verdict.detail:
            lines.append(f"{''.ljust(width)}  {verdict.detail}")
    return '\n'.join(lines)
