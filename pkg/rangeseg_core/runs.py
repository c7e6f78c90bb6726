"""
runs.py

Run audit ledger. Every CLI invocation appends one row to the sqlite table
`rangeseg_runs` in <log dir>/data/rangeseg_runs.db; `history` reads it back
with pandas.
"""

import json
import os
import sqlite3
from datetime import datetime

import pandas as pd

from .console import get_log_dir

# --- CONFIGURATION ---
DB_NAME = "rangeseg_runs.db"
TABLE = "rangeseg_runs"
SUCCESS = "SUCCESS"
FAILED = "FAILED"


def db_path(log_dir=None):
    return os.path.join(log_dir or get_log_dir(), "data", DB_NAME)


def get_db_connection(log_dir=None):
    path = db_path(log_dir)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    conn = sqlite3.connect(path)
    conn.execute(f'''CREATE TABLE IF NOT EXISTS {TABLE}
                    (timestamp TEXT, subcommand TEXT, argv TEXT, status TEXT,
                     exit_code INTEGER, out_dir TEXT, detail TEXT)''')
    return conn


def record_run(subcommand, argv, exit_code, out_dir=None, detail="", log_dir=None):
    conn = get_db_connection(log_dir)
    try:
        conn.execute(f"INSERT INTO {TABLE} VALUES (?, ?, ?, ?, ?, ?, ?)",
                     (datetime.now().isoformat(timespec="seconds"), subcommand, json.dumps(list(argv)),
                      SUCCESS if exit_code == 0 else FAILED, exit_code, out_dir, detail))
        conn.commit()
    finally:
        conn.close()


def history(limit=10, log_dir=None):
    """-> (last `limit` runs newest first, success rate in percent over all runs)."""
    if not os.path.exists(db_path(log_dir)):
        return pd.DataFrame(columns=["timestamp", "subcommand", "status", "exit_code", "out_dir", "detail"]), 0.0
    conn = get_db_connection(log_dir)
    try:
        statuses = pd.read_sql_query(f"SELECT status FROM {TABLE}", conn)
        recent = pd.read_sql_query(
            f"SELECT timestamp, subcommand, status, exit_code, out_dir, detail FROM {TABLE} "
            f"ORDER BY rowid DESC LIMIT ?", conn, params=(limit,))
    finally:
        conn.close()
    rate = 100.0 * (statuses["status"] == SUCCESS).mean() if len(statuses) else 0.0
    return recent, float(rate)
