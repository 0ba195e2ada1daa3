import sqlite3
import time
from typing import List, Optional

from .config import DB_PATH_DEFAULT, ensure_data_dir


SCHEMA = """
PRAGMA journal_mode=WAL;

CREATE TABLE IF NOT EXISTS runs (
	id INTEGER PRIMARY KEY AUTOINCREMENT,
	ts INTEGER NOT NULL,
	command TEXT NOT NULL,
	seed INTEGER,
	out_dir TEXT,
	status TEXT NOT NULL,
	message TEXT
);

CREATE INDEX IF NOT EXISTS idx_runs_ts ON runs (ts);

CREATE TABLE IF NOT EXISTS evaluations (
	id INTEGER PRIMARY KEY AUTOINCREMENT,
	ts INTEGER NOT NULL,
	run_id INTEGER,
	object TEXT NOT NULL,
	mae_mean REAL,
	mae_std REAL,
	ssim_recon REAL,
	ssim_relight REAL,
	bin_acc REAL,
	n_pairs INTEGER
);

CREATE INDEX IF NOT EXISTS idx_evaluations_object ON evaluations (object);
"""


def _connect(db_path: Optional[str] = None) -> sqlite3.Connection:
	if db_path is None:
		ensure_data_dir()
	conn = sqlite3.connect(db_path or DB_PATH_DEFAULT)
	conn.row_factory = sqlite3.Row
	return conn


def init_db(db_path: Optional[str] = None) -> None:
	conn = _connect(db_path)
	try:
		conn.executescript(SCHEMA)
		conn.commit()
	finally:
		conn.close()


def insert_run(command: str, seed: Optional[int], out_dir: Optional[str], status: str = "running", message: Optional[str] = None, db_path: Optional[str] = None) -> int:
	conn = _connect(db_path)
	try:
		cur = conn.execute(
			"INSERT INTO runs (ts, command, seed, out_dir, status, message) VALUES (?, ?, ?, ?, ?, ?)",
			(int(time.time()), command, seed, out_dir, status, message),
		)
		conn.commit()
		return int(cur.lastrowid)
	finally:
		conn.close()


def finish_run(run_id: int, status: str, message: Optional[str] = None, db_path: Optional[str] = None) -> None:
	conn = _connect(db_path)
	try:
		conn.execute("UPDATE runs SET status = ?, message = ? WHERE id = ?", (status, message, run_id))
		conn.commit()
	finally:
		conn.close()


def insert_evaluation(run_id: Optional[int], obj: str, mae_mean: Optional[float], mae_std: Optional[float], ssim_recon: Optional[float], ssim_relight: Optional[float], bin_acc: Optional[float], n_pairs: int, db_path: Optional[str] = None) -> None:
	conn = _connect(db_path)
	try:
		conn.execute(
			"INSERT INTO evaluations (ts, run_id, object, mae_mean, mae_std, ssim_recon, ssim_relight, bin_acc, n_pairs) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
			(int(time.time()), run_id, obj, mae_mean, mae_std, ssim_recon, ssim_relight, bin_acc, n_pairs),
		)
		conn.commit()
	finally:
		conn.close()


def query_runs(limit: int = 50, db_path: Optional[str] = None) -> List[sqlite3.Row]:
	conn = _connect(db_path)
	try:
		cur = conn.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
		return cur.fetchall()
	finally:
		conn.close()


def query_evaluations(limit: int = 50, db_path: Optional[str] = None) -> List[sqlite3.Row]:
	conn = _connect(db_path)
	try:
		cur = conn.execute("SELECT * FROM evaluations ORDER BY id DESC LIMIT ?", (limit,))
		return cur.fetchall()
	finally:
		conn.close()
