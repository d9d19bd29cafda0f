import os
import json
import sqlite3
import time
from typing import Dict, List, Optional


class RunHistory:
    """
    可选的运行历史（SQLite）：记录每次训练和评估的配置与结果
    只用于事后查询，不影响任何输出文件
    """

    def __init__(self, db_path: str):
        self.db_path = db_path
        folder = os.path.dirname(db_path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        self.conn = sqlite3.connect(db_path)
        self._init_schema()

    def _init_schema(self):
        cur = self.conn.cursor()
        cur.execute("""
        CREATE TABLE IF NOT EXISTS train_runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            ts INTEGER NOT NULL,
            dataset TEXT NOT NULL,
            checkpoint TEXT,
            epochs INTEGER,
            steps INTEGER,
            final_loss REAL,
            grad_check_error REAL,
            config_json TEXT
        )
        """)
        cur.execute("""
        CREATE TABLE IF NOT EXISTS eval_runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            ts INTEGER NOT NULL,
            dataset TEXT NOT NULL,
            variant TEXT NOT NULL,
            rank1 REAL,
            rank5 REAL,
            rank10 REAL,
            rank20 REAL,
            cmc_json TEXT
        )
        """)
        self.conn.commit()

    def save_train_run(
        self,
        dataset: str,
        checkpoint: str,
        epochs: int,
        steps: int,
        final_loss: float,
        grad_check_error: Optional[float],
        config: Dict,
    ):
        cur = self.conn.cursor()
        ts = int(time.time())
        config_json = json.dumps(config, ensure_ascii=False, sort_keys=True, default=str)
        cur.execute("""
        INSERT INTO train_runs (ts, dataset, checkpoint, epochs, steps, final_loss, grad_check_error, config_json)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, (ts, dataset, checkpoint, epochs, steps, final_loss, grad_check_error, config_json))
        self.conn.commit()

    def save_eval_run(self, dataset: str, variant: str, curve: Dict[int, float]):
        cur = self.conn.cursor()
        ts = int(time.time())
        cmc_json = json.dumps({str(k): v for k, v in curve.items()}, sort_keys=True)
        cur.execute("""
        INSERT INTO eval_runs (ts, dataset, variant, rank1, rank5, rank10, rank20, cmc_json)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, (
            ts,
            dataset,
            variant,
            curve.get(1),
            curve.get(5),
            curve.get(10),
            curve.get(20),
            cmc_json,
        ))
        self.conn.commit()

    def eval_runs(self, variant: Optional[str] = None) -> List[Dict]:
        cur = self.conn.cursor()
        if variant is None:
            cur.execute("SELECT dataset, variant, rank1, rank5, rank10, rank20 FROM eval_runs ORDER BY id")
        else:
            cur.execute(
                "SELECT dataset, variant, rank1, rank5, rank10, rank20 FROM eval_runs WHERE variant = ? ORDER BY id",
                (variant,),
            )
        cols = ['dataset', 'variant', 'rank1', 'rank5', 'rank10', 'rank20']
        return [dict(zip(cols, row)) for row in cur.fetchall()]

    def close(self):
        self.conn.close()
