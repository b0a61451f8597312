"""
SQLite cache for QoS cost tables
"""
import io
import os
import sqlite3
import logging

import numpy as np

logger = logging.getLogger(__name__)

# Cache file path, overridable through the environment
DB_PATH = os.environ.get("DCCONTROL_CACHE", "data/qos_cache.db")


def ensure_db_dir(db_path=None):
    """Ensure the directory holding the cache exists"""
    parent = os.path.dirname(os.path.abspath(db_path or DB_PATH))
    os.makedirs(parent, exist_ok=True)


def get_db_connection(db_path=None):
    """Get a connection to the SQLite cache"""
    ensure_db_dir(db_path)
    conn = sqlite3.connect(db_path or DB_PATH)
    conn.row_factory = sqlite3.Row  # column access by name
    return conn


def init_db(db_path=None):
    """Create the cache table if it does not exist"""
    conn = get_db_connection(db_path)
    cursor = conn.cursor()

    cursor.execute('''
    CREATE TABLE IF NOT EXISTS qos_tables (
        config_digest TEXT NOT NULL,
        lambda_digest TEXT NOT NULL,
        num_states INTEGER NOT NULL,
        num_lambda INTEGER NOT NULL,
        infeasible INTEGER NOT NULL,
        payload BLOB NOT NULL,
        PRIMARY KEY (config_digest, lambda_digest)
    )
    ''')

    conn.commit()
    conn.close()
    logger.debug("QoS cache initialized")


def _to_blob(arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _from_blob(blob):
    return np.load(io.BytesIO(blob), allow_pickle=False)


def save_qos_table(config_digest, lambda_digest, costs, penalty, db_path=None):
    """
    Store a QoS cost table

    Args:
        config_digest (str): Digest of the data center configuration
        lambda_digest (str): Digest of the arrival-rate support
        costs (np.ndarray): (|Omega_x|, |Lambda|) cost array, big-M on infeasible cells
        penalty (float): The big-M value; cells at or above it count as infeasible
        db_path (str): Optional cache path

    Returns:
        bool: True if the table was stored
    """
    try:
        init_db(db_path)
        conn = get_db_connection(db_path)
        cursor = conn.cursor()
        cursor.execute(
            "INSERT OR REPLACE INTO qos_tables "
            "(config_digest, lambda_digest, num_states, num_lambda, infeasible, payload) "
            "VALUES (?, ?, ?, ?, ?, ?)",
            (config_digest, lambda_digest, int(costs.shape[0]), int(costs.shape[1]),
             int(np.count_nonzero(costs >= penalty)), _to_blob(np.asarray(costs, dtype=float)))
        )
        conn.commit()
        conn.close()
        logger.info(f"Cached QoS table {config_digest}/{lambda_digest} ({costs.shape[0]}x{costs.shape[1]})")
        return True
    except (sqlite3.Error, OSError) as e:
        logger.error(f"Error caching QoS table: {e}")
        return False


def load_qos_table(config_digest, lambda_digest, db_path=None):
    """
    Load a cached QoS cost table

    Args:
        config_digest (str): Digest of the data center configuration
        lambda_digest (str): Digest of the arrival-rate support
        db_path (str): Optional cache path

    Returns:
        np.ndarray: Cached cost array, or None if absent or unreadable
    """
    path = db_path or DB_PATH
    if not os.path.exists(path):
        return None
    try:
        conn = get_db_connection(db_path)
        cursor = conn.cursor()
        cursor.execute(
            "SELECT payload FROM qos_tables WHERE config_digest = ? AND lambda_digest = ?",
            (config_digest, lambda_digest)
        )
        row = cursor.fetchone()
        conn.close()
    except sqlite3.Error as e:
        logger.error(f"Error reading QoS cache: {e}")
        return None

    if row is None:
        return None
    try:
        costs = _from_blob(row["payload"])
    except ValueError as e:
        logger.warning(f"Corrupt QoS cache entry {config_digest}/{lambda_digest}: {e}")
        return None
    logger.info(f"Loaded cached QoS table {config_digest}/{lambda_digest}")
    return costs


def clear_cache(db_path=None):
    """Delete every cached table; returns the number of rows removed"""
    path = db_path or DB_PATH
    if not os.path.exists(path):
        return 0
    try:
        conn = get_db_connection(db_path)
        cursor = conn.cursor()
        cursor.execute("DELETE FROM qos_tables")
        removed = cursor.rowcount
        conn.commit()
        conn.close()
        logger.info(f"Cleared {removed} cached QoS tables")
        return removed
    except sqlite3.Error as e:
        logger.error(f"Error clearing QoS cache: {e}")
        return 0
