import csv
import os
import sqlite3
from typing import Iterable, Optional, Sequence

from sqlalchemy import create_engine
from sqlalchemy.orm import Session

from utils import log

from .models import Base, BerRecord, MacCount, TrainStep
from .stats import QUERY_SQL


class ResultStore:
    def __init__(self, uri: Optional[str] = None, db_file: str = "", echo: bool = False):
        """
        initialize the result store

        :param uri:         Database uri, if not specified, use environment variable SQLALCHEMY_DATABASE_URI.
                            if env is not set, then default to sqlite memory database
        :param db_file:     When using sqlite memory database, load previous results from this file during
                            initialization. The memory database content is saved back to this file on close().
        :param echo:        If True, print out all SQL statements.
        """
        env_uri = os.environ.get("SQLALCHEMY_DATABASE_URI")
        if uri:
            self.uri = uri
        elif env_uri:
            self.uri = env_uri
        else:
            self.uri = "sqlite:///:memory:"

        self.is_mem_db = ":memory:" in self.uri
        self.db_file = db_file
        self.engine = create_engine(self.uri, echo=echo)
        self.session = Session(self.engine)

        if self.is_mem_db and db_file and os.path.isfile(db_file):
            disk_db = sqlite3.connect(db_file)
            disk_db.backup(self.session.connection().connection.driver_connection)  # type: ignore
            disk_db.close()
            log(f"loaded results database {db_file} into memory")

        Base.metadata.create_all(self.engine)
        # rows written by earlier runs in a loaded database are not part of this run's exports
        self._first_ids = {
            "ber": self._max_id(BerRecord),
            "complexity": self._max_id(MacCount),
            "train": self._max_id(TrainStep),
        }

    def _max_id(self, model) -> int:
        last = self.session.query(model.id).order_by(model.id.desc()).first()
        return last[0] if last else 0

    def close(self) -> None:
        """close the session and save the database to disk if it's a memory database"""
        self.session.close()
        if self.is_mem_db and self.db_file:
            self._export_db_(self.db_file)

    def _export_db_(self, dbf: str) -> None:
        # write to temp file first then rename to avoid potentially corrupting the database
        tmp_file = dbf + ".new"
        file_conn = sqlite3.connect(tmp_file)
        self.session.connection().connection.driver_connection.backup(file_conn)  # type: ignore
        file_conn.close()

        if os.path.exists(dbf):
            os.unlink(dbf)
        os.rename(tmp_file, dbf)
        log(f"saved results database to {dbf}")

    def add_all(self, rows: Iterable[Base]) -> None:
        self.session.add_all(list(rows))
        self.session.commit()

    def export_csv(self, query: str, csv_file: str, header: Sequence[str] = ()) -> int:
        """
        write the rows of one export query added during this run to csv_file,
        each header line is written first as a '# ' comment
        """
        n_rows = 0
        result = self.session.execute(QUERY_SQL[query], {"first_id": self._first_ids[query]})
        with open(csv_file, "w", newline="") as f:
            for line in header:
                f.write(f"# {line}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(result.keys())
            for row in result:
                n_rows += 1
                writer.writerow(row)
        log(f"exported {n_rows} rows to {csv_file}")
        return n_rows
