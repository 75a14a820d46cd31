import os

from sqlalchemy import select

from sgt import ResultStore
from sgt.models import BerRecord, MacCount, TrainStep


def ber_row(detector, snr_db, errors=5, bits=400):
    return BerRecord(detector=detector, snr_db=snr_db, errors=errors, bits=bits, trials=100, ci_low=0.0, ci_high=0.1)


def test_models(store):
    store.add_all([ber_row("ml", 10.0), ber_row("lmmse", 10.0, errors=40)])
    rows = store.session.scalars(select(BerRecord).order_by(BerRecord.id)).all()
    assert [r.detector for r in rows] == ["ml", "lmmse"]
    assert rows[0].id is not None and rows[0].ber == 5 / 400
    assert rows[0].config == "" and rows[0].capped is False
    assert BerRecord(detector="x", snr_db=0, errors=0, bits=0, trials=0, ci_low=0, ci_high=1).ber == 0.0

    store.add_all([TrainStep(variant="full-sgt", step=1, loss=0.69, learning_rate=1e-3)])
    assert store.session.scalars(select(TrainStep)).one().loss == 0.69


def test_export_csv_keeps_insertion_order(store, tmp_path):
    store.add_all([ber_row("sgt", 12.0), ber_row("ml", 0.0), ber_row("sgt", 0.0)])
    path = str(tmp_path / "ber.csv")
    assert store.export_csv("ber", path, ["config_hash=abc seed=7"]) == 3

    lines = open(path).read().splitlines()
    assert lines[0] == "# config_hash=abc seed=7"
    assert lines[1] == "detector,snr_db,ber,errors,bits,trials,ci_low,ci_high,capped,config"
    assert [line.split(",")[:2] for line in lines[2:]] == [["sgt", "12.0"], ["ml", "0.0"], ["sgt", "0.0"]]
    assert lines[2].split(",")[2] == "0.0125"


def test_complexity_export(store, tmp_path):
    store.add_all(
        [
            MacCount(n_t=4, n_r=4, d_model=32, n_layers=2, variant="full-sgt", sublayer=key, macs=n, symbolic=n)
            for key, n in [("cross.score", 2048), ("total", 9999)]
        ]
    )
    path = str(tmp_path / "complexity.csv")
    assert store.export_csv("complexity", path) == 2
    assert open(path).read().splitlines()[-1] == "4,4,32,2,full-sgt,total,9999,9999"


def test_db_file_persists_and_old_rows_are_not_exported(tmp_path):
    db_file = str(tmp_path / "results.db")
    first = ResultStore(db_file=db_file)
    first.add_all([ber_row("ml", 4.0)])
    first.close()
    assert os.path.isfile(db_file)

    second = ResultStore(db_file=db_file)
    assert len(second.session.scalars(select(BerRecord)).all()) == 1
    second.add_all([ber_row("lmmse", 4.0)])
    path = str(tmp_path / "ber.csv")
    assert second.export_csv("ber", path) == 1
    assert "lmmse" in open(path).read() and "ml," not in open(path).read()
    second.close()

    third = ResultStore(db_file=db_file)
    assert len(third.session.scalars(select(BerRecord)).all()) == 2
    third.close()
