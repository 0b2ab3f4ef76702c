import json
import math

import numpy as np
import pytest

from fedhyp.metrics import (
    CSV_COLUMNS,
    Ledger,
    RoundRecord,
    class_remap,
    combined_score,
    confusion,
    miou,
    per_class_iou,
    read_ledger,
)


class TestConfusion:
    def test_counts(self):
        conf = confusion(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]), 3)
        np.testing.assert_array_equal(conf, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion(np.array([3]), np.array([0]), 3)
        with pytest.raises(ValueError):
            confusion(np.array([0, 1]), np.array([0]), 3)


class TestIou:
    def test_perfect(self):
        assert miou(np.diag([3, 4, 5])) == 1.0

    def test_hand_value(self):
        conf = np.array([[2, 1], [1, 0]])
        np.testing.assert_allclose(per_class_iou(conf), [0.5, 0.0])
        assert miou(conf) == pytest.approx(0.25)

    def test_absent_class_nan(self):
        iou = per_class_iou(np.array([[2, 0], [0, 0]]))
        assert iou[0] == 1.0 and math.isnan(iou[1])
        assert miou(np.array([[2, 0], [0, 0]])) == 1.0

    def test_empty_is_nan(self):
        assert math.isnan(miou(np.zeros((3, 3))))


class TestCombined:
    def test_shared_classes_average(self):
        car = np.diag([1, 1, 1])
        drone = np.array([[1, 1], [0, 1]])  # IoU 0.5, 0.5
        score = combined_score(car, drone, {0: 0, 1: 1})
        assert score == pytest.approx(((1 + 0.5) / 2 * 2 + 1) / 3)

    def test_bad_map(self):
        with pytest.raises(ValueError):
            combined_score(np.eye(2), np.eye(2), {0: 5})
        with pytest.raises(ValueError):
            combined_score(np.eye(2), np.eye(2), {0: 0, 1: 0})

    def test_remap(self):
        np.testing.assert_array_equal(class_remap(np.array([0, 4, 5]), {0: 0, 4: 2, 5: 3}), [0, 2, 3])
        with pytest.raises(ValueError):
            class_remap(np.array([7]), {0: 0})


class TestLedger:
    def test_writes_header_rows_and_csv(self, tmp_path):
        led = Ledger(tmp_path, {"seed": 1})
        led.append(RoundRecord(0, [], metrics={"all": 50.0, "car_miou": float("nan")}, wall_time=1.5))
        led.append(RoundRecord(1, [2, 3], losses={"2": {"st": 0.1, "cl": 0.2}}, gamma=0.1))
        config, rows = read_ledger(tmp_path / "ledger.jsonl")
        assert config == {"seed": 1}
        assert [r["round"] for r in rows] == [0, 1]
        assert rows[0]["metrics"]["car_miou"] is None
        assert "wall_time" not in rows[0]
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 2
        assert (tmp_path / "timings.csv").read_text().splitlines()[1].startswith("0,1.5")

    def test_rounds_must_increase(self, tmp_path):
        led = Ledger(tmp_path, {})
        led.append(RoundRecord(1, []))
        with pytest.raises(ValueError):
            led.append(RoundRecord(1, []))

    def test_note(self, tmp_path):
        led = Ledger(tmp_path, {})
        led.note("pretrain", source="x")
        _, rows = read_ledger(tmp_path / "ledger.jsonl")
        assert rows == [{"type": "pretrain", "source": "x"}]

    def test_rejects_non_ledger(self, tmp_path):
        (tmp_path / "l.jsonl").write_text(json.dumps({"a": 1}) + "\n")
        with pytest.raises(ValueError):
            read_ledger(tmp_path / "l.jsonl")
