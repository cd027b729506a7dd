"""Data pipeline: CSV parsing, synthetic generation, windows, splits."""

import math
import random
import statistics

import pytest

from fedcast.data import (
    BUILTIN_SCHEMAS,
    DataError,
    DatasetSchema,
    SyntheticConfig,
    build_node_datasets,
    generate_synthetic,
    load_csv,
    make_windows,
    normalize_minmax,
    split_node_dataset,
    write_csv,
)

TOY = DatasetSchema("toy", ("DateTime", "a", "b"), "b", 1)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestLoadCsv:
    def test_well_formed_three_rows(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", [
            "DateTime,a,b",
            "100,1.0,2.0",
            "200,3.0,4.0",
            "300,5.0,6.0",
        ])
        table = load_csv(p, TOY)
        assert table.n_rows == 3
        assert table.column("a") == [1.0, 3.0, 5.0]
        assert list(table.columns) == ["DateTime", "a", "b"]

    def test_header_permutation_reordered(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", [
            "b,DateTime,a",
            "2.0,100,1.0",
        ])
        table = load_csv(p, TOY)
        assert table.column("a") == [1.0]
        assert table.column("b") == [2.0]

    def test_missing_target_named(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", ["DateTime,a", "100,1.0"])
        with pytest.raises(DataError, match="'b'"):
            load_csv(p, TOY)

    def test_extra_column_rejected(self, tmp_path):
        p = write_lines(tmp_path / "n.csv",
                        ["DateTime,a,b,ghost", "1,2,3,4"])
        with pytest.raises(DataError, match="ghost"):
            load_csv(p, TOY)

    def test_unparsable_cell_reports_row_and_column(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", [
            "DateTime,a,b",
            "100,1.0,2.0",
            "200,oops,4.0",
        ])
        with pytest.raises(DataError, match=r"row 3.*'a'"):
            load_csv(p, TOY)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("", encoding="utf-8")
        with pytest.raises(DataError, match="empty"):
            load_csv(p, TOY)

    def test_header_only(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", ["DateTime,a,b"])
        with pytest.raises(DataError, match="no data rows"):
            load_csv(p, TOY)

    def test_iso_datetime_parsed_and_sorted(self, tmp_path):
        p = write_lines(tmp_path / "n.csv", [
            "DateTime,a,b",
            "2024-01-02T00:00:00,2.0,0.0",
            "2024-01-01T00:00:00,1.0,0.0",
            "2024-01-03T00:00:00,3.0,0.0",
        ])
        table = load_csv(p, TOY)
        stamps = table.column("DateTime")
        assert stamps == sorted(stamps)
        assert stamps[1] - stamps[0] == 86400.0
        assert table.column("a") == [1.0, 2.0, 3.0]

    def test_day_month_year_sorting(self, tmp_path):
        schema = DatasetSchema("cal", ("Day", "Month", "Year", "v"), "v", 1)
        p = write_lines(tmp_path / "n.csv", [
            "Day,Month,Year,v",
            "1,1,2021,3.0",
            "31,12,2020,2.0",
            "1,6,2020,1.0",
        ])
        table = load_csv(p, schema)
        assert table.column("v") == [1.0, 2.0, 3.0]

    def test_round_trip_through_writer(self, tmp_path):
        cfg = SyntheticConfig(seed=3, records_per_node=20)
        table = generate_synthetic(TOY, cfg)[0]
        path = tmp_path / "out.csv"
        write_csv(table, path)
        again = load_csv(path, TOY)
        assert again.columns == table.columns


class TestBuiltinSchemas:
    def test_node_counts_match_deployments(self):
        expected = {"animal_welfare": 2, "animal_feed": 6,
                    "electricity_meter": 2, "smart_building": 2,
                    "dairy_sales": 7}
        for name, count in expected.items():
            assert BUILTIN_SCHEMAS[name].node_count == count

    def test_feature_lists(self):
        aw = BUILTIN_SCHEMAS["animal_welfare"]
        assert aw.feature_names[:4] == ("DateTime", "Air Humidity", "Air Temp",
                                        "Ch4")
        assert len(BUILTIN_SCHEMAS["electricity_meter"].feature_names) == 27
        assert len(BUILTIN_SCHEMAS["smart_building"].feature_names) == 18
        assert len(BUILTIN_SCHEMAS["dairy_sales"].feature_names) == 13
        assert BUILTIN_SCHEMAS["dairy_sales"].feature_names[:3] == (
            "Day", "Month", "Year")

    def test_target_must_be_feature(self):
        with pytest.raises(DataError):
            DatasetSchema("bad", ("a", "b"), "c", 1)


class TestGenerateSynthetic:
    def test_degenerate_config_makes_identical_nodes(self):
        schema = BUILTIN_SCHEMAS["animal_welfare"]
        cfg = SyntheticConfig(seed=1, records_per_node=50, noise_std=0.0,
                              node_shift_scale=0.0)
        tables = generate_synthetic(schema, cfg)
        assert len(tables) == 2
        assert tables[0].columns == tables[1].columns

    def test_deterministic(self):
        schema = BUILTIN_SCHEMAS["animal_feed"]
        cfg = SyntheticConfig(seed=9, records_per_node=40)
        a = generate_synthetic(schema, cfg)
        b = generate_synthetic(schema, cfg)
        assert all(x.columns == y.columns for x, y in zip(a, b))

    def test_node_shift_separates_means(self):
        schema = BUILTIN_SCHEMAS["animal_welfare"]
        cfg = SyntheticConfig(seed=2, records_per_node=300, noise_std=0.05,
                              node_shift_scale=2.0)
        t0, t1 = generate_synthetic(schema, cfg)
        separated = 0
        for feat in schema.feature_names[1:]:
            a, b = t0.column(feat), t1.column(feat)
            sem = statistics.stdev(a) / math.sqrt(len(a))
            if abs(statistics.fmean(a) - statistics.fmean(b)) > 3.0 * sem:
                separated += 1
        # shifts are random per feature; near all features should separate
        assert separated >= len(schema.feature_names) - 2

    def test_dairy_calendar_columns(self):
        schema = BUILTIN_SCHEMAS["dairy_sales"]
        cfg = SyntheticConfig(seed=3, records_per_node=40)
        table = generate_synthetic(schema, cfg)[0]
        assert table.column("Year")[0] == 2020.0
        assert table.column("Month")[0] == 1.0
        assert table.column("Day")[:3] == [1.0, 2.0, 3.0]

    def test_validation(self):
        with pytest.raises(DataError):
            SyntheticConfig(seed=1, records_per_node=2)
        with pytest.raises(DataError):
            SyntheticConfig(seed=1, noise_std=-0.1)


class TestMakeWindows:
    def test_counting_oracle(self):
        cfg = SyntheticConfig(seed=5, records_per_node=5)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, window_len=3, target_name="b")
        assert windows.shape == (2, 3, 3)
        assert targets.shape == (2, 1)

    def test_window_content_verbatim(self):
        cfg = SyntheticConfig(seed=6, records_per_node=8)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, window_len=2, target_name="a")
        w = windows.tolist()
        names = TOY.feature_names
        for i in range(len(w)):
            for r in range(2):
                expect = [table.column(n)[i + r] for n in names]
                assert w[i][r] == expect

    def test_target_alignment(self):
        cfg = SyntheticConfig(seed=7, records_per_node=10)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, window_len=4, target_name="b")
        col = table.column("b")
        for i in range(windows.shape[0]):
            assert targets.tolist()[i][0] == col[i + 4]

    def test_boundary_rejected(self):
        cfg = SyntheticConfig(seed=8, records_per_node=4)
        table = generate_synthetic(TOY, cfg)[0]
        with pytest.raises(DataError, match="too few rows"):
            make_windows(table, window_len=4, target_name="b")


class TestNormalize:
    def test_hand_value(self):
        from array import array
        from fedcast.tensor import Tensor
        # one feature; train values 0 and 10, query value 5 -> 0.5
        windows = Tensor((3, 1, 1), array("d", [0.0, 10.0, 5.0]))
        targets = Tensor((3, 1), array("d", [0.0, 10.0, 5.0]))
        w, t, params = normalize_minmax(windows, targets, [0, 1], target_col=0)
        assert w.tolist()[2][0][0] == 0.5
        assert t.tolist()[2][0] == 0.5

    def test_constant_feature_maps_to_zero(self):
        from fedcast.tensor import Tensor
        windows = Tensor((2, 1, 2), [3.0, 1.0, 3.0, 2.0])
        targets = Tensor((2, 1), [0.5, 0.6])
        w, _, _ = normalize_minmax(windows, targets, [0, 1], target_col=1)
        assert [row[0][0] for row in w.tolist()] == [0.0, 0.0]

    def test_inverse_round_trip(self):
        rng = random.Random(9)
        cfg = SyntheticConfig(seed=10, records_per_node=30)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, 3, "b")
        _, norm_t, params = normalize_minmax(
            windows, targets, range(windows.shape[0]), target_col=2)
        for i in range(targets.shape[0]):
            back = params.inverse_target(norm_t.data[i])
            assert abs(back - targets.data[i]) < 1e-12 * max(1, abs(targets.data[i]))

    def test_out_of_range_saturates(self):
        from fedcast.tensor import Tensor
        windows = Tensor((3, 1, 1), [1.0, 2.0, 99.0])
        targets = Tensor((3, 1), [1.5, 1.5, -99.0])
        w, t, _ = normalize_minmax(windows, targets, [0, 1], target_col=0)
        assert w.tolist()[2][0][0] == 1.0
        assert t.tolist()[2][0] == 0.0


class TestSplit:
    def _node(self, n=100, seed=4, fractions=(0.6, 0.2, 0.2)):
        cfg = SyntheticConfig(seed=11, records_per_node=n + 4)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, 4, "b")
        return split_node_dataset(windows, targets, (0.8, 0.2), seed=seed,
                                  target_col=2, subset_fractions=fractions)

    def test_counts_and_ordering(self):
        node = self._node(100)
        assert len(node.train_idx) == 80
        assert len(node.test_idx) == 20
        assert max(node.train_idx) < min(node.test_idx)

    def test_subset_containment_and_disjointness(self):
        node = self._node(100)
        train = set(node.train_idx)
        assert set(node.seen_idx) <= train
        assert set(node.unseen_idx) <= train
        assert set(node.local_idx) <= train
        assert not set(node.seen_idx) & set(node.unseen_idx)

    def test_full_seen_leaves_unseen_empty(self):
        node = self._node(100, fractions=(1.0, 0.0, 0.2))
        assert len(node.seen_idx) == 80
        assert node.unseen_idx == ()

    def test_same_seed_same_masks(self):
        a = self._node(seed=21)
        b = self._node(seed=21)
        assert a.seen_idx == b.seen_idx
        assert a.local_idx == b.local_idx

    def test_normalized_values_in_unit_interval(self):
        node = self._node(100)
        assert all(0.0 <= v <= 1.0 for v in node.windows.data)
        assert all(0.0 <= v <= 1.0 for v in node.targets.data)

    def test_no_leakage_stats_recomputable_from_train(self):
        # independently recompute min/max from the raw train rows only
        cfg = SyntheticConfig(seed=12, records_per_node=64)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, 4, "b")
        node = split_node_dataset(windows, targets, (0.8, 0.2), seed=3,
                                  target_col=2)
        n_feat = 3
        mins = [math.inf] * n_feat
        maxs = [-math.inf] * n_feat
        raw = windows.tolist()
        for i in node.train_idx:
            for row in raw[i]:
                for j, v in enumerate(row):
                    mins[j] = min(mins[j], v)
                    maxs[j] = max(maxs[j], v)
        for i in node.train_idx:
            v = targets.tolist()[i][0]
            mins[2] = min(mins[2], v)
            maxs[2] = max(maxs[2], v)
        assert tuple(mins) == node.norm.mins
        assert tuple(maxs) == node.norm.maxs

    def test_degenerate_split_rejected(self):
        cfg = SyntheticConfig(seed=13, records_per_node=8)
        table = generate_synthetic(TOY, cfg)[0]
        windows, targets = make_windows(table, 4, "b")
        with pytest.raises(DataError, match="degenerate"):
            split_node_dataset(windows, targets, (0.999, 0.001), seed=1,
                               target_col=2)
        with pytest.raises(DataError, match="ratios"):
            split_node_dataset(windows, targets, (0.5, 0.6), seed=1,
                               target_col=2)


def test_build_node_datasets_end_to_end():
    schema = BUILTIN_SCHEMAS["animal_feed"]
    cfg = SyntheticConfig(seed=14, records_per_node=60, node_shift_scale=0.5)
    tables = generate_synthetic(schema, cfg)
    nodes = build_node_datasets(schema, tables, window_len=6,
                                ratios=(0.8, 0.2), seed=77)
    assert [n.node_id for n in nodes] == list(range(6))
    for node in nodes:
        x, y = node.seen_data()
        assert x.shape[0] == len(node.seen_idx) == y.shape[0]
        assert x.shape[1:] == (6, len(schema.feature_names))
