import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesionfuse import metadata as md
from lesionfuse.errors import ConfigError, ParseError, SchemaError, StateError, VersionError

PAD = ["ACK", "BCC", "MEL", "NEV", "SCC", "SEK"]


def small_schema(unknown_as_missing=False):
    cols = [
        md.Column("img_id", "identifier"),
        md.Column("patient_id", "identifier"),
        md.Column("gender", "categorical", ["MALE", "FEMALE"]),
        md.Column("smoke", "categorical", ["True", "False"]),
        md.Column("age", "numeric", bounds=[0.0, 100.0]),
        md.Column("diagnostic", "label", PAD),
    ]
    return md.MetadataSchema(cols, "img_id", "diagnostic", "patient_id", ["", "UNK"], unknown_as_missing)


def row(i, gender="MALE", smoke="True", age="50", label="NEV", patient=None):
    return {"img_id": f"img{i}.png", "patient_id": patient or f"P{i}", "gender": gender,
            "smoke": smoke, "age": age, "diagnostic": label}


def write_csv(path, rows, header=None):
    header = header or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header])
    return path


class TestSchema:
    def test_encoded_length(self):
        s = small_schema()
        assert s.encoded_length == 2 + 2 + 1
        assert s.class_names == PAD

    def test_round_trip(self, tmp_path):
        s = small_schema(True)
        s.save(tmp_path / "s.json")
        assert md.MetadataSchema.load(tmp_path / "s.json") == s

    def test_needs_one_label(self):
        with pytest.raises(SchemaError):
            md.MetadataSchema([md.Column("a", "identifier")], "a", "a")

    def test_numeric_needs_bounds(self):
        with pytest.raises(SchemaError):
            md.MetadataSchema([md.Column("a", "identifier"), md.Column("x", "numeric"),
                               md.Column("y", "label", ["A"])], "a", "y")

    def test_packaged_pad_schema(self):
        s = md.packaged_schema()
        assert len(s.columns) == 26
        assert s.class_names == PAD
        assert {c.name for c in s.columns if c.kind == "identifier"} == \
            {"patient_id", "lesion_id", "img_id", "biopsed"}
        assert s.encoded_length == 70

    def test_unknown_packaged_schema(self):
        with pytest.raises(SchemaError):
            md.packaged_schema("nope")


class TestParse:
    def test_complete_row(self, tmp_path):
        recs = md.parse_csv(write_csv(tmp_path / "m.csv", [row(0)]), small_schema())
        assert len(recs) == 1 and recs[0].missing == []

    def test_missing_markers(self, tmp_path):
        recs = md.parse_csv(write_csv(tmp_path / "m.csv", [row(0, gender="", smoke="UNK")]), small_schema())
        assert sorted(recs[0].missing) == ["gender", "smoke"]

    def test_header_order_and_quoting(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text('diagnostic,age,"smoke",gender,patient_id,img_id\n'
                     'BCC,31,False,"FEMALE","P,1",a.png\n')
        (r,) = md.parse_csv(p, small_schema())
        assert r.values["patient_id"] == "P,1" and r.values["gender"] == "FEMALE"

    def test_label_outside_vocabulary(self, tmp_path):
        with pytest.raises(SchemaError):
            md.parse_csv(write_csv(tmp_path / "m.csv", [row(0, label="XYZ")]), small_schema())

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", [row(0)], header=["img_id", "patient_id", "gender", "age", "diagnostic"])
        with pytest.raises(SchemaError, match="smoke"):
            md.parse_csv(p, small_schema())

    def test_malformed_row_line_number(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("img_id,patient_id,gender,smoke,age,diagnostic\n"
                     "a,P1,MALE,True,5,NEV\n"
                     "b,P2,MALE,True\n")
        with pytest.raises(ParseError, match="line 3"):
            md.parse_csv(p, small_schema())

    def test_missing_label(self, tmp_path):
        with pytest.raises(ParseError):
            md.parse_csv(write_csv(tmp_path / "m.csv", [row(0, label="")]), small_schema())

    def test_unknown_category(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", [row(0, gender="OTHER")])
        with pytest.raises(SchemaError):
            md.parse_csv(p, small_schema())
        (r,) = md.parse_csv(p, small_schema(unknown_as_missing=True))
        assert r.missing == ["gender"]


class TestEncode:
    def test_one_hot_and_numeric(self):
        s = small_schema()
        e = md.encode(md.make_record(row(0, gender="MALE", smoke="False", age="50"), s), s)
        np.testing.assert_array_equal(e.vector, [1, 0, 0, 1, 0.5])
        assert not e.mask.any()

    def test_missing_group(self):
        s = small_schema()
        e = md.encode(md.make_record(row(0, gender=""), s), s)
        np.testing.assert_array_equal(e.vector[:2], [0, 0])
        np.testing.assert_array_equal(e.mask, [1, 1, 0, 0, 0])

    def test_numeric_clipped(self):
        s = small_schema()
        assert md.encode(md.make_record(row(0, age="150"), s), s).vector[-1] == 1.0

    def test_numeric_parse_failure(self):
        s = small_schema()
        with pytest.raises(ParseError):
            md.encode(md.make_record(row(0, age="old"), s), s)

    def test_inference_record(self):
        s = small_schema()
        r = md.make_record({"gender": "FEMALE"}, s, inference=True)
        assert r.values["diagnostic"] is None
        assert {"age", "smoke"} <= set(r.missing) and "gender" not in r.missing
        e = md.encode(r, s)
        np.testing.assert_array_equal(e.mask, [0, 0, 1, 1, 1])
        with pytest.raises(SchemaError):
            md.make_record({"gendr": "FEMALE"}, s, inference=True)


def encoded(schema, rows):
    return [md.encode(md.make_record(r, schema), schema) for r in rows]


class TestImpute:
    @pytest.mark.parametrize("mode", ["statistic", "autoencoder"])
    def test_no_missing_unchanged(self, mode):
        s = small_schema()
        data = encoded(s, [row(i, age=str(10 * i)) for i in range(6)])
        out = md.impute(data, mode, schema=s)
        for a, b in zip(data, out):
            np.testing.assert_array_equal(a.vector, b.vector)

    def test_mode_of_categorical(self):
        s = small_schema()
        data = encoded(s, [row(0, gender="MALE"), row(1, gender="MALE"), row(2, gender="FEMALE"),
                           row(3, gender="")])
        out = md.impute(data, "statistic", train_indices=[0, 1, 2], schema=s)
        np.testing.assert_array_equal(out[3].vector[:2], [1, 0])

    def test_median_of_numeric(self):
        s = small_schema()
        data = encoded(s, [row(0, age="10"), row(1, age="30"), row(2, age="90"), row(3, age="UNK")])
        out = md.impute(data, "statistic", schema=s)
        assert out[3].vector[-1] == pytest.approx(0.3)

    def test_fit_uses_training_rows_only(self):
        s = small_schema()
        data = encoded(s, [row(0, age="10"), row(1, age="90"), row(2, age="90"), row(3, age="")])
        out = md.impute(data, "statistic", train_indices=[0, 3], schema=s)
        assert out[3].vector[-1] == pytest.approx(0.1)

    def test_empty_training(self):
        with pytest.raises(StateError):
            md.Imputer(small_schema()).fit([])

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            md.Imputer(small_schema(), "mice")

    @pytest.mark.parametrize("mode", ["statistic", "autoencoder"])
    def test_groups_sum_to_one_and_observed_kept(self, mode):
        s = small_schema()
        r = np.random.default_rng(5)
        rows = []
        for i in range(40):
            rows.append(row(i, gender=r.choice(["MALE", "FEMALE", ""]), smoke=r.choice(["True", "False", "UNK"]),
                            age=r.choice(["", str(r.integers(0, 100))])))
        data = encoded(s, rows)
        imp = md.Imputer(s, mode, seed=0, epochs=20).fit(data)
        out = imp.transform(data)
        for before, after in zip(data, out):
            np.testing.assert_array_equal(after.vector[~before.mask], before.vector[~before.mask])
            assert after.vector[0:2].sum() == 1 and after.vector[2:4].sum() == 1
            assert 0 <= after.vector[4] <= 1

    def test_state_round_trip(self):
        s = small_schema()
        data = encoded(s, [row(i, gender=["MALE", "FEMALE", ""][i % 3], age=["", "40"][i % 2]) for i in range(12)])
        imp = md.Imputer(s, "autoencoder", seed=1, epochs=5).fit(data)
        back = md.Imputer.restore(s, imp.state(), imp.tensors())
        for a, b in zip(imp.transform(data), back.transform(data)):
            np.testing.assert_array_equal(a.vector, b.vector)


class TestSplit:
    def records(self, patients):
        s = small_schema()
        rows, i = [], 0
        for p, n in enumerate(patients):
            for _ in range(n):
                rows.append(md.make_record(row(i, patient=f"P{p}"), s))
                i += 1
        return rows, s

    def test_ten_singles(self):
        recs, s = self.records([1] * 10)
        assert md.split(recs, s, seed=3).sizes() == {"train": 8, "val": 1, "test": 1}

    def test_patient_grouping(self):
        recs, s = self.records([3] + [1] * 12)
        a = md.split(recs, s, seed=0).assignment
        assert len({a[f"img{i}.png"] for i in range(3)}) == 1

    def test_deterministic(self):
        recs, s = self.records([2, 1, 3, 1, 1, 2, 1])
        assert md.split(recs, s, seed=9).assignment == md.split(recs, s, seed=9).assignment

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=3, max_size=30), st.integers(0, 10 ** 6))
    def test_partition_and_group_integrity(self, patients, seed):
        recs, s = self.records(patients)
        a = md.split(recs, s, seed=seed).assignment
        assert set(a) == {r.values["img_id"] for r in recs}
        by_patient = {}
        for r in recs:
            by_patient.setdefault(r.values["patient_id"], set()).add(a[r.values["img_id"]])
        assert all(len(v) == 1 for v in by_patient.values())

    def test_split_file(self, tmp_path):
        recs, s = self.records([1] * 4)
        p = tmp_path / "split.csv"
        p.write_text("sample_id,partition\nimg0.png,test\nimg1.png,train\nimg2.png,train\nimg3.png,val\n")
        a = md.split(recs, s, split_file=p)
        assert a.assignment["img0.png"] == "test" and a.sizes() == {"train": 2, "val": 1, "test": 1}
        p.write_text("sample_id,partition\nghost.png,test\n")
        with pytest.raises(SchemaError):
            md.split(recs, s, split_file=p)

    def test_save_and_reload(self, tmp_path):
        recs, s = self.records([2, 1, 1, 3, 1])
        a = md.split(recs, s, seed=4)
        a.save(tmp_path / "s.csv")
        assert md.split(recs, s, split_file=tmp_path / "s.csv").assignment == a.assignment

    def test_bad_ratios(self):
        recs, s = self.records([1, 1])
        with pytest.raises(ConfigError):
            md.split(recs, s, ratios=(0.5, 0.5, 0.5))


class TestCache:
    def test_round_trip(self, tmp_path):
        s = small_schema()
        data = encoded(s, [row(0), row(1, gender="")])
        md.write_encoded_cache(tmp_path / "c.lfm", ["a", "b"], data)
        ids, back = md.read_encoded_cache(tmp_path / "c.lfm")
        assert ids == ["a", "b"]
        for x, y in zip(data, back):
            np.testing.assert_array_equal(x.vector, y.vector)
            np.testing.assert_array_equal(x.mask, y.mask)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.lfm").write_bytes(b"garbage!" + bytes(20))
        with pytest.raises(VersionError):
            md.read_encoded_cache(tmp_path / "c.lfm")
