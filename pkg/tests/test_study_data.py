import numpy as np
import pytest

from causal_fuse.study_data import (
    OverlapRule,
    StudyData,
    StudyDataError,
    UnitRecord,
    apply_overlap,
    load_csv,
    residualize,
    save_csv,
)


def write(tmp_path, text, name="study.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


WELL_FORMED = """id,source,z,y,x1,x2
a,rct,1,1.5,0.1,0.2
b,os,0,2.5,-0.3,0.4
c,os,1,3.5,0.5,-0.6
"""


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        data = load_csv(write(tmp_path, WELL_FORMED))
        assert len(data.records) == 3
        assert data.covariate_names == ("x1", "x2")
        assert data.records[0].source == "rct"

    def test_bad_treatment_cites_row(self, tmp_path):
        text = (
            "id,source,z,y,x1\n"
            "a,rct,1,1.0,0.0\n"
            "b,os,0,1.0,0.0\n"
            "c,os,1,1.0,0.0\n"
            "d,os,2,1.0,0.0\n"
        )
        with pytest.raises(StudyDataError, match="row 5"):
            load_csv(write(tmp_path, text))

    def test_missing_column(self, tmp_path):
        with pytest.raises(StudyDataError, match="missing required column"):
            load_csv(write(tmp_path, "id,source,z,x1\na,rct,1,0.0\n"))

    def test_non_numeric_cell_cites_location(self, tmp_path):
        text = "id,source,z,y,x1\na,rct,1,1.0,0.0\nb,os,0,oops,0.1\n"
        with pytest.raises(StudyDataError, match="row 3.*'y'"):
            load_csv(write(tmp_path, text))

    def test_unknown_source(self, tmp_path):
        text = "id,source,z,y,x1\na,trial,1,1.0,0.0\n"
        with pytest.raises(StudyDataError, match="unknown tag"):
            load_csv(write(tmp_path, text))

    def test_duplicate_id(self, tmp_path):
        text = "id,source,z,y,x1\na,rct,1,1.0,0.0\na,os,0,1.0,0.0\n"
        with pytest.raises(StudyDataError, match="duplicate"):
            load_csv(write(tmp_path, text))

    def test_figure_toy_layout_counts(self, tmp_path):
        """Toy layout: 3 RCT, 5 OS treated (3 inside overlap), 8 OS control."""
        rows = ["id,source,z,y,x1"]
        for i in range(3):
            rows.append(f"r{i},rct,{i % 2},1.0,{0.5 + i * 0.1}")
        for i, x in enumerate([0.2, 0.4, 0.6, -1.0, -2.0]):
            rows.append(f"t{i},os,1,2.0,{x}")
        for i, x in enumerate([0.1, 0.3, 0.5, 0.7, 0.9, -1.5, -0.5, 0.0]):
            rows.append(f"c{i},os,0,1.0,{x}")
        data = load_csv(write(tmp_path, "\n".join(rows) + "\n"))
        data = apply_overlap(data, OverlapRule(bounds=((0, 0.0, np.inf),)))
        n_r, n_o, n_plus, n_minus = data.counts
        assert (n_r, n_o) == (3, 13)
        assert (n_plus, n_minus) == (3, 2)

    def test_round_trip_is_lossless(self, tmp_path):
        rng = np.random.default_rng(31)
        records = tuple(
            UnitRecord(
                id=f"u{i}",
                source="os" if i % 3 else "rct",
                z=int(rng.random() < 0.5),
                y=float(rng.normal() * 1e3),
                x=tuple(float(v) for v in rng.normal(size=3) / 7.0),
            )
            for i in range(25)
        )
        data = StudyData(records=records)
        path = tmp_path / "round.csv"
        save_csv(data, path)
        back = load_csv(path)
        for a, b in zip(data.records, back.records):
            assert a.id == b.id and a.source == b.source and a.z == b.z
            assert a.y == b.y  # bit-exact via 17 significant digits
            assert a.x == b.x


class TestApplyOverlap:
    def make(self, xs_rct, xs_os):
        records = [
            UnitRecord(id=f"r{i}", source="rct", z=i % 2, y=0.0, x=(x,))
            for i, x in enumerate(xs_rct)
        ] + [
            UnitRecord(id=f"o{i}", source="os", z=i % 2, y=0.0, x=(x,))
            for i, x in enumerate(xs_os)
        ]
        return StudyData(records=tuple(records))

    def test_majority_style_rule(self):
        data = self.make([0.0, 1.0], [-2.0, -0.5, 3.0])
        out = apply_overlap(data, OverlapRule(bounds=((0, -1.0, np.inf),)))
        flags = [rec.in_overlap for rec in out.records if rec.source == "os"]
        assert flags == [False, True, True]

    def test_unbounded_rule_marks_everyone(self):
        data = self.make([0.0], [-100.0, 100.0])
        out = apply_overlap(data, OverlapRule(bounds=()))
        assert all(rec.in_overlap for rec in out.records)

    def test_rct_bounding_box(self):
        data = self.make([5.0, 10.0], [4.0, 7.0, 11.0])
        out = apply_overlap(data, OverlapRule(mode="rct_bounding_box"))
        flags = [rec.in_overlap for rec in out.records if rec.source == "os"]
        assert flags == [False, True, False]

    def test_bounding_box_without_rct_errors(self):
        records = (UnitRecord(id="o", source="os", z=1, y=0.0, x=(0.0,)),)
        with pytest.raises(StudyDataError, match="no RCT"):
            apply_overlap(StudyData(records=records), OverlapRule(mode="rct_bounding_box"))

    def test_idempotent(self):
        data = self.make([0.0, 2.0], [-1.0, 1.0, 5.0])
        rule = OverlapRule(bounds=((0, 0.5, 4.0),))
        once = apply_overlap(data, rule)
        twice = apply_overlap(once, rule)
        assert [r.in_overlap for r in once.records] == [r.in_overlap for r in twice.records]

    def test_rct_forced_inside(self):
        data = self.make([-50.0], [0.0, 1.0])
        out = apply_overlap(data, OverlapRule(bounds=((0, 0.0, 10.0),)))
        assert out.records[0].in_overlap


class TestResidualize:
    def make(self, x, y):
        records = tuple(
            UnitRecord(
                id=f"u{i}",
                source="rct" if i == 0 else "os",
                z=i % 2,
                y=float(yy),
                x=(float(xx),),
            )
            for i, (xx, yy) in enumerate(zip(x, y))
        )
        return StudyData(records=records)

    def test_exact_linear_gives_zero_residuals(self):
        x = np.arange(6.0)
        data = residualize(self.make(x, 3.0 * x - 2.0))
        assert np.abs(data.y_vector()).max() < 1e-9

    def test_residuals_uncorrelated_with_covariate(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=200)
        y = x + rng.normal(size=200)
        data = residualize(self.make(x, y))
        res = data.y_vector()
        corr = np.corrcoef(res, x)[0, 1]
        assert abs(corr) < 1e-8

    def test_four_point_hand_ols(self):
        # x = (0,1,2,3), y = (1,3,2,5): X'X = [[4,6],[6,14]], X'y = [11,22],
        # det = 20, intercept = (14*11 - 6*22)/20 = 1.1, slope = (4*22 - 6*11)/20 = 1.1
        x = np.array([0.0, 1.0, 2.0, 3.0])
        y = np.array([1.0, 3.0, 2.0, 5.0])
        fitted = 1.1 + 1.1 * x
        data = residualize(self.make(x, y))
        assert data.y_vector() == pytest.approx(y - fitted, abs=1e-10)

    def test_shadow_outcome_kept_and_ids_preserved(self):
        x = np.arange(5.0)
        original = 2.0 * x + 1.0
        data = self.make(x, original)
        out = residualize(data)
        assert [r.id for r in out.records] == [r.id for r in data.records]
        assert [r.y_raw for r in out.records] == list(original)
