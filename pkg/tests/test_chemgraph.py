import numpy as np
import pytest

from core.chemgraph import (
    HARTREE_TO_EV,
    MolecularDataset,
    atomisation_energy,
    build_graph,
    load_dataset_cache,
    load_reference_energies,
    load_split,
    load_structure_keys,
    load_xyz_path,
    overlap_split,
    overlap_split_spec,
    parse_xyz,
    parse_xyz_stream,
    random_split,
    save_dataset_cache,
    save_split,
    target_energy,
    truncate_inchi,
)
from core.errors import ConfigError, DataError, XYZParseError
from core.models import MoleculeRecord, SplitSpec

from tests.conftest import WATER_XYZ, make_record


class TestParseXYZ:
    def test_water(self):
        record = parse_xyz(WATER_XYZ)
        assert record.id == "water"
        assert record.elements == (8, 1, 1)
        assert record.positions.shape == (3, 3)
        assert record.positions[1, 1] == pytest.approx(0.7572)
        assert record.total_energy == pytest.approx(-2080.5)
        assert record.zpe == pytest.approx(0.56)

    def test_count_exceeds_atoms_reports_missing_atom_line(self):
        text = "4\ncomment\nO 0 0 0\nH 0 0.75 -0.47\nH 0 -0.75 -0.47\n"
        with pytest.raises(XYZParseError) as info:
            parse_xyz(text)
        assert info.value.line_number == 6
        assert "atom 4 of 4" in str(info.value)

    def test_empty(self):
        with pytest.raises(XYZParseError) as info:
            parse_xyz("")
        assert info.value.line_number == 1

    def test_malformed_count(self):
        with pytest.raises(XYZParseError) as info:
            parse_xyz("three\nc\nH 0 0 0\n")
        assert info.value.line_number == 1

    def test_unknown_element(self):
        with pytest.raises(XYZParseError) as info:
            parse_xyz("2\nc\nH 0 0 0\nXx 0 0 1\n", source="bad.xyz")
        assert info.value.line_number == 4
        assert "bad.xyz" in str(info.value)

    def test_non_numeric_coordinate(self):
        with pytest.raises(XYZParseError) as info:
            parse_xyz("1\nc\nH 0 zero 0\n")
        assert info.value.line_number == 3

    def test_qm9_header_and_inchi(self):
        text = (
            "2\n"
            "gdb 7\t1.0\t2.0\t3.0\t0.0\t1.0\t-0.3\t0.1\t0.4\t10.0\t0.02\t-1.17*^0\t-1.16\t-1.15\t-1.18\t6.0\n"
            "H 0.0 0.0 0.0 0.1\n"
            "H 0.0 0.0 0.74 -0.1\n"
            "4401.0\n"
            "[H][H]\t[H][H]\n"
            "InChI=1S/H2/h1H/t1-/m0/s1\tInChI=1S/H2/h1H\n"
        )
        record = parse_xyz(text)
        assert record.id == "gdb_7"
        assert record.total_energy == pytest.approx(-1.17 * HARTREE_TO_EV)
        assert record.zpe == pytest.approx(0.02 * HARTREE_TO_EV)
        assert record.structure_key == "InChI=1S/H2/h1H"

    def test_stream(self):
        text = WATER_XYZ + "\n" + "1\nid=h\nH 0 0 0\n"
        records = list(parse_xyz_stream(text))
        assert [r.id for r in records] == ["water", "h"]

    def test_directory_collects_failures(self, tmp_path):
        (tmp_path / "a.xyz").write_text(WATER_XYZ)
        (tmp_path / "b.xyz").write_text("2\nc\nH 0 0 0\n")
        records, failures = load_xyz_path(tmp_path)
        assert [r.id for r in records] == ["water"]
        assert failures[0][0] == "b.xyz"

    def test_stream_with_qm9_trailers(self):
        text = (
            "1\nid=a\nH 0 0 0\n"
            "0.0\n[H]\t[H]\nInChI=1S/H/t1-\tInChI=1S/H\n"
            "1\nid=b\nH 0 0 1\n"
            "4401.0\n[H][H]\t[H][H]\nInChI=1S/H2/h1H/t1-/m0/s1\tInChI=1S/H2/h1H\n"
        )
        records = list(parse_xyz_stream(text))
        assert [r.id for r in records] == ["a", "b"]
        assert [r.structure_key for r in records] == ["InChI=1S/H", "InChI=1S/H2/h1H"]

    def test_stream_resumes_after_bad_block(self):
        text = "1\nid=a\nH 0 0 0\n2\nid=b\nH 0 0 0\n1\nid=c\nH 0 0 1\n"
        errors = []
        records = list(parse_xyz_stream(text, source="mixed.xyz", errors=errors))
        assert [r.id for r in records] == ["a", "c"]
        assert len(errors) == 1
        assert errors[0].line_number == 7

    def test_stream_raises_without_error_list(self):
        with pytest.raises(XYZParseError):
            list(parse_xyz_stream("1\nid=a\nH 0 0 0\n2\nid=b\nH 0 0 0\n"))

    def test_second_block_rejected(self):
        with pytest.raises(XYZParseError) as info:
            parse_xyz("1\nid=a\nH 0 0 0\n1\nid=b\nH 0 0 1\n")
        assert info.value.line_number == 4

    def test_directory_multi_block_file(self, tmp_path):
        (tmp_path / "pair.xyz").write_text("1\ncomment\nH 0 0 0\n1\ncomment\nH 0 0 1\n")
        records, failures = load_xyz_path(tmp_path)
        assert [r.id for r in records] == ["pair", "pair_1"]
        assert failures == []

    def test_directory_empty_file(self, tmp_path):
        (tmp_path / "a.xyz").write_text(WATER_XYZ)
        (tmp_path / "empty.xyz").write_text("\n")
        records, failures = load_xyz_path(tmp_path)
        assert len(records) == 1
        assert [name for name, _ in failures] == ["empty.xyz"]

    def test_single_file_failure_per_block(self, tmp_path):
        path = tmp_path / "all.xyz"
        path.write_text("1\nid=a\nH 0 0 0\n2\nid=b\nXx 0 0 0\nH 0 0 1\n1\nid=c\nH 0 0 1\n")
        records, failures = load_xyz_path(path)
        assert [r.id for r in records] == ["a", "c"]
        assert len(failures) == 1
        assert "all.xyz:line 6" in failures[0][1]


class TestEnergies:
    def test_methane(self):
        record = MoleculeRecord("ch4", (6, 1, 1, 1, 1), np.zeros((5, 3)), total_energy=-40.0)
        assert atomisation_energy(record, {6: -38.0, 1: -0.5}) == pytest.approx(0.0)

    def test_single_atom(self):
        record = MoleculeRecord("c", (6,), np.zeros((1, 3)), total_energy=-38.0)
        assert atomisation_energy(record, {6: -38.0}) == pytest.approx(0.0)

    def test_subtract_zpe(self):
        record = MoleculeRecord("x", (6, 1), np.zeros((2, 3)), total_energy=-10.0, zpe=0.5)
        assert atomisation_energy(record, {6: -8.0, 1: -1.0}, subtract_zpe=True) == pytest.approx(-1.5)

    def test_missing_reference(self):
        record = MoleculeRecord("x", (6, 7), np.zeros((2, 3)), total_energy=-10.0)
        with pytest.raises(ConfigError):
            atomisation_energy(record, {6: -8.0})

    def test_target_selection(self):
        record = MoleculeRecord("x", (1,), np.zeros((1, 3)), total_energy=-1.0, zpe=0.25)
        refs = {1: -0.5}
        assert target_energy(record, "U0", refs) == pytest.approx(-0.5)
        assert target_energy(record, "E", refs) == pytest.approx(-0.75)

    def test_reference_file(self, tmp_path):
        path = tmp_path / "refs.txt"
        path.write_text("H = -0.5\nU0.H = -0.6\nE.C = -38.0\n# comment\nC = -37.0\n")
        assert load_reference_energies(path, "U0") == {1: -0.6, 6: -37.0}
        assert load_reference_energies(path, "E") == {1: -0.5, 6: -38.0}


class TestBuildGraph:
    def test_threshold(self):
        near = make_record("n", (1, 1), [[0, 0, 0], [4.9, 0, 0]])
        far = make_record("f", (1, 1), [[0, 0, 0], [5.1, 0, 0]])
        assert build_graph(near, 5.0).n_edges == 2
        assert build_graph(far, 5.0).n_edges == 0

    def test_collinear(self):
        record = make_record("c", (1, 1, 1), [[0, 0, 0], [3, 0, 0], [6, 0, 0]])
        assert build_graph(record, 5.0).edge_set() == {(0, 1), (1, 0), (1, 2), (2, 1)}

    def test_symmetry_and_cutoff(self, rng):
        record = make_record("r", rng.choice([1, 6, 8], 7), rng.uniform(0, 6, (7, 3)))
        graph = build_graph(record, 4.0)
        distances = dict(zip(zip(*graph.edge_index.tolist()), graph.edge_distance))
        for (v, w), d in distances.items():
            assert v != w
            assert d <= 4.0
            assert distances[(w, v)] == d

    def test_cutoff_monotone(self, rng):
        record = make_record("r", (1,) * 6, rng.uniform(0, 8, (6, 3)))
        assert build_graph(record, 3.0).edge_set() <= build_graph(record, 5.0).edge_set()

    def test_nonpositive_cutoff(self, water):
        with pytest.raises(ConfigError):
            build_graph(water, 0.0)


class TestSplits:
    def test_qm9_sizes(self):
        ids = [f"gdb_{i}" for i in range(1, 133886)]
        split = random_split(ids, (110000, 10000), seed=0)
        assert len(split.test_ids) == 13885

    def test_empty_test(self):
        split = random_split([str(i) for i in range(10)], (10, 0), seed=1)
        assert split.test_ids == ()

    def test_deterministic(self):
        ids = [f"m{i}" for i in range(50)]
        assert random_split(ids, (30, 10), 7) == random_split(list(reversed(ids)), (30, 10), 7)

    def test_too_large(self):
        with pytest.raises(DataError):
            random_split(["a", "b"], (2, 1), 0)

    def test_overlap_basic(self):
        result = overlap_split(["a1", "a2"], {"a1": "k1", "a2": "k2"}, ["b2", "b3"], {"b2": "k2", "b3": "k3"})
        assert result.exclusive_a == ("a1",)
        assert result.shared_a == ("a2",)
        assert result.exclusive_b == ("b3",)
        assert result.shared_b == ("b2",)

    def test_overlap_duplicates(self):
        result = overlap_split(["a1", "a2"], {"a1": "k2", "a2": "k2"}, ["b1"], {"b1": "k2"})
        assert len(result.shared_a) == 2
        assert len(result.shared_b) == 1

    def test_overlap_disjoint(self):
        result = overlap_split(["a"], {"a": "k1"}, ["b"], {"b": "k2"})
        assert result.shared_a == () and result.shared_b == ()
        assert len(result.exclusive_a) + len(result.shared_a) == 1

    def test_overlap_missing_key(self):
        with pytest.raises(DataError, match="a2"):
            overlap_split(["a1", "a2"], {"a1": "k"}, [], {})

    def test_overlap_protocol(self):
        result = overlap_split(["a1", "a2"], {"a1": "k1", "a2": "k2"}, ["b2", "b3"], {"b2": "k2", "b3": "k3"})
        split = overlap_split_spec(result, seed=0)
        assert split.train_ids == ("a1",)
        assert split.val_ids == ("a2",)
        assert split.test_ids == ("b3",)
        assert split.ids("affine") == ("b2",)

    def test_split_disjointness(self):
        with pytest.raises(DataError):
            SplitSpec(("a",), ("a",), (), seed=0)


class TestKeysAndCache:
    def test_truncate_inchi(self):
        assert truncate_inchi("InChI=1S/C4H8/c1-3-4-2/h3-4H,1-2H3/b4-3+") == "InChI=1S/C4H8/c1-3-4-2/h3-4H,1-2H3"

    def test_structure_key_file(self, tmp_path):
        path = tmp_path / "keys.tsv"
        path.write_text("m1\tInChI=1S/CH4/h1H4/t1-/m0\nm2\tcustom-key\n")
        assert load_structure_keys(path) == {"m1": "InChI=1S/CH4/h1H4", "m2": "custom-key"}

    def test_dataset_cache(self, tmp_path, water):
        dataset = MolecularDataset((water, make_record("h2", (1, 1), [[0, 0, 0], [0.74, 0, 0]], -4.5)))
        loaded = load_dataset_cache(save_dataset_cache(dataset, tmp_path / "d.jsonl"))
        assert loaded.ids == dataset.ids
        np.testing.assert_array_equal(loaded.get("water").positions, water.positions)
        assert loaded.get("h2").target == -4.5

    def test_split_file(self, tmp_path):
        split = SplitSpec(("a", "b"), ("c",), ("d",), seed=4, extra={"affine": ("e",)})
        assert load_split(save_split(split, tmp_path / "s.json")) == split

    def test_duplicate_ids(self, water):
        with pytest.raises(DataError):
            MolecularDataset((water, water))

    def test_unsupported_element(self):
        record = make_record("u", (1, 16), [[0, 0, 0], [1, 0, 0]])
        with pytest.raises(DataError):
            MolecularDataset((record,)).check_elements((1, 6, 7, 8, 9))
