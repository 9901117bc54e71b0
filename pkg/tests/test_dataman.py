import numpy as np
import pytest

from nlbench import dataman
from nlbench.dataman import DatasetManifest, GroupingMap, ManifestError, Record
from nlbench.presets import PROFILES, profile


def make_manifest(counts, name="ds", test_per_class=2):
    recs = []
    for k, n in enumerate(counts):
        recs += [Record(f"tr{k}_{i}", f"img/{k}_{i}.png", k, "train") for i in range(n)]
        recs += [Record(f"te{k}_{i}", f"img/t{k}_{i}.png", k, "test") for i in range(test_per_class)]
    return DatasetManifest(tuple(recs), tuple(f"c{k}" for k in range(len(counts))), name=name)


def write(tmp_path, text):
    p = tmp_path / "m.csv"
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "sample_id,path,label,split\na,a.png,0,train\nb,b.png,1,train\nc,c.png,2,test\n")
    m = dataman.load_manifest(p)
    assert len(m.records) == 3 and m.num_classes == 3
    assert m.records[2].split == "test"


def test_round_trip(tmp_path):
    m = make_manifest([3, 2])
    p = dataman.save_manifest(m, tmp_path / "x.csv")
    back = dataman.load_manifest(p)
    assert back.records == m.records and back.class_names == m.class_names


def test_label_out_of_declared_range(tmp_path):
    head = "# num_classes=9\nsample_id,path,label,split\n"
    p = write(tmp_path, head + "a,a.png,9,train\n")
    with pytest.raises(ManifestError):
        dataman.load_manifest(p)


def test_duplicate_id(tmp_path):
    p = write(tmp_path, "sample_id,path,label,split\na,a.png,0,train\na,b.png,1,train\n")
    with pytest.raises(ManifestError):
        dataman.load_manifest(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataman.load_manifest(tmp_path / "nope.csv")


def test_malformed_row_rejected(tmp_path):
    p = write(tmp_path, "sample_id,path,label,split\na,a.png,zero,train\n")
    with pytest.raises(ManifestError):
        dataman.load_manifest(p)


def test_test_record_cannot_have_fold():
    with pytest.raises(ManifestError):
        DatasetManifest((Record("a", "a", 0, "test", fold=1),), ("x",))


def test_covid_sized_manifest(tmp_path):
    counts = (9561, 9010, 8561)
    lines = ["# class_names=Covid|Non-Covid|Normal", "sample_id,path,label,split"]
    lines += [f"s{k}_{i},p,{k},train" for k, n in enumerate(counts) for i in range(n)]
    m = dataman.load_manifest(write(tmp_path, "\n".join(lines) + "\n"))
    assert m.num_classes == 3 and len(m.train) == 27_132


def test_fetal_grouping():
    fetal = profile("fetal")
    m = make_manifest([2] * 6)
    m = DatasetManifest(m.records, fetal.class_names)
    g = fetal.grouping(3)
    out = dataman.apply_grouping(m, g)
    assert out.num_classes == 3
    assert [out.records[i].label for i in range(len(out.records))] == [g.assignment[r.label] for r in m.records]
    assert {g.assignment[i] for i in range(4)} == {0}
    assert [r.sample_id for r in out.records] == [r.sample_id for r in m.records]


def test_identity_grouping_unchanged():
    m = make_manifest([3, 1, 2])
    assert dataman.apply_grouping(m, GroupingMap.identity(m.class_names)) == m


def test_dermnet_13_groups():
    d = profile("dermnet")
    g = d.grouping(13)
    assert g.num_groups == 13
    assert [len(x) for x in g.members()] == [3, 2, 2, 2, 1, 2, 2, 1, 2, 3, 1, 1, 1]


@pytest.mark.parametrize("key", sorted(PROFILES))
def test_shipped_groupings_are_partitions(key):
    p = PROFILES[key]
    for k in p.groupings:
        g = p.grouping(k)
        members = g.members()
        assert g.num_groups == k
        assert sum(len(x) for x in members) == p.num_classes
        assert sorted(c for x in members for c in x) == list(range(p.num_classes))


def test_grouping_missing_class():
    m = make_manifest([1, 1, 1])
    with pytest.raises(ManifestError):
        dataman.apply_grouping(m, GroupingMap(("a",), {0: 0, 1: 0}))


def test_grouping_file_resolves_names(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("original_class,group\nc0,x\nc1,y\nc2,x\n")
    g = dataman.load_grouping(p, ["c0", "c1", "c2"])
    assert g.group_names == ("x", "y") and g.assignment == {0: 0, 1: 1, 2: 0}


def test_subsample_disjoint_folds():
    m = make_manifest([40_000, 35_000, 25_000], test_per_class=1)
    folds = dataman.subsample(m, 7000, seed=1, num_folds=6)
    assert len(folds) == 6
    sets = [{r.sample_id for r in f.train} for f in folds]
    assert all(len(s) == 7000 for s in sets)
    for i in range(6):
        for j in range(i + 1, 6):
            assert not sets[i] & sets[j]
    assert all(f.test == m.test for f in folds)


def test_subsample_full_permutation():
    m = make_manifest([5, 5])
    (f,) = dataman.subsample(m, 10, seed=0, num_folds=1)
    assert sorted(r.sample_id for r in f.train) == sorted(r.sample_id for r in m.train)


def test_subsample_deterministic():
    m = make_manifest([50, 50])
    a = dataman.subsample(m, 30, seed=4, num_folds=5)
    b = dataman.subsample(m, 30, seed=4, num_folds=5)
    assert [dataman.dump_manifest(x) for x in a] == [dataman.dump_manifest(x) for x in b]
    # 5 * 30 > 100: independent draws, still exactly n distinct records each
    assert all(len({r.sample_id for r in f.train}) == 30 for f in a)


def test_subsample_too_many():
    with pytest.raises(ValueError):
        dataman.subsample(make_manifest([3]), 4, seed=0)


def test_merge_two():
    a, b = make_manifest([2, 2, 2], "a"), make_manifest([1, 1, 1], "b")
    m = dataman.merge_datasets([a, b])
    assert m.num_classes == 6
    assert m.records[-1].sample_id.startswith("b/") and m.records[-1].label >= 3


def test_merge_reference_class_count():
    sizes = [9, 3, 7, 23, 6]
    ms = [make_manifest([1] * s, f"d{i}") for i, s in enumerate(sizes)]
    assert dataman.merge_datasets(ms).num_classes == sum(sizes) == 48


def test_merge_single_rejected():
    with pytest.raises(ValueError):
        dataman.merge_datasets([make_manifest([1])])


def test_class_weights():
    np.testing.assert_array_equal(dataman.class_weights(make_manifest([4, 4])).weights, [1.0, 1.0])
    w = dataman.class_weights([9561, 9010, 8561]).weights
    np.testing.assert_allclose(w, [1.0, 9561 / 9010, 9561 / 8561])
    np.testing.assert_array_equal(dataman.class_weights([100, 1]).weights, [1.0, 100.0])
    with pytest.raises(ValueError):
        dataman.class_weights([3, 0])


def test_class_weights_property():
    rng = np.random.default_rng(0)
    for _ in range(200):
        counts = rng.integers(1, 1000, rng.integers(2, 10))
        w = dataman.class_weights(counts).weights
        assert w.min() == 1.0
        np.testing.assert_allclose(w * counts, counts.max(), rtol=1e-12)


def test_unlabeled_view_has_no_labels():
    v = make_manifest([2, 2]).unlabeled_view()
    assert not hasattr(v, "labels") and len(v) == 4


def test_with_observed():
    m = make_manifest([2, 2])
    out = m.with_observed([1, 1, 0, 0])
    assert out.labels("train", observed=True).tolist() == [1, 1, 0, 0]
    assert out.labels("train").tolist() == [0, 0, 1, 1]
