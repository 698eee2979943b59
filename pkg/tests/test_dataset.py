import json
import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calico.dataset.annotations import AnnotatedImage, ObjectInstance, PartInstance, dump_annotations, parse_annotations
from calico.dataset.pipeline import StageError, build_dataset, load_samples, remap_images, write_outputs
from calico.dataset.samples import (COMMON_OBJECT, COMMON_PART, TASKS, UNIQUE_PART, PairSample,
                                    generate_pair_samples)
from calico.dataset.stats import compute_statistics, integer_median
from calico.dataset.stratify import equal_proportions, largest_remainder, stratify
from calico.dataset.synthetic import SYNTHETIC_ALLOWLIST, SYNTHETIC_MAPPING, generate_corpus
from calico.dataset.taxonomy import (CategoryPairTable, PairRow, PartTaxonomy, apply_curation,
                                     derive_shared_part_pairs, remap_categories, resolve_mapping)
from calico.errors import AnnotationParseError, CodecError, CurationError, MappingError
from calico.fixtures import taxonomy_of, write_synthetic_inputs
from calico.grounding.masks import MaskSet, rle_encode

# ADE20K object -> part rows for a few furniture categories and one unrelated object
ADE_ROWS = [
    ("ade20k", "chair", ["apron", "arm", "back", "base", "leg", "seat", "skirt", "stretcher"]),
    ("ade20k", "ottoman", ["back", "leg", "seat"]),
    ("ade20k", "armchair", ["apron", "arm", "back", "back pillow", "leg", "seat", "seat base"]),
    ("ade20k", "swivel chair", ["back", "base", "seat", "wheel"]),
    ("ade20k", "clock", ["face", "frame"]),
]


def block(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def small_doc(part_rle=None):
    h = w = 4
    obj = block(h, w, 0, 4, 0, 2)
    doc = {"images": [{"id": "a", "width": w, "height": h, "source": "s", "instances": [
        {"category": "Chair", "rle": rle_encode(obj), "parts": [
            {"name": "seat", "rle": part_rle or rle_encode(block(h, w, 0, 2, 0, 2))},
            {"name": "leg", "rle": rle_encode(block(h, w, 2, 4, 0, 2))}]},
        {"category": "stool", "rle": rle_encode(block(h, w, 0, 4, 2, 4)), "parts": [
            {"name": " Seat ", "rle": rle_encode(block(h, w, 0, 1, 2, 4))}]}]}]}
    return doc


# ---- ingestion -------------------------------------------------------------

def test_taxonomy_echoes_observed_pairs():
    ann = parse_annotations(json.dumps(small_doc()))
    assert ann.taxonomy.pairs() == {("chair", "seat"), ("chair", "leg"), ("stool", "seat")}
    assert ann.taxonomy.sources["chair"] == {"s"}
    assert ann.lint == []


def test_malformed_json_reports_byte_offset():
    text = '{"images": [ ]  x'
    with pytest.raises(AnnotationParseError) as exc:
        parse_annotations(text)
    assert exc.value.byte_offset == text.index("x")


def test_missing_key_is_a_parse_error():
    doc = small_doc()
    del doc["images"][0]["width"]
    with pytest.raises(AnnotationParseError, match="width"):
        parse_annotations(json.dumps(doc))


def test_rle_length_mismatch_is_a_codec_error():
    with pytest.raises(CodecError):
        parse_annotations(json.dumps(small_doc(part_rle=[3, 4])))


def test_part_outside_object_is_linted(caplog):
    h = w = 4
    doc = small_doc(part_rle=rle_encode(block(h, w, 0, 1, 0, 4)))  # spills 2 px into the stool
    with caplog.at_level(logging.WARNING):
        ann = parse_annotations(json.dumps(doc))
    assert [(x.category, x.part, x.outside_pixels) for x in ann.lint] == [("chair", "seat", 2)]
    assert "outside" in caplog.text


def test_synthetic_instance_counts_match_generator():
    corpus = generate_corpus(50, seed=5)
    ann = parse_annotations(dump_annotations(corpus.images))
    for im in ann.images:
        plan = corpus.plan[im.id]
        assert [i.category for i in im.instances] == [p.category for p in plan]
        assert [sorted(x.name for x in i.parts) for i in im.instances] == [sorted(p.parts) for p in plan]
    assert sum(len(i.instances) for i in ann.images) == sum(len(v) for v in corpus.plan.values())


# ---- remapping -------------------------------------------------------------

def test_quadruped_remaps_to_dog():
    tax = PartTaxonomy.from_rows([("partimagenet", "quadruped", ["head", "tail"]), ("paco", "bowl", ["rim"])])
    out = remap_categories(tax, {"quadruped": "dog"})
    assert set(out.objects) == {"dog", "bowl"}
    assert out.objects["dog"] == {"head", "tail"}


def test_identity_mapping_is_a_no_op():
    tax = PartTaxonomy.from_rows(ADE_ROWS)
    assert remap_categories(tax, {c: c for c in tax.objects}).objects == tax.objects


def test_collision_merges_part_sets():
    tax = PartTaxonomy.from_rows([("a", "quadruped", ["head", "tail"]), ("b", "canine", ["ear", "head"]),
                                  ("a", "dog", ["nose"])])
    out = remap_categories(tax, {"quadruped": "dog", "canine": "dog"})
    assert out.objects == {"dog": {"ear", "head", "nose", "tail"}}
    assert out.sources["dog"] == {"a", "b"}


def test_mapping_chains_resolve_and_cycles_fail():
    assert resolve_mapping({"a": "b", "b": "c"}) == {"a": "c", "b": "c"}
    with pytest.raises(MappingError, match="cyclic"):
        resolve_mapping({"a": "b", "b": "a"})


# ---- pair derivation and curation -------------------------------------------

def test_chair_ottoman_share_back_leg_seat():
    table = derive_shared_part_pairs(PartTaxonomy.from_rows(ADE_ROWS))
    assert table.find("ottoman", "chair").shared == {"back", "leg", "seat"}
    assert "seat" in table.find("armchair", "swivel chair").shared
    assert table.find("chair", "clock") is None


def test_pair_table_is_canonical_and_equals_intersections():
    tax = PartTaxonomy.from_rows(ADE_ROWS)
    table = derive_shared_part_pairs(tax)
    keys = [(r.a, r.b) for r in table.rows]
    assert keys == sorted(keys) and all(a < b for a, b in keys)
    for r in table.rows:
        assert r.shared == tax.objects[r.a] & tax.objects[r.b]
    expected = {(a, b) for a in tax.objects for b in tax.objects if a < b and tax.objects[a] & tax.objects[b]}
    assert set(keys) == expected


def test_curation_three_of_five():
    tax = PartTaxonomy.from_rows([("s", c, ["x"]) for c in "abc"] + [("s", "d", ["y"]), ("s", "e", ["y"]),
                                                                     ("s", "f", ["y"])])
    cands = derive_shared_part_pairs(tax)
    assert len(cands) == 6
    cands.rows = cands.rows[:5]
    table, summary = apply_curation(cands, [("b", "a"), ("c", "b"), ("d", "e")])
    assert (summary.candidates, summary.curated) == (5, 3)
    assert {(r.a, r.b) for r in table.curated_rows()} == {("a", "b"), ("b", "c"), ("d", "e")}


def test_empty_allowlist_curates_nothing():
    table, summary = apply_curation(derive_shared_part_pairs(PartTaxonomy.from_rows(ADE_ROWS)), [])
    assert summary.curated == 0 and table.curated_rows() == []


def test_allowlisted_non_candidate_is_rejected():
    cands = derive_shared_part_pairs(PartTaxonomy.from_rows(ADE_ROWS))
    with pytest.raises(CurationError):
        apply_curation(cands, [("chair", "clock")])


# ---- sample generation -----------------------------------------------------

def image_with(image_id, category, parts, source="ade20k", size=4):
    inst = ObjectInstance(category, block(size, size, 0, size, 0, size))
    for k, name in enumerate(parts):
        inst.parts.append(PartInstance(name, block(size, size, k % size, k % size + 1, 0, size)))
    return AnnotatedImage(image_id, size, size, source, [inst])


def curated_table(rows):
    tax = PartTaxonomy.from_rows(rows)
    return apply_curation(derive_shared_part_pairs(tax), [("chair", "ottoman")])[0]


def test_chair_ottoman_common_parts_are_shared_labels():
    chair = image_with("c1", "chair", ["arm", "back", "leg", "seat"])
    ottoman = image_with("o1", "ottoman", ["leg", "seat"])
    table = curated_table(ADE_ROWS)
    samples = generate_pair_samples([chair, ottoman], table, COMMON_PART, seed=0)
    cross = [s for s in samples if s.pair == ("chair", "ottoman")]
    assert len(cross) == 1
    a, b = cross[0].label_sets()
    assert a == b == {"leg", "seat"}
    assert a <= {"back", "leg", "seat"}


def test_image_with_itself_gives_no_unique_parts():
    chair = image_with("c1", "chair", ["back", "seat"])
    chair2 = image_with("c2", "chair", ["back", "seat"])
    samples = generate_pair_samples([chair, chair2], curated_table(ADE_ROWS), UNIQUE_PART, seed=0)
    assert samples == []


def test_no_valid_pairs_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out = generate_pair_samples([image_with("c1", "chair", ["back"])], curated_table(ADE_ROWS), COMMON_OBJECT, 0)
    assert out == [] and "no valid" in caplog.text


def test_sample_json_round_trip():
    chair, ottoman = image_with("c1", "chair", ["back", "seat"]), image_with("o1", "ottoman", ["seat"])
    s = generate_pair_samples([chair, ottoman], curated_table(ADE_ROWS), UNIQUE_PART, 0)[0]
    t = PairSample.from_json(json.loads(json.dumps(s.to_json())))
    assert t.sample_id == s.sample_id and t.label_sets() == s.label_sets()
    assert all(np.array_equal(x, y) for x, y in zip(s.answer_masks(), t.answer_masks()))


def _synthetic(n_images, seed):
    corpus = generate_corpus(n_images, seed)
    remap_images(corpus.images, SYNTHETIC_MAPPING)
    for plan in corpus.plan.values():
        for p in plan:
            p.category = SYNTHETIC_MAPPING.get(p.category, p.category)
    cands = derive_shared_part_pairs(taxonomy_of(corpus.images))
    known = {(r.a, r.b) for r in cands.rows}
    table, _ = apply_curation(cands, [p for p in SYNTHETIC_ALLOWLIST if tuple(sorted(p)) in known])
    samples = [s for t in TASKS for s in generate_pair_samples(corpus.images, table, t, seed)]
    return corpus, table, samples


def planned_gt(corpus, s):
    """Expected (labels per side, instance count per side) from the generator plan alone."""
    ca, cb = s.pair
    pa, pb = corpus.plan[s.image_a], corpus.plan[s.image_b]
    if s.task == COMMON_OBJECT:
        return [Counter(i.category for i in pa if i.category == ca),
                Counter(i.category for i in pb if i.category == cb)]
    va, vb = corpus.visible_parts(s.image_a, ca), corpus.visible_parts(s.image_b, cb)
    na, nb = (va & vb, va & vb) if s.task == COMMON_PART else (va - vb, vb - va)
    return [Counter(p for i in pa if i.category == ca for p in i.parts if p in na),
            Counter(p for i in pb if i.category == cb for p in i.parts if p in nb)]


def test_synthetic_gt_matches_generator_plan():
    corpus, _, samples = _synthetic(60, 2)
    assert {s.task for s in samples} == set(TASKS)
    for s in samples:
        assert [Counter(ms.labels) for ms in s.gt] == planned_gt(corpus, s)


def test_synthetic_sample_enumeration_matches_plan():
    corpus, table, samples = _synthetic(40, 9)
    curated = table.curated_rows()
    cats = {c for r in curated for c in (r.a, r.b)}
    ids = sorted(corpus.plan)
    has = {i: {p.category for p in corpus.plan[i]} for i in ids}
    expected = set()
    for task in TASKS:
        pairings = {(c, c) for c in cats} | (set() if task == COMMON_OBJECT else {(r.a, r.b) for r in curated})
        for ca, cb in pairings:
            for x in ids:
                for y in ids:
                    if x == y or ca not in has[x] or cb not in has[y] or (ca == cb and x > y):
                        continue
                    va, vb = corpus.visible_parts(x, ca), corpus.visible_parts(y, cb)
                    if task == COMMON_PART and not va & vb:
                        continue
                    if task == UNIQUE_PART and va == vb:
                        continue
                    expected.add((task, x, y, ca, cb))
    assert {(s.task, s.image_a, s.image_b, *s.pair) for s in samples} == expected


def test_constraints_hold_on_every_sample():
    _, _, samples = _synthetic(200, 0)
    assert samples
    for s in samples:
        a, b = s.label_sets()
        if s.task == UNIQUE_PART:
            assert not a & b
        else:
            assert a & b


def test_cap_bounds_samples_per_pairing():
    corpus, table, _ = _synthetic(60, 1)
    out = generate_pair_samples(corpus.images, table, COMMON_OBJECT, seed=0, cap=3)
    assert max(Counter(s.pair for s in out).values()) <= 3
    again = generate_pair_samples(corpus.images, table, COMMON_OBJECT, seed=0, cap=3)
    assert [s.sample_id for s in out] == [s.sample_id for s in again]


# ---- stratification ---------------------------------------------------------

def fake_samples(counts):
    out = []
    for (source, task), n in counts.items():
        for k in range(n):
            ms = [MaskSet(1, 1, 1), MaskSet(2, 1, 1)]
            out.append(PairSample(task, f"{source}{k}a", f"{source}{k}b", ms, ("x", "x"), source))
    return out


def test_equal_thirds_of_999():
    props = {("ade20k", "t"): 1 / 3, ("paco", "t"): 1 / 3, ("pin", "t"): 1 / 3}
    res = stratify(fake_samples({k: 400 for k in props}), props, 999, seed=0)
    assert res.counts == {k: 333 for k in props}
    assert not res.shortfall


def test_skewed_quotas_by_hand():
    # 10 * (0.55, 0.25, 0.2) = 5.5, 2.5, 2.0 -> floors 5, 2, 2; one leftover unit goes to the
    # tied .5 remainders in key order, i.e. ("a", "t")
    props = {("a", "t"): 0.55, ("b", "t"): 0.25, ("c", "t"): 0.2}
    assert largest_remainder(10, props) == {("a", "t"): 6, ("b", "t"): 2, ("c", "t"): 2}
    # 7 * (0.5, 0.3, 0.2) = 3.5, 2.1, 1.4 -> 3, 2, 1 with remainders .5, .1, .4 -> a then c
    props = {("a", "t"): 0.5, ("b", "t"): 0.3, ("c", "t"): 0.2}
    assert largest_remainder(7, props) == {("a", "t"): 4, ("b", "t"): 2, ("c", "t"): 1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=6), st.integers(0, 500))
def test_quotas_sum_and_stay_within_one(weights, total):
    keys = [(f"s{i}", "t") for i in range(len(weights))]
    props = {k: w / sum(weights) for k, w in zip(keys, weights)}
    q = largest_remainder(total, props)
    assert sum(q.values()) == total
    assert all(abs(q[k] - total * props[k]) < 1 for k in keys)


def test_shortfall_is_reported_not_rebalanced(caplog):
    props = {("a", "t"): 0.5, ("b", "t"): 0.5}
    with caplog.at_level(logging.WARNING):
        res = stratify(fake_samples({("a", "t"): 2}), props, 10, seed=0)
    assert res.counts == {("a", "t"): 2, ("b", "t"): 0}
    assert res.shortfall == {("a", "t"): 3, ("b", "t"): 5}
    assert len(res.selected) == 2
    assert "empty" in caplog.text


def test_stratify_is_seed_deterministic():
    counts = {("a", COMMON_PART): 30, ("b", UNIQUE_PART): 30}
    props = equal_proportions(["a", "b"], [COMMON_PART, UNIQUE_PART])
    pool = fake_samples(counts)
    ids = lambda r: [s.sample_id for s in r.selected]
    assert ids(stratify(pool, props, 20, seed=4)) == ids(stratify(pool[::-1], props, 20, seed=4))
    assert ids(stratify(pool, props, 20, seed=4)) != ids(stratify(pool, props, 20, seed=5))


def test_bad_proportions_rejected():
    with pytest.raises(ValueError):
        stratify([], {("a", "t"): 0.7}, 5, 0)


# ---- statistics -------------------------------------------------------------

def object_sample(n_a, n_b, k):
    gt = [MaskSet(1, 2, 2), MaskSet(2, 2, 2)]
    for ms, n in zip(gt, (n_a, n_b)):
        for _ in range(n):
            ms.add(np.ones((2, 2), dtype=bool), "chair")
    return PairSample(COMMON_OBJECT, f"a{k}", f"b{k}", gt, ("chair", "chair"), "s")


def test_two_sample_arithmetic():
    stats = compute_statistics([object_sample(1, 1, 0), object_sample(2, 2, 1)])[COMMON_OBJECT]
    assert (stats["total_instances"], stats["avg_instances"], stats["max_instances"],
            stats["median_instances"]) == (6, 3, 4, 3)
    assert "part_ranking" not in stats


def test_integer_median():
    assert integer_median([4, 2]) == 3
    assert integer_median([3, 2]) == 2
    assert integer_median([4, 1, 3, 2]) == 2
    assert integer_median([5, 1, 9]) == 5


def test_stats_match_generator_bookkeeping():
    corpus, _, samples = _synthetic(80, 3)
    stats = compute_statistics(samples)
    for task in TASKS:
        group = [s for s in samples if s.task == task]
        counts = [sum(sum(c.values()) for c in planned_gt(corpus, s)) for s in group]
        row = stats[task]
        assert row["samples"] == len(group)
        assert row["total_instances"] == sum(counts)
        assert row["max_instances"] == max(counts)
        srt = sorted(counts)
        m = len(srt) // 2
        assert row["median_instances"] == (srt[m] if len(srt) % 2 else (srt[m - 1] + srt[m]) // 2)
        assert row["avg_instances"] == sum(counts) / len(counts)
        labels = Counter()
        for s in group:
            for c in planned_gt(corpus, s):
                labels.update(c)
        if task != COMMON_OBJECT:
            assert dict(row["part_ranking"]) == dict(labels)
        cats = Counter(c for s in group for c in set(s.pair))
        assert dict(row["category_ranking"]) == dict(cats)


def test_stats_invariant_under_reordering():
    _, _, samples = _synthetic(40, 6)
    rng = np.random.default_rng(0)
    shuffled = [samples[i] for i in rng.permutation(len(samples))]
    assert compute_statistics(samples) == compute_statistics(shuffled)


def test_stats_need_samples():
    with pytest.raises(ValueError):
        compute_statistics([])


# ---- pipeline ---------------------------------------------------------------

def test_pipeline_is_byte_identical(tmp_path):
    paths = write_synthetic_inputs(tmp_path / "in", 30, seed=1)
    inputs = {"annotations": paths["annotations"], "allowlist": paths["allowlist"], "mapping": paths["mapping"]}
    blobs = []
    for run in ("r1", "r2"):
        res = build_dataset(paths["annotations"], paths["allowlist"], paths["mapping"], seed=1)
        write_outputs(res, tmp_path / run, inputs, seed=1)
        blobs.append({p.relative_to(tmp_path / run): p.read_bytes() for p in sorted((tmp_path / run).rglob("*"))
                      if p.is_file()})
    assert blobs[0] == blobs[1]
    assert any(str(k).startswith("images") for k in blobs[0])
    samples = load_samples(tmp_path / "r1" / "samples.jsonl")
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert len(samples) == manifest["counts"]["samples"]


def test_pipeline_stage_errors_name_the_stage(tmp_path):
    paths = write_synthetic_inputs(tmp_path, 10, seed=0)
    paths["allowlist"].write_text("chair\tbottle\n", encoding="utf-8")
    with pytest.raises(StageError) as exc:
        build_dataset(paths["annotations"], paths["allowlist"], paths["mapping"], seed=0)
    assert exc.value.stage == "curate"
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(StageError) as exc:
        build_dataset(bad, paths["allowlist"], None, seed=0)
    assert exc.value.stage == "load"


def test_pipeline_quota_stratifies_per_source(tmp_path):
    paths = write_synthetic_inputs(tmp_path, 60, seed=2)
    res = build_dataset(paths["annotations"], paths["allowlist"], paths["mapping"], seed=2, per_source_quota=9)
    per = Counter(s.source for s in res.samples)
    for src, n in per.items():
        short = sum(v for (s, _), v in res.shortfall.items() if s == src)
        assert n + short == 9
