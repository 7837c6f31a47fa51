import dataclasses
import itertools

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from unifier.exceptions import ConfigError
from unifier.synth import (
    DEFAULT_SPECS,
    IMAGE_SIZE,
    N_CLASSES,
    SCENARIOS,
    SceneSpec,
    dataset_checksum,
    generate_dataset,
    generate_samples,
    make_questions,
    read_jsonl,
    render_scene,
    write_jsonl,
)


def test_forced_count():
    spec = dataclasses.replace(DEFAULT_SPECS["S3"], count_range=(3, 3))
    for seed in range(10):
        rendered = render_scene(spec, seed)
        assert rendered is None or len(rendered[1]) == 3


def test_render_is_deterministic():
    a, b = render_scene(DEFAULT_SPECS["S1"], 42), render_scene(DEFAULT_SPECS["S1"], 42)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1] == b[1]


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_images_and_boxes_in_bounds(scenario):
    spec = DEFAULT_SPECS[scenario]
    for s in generate_samples(scenario, 40, 0, 0):
        assert s.image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert spec.count_range[0] <= len(s.objects) <= min(spec.count_range[1], 8)
        for o in s.objects:
            assert 0 <= o.x1 < o.x2 <= IMAGE_SIZE and 0 <= o.y1 < o.y2 <= IMAGE_SIZE
            assert 0 <= o.class_id < N_CLASSES


def test_spec_guards():
    with pytest.raises(ConfigError):
        SceneSpec("X", (0, 2), (3, 5), "flat", (0.5, 0.5, 0.5), 0.0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        SceneSpec("X", (1, 2), (3, 40), "flat", (0.5, 0.5, 0.5), 0.0, 0.0, 1.0)


def test_specs_pairwise_differ_in_two_fields():
    fields = [f.name for f in dataclasses.fields(SceneSpec) if f.name != "scenario"]
    for a, b in itertools.combinations(SCENARIOS, 2):
        sa, sb = DEFAULT_SPECS[a], DEFAULT_SPECS[b]
        assert sum(getattr(sa, f) != getattr(sb, f) for f in fields) >= 2


def test_scenario_statistics_follow_their_roles():
    s1, s2, s3, s4 = (DEFAULT_SPECS[s] for s in SCENARIOS)
    assert s1.size_range[1] < s3.size_range[0]  # many tiny objects
    assert s2.blur and s2.contrast < min(s1.contrast, s3.contrast, s4.contrast)
    assert s3.occlusion_prob > max(s1.occlusion_prob, s2.occlusion_prob, s4.occlusion_prob)
    assert s4.count_range[1] <= 3 and s4.size_range[0] > s3.size_range[1]


# -- questions -------------------------------------------------------------------


def test_answers_follow_the_object_list():
    for s in generate_samples("S3", 30, 1, 0):
        answers = {q.kind: (q, a) for q, a in s.questions}
        assert answers["count"][1] == len(s.objects)
        assert answers["classification"][1] == sorted({o.class_id for o in s.objects})
        boxes = [[o.x1, o.y1, o.x2, o.y2, o.class_id] for o in s.objects]
        assert answers["grounding"][1] == boxes
        q, fine = answers["fine_grounding"]
        assert q.class_id in s.classes
        assert fine == [b for b in boxes if b[4] == q.class_id]


def test_true_false_alternates_and_negatives_are_absent():
    samples = generate_samples("S2", 40, 3, 0)
    for i, s in enumerate(samples):
        q, a = next((q, a) for q, a in s.questions if q.kind == "true_false")
        if a == "yes":
            assert q.class_id in s.classes
        else:
            assert q.class_id not in s.classes
        assert a == ("yes" if i % 2 == 0 else "no")


def test_grounding_only_scenario_has_no_fine_question():
    s = generate_samples("S4", 3, 0, 0)[0]
    assert "fine_grounding" not in {q.kind for q, _ in s.questions}
    assert "fine_grounding" in {q.kind for q, _ in make_questions(s, 0, None)}


# -- datasets ------------------------------------------------------------------------


def test_dataset_split_sizes_and_disjointness():
    train, test = generate_dataset("S1", 12, 7, 5)
    assert len(train) == 12 and len(test) == 7
    assert not set(train.sample_ids) & set(test.sample_ids)
    assert not {s.seed for s in train.samples} & {s.seed for s in test.samples}


def test_dataset_checksum_replays():
    a, _ = generate_dataset("S2", 8, 2, 9)
    b, _ = generate_dataset("S2", 8, 2, 9)
    c, _ = generate_dataset("S2", 8, 2, 10)
    assert dataset_checksum(a.samples) == dataset_checksum(b.samples)
    assert dataset_checksum(a.samples) != dataset_checksum(c.samples)


def test_dataset_rejects_empty_split():
    with pytest.raises(ConfigError):
        generate_dataset("S1", 0, 3, 0)


def test_jsonl_round_trip_is_exact(tmp_path):
    samples = generate_samples("S3", 5, 2, 1)
    path = write_jsonl(samples, tmp_path / "d" / "test.jsonl")
    back = read_jsonl(path)
    assert dataset_checksum(back) == dataset_checksum(samples)
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.questions == b.questions


# -- separability ----------------------------------------------------------------------


def _stats(samples):
    imgs = np.stack([s.image for s in samples])
    return np.concatenate([imgs.mean(axis=(1, 2)), imgs.std(axis=(1, 2))], axis=1)


def test_scenarios_are_linearly_separable_from_pixel_statistics():
    train = [s for scen in SCENARIOS for s in generate_samples(scen, 100, 0, 0)]
    test = [s for scen in SCENARIOS for s in generate_samples(scen, 100, 0, 1)]
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(_stats(train), [s.scenario for s in train])
    accuracy = probe.score(_stats(test), [s.scenario for s in test])
    assert accuracy >= 0.9
