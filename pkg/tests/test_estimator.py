import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from unifier.estimator import ContinualVQA, check_images
from unifier.exceptions import ConfigError, ProtocolError, ShapeError
from unifier.harness import build_stream, load_pools
from unifier.synth import generate_dataset


def small(tiny, **kw):
    return ContinualVQA(**{**tiny().estimator_params(0), **kw})


def test_params_round_trip_and_clone(tiny):
    model = small(tiny, tau=3.0)
    params = model.get_params()
    assert params["tau"] == 3.0 and params["mode"] == "unifier"
    model.set_params(lambda_vcc=0.5)
    twin = clone(model)
    assert twin.get_params() == model.get_params()
    assert not hasattr(twin, "encoder_")


def test_unfitted_model_refuses_inference(tiny):
    model = small(tiny)
    with pytest.raises(NotFittedError):
        model.transform(np.zeros((1, 32, 32, 3)))
    with pytest.raises(NotFittedError):
        model.predict_samples(generate_dataset("S1", 1, 1, 0)[1].samples)


def test_check_images():
    assert check_images(np.zeros((32, 32, 3))).shape == (1, 32, 32, 3)
    with pytest.raises(ShapeError):
        check_images(np.zeros((2, 32, 32, 1)))
    with pytest.raises(ShapeError):
        check_images(np.zeros((2, 16, 16, 3)), image_size=32)
    with pytest.raises(ValueError):
        check_images(np.full((1, 32, 32, 3), np.nan))


@pytest.mark.parametrize("kw,field", [({"mode": "ewc"}, "mode"), ({"batch_size": 0}, "batch_size"),
                                      ({"head_lr_scale": -1.0}, "head_lr_scale"), ({"tau": 0.0}, "tau")])
def test_bad_params_raise_on_build(tiny, kw, field):
    with pytest.raises(ConfigError) as exc:
        small(tiny, **kw)._build()
    assert exc.value.field == field


def test_fit_predict_and_transform_shapes(tiny):
    cfg = tiny()
    stream = build_stream(load_pools(cfg, 0)[0], 4)
    model = small(tiny).fit(stream.tasks[:2])
    _, test = generate_dataset("S1", 1, 3, 5)
    feats = model.transform(np.stack([s.image for s in test.samples]))
    assert feats.shape == (3, cfg.model.d1)
    answers = model.predict_samples(test.samples)
    for s, ans in zip(test.samples, answers):
        assert set(ans) == {q.kind for q, _ in s.questions}
        assert isinstance(ans["count"], int)
        assert ans["true_false"] in ("yes", "no")
    questions = [next(q for q, _ in s.questions if q.kind == "count") for s in test.samples]
    assert model.predict(np.stack([s.image for s in test.samples]), questions) == [a["count"] for a in answers]
    assert 0.0 <= model.score(test) <= 100.0


def test_one_branch_per_scenario(tiny):
    cfg = tiny(T=8)
    stream = build_stream(load_pools(cfg, 0)[0], 8)
    model = small(tiny)
    for task in stream:
        model.partial_fit(task)
    assert all(m.K == 4 for m in model.encoder_.csr_modules)
    assert sorted(model.branch_of_) == ["S1", "S2", "S3", "S4"]
    with pytest.raises(ProtocolError):
        model.expand(stream.tasks[0])


def test_trainable_set_is_active_branch_projectors_and_heads(tiny):
    cfg = tiny()
    stream = build_stream(load_pools(cfg, 0)[0], 4)
    model = small(tiny)
    model.partial_fit(stream.tasks[0])
    model.partial_fit(stream.tasks[1])
    expected = set()
    for m in model.encoder_.csr_modules:
        expected |= {id(p) for p in m.branches[-1].parameters()} | {id(p) for p in m.projector}
    expected |= {id(p) for p in model.heads_.parameters()}
    assert {id(p) for p in model.trainable_parameters()} == expected
    assert not any(p.requires_grad for p in model.encoder_.backbone_parameters())


def test_finetune_trains_everything(tiny):
    model = small(tiny, mode="finetune")
    model._build()
    every = model.encoder_.parameters() + model.heads_.parameters()
    assert {id(p) for p in model.trainable_parameters()} == {id(p) for p in every}
