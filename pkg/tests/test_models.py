import pytest
import torch
import torch.nn as nn

from profeat.losses import cosine_rows
from profeat.models import (IdentityProjector, MissingPartError, ModelConfigError, ModelTriple,
                            ProjectorConfig, build_backbone, build_head, build_projector, forward,
                            init_student_from_teacher, load_checkpoint, module_hash,
                            save_checkpoint, CheckpointHeader)

from conftest import random_images


def _teacher(feature_dim=16, seed=0):
    bb = build_backbone("tiny_cnn", feature_dim, seed=seed, width=4)
    proj = build_projector(ProjectorConfig(), feature_dim, seed=seed)
    return ModelTriple(bb, proj).eval()


# -- backbones ----------------------------------------------------------------

def test_tiny_cnn_shape():
    bb = build_backbone("tiny_cnn", 24, seed=0)
    assert bb(torch.rand(4, 3, 16, 16)).shape == (4, 24)


def test_reference_backbone_widths():
    r18 = build_backbone("resnet18", seed=0)
    assert r18.feature_dim == 512
    assert r18.eval()(torch.rand(2, 3, 32, 32)).shape == (2, 512)
    assert build_backbone("wrn34_10", seed=0).feature_dim == 640


def test_build_is_deterministic_per_seed():
    a = build_backbone("tiny_cnn", 8, seed=3)
    b = build_backbone("tiny_cnn", 8, seed=3)
    c = build_backbone("tiny_cnn", 8, seed=4)
    assert module_hash(a) == module_hash(b) != module_hash(c)


def test_backbone_config_errors():
    with pytest.raises(ModelConfigError, match="unknown backbone"):
        build_backbone("vit_b16")
    with pytest.raises(ModelConfigError):
        build_backbone("tiny_cnn", feature_dim=1)


# -- projectors ---------------------------------------------------------------

def test_mlp2_default_widths():
    proj = build_projector(ProjectorConfig(), 640)
    assert proj.widths == [640, 640, 256]
    linears = [m for m in proj if isinstance(m, nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linears] == [(640, 640), (640, 256)]
    assert any(isinstance(m, nn.ReLU) for m in proj)


def test_linear_projector_is_one_affine_map():
    proj = build_projector(ProjectorConfig(depth="linear", widths=[640, 256]), 640)
    assert [type(m) for m in proj] == [nn.Linear]
    assert proj[0].bias is not None


def test_projector_config_errors():
    with pytest.raises(ModelConfigError):
        ProjectorConfig(depth="identity")
    with pytest.raises(ModelConfigError, match="narrower than 2"):
        build_projector(ProjectorConfig(widths=[16, 1, 8]), 16)
    with pytest.raises(ModelConfigError, match="input width"):
        build_projector(ProjectorConfig(widths=[32, 32, 8]), 16)
    with pytest.raises(ModelConfigError, match="widths"):
        ProjectorConfig(depth="mlp2", widths=[16, 8])


# -- composition --------------------------------------------------------------

def test_dimension_agreement_checked_at_composition():
    bb = build_backbone("tiny_cnn", 16, seed=0, width=4)
    with pytest.raises(ModelConfigError, match="head"):
        ModelTriple(bb, None, nn.Linear(8, 3))
    with pytest.raises(ModelConfigError, match="projector"):
        ModelTriple(bb, build_projector(ProjectorConfig(widths=[8, 8, 4]), 8))


def test_forward_spaces():
    m = _teacher()
    x = torch.rand(5, 3, 16, 16)
    assert forward("feature", m, x).shape == (5, 16)
    assert forward("projector", m, x).shape == (5, 256)
    with pytest.raises(MissingPartError, match="head"):
        forward("logits", m, x)
    m.head = build_head(16, 7)
    assert forward("logits", m, x).shape == (5, 7)
    bare = ModelTriple(m.backbone)
    with pytest.raises(MissingPartError, match="projector"):
        forward("projector", bare, x)


def test_inference_forward_is_deterministic():
    m = _teacher()
    x = torch.rand(5, 3, 16, 16)
    assert torch.equal(m.represent(x, "projector"), m.represent(x, "projector"))


def test_frozen_parts_survive_optimizer_steps():
    m = _teacher()
    m.head = build_head(16, 3)
    m.freeze("backbone")
    m.freeze("projector")
    before = {p: module_hash(getattr(m, p)) for p in ("backbone", "projector", "head")}
    opt = torch.optim.SGD(m.parameters(), lr=0.5, momentum=0.9, weight_decay=1e-3)
    m.train()
    for _ in range(3):
        x = torch.rand(8, 3, 16, 16)
        loss = m(x).logsumexp(1).mean() + m.represent(x, "projector").pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert module_hash(m.backbone) == before["backbone"]
    assert module_hash(m.projector) == before["projector"]
    assert module_hash(m.head) != before["head"]
    # frozen parts stay in inference mode, so batch statistics are not updated
    assert not m.backbone.training and m.head.training


# -- teacher/student init -----------------------------------------------------

def test_ours_init_copies_and_freezes_projector():
    teacher = _teacher()
    t, s = init_student_from_teacher(teacher, ProjectorConfig())
    assert module_hash(s.projector) == module_hash(teacher.projector) == module_hash(t.projector)
    assert "projector" in s.frozen and "projector" in t.frozen and "backbone" in t.frozen
    assert not any(p.requires_grad for p in t.parameters())
    assert all(p.requires_grad for p in s.backbone.parameters())
    assert not any(p.requires_grad for p in s.projector.parameters())


def test_ap2_init_is_random_trainable_without_teacher_projector():
    teacher = _teacher()
    cfg = ProjectorConfig(init="random", frozen=False, teacher_projector=False)
    t, s = init_student_from_teacher(teacher, cfg, seed=5)
    assert isinstance(t.projector, IdentityProjector)
    assert module_hash(s.projector) != module_hash(teacher.projector)
    assert all(p.requires_grad for p in s.projector.parameters())
    x = torch.rand(3, 3, 16, 16)
    assert s.eval().represent(x, "projector").shape == t.represent(x, "projector").shape


def test_student_features_match_teacher_after_init():
    teacher = _teacher()
    t, s = init_student_from_teacher(teacher, ProjectorConfig())
    x = random_images(6, 16, seed=2)
    cos = cosine_rows(t.represent(x), s.eval().represent(x))
    assert torch.allclose(cos, torch.ones(6), atol=1e-6)


def test_init_leaves_the_callers_teacher_untouched():
    teacher = _teacher()
    flags = [p.requires_grad for p in teacher.parameters()]
    init_student_from_teacher(teacher, ProjectorConfig())
    assert flags == [p.requires_grad for p in teacher.parameters()]


def test_pretrained_init_needs_teacher_projector():
    bare = ModelTriple(build_backbone("tiny_cnn", 8, seed=0, width=4))
    with pytest.raises(ModelConfigError, match="no projector"):
        init_student_from_teacher(bare, ProjectorConfig())
    t, s = init_student_from_teacher(bare, None)
    assert t.projector is None and s.projector is None


def test_shared_projector_is_one_module():
    teacher = _teacher()
    cfg = ProjectorConfig(init="random", frozen=False, shared_with_teacher=True)
    t, s = init_student_from_teacher(teacher, cfg, seed=1)
    assert t.projector is s.projector
    assert all(p.requires_grad for p in t.projector.parameters())


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    m = _teacher()
    m.head = build_head(16, 4, hidden=8)
    m.freeze("projector")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"teacher": m}, CheckpointHeader("abc", 3, 2, "teacher"), {"k": 1}, [])
    blob = load_checkpoint(path)
    r = blob["models"]["teacher"].eval()
    x = torch.rand(4, 3, 16, 16)
    assert torch.equal(r.represent(x, "projector"), m.represent(x, "projector"))
    assert torch.equal(r(x), m.eval()(x))
    assert blob["header"].seed == 3 and blob["header"].config_hash == "abc"
    assert r.frozen == {"projector"}


def test_checkpoint_version_is_checked(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {}, CheckpointHeader(), {}, [])
    blob = torch.load(path, weights_only=False)
    blob["version"] = 99
    torch.save(blob, path)
    with pytest.raises(ModelConfigError, match="version 99"):
        load_checkpoint(path)
    torch.save({"something": "else"}, path)
    with pytest.raises(ModelConfigError):
        load_checkpoint(path)
