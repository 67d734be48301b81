"""Backbones, projection heads and the (backbone, projector, head) triple.

The triple is how both teacher and student are represented: ``feature``
space is the backbone output, ``projector`` space is the projector applied to
it, and ``logits`` is the classification head applied to the backbone.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "profeat-checkpoint"
CHECKPOINT_VERSION = 1

SPACES = ("feature", "projector", "logits")


class ModelConfigError(ValueError):
    pass


class MissingPartError(ModelConfigError):
    pass


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------

def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyCNN(nn.Module):
    """Three conv blocks, global pooling and a linear map to ``feature_dim``.

    The final map is linear (no ReLU) so features are signed and independent
    random networks produce near-orthogonal representations.
    """

    def __init__(self, feature_dim: int = 64, width: int = 16, in_channels: int = 3):
        super().__init__()
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            _conv_bn(in_channels, width),
            _conv_bn(width, 2 * width, stride=2),
            _conv_bn(2 * width, 4 * width, stride=2),
        )
        self.fc = nn.Linear(4 * width, feature_dim)

    def forward(self, x):
        h = self.body(x)
        return self.fc(h.mean(dim=(2, 3)))


class _BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR ResNet-18 (3x3 stem, no max-pool); 512-d pooled features."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.feature_dim = 512
        self.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        layers, cin = [], 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
            cin = cout
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        out = self.layers(F.relu(self.bn1(self.conv1(x))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class _WideBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.equal = cin == cout and stride == 1
        self.shortcut = None if self.equal else nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv2(F.relu(self.bn2(self.conv1(o))))
        return y + (x if self.equal else self.shortcut(o))


class WideResNet(nn.Module):
    """WRN-depth-k with pre-activation blocks; WRN-34-10 gives 640-d features."""

    def __init__(self, depth: int = 34, widen: int = 10, in_channels: int = 3):
        super().__init__()
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.feature_dim = widths[3]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        blocks, cin = [], widths[0]
        for cout, stride in zip(widths[1:], (1, 2, 2)):
            for i in range(n):
                blocks.append(_WideBlock(cin, cout, stride if i == 0 else 1))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)

    def forward(self, x):
        out = F.relu(self.bn(self.blocks(self.conv1(x))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


BACKBONES = ("tiny_cnn", "resnet18", "wrn34_10")


def build_backbone(arch: str = "tiny_cnn", feature_dim: int = 64, seed: Optional[int] = None,
                   width: int = 16, in_channels: int = 3) -> nn.Module:
    if feature_dim < 2:
        raise ModelConfigError("feature_dim must be at least 2")
    if seed is not None:
        torch.manual_seed(seed)
    if arch == "tiny_cnn":
        net = TinyCNN(feature_dim, width=width, in_channels=in_channels)
    elif arch == "resnet18":
        net = ResNet18(in_channels)
    elif arch == "wrn34_10":
        net = WideResNet(34, 10, in_channels)
    else:
        raise ModelConfigError(f"unknown backbone arch {arch!r}; choose from {BACKBONES}")
    net.arch_spec = {"arch": arch, "feature_dim": net.feature_dim, "width": width,
                     "in_channels": in_channels}
    return net


# ---------------------------------------------------------------------------
# projector and heads
# ---------------------------------------------------------------------------

_DEPTH_LAYERS = {"linear": 1, "mlp2": 2, "mlp3": 3}


@dataclass
class ProjectorConfig:
    """Projector architecture plus how the student obtains and trains it.

    ``teacher_projector`` says whether the distillation teacher keeps its own
    (frozen, pretrained) projector.  When it is False the teacher's projector
    space falls back to its feature space.
    """

    depth: str = "mlp2"
    widths: Optional[list] = None
    init: str = "pretrained"
    shared_with_teacher: bool = False
    frozen: bool = True
    teacher_projector: bool = True
    norm: bool = True

    def __post_init__(self):
        if self.depth not in _DEPTH_LAYERS:
            raise ModelConfigError(
                f"projector depth {self.depth!r} not allowed; choose from {list(_DEPTH_LAYERS)}"
            )
        if self.init not in ("random", "pretrained"):
            raise ModelConfigError(f"projector init must be random or pretrained, got {self.init!r}")
        if self.widths is not None:
            self.widths = [int(w) for w in self.widths]
            if len(self.widths) != _DEPTH_LAYERS[self.depth] + 1:
                raise ModelConfigError(
                    f"{self.depth} projector needs {_DEPTH_LAYERS[self.depth] + 1} widths, "
                    f"got {self.widths}"
                )
        if self.shared_with_teacher and not self.teacher_projector:
            raise ModelConfigError("a shared projector implies the teacher has one")

    def resolved_widths(self, in_dim: int) -> list:
        if self.widths is not None:
            return list(self.widths)
        return [in_dim] * _DEPTH_LAYERS[self.depth] + [256]


class Projector(nn.Sequential):
    def __init__(self, widths: list, norm: bool = True):
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            layers.append(nn.Linear(a, b, bias=last or not norm))
            if not last:
                if norm:
                    layers.append(nn.BatchNorm1d(b))
                layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)
        self.widths = list(widths)
        self.norm = norm
        self.out_dim = widths[-1]


def build_projector(cfg: ProjectorConfig, in_dim: int, seed: Optional[int] = None) -> Projector:
    widths = cfg.resolved_widths(in_dim)
    if widths[0] != in_dim:
        raise ModelConfigError(f"projector input width {widths[0]} != backbone dim {in_dim}")
    if min(widths) < 2:
        raise ModelConfigError(f"projector widths {widths} contain a layer narrower than 2")
    if seed is not None:
        torch.manual_seed(seed)
    return Projector(widths, norm=cfg.norm)


class MLPHead(nn.Sequential):
    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True),
                         nn.Linear(hidden, num_classes))


def build_head(in_dim: int, num_classes: int, hidden: Optional[int] = None) -> nn.Module:
    if hidden:
        head = MLPHead(in_dim, hidden, num_classes)
    else:
        head = nn.Linear(in_dim, num_classes)
    head.arch_spec = {"in_dim": in_dim, "num_classes": num_classes, "hidden": hidden}
    return head


# ---------------------------------------------------------------------------
# the triple
# ---------------------------------------------------------------------------

class ModelTriple(nn.Module):
    """Backbone with optional projector and head, and per-part freeze flags.

    Frozen parts have ``requires_grad=False`` and are held in inference mode
    even when the triple is put in training mode, so neither optimizer steps
    nor normalization statistics can touch them.
    """

    PARTS = ("backbone", "projector", "head")

    def __init__(self, backbone: nn.Module, projector: Optional[nn.Module] = None,
                 head: Optional[nn.Module] = None, frozen=()):
        super().__init__()
        self.backbone = backbone
        self.projector = projector
        self.head = head
        self.frozen = set()
        dim = getattr(backbone, "feature_dim", None)
        for name, part in (("projector", projector), ("head", head)):
            want = _input_dim(part)
            if part is not None and dim is not None and want is not None and want != dim:
                raise ModelConfigError(f"{name} expects input dim {want} but backbone gives {dim}")
        for part in frozen:
            self.freeze(part)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def freeze(self, part: str = "all") -> "ModelTriple":
        names = self.PARTS if part == "all" else (part,)
        for name in names:
            module = getattr(self, name)
            if module is None:
                continue
            self.frozen.add(name)
            for p in module.parameters():
                p.requires_grad_(False)
            module.eval()
        return self

    def unfreeze(self, part: str) -> "ModelTriple":
        module = getattr(self, part)
        self.frozen.discard(part)
        if module is not None:
            for p in module.parameters():
                p.requires_grad_(True)
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        for name in self.frozen:
            module = getattr(self, name)
            if module is not None:
                module.eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def part(self, name: str) -> nn.Module:
        module = getattr(self, name)
        if module is None:
            raise MissingPartError(f"model has no {name}")
        return module

    def represent(self, x: torch.Tensor, space: str = "feature") -> torch.Tensor:
        if space not in SPACES:
            raise ModelConfigError(f"unknown space {space!r}; choose from {SPACES}")
        if space == "projector":
            proj = self.part("projector")
            return proj(self.backbone(x))
        if space == "logits":
            head = self.part("head")
            return head(self.backbone(x))
        return self.backbone(x)

    def represent_both(self, x: torch.Tensor, need_projector: bool = True) -> tuple:
        """Feature and projector outputs from a single backbone pass."""
        f = self.backbone(x)
        if not need_projector:
            return f, None
        return f, self.part("projector")(f)

    def forward(self, x):
        if self.head is None:
            return self.backbone(x)
        return self.head(self.backbone(x))

    def arch(self) -> dict:
        proj = self.projector
        return {
            "backbone": dict(self.backbone.arch_spec),
            "projector": None if proj is None else (
                {"identity": True} if isinstance(proj, nn.Identity)
                else {"widths": list(proj.widths), "norm": proj.norm}),
            "head": None if self.head is None else dict(self.head.arch_spec),
            "frozen": sorted(self.frozen),
        }


def _input_dim(module) -> Optional[int]:
    if module is None:
        return None
    for m in module.modules():
        if isinstance(m, nn.Linear):
            return m.in_features
    return None


class IdentityProjector(nn.Identity):
    """Stands in for an absent teacher projector: projector space = feature space."""

    widths = None
    norm = False


def forward(space: str, m: ModelTriple, x: torch.Tensor) -> torch.Tensor:
    return m.represent(x, space)


def build_triple(arch: dict) -> ModelTriple:
    bb = arch["backbone"]
    backbone = build_backbone(bb["arch"], bb["feature_dim"], width=bb.get("width", 16),
                              in_channels=bb.get("in_channels", 3))
    projector = None
    if arch.get("projector"):
        if arch["projector"].get("identity"):
            projector = IdentityProjector()
        else:
            projector = Projector(arch["projector"]["widths"], norm=arch["projector"]["norm"])
    head = None
    if arch.get("head"):
        h = arch["head"]
        head = build_head(h["in_dim"], h["num_classes"], h.get("hidden"))
    return ModelTriple(backbone, projector, head, frozen=arch.get("frozen", ()))


def init_student_from_teacher(teacher: ModelTriple, cfg: Optional[ProjectorConfig],
                              seed: Optional[int] = None) -> tuple:
    """Build the distillation pair ``(teacher, student)`` from a pretrained teacher.

    The student backbone is a trainable copy of the teacher backbone.  The
    projector arrangement follows ``cfg`` (``None`` means no projector on
    either side).  The returned teacher is a frozen copy, so the caller's model
    is never modified; a projector shared with a trainable student stays live.
    """
    t_backbone = copy.deepcopy(teacher.backbone)
    s_backbone = copy.deepcopy(t_backbone)
    for p in s_backbone.parameters():
        p.requires_grad_(True)
    if cfg is None:
        t = ModelTriple(t_backbone, None, None, frozen=("backbone",))
        s = ModelTriple(s_backbone)
        return t, s
    if cfg.init == "pretrained" and teacher.projector is None:
        raise ModelConfigError("pretrained projector init requested but the teacher has no projector")
    if cfg.init == "pretrained":
        s_proj = copy.deepcopy(teacher.projector)
        for p in s_proj.parameters():
            p.requires_grad_(True)
    else:
        width_cfg = cfg
        if cfg.widths is None and teacher.projector is not None and not cfg.teacher_projector:
            width_cfg = ProjectorConfig(cfg.depth, [t_backbone.feature_dim] * (_DEPTH_LAYERS[cfg.depth] + 1),
                                        norm=cfg.norm)
        elif cfg.widths is None and teacher.projector is not None:
            width_cfg = ProjectorConfig(cfg.depth, list(teacher.projector.widths), norm=cfg.norm)
        s_proj = build_projector(width_cfg, t_backbone.feature_dim, seed=seed)
    if cfg.shared_with_teacher:
        t_proj = s_proj
    elif cfg.teacher_projector:
        if teacher.projector is None:
            raise ModelConfigError("config keeps a teacher projector but the teacher has none")
        t_proj = copy.deepcopy(teacher.projector)
    else:
        t_proj = IdentityProjector()
    t_out = _output_dim(t_proj, t_backbone.feature_dim)
    s_out = _output_dim(s_proj, t_backbone.feature_dim)
    if t_out != s_out:
        raise ModelConfigError(
            f"teacher projector space has dim {t_out} but student projector outputs {s_out}"
        )
    s = ModelTriple(s_backbone, s_proj, None, frozen=("projector",) if cfg.frozen else ())
    t = ModelTriple(t_backbone, t_proj, None, frozen=("backbone",))
    if not cfg.shared_with_teacher:
        t.freeze("projector")
    return t, s


def _output_dim(proj, in_dim):
    if isinstance(proj, nn.Identity):
        return in_dim
    return proj.out_dim


# ---------------------------------------------------------------------------
# hashing and serialization
# ---------------------------------------------------------------------------

def module_hash(module: Optional[nn.Module]) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    if module is None:
        return h.hexdigest()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def triple_state(m: ModelTriple) -> dict:
    return {
        "arch": m.arch(),
        "parts": {name: getattr(m, name).state_dict()
                  for name in ModelTriple.PARTS if getattr(m, name) is not None},
    }


def triple_from_state(state: dict) -> ModelTriple:
    m = build_triple(state["arch"])
    for name, sd in state["parts"].items():
        getattr(m, name).load_state_dict(sd)
    return m


@dataclass
class CheckpointHeader:
    config_hash: str = ""
    seed: int = 0
    epoch: int = 0
    kind: str = "model"
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, models: dict, header: CheckpointHeader, config: dict,
                    history: list, optimizer_state: Optional[dict] = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": asdict(header),
        "config": config,
        "history": history,
        "models": {k: triple_state(v) for k, v in models.items()},
        "optimizer": optimizer_state,
    }, path)


def load_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ModelConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ModelConfigError(
            f"checkpoint version {blob.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    blob["models"] = {k: triple_from_state(v) for k, v in blob["models"].items()}
    blob["header"] = CheckpointHeader(**blob["header"])
    return blob
