from .layers import MHSA, GroupedBottleneck, GroupMixer, make_stage
from .network import (
    EmbeddingBundle,
    LAITable,
    MBRModel,
    apply_lai,
    assemble,
    build_model,
    load_backbone_weights,
)
from .presets import (
    BOT,
    BOTH,
    CLS,
    HYBRID,
    METRIC,
    R50,
    ArchitectureSpec,
    BranchSpec,
    UnknownPresetError,
    get_preset,
    lbs_twin,
    preset_names,
)
