from .augment import (
    AugmentationConfig,
    ImageBatchLoader,
    augment,
    batch_tensors,
    iter_batches,
    load_image,
    sample_erase_box,
    to_tensor,
)
from .manifest import (
    CSV_COLUMNS,
    SPLITS,
    DatasetManifest,
    ImageRecord,
    ManifestError,
    load_manifest,
    load_splits,
    read_manifest_csv,
    write_manifest_csv,
)
from .sampler import VERI776_PK, VERIWILD_PK, PKBatchSpec, PKSampler, pk_sample
from .synth import synth_dataset
