# world/voxel geometry
DEFAULT_SPACING = (1.0, 1.0, 1.0)
VOXEL_CENTER_OFFSET = 0.5

# SWC
SWC_VESSEL_KIND = 3
SWC_FLOAT_FORMAT = "{:.9g}"

# CVOL raw volume files
CVOL_MAGIC = b"CVOL"
CVOL_VERSION = 1

# centerline heatmap (decay rate and heatmap radius in mm)
HEATMAP_ALPHA = 6.0
HEATMAP_D_MAX = 5.0
SPURIOUS_TUBE_INTENSITY = 0.8

# tracing
TRACER_BINARIZE_THRESHOLD = 0.3
TRACER_DILATION_RADIUS = 1.0
TRACER_MIN_COMPONENT_VOXELS = 27
TRACER_COVERAGE_STOP = 0.98
TRACER_MIN_BRANCH_LEN = 2.0
TRACER_STEP_SIZE = 0.5
FAST_MARCH_EPSILON = 1e-4

# dual graph
SAMPLING_LENGTH = 5.0
NODE_MATCHING_DISTANCE = 3.0
FEATURE_CHANNELS = ["heatmap", "gaussian_s1", "gaussian_s2", "gradient_s1"]
GAUSSIAN_TRUNCATE = 3.0

# graph attention network
GAT_HEADS = 4
GAT_HIDDEN_DIM = 16
GAT_HIDDEN_LAYERS = 4
GAT_LEAKY_SLOPE = 0.2
GAT_LEARNING_RATE = 5e-6
GAT_WEIGHT_DECAY = 5e-4
GAT_EPOCHS = 200
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8
BCE_CLAMP = 1e-7

# pruning and evaluation (mm)
PRUNE_THRESHOLD = 0.5
CATCH_DISTANCE = 4.0
SIGNIFICANT_DISTANCE = 2.0
RESAMPLE_STEP = 1.0
TRUE_SEGMENT_TARGET = 0.5

# pipeline stages, in run order; the index is the stage id used for seed derivation
STAGES = ["synth", "heatmap", "trace", "featurize", "train", "prune", "eval"]
SWEEP_AXES = ["nmd", "sampling_length", "threshold"]
METRIC_COLUMNS = ["precision", "recall", "f1", "sd_mm", "ssd_mm", "pssd"]
TEXT_PRECISION = 9

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERICAL_ERROR = 4

LOG_FILE_NAME = "vesselprune_log.txt"
MANIFEST_FILE_NAME = "manifest.json"
