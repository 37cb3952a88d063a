import os


class Config:
    TESTING = False
    LOG_LEVEL = "INFO"
    SEED = 0
    THREADS = int(os.getenv("SGLV_THREADS", default=os.cpu_count() or 1))

    # volume geometry, in multiples of the first frame's maximum depth
    VOLUME_COUNTS = (84, 60, 64)
    VOLUME_RANGE = ((-1.1, 1.1), (-0.8, 0.8), (-1.2, 0.5))
    MAX_SAMPLES = 256

    ENV_HEIGHT = 120
    FRAME_HEIGHT = 240
    FRAME_WIDTH = 320
    FRAME_FOV_DEG = 60.0
    N_FRAMES = 31
    TRAJECTORY_STEP = 0.09
    TRAJECTORY_ROTATION_DEG = 4.78
    N_PROBES = 3

    LOSS_EPS_R = 0.3
    LOSS_EPS_SM = 0.01
    CLAMP_THRESHOLD = 0.25
    FEATHER = 2
    GAP_THRESHOLD = 0.1

    ALBEDO = (0.8, 0.8, 0.8)
    ROUGHNESS = 0.2
    SPHERE_SIZE = 128
    FIT_SPHERE_SIZE = 32
    FIT_SPP = 64
    EVAL_SPP = 256
    REFERENCE_SPP = 16384

    FIT_ITERATIONS = 500
    FIT_STEP_SIZE = 5e-2
    FIT_VOLUME_COUNTS = (21, 15, 16)
    FIT_LOG_EVERY = 25

    GRADCHECK_VOLUMES = 10
    GRADCHECK_SIZE = 4
    GRADCHECK_EPS = 1e-3
    GRADCHECK_TOLERANCE = 1e-4


class TestingConfig(Config):
    TESTING = True
    LOG_LEVEL = "WARNING"
    THREADS = 1

    ENV_HEIGHT = 16
    FRAME_HEIGHT = 24
    FRAME_WIDTH = 32
    N_FRAMES = 4

    SPHERE_SIZE = 16
    FIT_SPHERE_SIZE = 8
    FIT_SPP = 8
    EVAL_SPP = 16
    REFERENCE_SPP = 256

    FIT_ITERATIONS = 3
    FIT_VOLUME_COUNTS = (7, 5, 6)

    GRADCHECK_VOLUMES = 1
    GRADCHECK_SIZE = 3
