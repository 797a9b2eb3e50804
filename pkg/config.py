import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

    # Raw frame defaults (used when a caller does not supply capture metadata)
    DEFAULT_BIT_DEPTH = int(os.getenv('DEFAULT_BIT_DEPTH', '16'))
    DEFAULT_BAYER_PATTERN = os.getenv('DEFAULT_BAYER_PATTERN', 'RGGB').upper()

    # Noise synthesis
    NOISE_QUANT_STEP = float(os.getenv('NOISE_QUANT_STEP', '1.0'))  # lambda, DN
    NOISE_ROW_BLOCK = int(os.getenv('NOISE_ROW_BLOCK', '16'))  # rows per random stream
    NOISE_GENERATOR_NAME = 'philox-seedsequence-rowblock'

    # Periodic banding noise estimation
    PBN_PERIOD = int(os.getenv('PBN_PERIOD', '4'))  # pixels
    PBN_THETA_FLOOR = float(os.getenv('PBN_THETA_FLOOR', '8.0'))  # DN
    PBN_THETA_SIGMA_MULT = float(os.getenv('PBN_THETA_SIGMA_MULT', '4.0'))
    PBN_MIN_FLAT_PIXELS = int(os.getenv('PBN_MIN_FLAT_PIXELS', '16'))  # floor of max(16, width/16)

    # Poisson-Gaussian calibration
    PG_SATURATION_MARGIN = float(os.getenv('PG_SATURATION_MARGIN', '0.02'))  # fraction of full scale
    PG_NEGATIVE_SLOPE_TOLERANCE = float(os.getenv('PG_NEGATIVE_SLOPE_TOLERANCE', '0.05'))
    PG_MIN_STACK_FRAMES = int(os.getenv('PG_MIN_STACK_FRAMES', '16'))

    # Training pair augmentation
    TRAINING_CROP_SIZE = int(os.getenv('TRAINING_CROP_SIZE', '128'))  # pixels, even
    AUGMENT_CONTRAST_MIN = float(os.getenv('AUGMENT_CONTRAST_MIN', '0.6'))
    AUGMENT_CONTRAST_MAX = float(os.getenv('AUGMENT_CONTRAST_MAX', '1.4'))

    # Residual denoiser
    DENOISE_SMOOTHER = os.getenv('DENOISE_SMOOTHER', 'gaussian').lower()  # gaussian, nlm
    DENOISE_STRENGTH = float(os.getenv('DENOISE_STRENGTH', '1.0'))
    DENOISE_GAUSSIAN_SIGMA = float(os.getenv('DENOISE_GAUSSIAN_SIGMA', '1.0'))
    DENOISE_NLM_PATCH_RADIUS = int(os.getenv('DENOISE_NLM_PATCH_RADIUS', '1'))
    DENOISE_NLM_SEARCH_RADIUS = int(os.getenv('DENOISE_NLM_SEARCH_RADIUS', '5'))
    DENOISE_PER_BAYER_PHASE = os.getenv('DENOISE_PER_BAYER_PHASE', 'true').lower() == 'true'

    # External denoiser hook (offline evaluation only)
    EXTERNAL_DENOISER_TIMEOUT = float(os.getenv('EXTERNAL_DENOISER_TIMEOUT', '60.0'))  # seconds
    EXTERNAL_DENOISER_POLL_INTERVAL = float(os.getenv('EXTERNAL_DENOISER_POLL_INTERVAL', '0.25'))

    # Evaluation
    # Gain classes: gain < LOW_MAX is Low, gain < MEDIUM_MAX is Medium, otherwise Large
    GAIN_CLASS_LOW_MAX = float(os.getenv('GAIN_CLASS_LOW_MAX', '3.0'))
    GAIN_CLASS_MEDIUM_MAX = float(os.getenv('GAIN_CLASS_MEDIUM_MAX', '6.0'))
    SSIM_WINDOW = os.getenv('SSIM_WINDOW', 'uniform').lower()  # uniform, gaussian
    SSIM_WINDOW_SIZE = int(os.getenv('SSIM_WINDOW_SIZE', '8'))
    SSIM_GAUSSIAN_SIGMA = float(os.getenv('SSIM_GAUSSIAN_SIGMA', '1.5'))
    EVAL_WORKERS = int(os.getenv('EVAL_WORKERS', '1'))

    # Fixed-point simulation
    FIXEDPOINT_TOTAL_BITS = int(os.getenv('FIXEDPOINT_TOTAL_BITS', '12'))

    # Validate noise configuration
    if NOISE_QUANT_STEP < 0:
        raise ValueError(f"NOISE_QUANT_STEP must be non-negative, got {NOISE_QUANT_STEP}")
    if NOISE_ROW_BLOCK < 1:
        raise ValueError(f"NOISE_ROW_BLOCK must be at least 1, got {NOISE_ROW_BLOCK}")

    # Validate banding configuration
    if PBN_PERIOD < 2 or PBN_PERIOD % 2:
        raise ValueError(f"PBN_PERIOD must be even and >= 2, got {PBN_PERIOD}")
    if PBN_THETA_FLOOR <= 0 or PBN_THETA_SIGMA_MULT <= 0:
        raise ValueError(
            f"PBN theta settings must be positive, got floor={PBN_THETA_FLOOR}, "
            f"multiplier={PBN_THETA_SIGMA_MULT}"
        )

    # Validate calibration configuration
    if not (0.0 <= PG_SATURATION_MARGIN < 1.0):
        raise ValueError(f"PG_SATURATION_MARGIN must be between 0.0 and 1.0, got {PG_SATURATION_MARGIN}")
    if TRAINING_CROP_SIZE < 2 or TRAINING_CROP_SIZE % 2:
        raise ValueError(f"TRAINING_CROP_SIZE must be even and >= 2, got {TRAINING_CROP_SIZE}")
    if not (0.0 < AUGMENT_CONTRAST_MIN <= AUGMENT_CONTRAST_MAX):
        raise ValueError(
            f"Contrast augmentation range is invalid: [{AUGMENT_CONTRAST_MIN}, {AUGMENT_CONTRAST_MAX}]"
        )

    # Validate denoiser configuration
    if DENOISE_SMOOTHER not in ('gaussian', 'nlm'):
        raise ValueError(f"DENOISE_SMOOTHER must be 'gaussian' or 'nlm', got {DENOISE_SMOOTHER!r}")
    if DENOISE_STRENGTH <= 0:
        raise ValueError(f"DENOISE_STRENGTH must be positive, got {DENOISE_STRENGTH}")
    if DENOISE_NLM_PATCH_RADIUS < 1 or DENOISE_NLM_SEARCH_RADIUS < 1:
        raise ValueError(
            f"NLM radii must be positive, got patch={DENOISE_NLM_PATCH_RADIUS}, "
            f"search={DENOISE_NLM_SEARCH_RADIUS}"
        )

    # Validate evaluation configuration
    if not (0.0 < GAIN_CLASS_LOW_MAX < GAIN_CLASS_MEDIUM_MAX):
        raise ValueError(
            f"Gain class thresholds must increase, got Low<{GAIN_CLASS_LOW_MAX}, "
            f"Medium<{GAIN_CLASS_MEDIUM_MAX}"
        )
    if SSIM_WINDOW not in ('uniform', 'gaussian'):
        raise ValueError(f"SSIM_WINDOW must be 'uniform' or 'gaussian', got {SSIM_WINDOW!r}")
    if SSIM_WINDOW_SIZE < 2:
        raise ValueError(f"SSIM_WINDOW_SIZE must be at least 2, got {SSIM_WINDOW_SIZE}")

    # Validate fixed-point configuration
    if not (2 <= FIXEDPOINT_TOTAL_BITS <= 32):
        raise ValueError(f"FIXEDPOINT_TOTAL_BITS must be between 2 and 32, got {FIXEDPOINT_TOTAL_BITS}")
